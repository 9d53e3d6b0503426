"""Command line interface.

Verbs: pretrain, tune, ablate, report, verify.  Exit codes are a stable
contract: 0 success, 2 config validation failure, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import sys

from .config import ConfigError, load_config
from .training import TrainingDiverged


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="protune",
        description="Prompt-block transfer experiments on tiny staged backbones.",
    )
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, metavar="PATH",
                        help="JSON experiment config")
        sp.add_argument("--seed", default=None, metavar="N[,N...]",
                        help="override config seeds")
        sp.add_argument("--out", default=None, metavar="DIR",
                        help="override config output directory")

    common(sub.add_parser("pretrain", help="train a backbone on the source task"))
    common(sub.add_parser("tune", help="transfer to the downstream task per paradigm"))
    ab = sub.add_parser("ablate", help="sweep one prompt-block design axis")
    ab.add_argument("kind", choices=["beta", "kernel", "position", "blocks"])
    common(ab)
    rp = sub.add_parser("report", help="summarize a results directory")
    rp.add_argument("--out", required=True, metavar="DIR", help="results directory")
    sub.add_parser("verify", help="run the invariant battery")
    return p


def _apply_overrides(cfg, args):
    import dataclasses
    if args.seed is not None:
        try:
            seeds = tuple(int(s) for s in args.seed.split(","))
        except ValueError:
            raise ConfigError(f"--seed must be comma-separated integers, got {args.seed!r}")
        if not seeds or len(set(seeds)) != len(seeds) or any(s < 0 for s in seeds):
            raise ConfigError(f"--seed needs distinct non-negative integers, got {args.seed!r}")
        cfg = dataclasses.replace(cfg, seeds=seeds)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    return cfg


def _print_records(records):
    for r in records:
        print(f"{r.paradigm:12s} {r.setting:14s} seed {r.seed:<3d} "
              f"params {r.trainable_params:>10,d}  acc {r.accuracy:.4f}  "
              f"{r.wall_seconds:.1f}s")


def _cmd_pretrain(args) -> int:
    from .experiments import run_pretrain
    cfg = _apply_overrides(load_config(args.config), args)
    path, acc = run_pretrain(cfg)
    print(f"pretrained {cfg.backbone.family} to accuracy {acc:.4f}; checkpoint {path}")
    return 0


def _cmd_tune(args) -> int:
    from .experiments import run_tune
    from .results import append_records, summary_table
    cfg = _apply_overrides(load_config(args.config), args)
    records, infos = run_tune(cfg)
    append_records(cfg.out_dir, records)
    _print_records(records)
    for row in summary_table(records)[1:]:
        print(f"mean {row[0]:12s} {row[1]:14s} params {row[3]:>10s}  acc {row[4]}")
    return 0


def _cmd_ablate(args) -> int:
    from .experiments import run_ablate
    from .results import append_records
    cfg = _apply_overrides(load_config(args.config), args)
    records, infos = run_ablate(cfg, args.kind)
    append_records(cfg.out_dir, records)
    _print_records(records)
    for record, info in zip(records, infos):
        if record.setting == "beta=learnable" and "beta_delta" in info:
            print(f"learnable beta moved by {info['beta_delta']:.6f} from init")
    return 0


def _cmd_report(args) -> int:
    from .results import write_report
    for path in write_report(args.out):
        print(f"wrote {path}")
    return 0


def _cmd_verify(_args) -> int:
    from .verify import run_verify
    results = run_verify()
    failed = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        failed += 0 if ok else 1
    if failed:
        print(f"{failed} of {len(results)} checks failed")
        return 3
    print(f"all {len(results)} checks passed")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {
        "pretrain": _cmd_pretrain,
        "tune": _cmd_tune,
        "ablate": _cmd_ablate,
        "report": _cmd_report,
        "verify": _cmd_verify,
    }[args.verb]
    try:
        return handler(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 3
    except RuntimeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
