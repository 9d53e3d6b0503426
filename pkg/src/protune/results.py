"""Result persistence and reporting.

results.csv is the canonical record, one row per (config, seed, setting),
append-only.  results.jsonl mirrors every row for tooling.  Appends happen
under an exclusive lock file so two CLI invocations sharing an output
directory cannot interleave partial lines.

Reports are pure functions of the stored rows with fixed column order and
fixed float formatting, so regenerating a report from the same directory
writes byte-identical CSVs.
"""
from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, asdict
from datetime import datetime, timezone

FIELDS = ["config_digest", "seed", "paradigm", "setting",
          "trainable_params", "accuracy", "wall_seconds", "timestamp"]


@dataclass
class MetricsRecord:
    config_digest: str
    seed: int
    paradigm: str
    setting: str          # "-" for plain runs, else e.g. "beta=0.5", "k=4"
    trainable_params: int
    accuracy: float
    wall_seconds: float
    timestamp: str

    @staticmethod
    def now_iso() -> str:
        return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")

    def row(self) -> list[str]:
        return [
            self.config_digest,
            str(self.seed),
            self.paradigm,
            self.setting,
            str(self.trainable_params),
            f"{self.accuracy:.6f}",
            f"{self.wall_seconds:.3f}",
            self.timestamp,
        ]


class _DirLock:
    def __init__(self, out_dir: str, timeout: float = 30.0):
        self.path = os.path.join(out_dir, ".results.lock")
        self.timeout = timeout
        self.fd = None

    def __enter__(self):
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                return self
            except FileExistsError:
                if time.monotonic() > deadline:
                    raise RuntimeError(f"results lock {self.path} is stuck; remove it if stale")
                time.sleep(0.05)

    def __exit__(self, *exc):
        os.close(self.fd)
        os.unlink(self.path)


def append_records(out_dir: str, records: list[MetricsRecord]):
    if not records:
        return
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "results.csv")
    jsonl_path = os.path.join(out_dir, "results.jsonl")
    with _DirLock(out_dir):
        new = not os.path.exists(csv_path)
        with open(csv_path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(FIELDS)
            for r in records:
                w.writerow(r.row())
        with open(jsonl_path, "a") as fh:
            for r in records:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def read_records(out_dir: str) -> list[MetricsRecord]:
    csv_path = os.path.join(out_dir, "results.csv")
    if not os.path.exists(csv_path):
        raise RuntimeError(f"no results found in {out_dir}")
    out = []
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != FIELDS:
            raise RuntimeError(f"{csv_path} has unexpected columns {reader.fieldnames}")
        for row in reader:
            out.append(MetricsRecord(
                config_digest=row["config_digest"],
                seed=int(row["seed"]),
                paradigm=row["paradigm"],
                setting=row["setting"],
                trainable_params=int(row["trainable_params"]),
                accuracy=float(row["accuracy"]),
                wall_seconds=float(row["wall_seconds"]),
                timestamp=row["timestamp"],
            ))
    if not out:
        raise RuntimeError(f"{csv_path} holds no rows")
    return out


def _mean(xs):
    return sum(xs) / len(xs)


def summary_table(records: list[MetricsRecord]) -> list[list[str]]:
    """Per (paradigm, setting): run count, params, accuracy mean/min/max."""
    groups: dict[tuple[str, str], list[MetricsRecord]] = {}
    for r in records:
        groups.setdefault((r.paradigm, r.setting), []).append(r)
    rows = [["paradigm", "setting", "runs", "trainable_params",
             "acc_mean", "acc_min", "acc_max"]]
    for (paradigm, setting) in sorted(groups):
        rs = groups[(paradigm, setting)]
        accs = [r.accuracy for r in rs]
        params = sorted({r.trainable_params for r in rs})
        rows.append([
            paradigm, setting, str(len(rs)),
            "/".join(str(p) for p in params),
            f"{_mean(accs):.6f}", f"{min(accs):.6f}", f"{max(accs):.6f}",
        ])
    return rows


def fewshot_curve(records: list[MetricsRecord]) -> list[list[str]]:
    """Rows (paradigm, k, acc_mean, seeds) from 'k=N' settings, k ascending."""
    groups: dict[tuple[str, int], list[float]] = {}
    for r in records:
        if r.setting.startswith("k="):
            groups.setdefault((r.paradigm, int(r.setting[2:])), []).append(r.accuracy)
    rows = [["paradigm", "k", "acc_mean", "seeds"]]
    for (paradigm, k) in sorted(groups):
        accs = groups[(paradigm, k)]
        rows.append([paradigm, str(k), f"{_mean(accs):.6f}", str(len(accs))])
    return rows


def _write_csv(path: str, rows: list[list[str]]):
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)


def write_report(out_dir: str) -> list[str]:
    """Render summary (and few-shot curve + plot when present); returns paths."""
    records = read_records(out_dir)
    written = []

    summary_path = os.path.join(out_dir, "summary.csv")
    _write_csv(summary_path, summary_table(records))
    written.append(summary_path)

    curve = fewshot_curve(records)
    if len(curve) > 1:
        curve_path = os.path.join(out_dir, "fewshot_curve.csv")
        _write_csv(curve_path, curve)
        written.append(curve_path)
        ks = sorted({int(r[1]) for r in curve[1:]})
        if len(ks) >= 2:
            written.append(_plot_fewshot(out_dir, curve))
    return written


def _plot_fewshot(out_dir: str, curve: list[list[str]]) -> str:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series: dict[str, list[tuple[int, float]]] = {}
    for paradigm, k, acc, _seeds in curve[1:]:
        series.setdefault(paradigm, []).append((int(k), float(acc)))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for paradigm in sorted(series):
        pts = sorted(series[paradigm])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=paradigm)
    ax.set_xscale("log", base=2)
    ax.set_xticks(sorted({k for pts in series.values() for k, _ in pts}))
    ax.get_xaxis().set_major_formatter(lambda v, _: str(int(v)))
    ax.set_xlabel("shots per class")
    ax.set_ylabel("accuracy")
    ax.legend()
    fig.tight_layout()
    path = os.path.join(out_dir, "fewshot.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
