"""Experiment flows behind the CLI verbs.

Each run is a pure function of (config, paradigm, seed, shot count): the
backbone is rebuilt or reloaded from the checkpoint, the paradigm mask is
applied, training runs, and one MetricsRecord comes back.  That purity is
what makes replay exact and lets multi-seed jobs fan out over worker
processes (PROTUNE_THREADS) without any cross-talk; the parent process is
the only writer of results files.
"""
from __future__ import annotations

import dataclasses
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import data as D
from .backbones import build_backbone
from .checkpoint import load_checkpoint, read_meta, save_checkpoint
from .config import ConfigError, ExperimentConfig, parse_config
from .paradigms import TuningParadigm, apply_paradigm, count_trainable_params
from .results import MetricsRecord
from .training import TrainingDiverged, train

BETA_SWEEP = (10.0, 4.0, 2.0, 1.0, 0.5, 0.25, 0.1, "learnable")
KERNEL_SWEEP = (3, 5, 7)
POSITION_SWEEP = ("F1", "F5", "L1", "L5", "U5")
BLOCKS_SWEEP = (1, 2, 3)


def checkpoint_path(cfg: ExperimentConfig) -> str:
    return os.path.join(cfg.out_dir, f"pretrained_{cfg.backbone.family}.ptnc")


def _source_sets(cfg: ExperimentConfig):
    s = cfg.source
    train_ds = D.synth_shapes(s.n_train, s.num_classes, s.shift, seed=s.seed)
    val_ds = D.synth_shapes(s.n_val, s.num_classes, s.shift, seed=s.seed + 1)
    return train_ds, val_ds


def _downstream_sets(cfg: ExperimentConfig):
    d = cfg.downstream
    train_ds = D.synth_shapes(d.n_train, d.num_classes, d.shift, seed=d.seed)
    val_ds = D.synth_shapes(d.n_val, d.num_classes, d.shift, seed=d.seed + 1)
    if d.longtail_ir is not None:
        train_ds = D.make_longtail(train_ds, d.longtail_ir, seed=d.seed + 2)
    if d.corruption is not None:
        # the whole downstream domain is corrupted, train and eval alike
        train_ds = D.corrupt(train_ds, d.corruption.kind, d.corruption.severity, seed=d.seed + 3)
        val_ds = D.corrupt(val_ds, d.corruption.kind, d.corruption.severity, seed=d.seed + 4)
    return train_ds, val_ds


def run_pretrain(cfg: ExperimentConfig) -> tuple[str, float]:
    """Train the backbone on the source split; write the checkpoint.

    Fails (RuntimeError) when the target accuracy is not reached, reporting
    the accuracy it did reach.
    """
    seed = cfg.seeds[0]
    train_ds, val_ds = _source_sets(cfg)
    model = build_backbone(cfg.backbone, seed=seed)
    tm = apply_paradigm(model, TuningParadigm.parse("scratch"),
                        num_classes=cfg.source.num_classes, seed=seed)
    report = train(tm, train_ds, val_ds, cfg.train, seed=seed)
    if report.final_accuracy < cfg.target_accuracy:
        raise RuntimeError(
            f"pretraining reached accuracy {report.final_accuracy:.4f}, "
            f"below the target {cfg.target_accuracy:.4f}; raise epochs or lr"
        )
    path = checkpoint_path(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    meta = {
        "config_digest": cfg.digest(),
        "seed": seed,
        "source_accuracy": round(report.final_accuracy, 6),
        "spec": cfg.backbone.to_dict(),
    }
    save_checkpoint(tm.model, path, meta)
    return path, report.final_accuracy


def _load_or_build(cfg: ExperimentConfig, paradigm: TuningParadigm):
    """Fresh model for one run: from the checkpoint, or built for scratch."""
    if paradigm.name == "scratch":
        return build_backbone(cfg.backbone, seed=0)
    path = checkpoint_path(cfg)
    if not os.path.exists(path):
        raise RuntimeError(
            f"no checkpoint at {path}; run the pretrain verb first (scratch needs none)"
        )
    meta = read_meta(path)
    if meta.get("spec") != cfg.backbone.to_dict():
        raise RuntimeError(
            f"checkpoint {path} was pretrained with a different backbone: "
            f"{meta.get('spec')} vs {cfg.backbone.to_dict()}"
        )
    return load_checkpoint(path, cfg.backbone)


def run_tune_one(
    cfg: ExperimentConfig,
    paradigm_name: str,
    seed: int,
    few_shot_k: int | None = None,
    setting: str | None = None,
    prompt_override=None,
    tolerate_divergence: bool = False,
) -> tuple[MetricsRecord, dict]:
    """One (paradigm, seed[, k]) run; returns its record plus diagnostics.

    A diverged run raises, except under tolerate_divergence (ablation
    sweeps), where it yields a row with NaN accuracy so the sweep still
    emits one row per setting.
    """
    prompt_cfg = prompt_override if prompt_override is not None else cfg.prompt
    try:
        paradigm = TuningParadigm.parse(
            paradigm_name,
            policy=prompt_cfg.policy_name(cfg.backbone.family),
            prompt=prompt_cfg.block_config(cfg.backbone.family),
            blocks=prompt_cfg.blocks,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e
    model = _load_or_build(cfg, paradigm)
    try:
        tm = apply_paradigm(model, paradigm, num_classes=cfg.downstream.num_classes, seed=seed)
    except ValueError as e:
        raise ConfigError(str(e)) from e

    train_ds, val_ds = _downstream_sets(cfg)
    if few_shot_k is not None:
        train_ds = D.few_shot_subset(train_ds, few_shot_k, seed=cfg.downstream.seed + 5)

    betas_before = _beta_values(tm)
    t0 = time.perf_counter()
    diverged = None
    try:
        report = train(tm, train_ds, val_ds, cfg.train, seed=seed)
    except TrainingDiverged as e:
        if not tolerate_divergence:
            raise
        diverged = str(e)
    if diverged is None:
        if report.frozen_changed:
            raise RuntimeError(
                f"frozen tensors changed during {paradigm_name}: {report.frozen_changed[:3]}"
            )
        accuracy = report.final_accuracy
        wall = report.wall_seconds
        info = {"steps": report.steps, "train_losses": report.train_losses}
    else:
        accuracy = float("nan")
        wall = time.perf_counter() - t0
        info = {"diverged": diverged}
    record = MetricsRecord(
        config_digest=cfg.digest(),
        seed=seed,
        paradigm=paradigm_name,
        setting=setting if setting is not None else
                (f"k={few_shot_k}" if few_shot_k is not None else "-"),
        trainable_params=count_trainable_params(tm),
        accuracy=accuracy,
        wall_seconds=wall,
        timestamp=MetricsRecord.now_iso(),
    )
    if betas_before and diverged is None:
        after = _beta_values(tm)
        info["beta_delta"] = max(abs(a - b) for a, b in zip(after, betas_before))
        info["beta_final"] = after
    return record, info


def _beta_values(tm) -> list[float]:
    """Blend scalars of the prompt blocks (norm-affine betas excluded)."""
    return [float(t.data) for name, (t, _) in sorted(tm.model.registry().items())
            if name.startswith("prompt") and name.endswith(".beta")]


def _tune_worker(args):
    cfg_json, paradigm_name, seed, k = args
    cfg = parse_config(json.loads(cfg_json))
    record, info = run_tune_one(cfg, paradigm_name, seed, few_shot_k=k)
    return record, {"beta_delta": info.get("beta_delta")}


def worker_count() -> int:
    raw = os.environ.get("PROTUNE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"PROTUNE_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ConfigError(f"PROTUNE_THREADS must be >= 1, got {n}")
    return n


def run_tune(cfg: ExperimentConfig) -> tuple[list[MetricsRecord], list[dict]]:
    """All (paradigm, k, seed) combinations from the config, in stable order."""
    ks: tuple = cfg.downstream.few_shot_k or (None,)
    jobs = [(p, k, s) for p in cfg.paradigms for k in ks for s in cfg.seeds]
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        cfg_json = json.dumps(cfg.to_dict())
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_tune_worker, [(cfg_json, p, s, k) for p, k, s in jobs]))
    else:
        out = [run_tune_one(cfg, p, s, few_shot_k=k) for p, k, s in jobs]
    records = [r for r, _ in out]
    infos = [i for _, i in out]
    return records, infos


def run_ablate(cfg: ExperimentConfig, kind: str) -> tuple[list[MetricsRecord], list[dict]]:
    """Sweep one prompt-block design axis with everything else fixed."""
    if kind not in ("beta", "kernel", "position", "blocks"):
        raise ConfigError(f"ablation kind must be beta|kernel|position|blocks, got {kind!r}")
    if kind == "position" and cfg.backbone.family != "vit":
        raise ConfigError("position ablation needs the transformer backbone; cnn has PerStage only")
    seed = cfg.seeds[0]
    records, infos = [], []

    def one(setting: str, prompt_cfg, paradigm="protune"):
        record, info = run_tune_one(cfg, paradigm, seed, setting=setting,
                                    prompt_override=prompt_cfg,
                                    tolerate_divergence=True)
        records.append(record)
        infos.append(info)

    if kind == "beta":
        for value in BETA_SWEEP:
            if value == "learnable":
                pc = dataclasses.replace(cfg.prompt, beta_init=0.0, learnable_beta=True)
                one("beta=learnable", pc)
            else:
                pc = dataclasses.replace(cfg.prompt, beta_init=float(value), learnable_beta=False)
                one(f"beta={value:g}", pc)
    elif kind == "kernel":
        for k in KERNEL_SWEEP:
            one(f"kernel={k}", dataclasses.replace(cfg.prompt, kernel=k))
    elif kind == "position":
        for name in POSITION_SWEEP:
            one(f"position={name}", dataclasses.replace(cfg.prompt, policy=name, blocks=1))
    else:
        for n in BLOCKS_SWEEP:
            one(f"blocks={n}", dataclasses.replace(cfg.prompt, blocks=n))
    return records, infos
