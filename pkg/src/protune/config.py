"""Experiment configuration: JSON in, validated dataclasses out.

Parsing is strict.  Unknown keys anywhere in the tree raise ConfigError
with the dotted path of the offender, since a silently ignored typo is the
easiest way to run the wrong experiment.  Every getter validates types and
ranges up front, before any compute starts.

The digest of a config is the sha256 of its canonical JSON form (sorted
keys, fixed float formatting) and identifies runs in the results files.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from .backbones import BackboneSpec, tiny_cnn_spec, tiny_vit_spec
from .data import CORRUPTION_KINDS, MAX_CLASSES
from .prompt import PromptBlockConfig
from .training import Hyperparams

PARADIGM_CHOICES = ("scratch", "head", "finetune", "protune", "protune-ft")
POSITION_POLICIES = ("F1", "F5", "L1", "L5", "U5")


class ConfigError(ValueError):
    """Invalid experiment configuration; maps to CLI exit code 2."""


def _expect(d, path, allowed):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'} must be an object, got {type(d).__name__}")
    for key in d:
        if key not in allowed:
            raise ConfigError(f"unknown key {path + '.' if path else ''}{key}")


def _get(d, key, path, typ, default, *, low=None, high=None):
    if key not in d or d[key] is None:
        if default is _REQUIRED:
            raise ConfigError(f"missing required key {path}.{key}" if path else f"missing required key {key}")
        return default
    v = d[key]
    if typ is float and isinstance(v, int) and not isinstance(v, bool):
        v = float(v)
    if typ is int and (isinstance(v, bool) or not isinstance(v, int)):
        raise ConfigError(f"{path}.{key} must be an integer, got {v!r}")
    if not isinstance(v, typ):
        raise ConfigError(f"{path}.{key} must be {typ.__name__}, got {v!r}")
    if low is not None and v < low:
        raise ConfigError(f"{path}.{key} must be >= {low}, got {v}")
    if high is not None and v > high:
        raise ConfigError(f"{path}.{key} must be <= {high}, got {v}")
    return v


_REQUIRED = object()


@dataclass(frozen=True)
class SourceConfig:
    num_classes: int = 10
    n_train: int = 2048
    n_val: int = 512
    shift: float = 0.0
    seed: int = 100


@dataclass(frozen=True)
class CorruptionConfig:
    kind: str
    severity: int


@dataclass(frozen=True)
class DownstreamConfig:
    num_classes: int = 10
    n_train: int = 1024
    n_val: int = 512
    shift: float = 0.8
    seed: int = 200
    longtail_ir: float | None = None
    corruption: CorruptionConfig | None = None
    few_shot_k: tuple[int, ...] | None = None  # sweep when more than one value


@dataclass(frozen=True)
class PromptConfig:
    policy: str | None = None      # None: family default (cnn PerStage, vit U5)
    reduction: int | None = None   # None: family default (cnn 4, vit 2)
    kernel: int = 5
    se_reduction: int = 16
    beta_init: float = 0.0
    learnable_beta: bool = True
    blocks: int = 1                # stacked blocks per attachment (PerStage)

    def block_config(self, family: str) -> PromptBlockConfig:
        red = self.reduction if self.reduction is not None else (4 if family == "cnn" else 2)
        return PromptBlockConfig(
            channels=1,  # re-bound per attachment point at install time
            reduction=red,
            kernel=self.kernel,
            se_reduction=self.se_reduction,
            beta_init=self.beta_init,
            learnable_beta=self.learnable_beta,
        )

    def policy_name(self, family: str) -> str:
        if self.policy is not None:
            return self.policy
        return "PerStage" if family == "cnn" else "U5"


@dataclass(frozen=True)
class ExperimentConfig:
    backbone: BackboneSpec
    source: SourceConfig = field(default_factory=SourceConfig)
    downstream: DownstreamConfig = field(default_factory=DownstreamConfig)
    paradigms: tuple[str, ...] = ("protune",)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    train: Hyperparams = field(default_factory=Hyperparams)
    target_accuracy: float = 0.9
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs"

    def to_dict(self) -> dict:
        hp = self.train
        return {
            "backbone": self.backbone.to_dict(),
            "source": vars(self.source).copy(),
            "downstream": {
                **{k: v for k, v in vars(self.downstream).items() if k not in ("corruption", "few_shot_k")},
                "corruption": None if self.downstream.corruption is None else vars(self.downstream.corruption).copy(),
                "few_shot_k": None if self.downstream.few_shot_k is None else list(self.downstream.few_shot_k),
            },
            "paradigm": list(self.paradigms),
            "prompt": vars(self.prompt).copy(),
            "train": {
                "epochs": hp.epochs, "batch_size": hp.batch_size, "lr": hp.lr,
                "momentum": hp.momentum, "weight_decay": hp.weight_decay,
                "warmup_frac": hp.warmup_frac, "max_steps": hp.max_steps,
                "clip_norm": hp.clip_norm,
                "target_accuracy": self.target_accuracy,
            },
            "seeds": list(self.seeds),
            "out_dir": self.out_dir,
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


def _parse_backbone(node, path) -> BackboneSpec:
    if node is None or node == "tiny_cnn":
        return tiny_cnn_spec()
    if node == "tiny_vit":
        return tiny_vit_spec()
    if isinstance(node, str):
        raise ConfigError(f"{path} must be 'tiny_cnn', 'tiny_vit' or an object, got {node!r}")
    _expect(node, path, {"family", "input_hw", "num_classes", "widths", "depth", "dim", "heads", "patch"})
    try:
        return BackboneSpec.from_dict(node)
    except (ValueError, TypeError, KeyError) as e:
        raise ConfigError(f"{path}: {e}") from e


def _parse_source(node) -> SourceConfig:
    if node is None:
        return SourceConfig()
    _expect(node, "source", {"num_classes", "n_train", "n_val", "shift", "seed"})
    return SourceConfig(
        num_classes=_get(node, "num_classes", "source", int, 10, low=2, high=MAX_CLASSES),
        n_train=_get(node, "n_train", "source", int, 2048, low=1),
        n_val=_get(node, "n_val", "source", int, 512, low=1),
        shift=_get(node, "shift", "source", float, 0.0, low=0.0, high=1.0),
        seed=_get(node, "seed", "source", int, 100, low=0),
    )


def _parse_downstream(node) -> DownstreamConfig:
    if node is None:
        return DownstreamConfig()
    _expect(node, "downstream", {"num_classes", "n_train", "n_val", "shift", "seed",
                                 "longtail_ir", "corruption", "few_shot_k"})
    corruption = None
    if node.get("corruption") is not None:
        cnode = node["corruption"]
        _expect(cnode, "downstream.corruption", {"kind", "severity"})
        kind = _get(cnode, "kind", "downstream.corruption", str, _REQUIRED)
        if kind not in CORRUPTION_KINDS:
            raise ConfigError(
                f"downstream.corruption.kind must be one of {sorted(CORRUPTION_KINDS)}, got {kind!r}"
            )
        corruption = CorruptionConfig(
            kind=kind,
            severity=_get(cnode, "severity", "downstream.corruption", int, _REQUIRED, low=1, high=5),
        )
    few_shot = None
    if node.get("few_shot_k") is not None:
        raw = node["few_shot_k"]
        if isinstance(raw, int) and not isinstance(raw, bool):
            raw = [raw]
        if not isinstance(raw, list) or not raw:
            raise ConfigError(f"downstream.few_shot_k must be an int or non-empty list, got {raw!r}")
        for k in raw:
            if isinstance(k, bool) or not isinstance(k, int) or k < 1:
                raise ConfigError(f"downstream.few_shot_k entries must be positive integers, got {k!r}")
        few_shot = tuple(raw)
    return DownstreamConfig(
        num_classes=_get(node, "num_classes", "downstream", int, 10, low=2, high=MAX_CLASSES),
        n_train=_get(node, "n_train", "downstream", int, 1024, low=1),
        n_val=_get(node, "n_val", "downstream", int, 512, low=1),
        shift=_get(node, "shift", "downstream", float, 0.8, low=0.0, high=1.0),
        seed=_get(node, "seed", "downstream", int, 200, low=0),
        longtail_ir=_get(node, "longtail_ir", "downstream", float, None, low=1.0),
        corruption=corruption,
        few_shot_k=few_shot,
    )


def _parse_prompt(node) -> PromptConfig:
    if node is None:
        return PromptConfig()
    _expect(node, "prompt", {"policy", "reduction", "kernel", "se_reduction",
                             "beta_init", "learnable_beta", "blocks"})
    policy = _get(node, "policy", "prompt", str, None)
    if policy is not None and policy not in POSITION_POLICIES + ("PerStage",):
        raise ConfigError(
            f"prompt.policy must be one of {POSITION_POLICIES + ('PerStage',)}, got {policy!r}"
        )
    kernel = _get(node, "kernel", "prompt", int, 5)
    if kernel not in (3, 5, 7):
        raise ConfigError(f"prompt.kernel must be 3, 5 or 7, got {kernel}")
    reduction = _get(node, "reduction", "prompt", int, None)
    if reduction is not None and reduction not in (1, 2, 4):
        raise ConfigError(f"prompt.reduction must be 1, 2 or 4, got {reduction}")
    learnable = node.get("learnable_beta", True)
    if not isinstance(learnable, bool):
        raise ConfigError(f"prompt.learnable_beta must be a boolean, got {learnable!r}")
    return PromptConfig(
        policy=policy,
        reduction=reduction,
        kernel=kernel,
        se_reduction=_get(node, "se_reduction", "prompt", int, 16, low=1),
        beta_init=_get(node, "beta_init", "prompt", float, 0.0),
        learnable_beta=learnable,
        blocks=_get(node, "blocks", "prompt", int, 1, low=1, high=8),
    )


def _parse_train(node) -> tuple[Hyperparams, float]:
    if node is None:
        return Hyperparams(), 0.9
    _expect(node, "train", {"epochs", "batch_size", "lr", "momentum", "weight_decay",
                            "warmup_frac", "max_steps", "clip_norm", "target_accuracy"})
    hp = Hyperparams(
        epochs=_get(node, "epochs", "train", int, 5, low=0),
        batch_size=_get(node, "batch_size", "train", int, 64, low=1),
        lr=_get(node, "lr", "train", float, 0.05),
        momentum=_get(node, "momentum", "train", float, 0.9, low=0.0, high=1.0),
        weight_decay=_get(node, "weight_decay", "train", float, 1e-4, low=0.0),
        warmup_frac=_get(node, "warmup_frac", "train", float, 0.05, low=0.0),
        max_steps=_get(node, "max_steps", "train", int, None, low=1),
        clip_norm=_get(node, "clip_norm", "train", float, None),
    )
    try:
        hp.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    target = _get(node, "target_accuracy", "train", float, 0.9, low=0.0, high=1.0)
    return hp, target


def parse_config(raw: dict) -> ExperimentConfig:
    _expect(raw, "", {"backbone", "source", "downstream", "paradigm", "prompt",
                      "train", "seeds", "out_dir"})
    backbone = _parse_backbone(raw.get("backbone"), "backbone")

    paradigms = raw.get("paradigm", "protune")
    if isinstance(paradigms, str):
        paradigms = [paradigms]
    if not isinstance(paradigms, list) or not paradigms:
        raise ConfigError(f"paradigm must be a string or non-empty list, got {paradigms!r}")
    for p in paradigms:
        if not isinstance(p, str) or (p not in PARADIGM_CHOICES and not p.startswith("partial-")):
            raise ConfigError(
                f"paradigm must be one of {PARADIGM_CHOICES} or 'partial-K', got {p!r}"
            )

    seeds = raw.get("seeds", [0])
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        seeds = [seeds]
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError(f"seeds must be an int or non-empty list, got {seeds!r}")
    for s in seeds:
        if isinstance(s, bool) or not isinstance(s, int) or s < 0:
            raise ConfigError(f"seeds entries must be non-negative integers, got {s!r}")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"seeds must be distinct, got {seeds}")

    out_dir = raw.get("out_dir", "runs")
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError(f"out_dir must be a non-empty string, got {out_dir!r}")

    hp, target = _parse_train(raw.get("train"))
    source = _parse_source(raw.get("source"))
    downstream = _parse_downstream(raw.get("downstream"))
    prompt = _parse_prompt(raw.get("prompt"))

    if prompt.policy in POSITION_POLICIES and backbone.family == "cnn":
        raise ConfigError(
            f"prompt.policy {prompt.policy!r} is transformer-only; cnn uses 'PerStage'"
        )
    if backbone.num_classes != source.num_classes:
        # the backbone head is sized by the source task it pretrains on
        backbone = BackboneSpec.from_dict({**backbone.to_dict(), "num_classes": source.num_classes})

    return ExperimentConfig(
        backbone=backbone,
        source=source,
        downstream=downstream,
        paradigms=tuple(paradigms),
        prompt=prompt,
        train=hp,
        target_accuracy=target,
        seeds=tuple(seeds),
        out_dir=out_dir,
    )


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    return parse_config(raw)
