"""Tuning paradigms: which parameters train, which stay frozen.

Six paradigms share one protocol: start from a loaded backbone (or a fresh
one for scratch), replace the head with a new trainable linear layer for
the downstream label set, then set a boolean mask over the parameter
registry.  The mask drives requires_grad, the optimizer, trainable-parameter
accounting, and the frozen-bytes verification at the end of training.

Config-string forms: scratch | head | partial-1 | partial-2 | finetune |
protune | protune-ft.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .backbones import StagedModel, build_backbone
from .layers import Linear
from .prompt import InsertionPolicy, PromptBlockConfig, PromptedModel, install_prompts

PARADIGM_NAMES = ("scratch", "head", "partial", "finetune", "protune", "protune-ft")


@dataclass(frozen=True)
class TuningParadigm:
    name: str
    partial_k: int = 1
    policy: str = "PerStage"
    blocks: int = 1  # prompt blocks stacked per attachment point
    prompt: PromptBlockConfig = field(
        default_factory=lambda: PromptBlockConfig(channels=1)
    )

    def __post_init__(self):
        if self.name not in PARADIGM_NAMES:
            raise ValueError(f"unknown paradigm {self.name!r}")
        if self.name == "partial" and self.partial_k < 1:
            raise ValueError(f"partial depth must be positive, got {self.partial_k}")
        if self.blocks < 1:
            raise ValueError(f"blocks per point must be positive, got {self.blocks}")

    @classmethod
    def parse(cls, text: str, policy: str = "PerStage",
              prompt: PromptBlockConfig | None = None, blocks: int = 1) -> "TuningParadigm":
        prompt = prompt or PromptBlockConfig(channels=1)
        if text.startswith("partial-"):
            try:
                k = int(text.split("-", 1)[1])
            except ValueError:
                raise ValueError(f"bad partial depth in {text!r}") from None
            return cls("partial", partial_k=k, policy=policy, prompt=prompt, blocks=blocks)
        return cls(text, policy=policy, prompt=prompt, blocks=blocks)

    def label(self) -> str:
        return f"partial-{self.partial_k}" if self.name == "partial" else self.name


@dataclass
class TunableModel:
    model: StagedModel
    paradigm: TuningParadigm
    mask: dict[str, bool]
    frozen_snapshot: dict[str, bytes]

    def trainable_names(self):
        return [n for n, v in self.mask.items() if v]


def _partial_groups(model: StagedModel) -> list[list[str]]:
    """Stage-name groups for partial tuning, shallowest first.

    cnn: one group per residual stage.  vit: transformer blocks split into
    quarters; the final norm travels with the deepest group.
    """
    spec = model.spec
    if spec.family == "cnn":
        return [[f"stage{i}"] for i in range(1, spec.n_stages + 1)]
    if spec.depth % 4 != 0:
        raise ValueError(f"partial tuning needs depth divisible by 4, got {spec.depth}")
    per = spec.depth // 4
    groups = []
    for g in range(4):
        names = [f"stage{i}" for i in range(g * per + 1, (g + 1) * per + 1)]
        if g == 3:
            names.append("final_norm")
        groups.append(names)
    return groups


def _default_policy(paradigm: TuningParadigm, model: StagedModel) -> InsertionPolicy:
    name = paradigm.policy
    if model.spec.family == "cnn" and name != "PerStage":
        raise ValueError(
            f"insertion policy {name!r} is defined on transformer depth; "
            "cnn backbones use PerStage"
        )
    policy = InsertionPolicy.from_name(name, model.spec.n_stages)
    if paradigm.blocks != 1:
        if name in ("F5", "L5"):
            raise ValueError(
                f"block stacking conflicts with {name}: its per-point count is fixed at 5"
            )
        policy = dataclasses.replace(policy, per_point=paradigm.blocks)
    return policy


def apply_paradigm(
    model: StagedModel,
    paradigm: TuningParadigm,
    num_classes: int,
    seed: int,
) -> TunableModel:
    """Prepare `model` for downstream training under `paradigm`.

    Deterministic in (model state, paradigm, num_classes, seed).  The head
    is always replaced by a fresh trainable layer drawn from `seed`; for a
    given seed and feature width every paradigm gets the same head init.
    Returns the model wrapped with its trainable mask and a byte snapshot
    of everything frozen.
    """
    spec = model.spec

    if paradigm.name == "scratch":
        fresh_spec = dataclasses.replace(spec, num_classes=num_classes)
        model = build_backbone(fresh_spec, seed=seed, dtype=model.dtype)
        trainable_prefixes = None  # everything trains
    elif paradigm.name in ("head", "partial", "finetune", "protune", "protune-ft"):
        rng = np.random.default_rng(seed)
        if paradigm.name in ("protune", "protune-ft"):
            policy = _default_policy(paradigm, model)
            if paradigm.name == "protune":
                for _name, tensor, info in model.named_entries():
                    if not info.buffer:
                        tensor.requires_grad = False
            model = install_prompts(
                model,
                policy,
                paradigm.prompt,
                num_classes,
                seed,
                allow_trainable_backbone=(paradigm.name == "protune-ft"),
            )
        else:
            model.head = Linear(spec.feature_width, num_classes, rng, model.dtype)

        if paradigm.name == "head":
            trainable_prefixes = ["head"]
        elif paradigm.name == "partial":
            groups = _partial_groups(model)
            if paradigm.partial_k >= len(groups):
                raise ValueError(
                    f"partial-{paradigm.partial_k} would unfreeze the whole "
                    f"backbone ({len(groups)} stage groups); use finetune"
                )
            trainable_prefixes = ["head"]
            for group in groups[-paradigm.partial_k:]:
                trainable_prefixes.extend(group)
        elif paradigm.name == "protune":
            trainable_prefixes = ["head", "prompt"]
        else:  # finetune, protune-ft
            trainable_prefixes = None
    else:  # pragma: no cover - guarded by TuningParadigm
        raise ValueError(paradigm.name)

    def _selected(name: str) -> bool:
        if trainable_prefixes is None:
            return True
        top = name.split(".", 1)[0]
        for p in trainable_prefixes:
            if top == p or (p == "prompt" and top.startswith("prompt")):
                return True
        return False

    mask: dict[str, bool] = {}
    for name, tensor, info in model.named_entries():
        if info.buffer:
            trainable = False
        elif name.endswith(".beta") and name.startswith("prompt"):
            # fixed-beta blocks stay frozen even under "train everything"
            trainable = _selected(name) and _beta_learnable(model, name)
        else:
            trainable = _selected(name)
        mask[name] = trainable
        tensor.requires_grad = trainable

    snapshot = {
        name: tensor.data.tobytes()
        for name, tensor, _info in model.named_entries()
        if not mask[name]
    }
    return TunableModel(model=model, paradigm=paradigm, mask=mask, frozen_snapshot=snapshot)


def _beta_learnable(model: StagedModel, name: str) -> bool:
    if not isinstance(model, PromptedModel):
        return True
    point = int(name.split(".")[0][len("prompt"):])
    j = int(name.split(".")[1][1:])
    return model.prompts[point][j].cfg.learnable_beta


def count_trainable_params(tm: TunableModel) -> int:
    reg = tm.model.registry()
    return sum(reg[name][0].size for name, trainable in tm.mask.items() if trainable)


def verify_frozen(snapshot: dict[str, bytes], model: StagedModel) -> list[str]:
    """Names of snapshot tensors whose bytes changed; empty means clean."""
    reg = model.registry()
    changed = []
    for name, before in snapshot.items():
        if name not in reg:
            changed.append(name)
            continue
        if reg[name][0].data.tobytes() != before:
            changed.append(name)
    return changed
