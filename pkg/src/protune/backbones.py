"""Desk-scale staged backbones.

Two families share one container:

  cnn   3x3 stem conv + one residual stage per width entry (stride 2 from
        the second stage on), global average pool, linear head.
  vit   patch-embedding conv + class token + positional table, a stack of
        pre-norm transformer blocks, final layer norm, head on the class
        token.

A "stage" is the unit feature extractors are sliced at: residual stages for
the cnn, individual transformer blocks for the vit.  Attachment point i sits
after stage i; point 0 is the embedding output before stage 1.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autograd import Tensor
from .layers import (
    Conv2d,
    FrozenBatchNorm,
    Layer,
    LayerNorm,
    Linear,
    ParamInfo,
    ResidualBlock,
    TransformerBlock,
    uniform_init,
)


@dataclass
class BackboneSpec:
    family: str
    input_hw: int = 32
    num_classes: int = 10
    widths: tuple = (16, 32, 64, 128)   # cnn only
    depth: int = 12                     # vit only
    dim: int = 64
    heads: int = 4
    patch: int = 4

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.validate()

    def validate(self):
        if self.family not in ("cnn", "vit"):
            raise ValueError(f"unknown backbone family {self.family!r}")
        if self.input_hw < 8:
            raise ValueError(f"input size too small: {self.input_hw}")
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.family == "cnn":
            if len(self.widths) < 2:
                raise ValueError("cnn needs at least 2 stages")
            if any(w < 1 for w in self.widths):
                raise ValueError(f"non-positive stage width in {self.widths}")
        else:
            if self.depth < 1:
                raise ValueError(f"vit depth must be positive, got {self.depth}")
            if self.dim % self.heads != 0:
                raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
            if self.input_hw % self.patch != 0:
                raise ValueError(
                    f"input {self.input_hw} not divisible by patch {self.patch}"
                )

    @property
    def n_stages(self) -> int:
        return len(self.widths) if self.family == "cnn" else self.depth

    def stage_width(self, point: int) -> int:
        """Feature width at attachment point 0..n_stages."""
        if not 0 <= point <= self.n_stages:
            raise ValueError(f"attachment point {point} outside [0, {self.n_stages}]")
        if self.family == "vit":
            return self.dim
        return self.widths[0] if point == 0 else self.widths[point - 1]

    @property
    def feature_width(self) -> int:
        return self.widths[-1] if self.family == "cnn" else self.dim

    def to_dict(self) -> dict:
        d = {"family": self.family, "input_hw": self.input_hw, "num_classes": self.num_classes}
        if self.family == "cnn":
            d["widths"] = list(self.widths)
        else:
            d.update(depth=self.depth, dim=self.dim, heads=self.heads, patch=self.patch)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(**{**d, "widths": tuple(d.get("widths", (16, 32, 64, 128)))})

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


class CNNStem(Layer):
    def __init__(self, width: int, rng, dtype):
        super().__init__()
        self.conv = self._child("conv", Conv2d(3, width, 3, rng, stride=1, padding=1, dtype=dtype))
        self.norm = self._child("norm", FrozenBatchNorm(width, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.relu(self.norm(self.conv(x)))


class ViTEmbed(Layer):
    """Patchify with a strided conv, prepend class token, add positions."""

    def __init__(self, spec: BackboneSpec, rng, dtype):
        super().__init__()
        self.grid = spec.input_hw // spec.patch
        n_tokens = self.grid * self.grid + 1
        self.proj = self._child(
            "proj",
            Conv2d(3, spec.dim, spec.patch, rng, stride=spec.patch, padding=0, dtype=dtype, gain=1.0),
        )
        self.cls = self._register(
            "cls", Tensor(uniform_init(rng, (1, 1, spec.dim), spec.dim, dtype))
        )
        self.pos = self._register(
            "pos", Tensor(uniform_init(rng, (1, n_tokens, spec.dim), spec.dim, dtype))
        )

    def __call__(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        p = self.proj(x)                                   # [N, D, g, g]
        d = p.shape[1]
        tokens = ops.transpose(ops.reshape(p, (n, d, self.grid * self.grid)), (0, 2, 1))
        cls = ops.expand_batch(self.cls, n)
        return ops.add(ops.concat([cls, tokens], axis=1), self.pos)


class StagedModel:
    """Backbone + head with per-stage forward access.

    Parameters live in an ordered registry of (tensor, ParamInfo) under
    dotted names.  requires_grad on each tensor is the live trainable
    switch; buffers never train.
    """

    def __init__(self, spec: BackboneSpec, embed: Layer, stages: list[Layer],
                 final_norm: LayerNorm | None, head: Linear, dtype):
        self.spec = spec
        self.embed = embed
        self.stages = stages
        self.final_norm = final_norm
        self.head = head
        self.dtype = dtype

    # -- registry ----------------------------------------------------------

    def named_entries(self):
        prefix = "stem" if self.spec.family == "cnn" else "embed"
        yield from self.embed.named_params(prefix)
        for i, stage in enumerate(self.stages, start=1):
            yield from stage.named_params(f"stage{i}")
        if self.final_norm is not None:
            yield from self.final_norm.named_params("final_norm")
        yield from self.head.named_params("head")

    def registry(self) -> dict[str, tuple[Tensor, ParamInfo]]:
        return {name: (t, info) for name, t, info in self.named_entries()}

    def param_count(self, trainable_only: bool = False) -> int:
        total = 0
        for _, t, info in self.named_entries():
            if info.buffer:
                continue
            if trainable_only and not t.requires_grad:
                continue
            total += t.size
        return total

    # -- forward -----------------------------------------------------------

    def _post_stage(self, point: int, x: Tensor) -> Tensor:
        return x

    def embed_forward(self, x: Tensor) -> Tensor:
        return self._post_stage(0, self.embed(x))

    def run_stage(self, i: int, x: Tensor) -> Tensor:
        """Apply stage i (1-based) including any post-stage hook."""
        return self._post_stage(i, self.stages[i - 1](x))

    def pool_forward(self, feature: Tensor) -> Tensor:
        if self.spec.family == "cnn":
            return ops.global_avg_pool(feature)
        n, _, d = feature.shape
        normed = self.final_norm(feature)
        return ops.reshape(ops.slice_axis(normed, 1, 0, 1), (n, d))

    def head_forward(self, feature: Tensor) -> Tensor:
        return self.head(self.pool_forward(feature))

    def forward_collect(self, x: Tensor):
        """Returns (stage_outputs, logits); len(stage_outputs) == n_stages."""
        cur = self.embed_forward(x)
        outs = []
        for i in range(1, len(self.stages) + 1):
            cur = self.run_stage(i, cur)
            outs.append(cur)
        return outs, self.head_forward(cur)

    def logits(self, x: Tensor) -> Tensor:
        cur = self.embed_forward(x)
        for i in range(1, len(self.stages) + 1):
            cur = self.run_stage(i, cur)
        return self.head_forward(cur)


def build_backbone(spec: BackboneSpec, seed: int, dtype=np.float32) -> StagedModel:
    """Deterministic construction: same (spec, seed) gives bitwise-equal params."""
    rng = np.random.default_rng(seed)
    if spec.family == "cnn":
        embed = CNNStem(spec.widths[0], rng, dtype)
        stages: list[Layer] = []
        prev = spec.widths[0]
        for i, w in enumerate(spec.widths):
            stride = 1 if i == 0 else 2
            stages.append(ResidualBlock(prev, w, rng, stride=stride, dtype=dtype))
            prev = w
        final_norm = None
        head = Linear(spec.widths[-1], spec.num_classes, rng, dtype)
    else:
        embed = ViTEmbed(spec, rng, dtype)
        stages = [TransformerBlock(spec.dim, spec.heads, rng, dtype) for _ in range(spec.depth)]
        final_norm = LayerNorm(spec.dim, dtype)
        head = Linear(spec.dim, spec.num_classes, rng, dtype)
    return StagedModel(spec, embed, stages, final_norm, head, dtype)


def tiny_cnn_spec(num_classes: int = 10) -> BackboneSpec:
    return BackboneSpec(family="cnn", widths=(16, 32, 64, 128), num_classes=num_classes)


def tiny_vit_spec(num_classes: int = 10) -> BackboneSpec:
    return BackboneSpec(family="vit", depth=12, dim=64, heads=4, patch=4, num_classes=num_classes)
