"""Prompt blocks and their installation into frozen backbones.

A prompt block is a lightweight residual adapter attached after a backbone
stage: 1x1 conv down to a bottleneck, k x k depthwise conv, 1x1 conv back
up, then a squeeze-and-excitation gate.  Its output is blended into the
frozen feature map as

    x_tilde = x + beta * f(x)

with beta a per-block scalar starting at zero, so a freshly installed block
leaves the network's function unchanged.  For token features the class
token bypasses f entirely; patch tokens are folded to a square grid, run
through the convolutional block, and folded back.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import ops
from .autograd import Tensor
from .backbones import StagedModel
from .layers import Conv2d, DepthwiseConv2d, Layer, Linear, SEModule


@dataclass(frozen=True)
class PromptBlockConfig:
    """Shape of one prompt block at a given channel width.

    reduction     bottleneck divisor: bottleneck width = max(1, C // reduction)
    kernel        depthwise kernel size, odd
    se_reduction  squeeze-and-excitation divisor
    beta_init     initial blend scalar
    learnable_beta  when False, beta stays fixed at beta_init and is
                    excluded from trainable masks
    """

    channels: int
    reduction: int = 4
    kernel: int = 5
    se_reduction: int = 16
    beta_init: float = 0.0
    learnable_beta: bool = True

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError(f"channels must be positive, got {self.channels}")
        if self.reduction not in (1, 2, 4):
            raise ValueError(f"reduction must be 1, 2 or 4, got {self.reduction}")
        if self.kernel not in (3, 5, 7):
            raise ValueError(f"kernel must be 3, 5 or 7, got {self.kernel}")
        if self.se_reduction < 1:
            raise ValueError(f"se_reduction must be positive, got {self.se_reduction}")

    @property
    def bottleneck(self) -> int:
        return max(1, self.channels // self.reduction)

    def at_channels(self, c: int) -> "PromptBlockConfig":
        return replace(self, channels=c)


def count_prompt_params(cfg: PromptBlockConfig) -> int:
    """Closed-form parameter count of one block (weights, biases, beta)."""
    c, cb, k = cfg.channels, cfg.bottleneck, cfg.kernel
    se_hidden = math.ceil(c / cfg.se_reduction)
    conv_down = c * cb + cb
    dw = k * k * cb + cb
    conv_up = cb * c + c
    se = 2 * c * se_hidden + se_hidden + c
    return conv_down + dw + conv_up + se + 1


class PromptBlock(Layer):
    def __init__(self, cfg: PromptBlockConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        cb = cfg.bottleneck
        self.conv_down = self._child("conv_down", Conv2d(cfg.channels, cb, 1, rng, dtype=dtype))
        self.dw = self._child("dw", DepthwiseConv2d(cb, cfg.kernel, rng, dtype=dtype))
        self.conv_up = self._child("conv_up", Conv2d(cb, cfg.channels, 1, rng, dtype=dtype, gain=1.0))
        self.se = self._child("se", SEModule(cfg.channels, cfg.se_reduction, rng, dtype))
        self.beta = self._register(
            "beta", Tensor(np.asarray(cfg.beta_init, dtype=dtype))
        )
        if not cfg.learnable_beta:
            self.beta.requires_grad = False

    def __call__(self, x: Tensor) -> Tensor:
        """f(x): the block body without the residual blend."""
        y = ops.relu(self.conv_down(x))
        y = ops.relu(self.dw(y))
        y = self.conv_up(y)
        return self.se(y)

    def blend_grid(self, x: Tensor) -> Tensor:
        """x + beta * f(x) on an [N,C,H,W] feature map."""
        return blend(x, self(x), self.beta)

    def blend_tokens(self, tokens: Tensor) -> Tensor:
        """Blend on [N,T,D] tokens; the class token bypasses the block."""
        grid, cls = tokens_to_grid(tokens, has_cls=True)
        blended = self.blend_grid(grid)
        patches = grid_to_tokens(blended)
        return ops.concat([cls, patches], axis=1)


def blend(x: Tensor, fx: Tensor, beta: Tensor) -> Tensor:
    """x + beta * fx.  With beta == 0 this returns x bit for bit."""
    if x.shape != fx.shape:
        raise ops.DimensionError(
            "shape", f"blend: feature {x.shape} and block output {fx.shape} differ"
        )
    if beta.size != 1:
        raise ops.DimensionError("scalar", f"blend scalar has shape {beta.shape}")
    return ops.add(x, ops.mul(fx, beta))


def tokens_to_grid(tokens: Tensor, has_cls: bool = True):
    """[N,T,D] tokens -> ([N,D,s,s] grid, cls tokens or None).

    The patch-token count (T minus the class token when present) must be a
    perfect square.  Inverse of grid_to_tokens, lossless.
    """
    if tokens.ndim != 3:
        raise ops.DimensionError("rank", f"tokens must be [N,T,D], got {tokens.shape}")
    n, t, d = tokens.shape
    cls = None
    patches = tokens
    if has_cls:
        cls = ops.slice_axis(tokens, 1, 0, 1)
        patches = ops.slice_axis(tokens, 1, 1, t)
        t = t - 1
    side = math.isqrt(t)
    if side * side != t:
        raise ops.DimensionError(
            "token", f"patch-token count {t} is not a perfect square"
        )
    grid = ops.reshape(ops.transpose(patches, (0, 2, 1)), (n, d, side, side))
    return grid, cls


def grid_to_tokens(grid: Tensor) -> Tensor:
    """[N,D,s,s] -> [N,s*s,D] patch tokens (no class token)."""
    if grid.ndim != 4:
        raise ops.DimensionError("rank", f"grid must be [N,D,s,s], got {grid.shape}")
    n, d, hh, ww = grid.shape
    return ops.transpose(ops.reshape(grid, (n, d, hh * ww)), (0, 2, 1))


# ---------------------------------------------------------------------------
# insertion policies


_POSITION_NAMES = ("F1", "F5", "L1", "L5", "U5")


@dataclass(frozen=True)
class InsertionPolicy:
    """Where prompt blocks go and how many stack at each point.

    points are attachment indices: 0 is the embedding output, i >= 1 is the
    output of stage i.  per_point blocks are applied in sequence at each
    point, each with its own parameters and blend scalar.
    """

    name: str
    points: tuple[int, ...]
    per_point: int = 1

    def __post_init__(self):
        if self.per_point < 1:
            raise ValueError(f"per_point must be positive, got {self.per_point}")
        if len(set(self.points)) != len(self.points):
            raise ValueError(f"duplicate attachment points: {self.points}")

    @classmethod
    def per_stage(cls, n_stages: int, per_point: int = 1) -> "InsertionPolicy":
        return cls("PerStage", tuple(range(1, n_stages + 1)), per_point)

    @classmethod
    def at_points(cls, points, per_point: int = 1) -> "InsertionPolicy":
        return cls("Custom", tuple(points), per_point)

    @classmethod
    def from_name(cls, name: str, n_stages: int) -> "InsertionPolicy":
        """Named layouts; positional names are defined on transformer depth."""
        if name == "PerStage":
            return cls.per_stage(n_stages)
        if name not in _POSITION_NAMES:
            raise ValueError(f"unknown insertion policy {name!r}")
        if name == "F1":
            return cls("F1", (1,))
        if name == "F5":
            return cls("F5", (1,), per_point=5)
        if name == "L1":
            return cls("L1", (n_stages,))
        if name == "L5":
            return cls("L5", (n_stages,), per_point=5)
        # U5: embedding output plus the four quarter depths
        if n_stages % 4 != 0:
            raise ValueError(f"U5 needs depth divisible by 4, got {n_stages}")
        q = n_stages // 4
        return cls("U5", (0, q, 2 * q, 3 * q, n_stages))

    @property
    def total_blocks(self) -> int:
        return len(self.points) * self.per_point


# ---------------------------------------------------------------------------
# prompted model


class PromptedModel(StagedModel):
    """A staged backbone with prompt blocks installed and a fresh head.

    Shares the backbone layer objects (and therefore parameter tensors)
    with the source model; adds prompt parameters and a new head under the
    names prompt{point}.b{j}.* and head.*.
    """

    def __init__(self, base: StagedModel, policy: InsertionPolicy,
                 prompts: dict[int, list[PromptBlock]], head: Linear):
        super().__init__(base.spec, base.embed, base.stages, base.final_norm, head, base.dtype)
        self.base = base
        self.policy = policy
        self.prompts = prompts

    def named_entries(self):
        prefix = "stem" if self.spec.family == "cnn" else "embed"
        yield from self.embed.named_params(prefix)
        for i, stage in enumerate(self.stages, start=1):
            yield from stage.named_params(f"stage{i}")
        if self.final_norm is not None:
            yield from self.final_norm.named_params("final_norm")
        for point in sorted(self.prompts):
            for j, block in enumerate(self.prompts[point]):
                yield from block.named_params(f"prompt{point}.b{j}")
        yield from self.head.named_params("head")

    def _post_stage(self, point: int, x: Tensor) -> Tensor:
        blocks = self.prompts.get(point)
        if not blocks:
            return x
        for block in blocks:
            if self.spec.family == "cnn":
                x = block.blend_grid(x)
            else:
                x = block.blend_tokens(x)
        return x

    def prompt_param_count(self) -> int:
        total = 0
        for blocks in self.prompts.values():
            for block in blocks:
                for _, t, _info in block.named_params():
                    total += t.size
        return total


def install_prompts(
    model: StagedModel,
    policy: InsertionPolicy,
    cfg: PromptBlockConfig,
    num_classes: int,
    seed: int,
    allow_trainable_backbone: bool = False,
) -> PromptedModel:
    """Attach prompt blocks per `policy` and replace the head.

    The backbone must be frozen first (every non-buffer tensor
    requires_grad False) unless allow_trainable_backbone is set, which the
    combined tuning paradigm uses.  Block widths follow the feature width
    at each attachment point; cfg.channels is re-bound per point.
    """
    if not allow_trainable_backbone:
        for name, tensor, info in model.named_entries():
            if not info.buffer and tensor.requires_grad:
                raise ValueError(
                    f"cannot install prompts on a trainable backbone: {name!r} "
                    "requires grad (freeze it or use the combined paradigm)"
                )
    n = model.spec.n_stages
    for point in policy.points:
        if not 0 <= point <= n:
            raise ValueError(
                f"policy {policy.name} point {point} outside [0, {n}]"
            )
    if model.spec.family == "cnn" and 0 in policy.points and policy.name == "U5":
        raise ValueError("U5 is defined on transformer depth, not cnn stages")

    rng = np.random.default_rng(seed)
    # head first: a head-only paradigm seeded the same way draws the
    # identical head, so the beta=0 model is bitwise equal to it at step 0
    head = Linear(model.spec.feature_width, num_classes, rng, model.dtype)
    prompts: dict[int, list[PromptBlock]] = {}
    for point in sorted(policy.points):
        width = model.spec.stage_width(point)
        block_cfg = cfg.at_channels(width)
        prompts[point] = [
            PromptBlock(block_cfg, rng, model.dtype) for _ in range(policy.per_point)
        ]
    return PromptedModel(model, policy, prompts, head)
