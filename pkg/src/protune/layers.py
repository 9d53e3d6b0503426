"""Neural network layers assembled from the op library.

Layers own their parameter tensors and register them under stable dotted
names.  Initialization is fan-in scaled uniform drawn from an explicit
numpy Generator, so a fixed seed reproduces parameters bitwise.
"""
from __future__ import annotations

import math
from typing import Iterator, NamedTuple

import numpy as np

from . import ops
from .autograd import Tensor


class ParamInfo(NamedTuple):
    decay: bool   # weight decay applies when trainable
    buffer: bool  # statistic storage, never gradient-trained


def uniform_init(
    rng: np.random.Generator, shape, fan_in: int, dtype, gain: float = 1.0
) -> np.ndarray:
    """Fan-in scaled uniform draw, U(-gain/sqrt(fan_in), +gain/sqrt(fan_in)).

    gain 1 suits linear layers; relu-followed convolutions pass RELU_GAIN
    (sqrt 6), which keeps activation variance roughly constant with depth.
    Without it a deep relu stack loses ~6x signal per layer and a
    from-scratch run never leaves the uniform-prediction plateau.
    """
    bound = gain / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


RELU_GAIN = math.sqrt(6.0)


class Layer:
    """Base class: parameter registration plus recursive traversal."""

    def __init__(self):
        self._params: dict[str, tuple[Tensor, ParamInfo]] = {}
        self._children: dict[str, Layer] = {}

    def _register(self, name: str, tensor: Tensor, decay: bool = False, buffer: bool = False):
        tensor.requires_grad = not buffer
        self._params[name] = (tensor, ParamInfo(decay=decay, buffer=buffer))
        return tensor

    def _child(self, name: str, layer: "Layer"):
        self._children[name] = layer
        return layer

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Tensor, ParamInfo]]:
        for name, (tensor, info) in self._params.items():
            yield (f"{prefix}.{name}" if prefix else name), tensor, info
        for cname, child in self._children.items():
            sub = f"{prefix}.{cname}" if prefix else cname
            yield from child.named_params(sub)


class Linear(Layer):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.weight = self._register(
            "weight", Tensor(uniform_init(rng, (d_out, d_in), d_in, dtype)), decay=True
        )
        self.bias = self._register(
            "bias", Tensor(uniform_init(rng, (d_out,), d_in, dtype))
        )

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Layer):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        k: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        dtype=np.float32,
        gain: float = RELU_GAIN,
    ):
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = c_in * k * k
        self.weight = self._register(
            "weight",
            Tensor(uniform_init(rng, (c_out, c_in, k, k), fan_in, dtype, gain)),
            decay=True,
        )
        self.bias = self._register("bias", Tensor(uniform_init(rng, (c_out,), fan_in, dtype)))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class DepthwiseConv2d(Layer):
    """Per-channel k x k convolution, stride 1, same padding."""

    def __init__(self, c: int, k: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        fan_in = k * k
        self.weight = self._register(
            "weight",
            Tensor(uniform_init(rng, (c, 1, k, k), fan_in, dtype, RELU_GAIN)),
            decay=True,
        )
        self.bias = self._register("bias", Tensor(uniform_init(rng, (c,), fan_in, dtype)))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.depthwise_conv2d(x, self.weight, self.bias)


class FrozenBatchNorm(Layer):
    """Per-channel affine with fixed statistics.

    Statistics are buffers set at construction (mean 0, var 1) and only ever
    change by loading a checkpoint; forward passes never update them, so a
    row's output is independent of everything else in the batch.
    """

    def __init__(self, c: int, dtype=np.float32):
        super().__init__()
        self.gamma = self._register("gamma", Tensor(np.ones(c, dtype=dtype)))
        self.beta = self._register("beta", Tensor(np.zeros(c, dtype=dtype)))
        self.mean = self._register("mean", Tensor(np.zeros(c, dtype=dtype)), buffer=True)
        self.var = self._register("var", Tensor(np.ones(c, dtype=dtype)), buffer=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.frozen_batch_norm(x, self.gamma, self.beta, self.mean.data, self.var.data)


class LayerNorm(Layer):
    """Per-token statistics computed from the input; no state at all."""

    def __init__(self, d: int, dtype=np.float32):
        super().__init__()
        self.gamma = self._register("gamma", Tensor(np.ones(d, dtype=dtype)))
        self.beta = self._register("beta", Tensor(np.zeros(d, dtype=dtype)))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta)


class SEModule(Layer):
    """Squeeze-and-excitation: global pool, two fully connected layers,
    sigmoid gate, per-channel rescale."""

    def __init__(self, c: int, r: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if r <= 0:
            raise ValueError(f"SE reduction must be positive, got {r}")
        self.channels = c
        hidden = max(1, math.ceil(c / r))
        self.fc1 = self._child("fc1", Linear(c, hidden, rng, dtype))
        self.fc2 = self._child("fc2", Linear(hidden, c, rng, dtype))

    def gate(self, x: Tensor) -> Tensor:
        s = ops.global_avg_pool(x)
        s = ops.relu(self.fc1(s))
        return ops.sigmoid(self.fc2(s))

    def __call__(self, x: Tensor) -> Tensor:
        n, c = x.shape[0], x.shape[1]
        s = ops.reshape(self.gate(x), (n, c, 1, 1))
        return ops.mul(x, s)


class ResidualBlock(Layer):
    """Two 3x3 convs with norms; 1x1 projection shortcut when shape changes."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        rng: np.random.Generator,
        stride: int = 1,
        dtype=np.float32,
    ):
        super().__init__()
        self.conv1 = self._child("conv1", Conv2d(c_in, c_out, 3, rng, stride=stride, padding=1, dtype=dtype))
        self.norm1 = self._child("norm1", FrozenBatchNorm(c_out, dtype))
        self.conv2 = self._child("conv2", Conv2d(c_out, c_out, 3, rng, stride=1, padding=1, dtype=dtype))
        self.norm2 = self._child("norm2", FrozenBatchNorm(c_out, dtype))
        self.has_proj = stride != 1 or c_in != c_out
        if self.has_proj:
            self.proj = self._child("proj", Conv2d(c_in, c_out, 1, rng, stride=stride, padding=0, dtype=dtype))
            self.proj_norm = self._child("proj_norm", FrozenBatchNorm(c_out, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        short = self.proj_norm(self.proj(x)) if self.has_proj else x
        return ops.relu(ops.add(y, short))


class TransformerBlock(Layer):
    """Pre-norm encoder block: attention then a 4x MLP, GELU activation."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32, mlp_ratio: int = 4):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.ln1 = self._child("ln1", LayerNorm(dim, dtype))
        self.qkv = self._child("qkv", Linear(dim, 3 * dim, rng, dtype))
        self.proj = self._child("proj", Linear(dim, dim, rng, dtype))
        self.ln2 = self._child("ln2", LayerNorm(dim, dtype))
        self.fc1 = self._child("fc1", Linear(dim, mlp_ratio * dim, rng, dtype))
        self.fc2 = self._child("fc2", Linear(mlp_ratio * dim, dim, rng, dtype))

    def _qkv_heads(self, x: Tensor):
        n, t, d = x.shape
        h, dh = self.heads, self.dim // self.heads
        y = ops.reshape(self.ln1(x), (n * t, d))
        qkv = ops.reshape(self.qkv(y), (n, t, 3, h, dh))
        qkv = ops.transpose(qkv, (2, 0, 3, 1, 4))
        q = ops.reshape(ops.slice_axis(qkv, 0, 0, 1), (n, h, t, dh))
        k = ops.reshape(ops.slice_axis(qkv, 0, 1, 2), (n, h, t, dh))
        v = ops.reshape(ops.slice_axis(qkv, 0, 2, 3), (n, h, t, dh))
        return q, k, v

    def attention_probs(self, x: Tensor) -> Tensor:
        """Softmax attention matrix [N, heads, T, T]; rows sum to one."""
        q, k, _ = self._qkv_heads(x)
        dh = self.dim // self.heads
        att = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        return ops.softmax(att, axis=-1)

    def __call__(self, x: Tensor) -> Tensor:
        n, t, d = x.shape
        q, k, v = self._qkv_heads(x)
        dh = d // self.heads
        att = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        att = ops.softmax(att, axis=-1)
        ctx = ops.matmul(att, v)
        ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (n * t, d))
        x = ops.add(x, ops.reshape(self.proj(ctx), (n, t, d)))
        y = ops.reshape(self.ln2(x), (n * t, d))
        y = self.fc2(ops.gelu(self.fc1(y)))
        return ops.add(x, ops.reshape(y, (n, t, d)))
