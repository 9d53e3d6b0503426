"""Differentiable operations on Tensors.

Layout convention is N,C,H,W row-major everywhere.  Broadcasting is kept
deliberately narrow: add/mul allow one operand to carry size-1 axes (bias
adds, positional offsets, scalar-times-tensor); everything else requires
exact shapes and raises DimensionError naming the offending axis.
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf

from . import kernels
from .autograd import Tensor, make_result

# python floats so they do not promote float32 arrays
_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class DimensionError(ValueError):
    """Shape mismatch; carries the name of the offending axis."""

    def __init__(self, axis: str, message: str):
        self.axis = axis
        super().__init__(f"{message} [axis: {axis}]")


def _check_same_dtype(*tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise TypeError(f"mixed tensor dtypes: {dt} vs {t.dtype}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to `shape` (inverse of size-1-axis broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_shape(a: Tensor, b: Tensor, opname: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            "shape", f"{opname}: incompatible shapes {a.shape} and {b.shape}"
        ) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    _binary_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    _binary_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    _binary_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no gradient for the constant)."""
    c = a.dtype.type(c)
    return make_result(a.data * c, (a,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(
        np.ascontiguousarray(np.transpose(a.data, axes)),
        (a,),
        lambda g: (np.transpose(g, inv),),
    )


def concat(tensors, axis: int) -> Tensor:
    _check_same_dtype(*tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        outs = []
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(start), int(stop))
            outs.append(np.ascontiguousarray(g[tuple(idx)]))
        return tuple(outs)

    return make_result(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward
    )


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return make_result(np.ascontiguousarray(a.data[idx]), (a,), backward)


def expand_batch(a: Tensor, n: int) -> Tensor:
    """Repeat a leading size-1 batch axis n times; gradient sums back."""
    if a.shape[0] != 1:
        raise DimensionError("batch", f"expand_batch needs leading axis 1, got {a.shape}")
    data = np.ascontiguousarray(np.broadcast_to(a.data, (n,) + a.shape[1:]))
    return make_result(data, (a,), lambda g: (g.sum(axis=0, keepdims=True),))


# ---------------------------------------------------------------------------
# reductions


def _expand_reduced(g, in_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(in_shape)), in_shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    if not keepdims:
        for ax in sorted(ax % len(in_shape) for ax in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, in_shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    in_shape = a.shape

    def backward(g):
        return (np.ascontiguousarray(_expand_reduced(g, in_shape, axis, keepdims)),)

    return make_result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    in_shape = a.shape
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.dtype.type(a.size / out.size)

    def backward(g):
        return (np.ascontiguousarray(_expand_reduced(g, in_shape, axis, keepdims)) / count,)

    return make_result(out, (a,), backward)


def global_avg_pool(a: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C] spatial mean."""
    if a.ndim != 4:
        raise DimensionError("rank", f"global_avg_pool expects 4-d input, got {a.shape}")
    return tmean(a, axis=(2, 3))


# ---------------------------------------------------------------------------
# activations


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(np.where(mask, a.data, a.dtype.type(0)), (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """Exact erf form: x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = (x * cdf).astype(x.dtype)

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return ((g * (cdf + x * pdf)).astype(x.dtype),)

    return make_result(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return make_result(out, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return make_result(s, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.ndim != b.ndim or a.ndim < 2:
        raise DimensionError("rank", f"matmul ranks differ: {a.shape} vs {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError("batch", f"matmul batch dims differ: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            "inner", f"matmul inner dims differ: {a.shape} vs {b.shape}"
        )
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.swapaxes(-1, -2) if a.requires_grad else None
        gb = ad.swapaxes(-1, -2) @ g if b.requires_grad else None
        return ga, gb

    return make_result(ad @ bd, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x [N, D_in] @ w.T [D_in, D_out] + b -> [N, D_out]."""
    if x.ndim != 2:
        raise DimensionError("rank", f"linear expects 2-d input, got {x.shape}")
    if w.ndim != 2:
        raise DimensionError("rank", f"linear weight must be 2-d, got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            "feature", f"linear: input width {x.shape[1]} != weight fan-in {w.shape[1]}"
        )
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(
            "feature", f"linear: bias shape {b.shape} != ({w.shape[0]},)"
        )
    _check_same_dtype(*( (x, w, b) if b is not None else (x, w) ))
    xd, wd = x.data, w.data
    y = xd @ wd.T
    if b is not None:
        y = y + b.data

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if w.requires_grad else None
        gb = g.sum(axis=0) if b is not None and b.requires_grad else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_result(y, parents, backward)


# ---------------------------------------------------------------------------
# convolutions


def conv2d(
    x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Cross-correlation over [N,C,H,W]; H' = (H + 2p - kh)//stride + 1."""
    if x.ndim != 4:
        raise DimensionError("rank", f"conv2d expects 4-d input, got {x.shape}")
    if w.ndim != 4:
        raise DimensionError("rank", f"conv2d weight must be 4-d, got {w.shape}")
    n, ci, h, wd_ = x.shape
    co, wci, kh, kw = w.shape
    if ci != wci:
        raise DimensionError(
            "channel", f"conv2d: input has {ci} channels, weight expects {wci}"
        )
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride/padding ({stride}, {padding})")
    if kh > h + 2 * padding:
        raise DimensionError(
            "height", f"conv2d: kernel {kh} exceeds padded input height {h + 2 * padding}"
        )
    if kw > wd_ + 2 * padding:
        raise DimensionError(
            "width", f"conv2d: kernel {kw} exceeds padded input width {wd_ + 2 * padding}"
        )
    if b is not None and b.shape != (co,):
        raise DimensionError("channel", f"conv2d: bias shape {b.shape} != ({co},)")
    _check_same_dtype(*( (x, w, b) if b is not None else (x, w) ))

    xd = np.ascontiguousarray(x.data)
    wdat = np.ascontiguousarray(w.data)
    y = kernels.conv2d_forward(xd, wdat, stride, padding)
    if b is not None:
        y = y + b.data.reshape(1, co, 1, 1)

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = (
            kernels.conv2d_grad_input(g, wdat, xd.shape, stride, padding)
            if x.requires_grad
            else None
        )
        gw = (
            kernels.conv2d_grad_weight(g, xd, wdat.shape, stride, padding)
            if w.requires_grad
            else None
        )
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_result(y, parents, backward)


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-channel k x k convolution, stride 1, same padding (k odd)."""
    if x.ndim != 4:
        raise DimensionError("rank", f"depthwise_conv2d expects 4-d input, got {x.shape}")
    if w.ndim != 4 or w.shape[1] != 1 or w.shape[2] != w.shape[3]:
        raise DimensionError(
            "kernel", f"depthwise weight must be [C,1,k,k], got {w.shape}"
        )
    c, k = x.shape[1], w.shape[2]
    if w.shape[0] != c:
        raise DimensionError(
            "channel", f"depthwise: input has {c} channels, weight has {w.shape[0]}"
        )
    if k % 2 == 0:
        raise ValueError(f"depthwise kernel must be odd, got {k}")
    if b is not None and b.shape != (c,):
        raise DimensionError("channel", f"depthwise: bias shape {b.shape} != ({c},)")
    _check_same_dtype(*( (x, w, b) if b is not None else (x, w) ))

    padding = (k - 1) // 2
    xd = np.ascontiguousarray(x.data)
    wdat = np.ascontiguousarray(w.data)
    y = kernels.dwconv2d_forward(xd, wdat, padding)
    if b is not None:
        y = y + b.data.reshape(1, c, 1, 1)

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = kernels.dwconv2d_grad_input(g, wdat, padding) if x.requires_grad else None
        gw = (
            kernels.dwconv2d_grad_weight(g, xd, k, padding) if w.requires_grad else None
        )
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_result(y, parents, backward)


# ---------------------------------------------------------------------------
# normalization


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis using per-row statistics."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            "feature", f"layer_norm: affine shapes {gamma.shape}/{beta.shape} != ({d},)"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xh = xc * rstd
    out = xh * gamma.data + beta.data
    lead = tuple(range(xd.ndim - 1))

    def backward(g):
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        ggamma = (g * xh).sum(axis=lead) if gamma.requires_grad else None
        if x.requires_grad:
            gxh = g * gamma.data
            gx = rstd * (
                gxh
                - gxh.mean(axis=-1, keepdims=True)
                - xh * (gxh * xh).mean(axis=-1, keepdims=True)
            )
        else:
            gx = None
        return gx, ggamma, gbeta

    return make_result(out.astype(xd.dtype), (x, gamma, beta), backward)


def frozen_batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mean: np.ndarray,
    var: np.ndarray,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel affine with fixed statistics: no update, no drift."""
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            "channel", f"frozen_batch_norm: affine shapes {gamma.shape}/{beta.shape} != ({c},)"
        )
    rstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xh = (x.data - mean.reshape(1, c, 1, 1)) * rstd.reshape(1, c, 1, 1)
    out = xh * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        gx = g * (gamma.data * rstd).reshape(1, c, 1, 1) if x.requires_grad else None
        ggamma = (g * xh).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return make_result(out.astype(x.dtype), (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log softmax probability of the labels; scalar output.

    Gradient is (softmax - onehot) / N, so per-example gradients sum to zero.
    """
    if logits.ndim != 2:
        raise DimensionError("rank", f"loss expects [N, K] logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError("batch", f"labels shape {labels.shape} != ({n},)")
    if not np.issubdtype(labels.dtype, np.integer):
        raise TypeError(f"labels must be integers, got {labels.dtype}")
    if labels.min() < 0 or labels.max() >= k:
        bad = int(np.argmax((labels < 0) | (labels >= k)))
        raise ValueError(
            f"label out of range at index {bad}: {int(labels[bad])} not in [0, {k})"
        )

    x = logits.data
    m = x.max(axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), labels].mean()
    probs = np.exp(logp)

    def backward(g):
        gl = probs.copy()
        gl[np.arange(n), labels] -= 1.0
        gl *= g / n
        return (gl.astype(x.dtype),)

    return make_result(np.asarray(loss, dtype=x.dtype), (logits,), backward)
