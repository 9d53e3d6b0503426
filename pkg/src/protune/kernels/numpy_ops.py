"""Pure numpy convolution kernels (im2col / col2im).

Reference implementations for the fallback backend.  Dense convolutions are
lowered to one GEMM per call; depthwise convolutions use k*k fused
multiply-adds over shifted views.  All loops below run over kernel taps only,
never over pixels, so the heavy lifting stays inside numpy/BLAS.
"""
from __future__ import annotations

import numpy as np


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, :, p : p + h, p : p + w] = x
    return out


def _window_view(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Sliding windows of a padded input: [N, C, kh, kw, Ho, Wo], read-only."""
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    n, ci, _, _ = x.shape
    co, _, kh, kw = w.shape
    xp = _pad2d(x, padding)
    win = _window_view(xp, kh, kw, stride)
    ho, wo = win.shape[4], win.shape[5]
    cols = win.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, ci * kh * kw)
    y = cols @ w.reshape(co, -1).T
    return np.ascontiguousarray(y.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))


def conv2d_grad_input(
    gy: np.ndarray, w: np.ndarray, x_shape, stride: int, padding: int
) -> np.ndarray:
    n, ci, h, wd = x_shape
    co, _, kh, kw = w.shape
    ho, wo = gy.shape[2], gy.shape[3]
    gy2 = gy.transpose(0, 2, 3, 1).reshape(-1, co)
    gcols = gy2 @ w.reshape(co, -1)
    gcols = gcols.reshape(n, ho, wo, ci, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    hp, wp = h + 2 * padding, wd + 2 * padding
    gxp = np.zeros((n, ci, hp, wp), dtype=gy.dtype)
    for a in range(kh):
        for b in range(kw):
            gxp[
                :,
                :,
                a : a + (ho - 1) * stride + 1 : stride,
                b : b + (wo - 1) * stride + 1 : stride,
            ] += gcols[:, :, a, b]
    if padding == 0:
        return gxp
    return np.ascontiguousarray(gxp[:, :, padding : padding + h, padding : padding + wd])


def conv2d_grad_weight(
    gy: np.ndarray, x: np.ndarray, w_shape, stride: int, padding: int
) -> np.ndarray:
    n, ci, _, _ = x.shape
    co, _, kh, kw = w_shape
    xp = _pad2d(x, padding)
    win = _window_view(xp, kh, kw, stride)
    ho, wo = win.shape[4], win.shape[5]
    cols = win.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, ci * kh * kw)
    gy2 = gy.transpose(0, 2, 3, 1).reshape(-1, co)
    # contiguous transpose so BLAS takes the same path as the other backend
    return (np.ascontiguousarray(gy2.T) @ cols).reshape(co, ci, kh, kw)


def dwconv2d_forward(x: np.ndarray, w: np.ndarray, padding: int) -> np.ndarray:
    n, c, h, wd = x.shape
    k = w.shape[2]
    xp = _pad2d(x, padding)
    y = np.zeros_like(x)
    for a in range(k):
        for b in range(k):
            y += xp[:, :, a : a + h, b : b + wd] * w[:, 0, a, b][None, :, None, None]
    return y


def dwconv2d_grad_input(gy: np.ndarray, w: np.ndarray, padding: int) -> np.ndarray:
    n, c, h, wd = gy.shape
    k = w.shape[2]
    gxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=gy.dtype)
    for a in range(k):
        for b in range(k):
            gxp[:, :, a : a + h, b : b + wd] += gy * w[:, 0, a, b][None, :, None, None]
    if padding == 0:
        return gxp
    return np.ascontiguousarray(gxp[:, :, padding : padding + h, padding : padding + wd])


def dwconv2d_grad_weight(gy: np.ndarray, x: np.ndarray, k: int, padding: int) -> np.ndarray:
    n, c, h, wd = x.shape
    xp = _pad2d(x, padding)
    gw = np.zeros((c, 1, k, k), dtype=gy.dtype)
    for a in range(k):
        for b in range(k):
            gw[:, 0, a, b] = (gy * xp[:, :, a : a + h, b : b + wd]).sum(axis=(0, 2, 3))
    return gw
