"""Numba-compiled convolution kernels.

Same signatures and semantics as numpy_ops.  Dense convolutions lower the
window gather (im2col) and the scatter-add backward (col2im) to compiled
loops and hand the contraction itself to np.dot, which numba dispatches to
BLAS.  Depthwise kernels stay as direct loop nests; their arithmetic
intensity is too low for a GEMM detour to pay off.  Iteration orders are
fixed and sequential, so results are reproducible run to run.  Kernels are
compiled lazily per dtype and cached on disk.
"""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _pad2d(x, p):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, :, p : p + h, p : p + w] = x
    return out


@njit(cache=True)
def _im2col(xp, kh, kw, stride, ho, wo):
    # [n, ci, hp, wp] -> [n*ho*wo, ci*kh*kw], rows in (n, i, j) order
    n, ci, _, _ = xp.shape
    cols = np.empty((n * ho * wo, ci * kh * kw), dtype=xp.dtype)
    for ni in range(n):
        for i in range(ho):
            ib = i * stride
            for j in range(wo):
                row = (ni * ho + i) * wo + j
                col = 0
                for ci_ in range(ci):
                    for a in range(kh):
                        for b in range(kw):
                            cols[row, col] = xp[ni, ci_, ib + a, j * stride + b]
                            col += 1
    return cols


@njit(cache=True)
def conv2d_forward(x, w, stride, padding):
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = _pad2d(x, padding)
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wt = np.ascontiguousarray(w.reshape(co, ci * kh * kw).T)
    y2 = np.dot(cols, wt)  # [n*ho*wo, co]
    y = np.empty((n, co, ho, wo), dtype=x.dtype)
    for ni in range(n):
        for i in range(ho):
            for j in range(wo):
                row = (ni * ho + i) * wo + j
                for o in range(co):
                    y[ni, o, i, j] = y2[row, o]
    return y


@njit(cache=True)
def _gy_rows(gy):
    # [n, co, ho, wo] -> [n*ho*wo, co]
    n, co, ho, wo = gy.shape
    out = np.empty((n * ho * wo, co), dtype=gy.dtype)
    for ni in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    out[(ni * ho + i) * wo + j, o] = gy[ni, o, i, j]
    return out


@njit(cache=True)
def conv2d_grad_input(gy, w, x_shape, stride, padding):
    n, ci, h, wd = x_shape
    co, _, kh, kw = w.shape
    ho, wo = gy.shape[2], gy.shape[3]
    gy2 = _gy_rows(gy)
    wmat = np.ascontiguousarray(w.reshape(co, ci * kh * kw))
    gcols = np.dot(gy2, wmat)  # [n*ho*wo, ci*kh*kw]
    gxp = np.zeros((n, ci, h + 2 * padding, wd + 2 * padding), dtype=gy.dtype)
    for ni in range(n):
        for i in range(ho):
            ib = i * stride
            for j in range(wo):
                row = (ni * ho + i) * wo + j
                col = 0
                for ci_ in range(ci):
                    for a in range(kh):
                        for b in range(kw):
                            gxp[ni, ci_, ib + a, j * stride + b] += gcols[row, col]
                            col += 1
    if padding == 0:
        return gxp
    return np.ascontiguousarray(gxp[:, :, padding : padding + h, padding : padding + wd])


@njit(cache=True)
def conv2d_grad_weight(gy, x, w_shape, stride, padding):
    n, ci, h, wd = x.shape
    co, _, kh, kw = w_shape
    xp = _pad2d(x, padding)
    ho, wo = gy.shape[2], gy.shape[3]
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    gy2t = np.ascontiguousarray(_gy_rows(gy).T)  # [co, n*ho*wo]
    gw2 = np.dot(gy2t, cols)  # [co, ci*kh*kw]
    return gw2.copy().reshape((co, ci, kh, kw))


@njit(cache=True)
def dwconv2d_forward(x, w, padding):
    n, c, h, wd = x.shape
    k = w.shape[2]
    xp = _pad2d(x, padding)
    y = np.zeros_like(x)
    for ni in range(n):
        for c_ in range(c):
            for i in range(h):
                for j in range(wd):
                    acc = y[ni, c_, i, j]
                    for a in range(k):
                        for b in range(k):
                            acc += xp[ni, c_, i + a, j + b] * w[c_, 0, a, b]
                    y[ni, c_, i, j] = acc
    return y


@njit(cache=True)
def dwconv2d_grad_input(gy, w, padding):
    n, c, h, wd = gy.shape
    k = w.shape[2]
    gxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=gy.dtype)
    for ni in range(n):
        for c_ in range(c):
            for i in range(h):
                for j in range(wd):
                    gval = gy[ni, c_, i, j]
                    for a in range(k):
                        for b in range(k):
                            gxp[ni, c_, i + a, j + b] += gval * w[c_, 0, a, b]
    if padding == 0:
        return gxp
    return np.ascontiguousarray(gxp[:, :, padding : padding + h, padding : padding + wd])


@njit(cache=True)
def dwconv2d_grad_weight(gy, x, k, padding):
    n, c, h, wd = x.shape
    xp = _pad2d(x, padding)
    gw = np.zeros((c, 1, k, k), dtype=gy.dtype)
    for c_ in range(c):
        for a in range(k):
            for b in range(k):
                acc = gw[c_, 0, a, b]
                for ni in range(n):
                    for i in range(h):
                        for j in range(wd):
                            acc += gy[ni, c_, i, j] * xp[ni, c_, i + a, j + b]
                gw[c_, 0, a, b] = acc
    return gw
