"""Compare the two kernel backends on training-representative shapes.

Run:  python3 benchmarks/bench_kernels.py [--repeats N]

Both backends hand the dense contraction to BLAS; they differ in how the
window gather (im2col) and the scatter-add backward are built, which is
where the compiled loops can win.  The first numba call includes JIT
compilation; a warmup pass keeps it out of the numbers.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from protune.kernels import numpy_ops

try:
    from protune.kernels import numba_ops
except ImportError:  # pragma: no cover
    numba_ops = None

# (label, n, c_in, h, w, c_out, k, stride, padding)
CONV_CASES = [
    ("stem 3->16 32px", 64, 3, 32, 32, 16, 3, 1, 1),
    ("stage 16->32 /2", 64, 16, 32, 32, 32, 3, 2, 1),
    ("stage 64->64 8px", 64, 64, 8, 8, 64, 3, 1, 1),
    ("patchify 3->64 p4", 64, 3, 32, 32, 64, 4, 4, 0),
    ("prompt 1x1 128", 64, 128, 4, 4, 32, 1, 1, 0),
]
DW_CASES = [
    ("dw k5 c16 32px", 64, 16, 32, 32, 5),
    ("dw k5 c128 4px", 64, 128, 4, 4, 5),
]


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1000.0


def bench_conv(impl, case, repeats, rng):
    _label, n, ci, h, w, co, k, s, p = case
    x = rng.standard_normal((n, ci, h, w)).astype(np.float32)
    wt = rng.standard_normal((co, ci, k, k)).astype(np.float32)
    y = impl.conv2d_forward(x, wt, s, p)  # warmup / shape
    gy = rng.standard_normal(y.shape).astype(np.float32)
    impl.conv2d_grad_input(gy, wt, x.shape, s, p)
    impl.conv2d_grad_weight(gy, x, wt.shape, s, p)
    return (
        _time(lambda: impl.conv2d_forward(x, wt, s, p), repeats),
        _time(lambda: impl.conv2d_grad_input(gy, wt, x.shape, s, p), repeats),
        _time(lambda: impl.conv2d_grad_weight(gy, x, wt.shape, s, p), repeats),
    )


def bench_dw(impl, case, repeats, rng):
    _label, n, c, h, w, k = case
    pad = (k - 1) // 2
    x = rng.standard_normal((n, c, h, w)).astype(np.float32)
    wt = rng.standard_normal((c, 1, k, k)).astype(np.float32)
    impl.dwconv2d_forward(x, wt, pad)
    gy = rng.standard_normal(x.shape).astype(np.float32)
    impl.dwconv2d_grad_input(gy, wt, pad)
    impl.dwconv2d_grad_weight(gy, x, k, pad)
    return (
        _time(lambda: impl.dwconv2d_forward(x, wt, pad), repeats),
        _time(lambda: impl.dwconv2d_grad_input(gy, wt, pad), repeats),
        _time(lambda: impl.dwconv2d_grad_weight(gy, x, k, pad), repeats),
    )


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)

    impls = [("numpy", numpy_ops)]
    if numba_ops is not None:
        impls.append(("numba", numba_ops))
    else:
        print("numba unavailable; timing numpy only")

    header = f"{'case':22s} {'backend':8s} {'fwd ms':>8s} {'gx ms':>8s} {'gw ms':>8s}"
    print(header)
    print("-" * len(header))
    for case in CONV_CASES:
        for name, impl in impls:
            fwd, gx, gw = bench_conv(impl, case, args.repeats, rng)
            print(f"{case[0]:22s} {name:8s} {fwd:8.2f} {gx:8.2f} {gw:8.2f}")
    for case in DW_CASES:
        for name, impl in impls:
            fwd, gx, gw = bench_dw(impl, case, args.repeats, rng)
            print(f"{case[0]:22s} {name:8s} {fwd:8.2f} {gx:8.2f} {gw:8.2f}")


if __name__ == "__main__":
    main()
