"""Backend selection for the convolution kernels.

PROTUNE_BACKEND picks the implementation:
  "numba"  require the numba-compiled kernels (ImportError if unavailable)
  "numpy"  force the pure numpy fallback
  "auto"   numba when importable, numpy otherwise (default)

The choice is fixed per process; results are reproducible for a fixed
backend, but the two backends may differ in the last float bits because
they accumulate in different orders.
"""
from __future__ import annotations

import os

from . import numpy_ops

_requested = os.environ.get("PROTUNE_BACKEND", "auto").lower()
if _requested not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"PROTUNE_BACKEND must be 'auto', 'numba' or 'numpy', got {_requested!r}"
    )

if _requested == "numpy":
    _impl = numpy_ops
    _active = "numpy"
else:
    try:
        from . import numba_ops as _impl  # noqa: F401

        _active = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        _impl = numpy_ops
        _active = "numpy"


def active_backend() -> str:
    return _active


class _BackendSwitch:
    """Applies on construction; restores the previous backend on exit when
    used as a context manager."""

    def __init__(self, name: str):
        global _impl, _active
        self._prev = _active
        if name == "numpy":
            _impl = numpy_ops
            _active = "numpy"
        elif name == "numba":
            from . import numba_ops

            _impl = numba_ops
            _active = "numba"
        else:
            raise ValueError(f"unknown backend {name!r}")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        _BackendSwitch(self._prev)


def use_backend(name: str) -> _BackendSwitch:
    """Swap the kernel implementation at runtime (tests and benchmarks)."""
    return _BackendSwitch(name)


def conv2d_forward(x, w, stride, padding):
    return _impl.conv2d_forward(x, w, stride, padding)


def conv2d_grad_input(gy, w, x_shape, stride, padding):
    return _impl.conv2d_grad_input(gy, w, x_shape, stride, padding)


def conv2d_grad_weight(gy, x, w_shape, stride, padding):
    return _impl.conv2d_grad_weight(gy, x, w_shape, stride, padding)


def dwconv2d_forward(x, w, padding):
    return _impl.dwconv2d_forward(x, w, padding)


def dwconv2d_grad_input(gy, w, padding):
    return _impl.dwconv2d_grad_input(gy, w, padding)


def dwconv2d_grad_weight(gy, x, k, padding):
    return _impl.dwconv2d_grad_weight(gy, x, k, padding)
