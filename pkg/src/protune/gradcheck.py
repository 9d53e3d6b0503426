"""Finite-difference verification of analytic gradients.

grad_check runs a function twice: once through the graph to collect analytic
gradients, then element by element with central differences.  Non-scalar
outputs are reduced with a fixed random projection so every output element
influences the check.  Use float64 tensors; at float32 the differences
drown in rounding noise.
"""
from __future__ import annotations

import numpy as np

from . import ops
from .autograd import Tensor, no_grad

__all__ = ["grad_check"]


def grad_check(
    f,
    *inputs: Tensor,
    eps: float = 1e-5,
    seed: int = 0,
    refine: tuple = (),
    tol: float = 1e-6,
) -> float:
    """Max relative error between analytic and numeric gradients.

    f is called as f(*inputs) and must return a Tensor.  All inputs are
    marked requires_grad and must be float64.  The perturbation loop mutates
    input data in place and restores it afterwards.

    Relative error per element: |a - n| / max(|a|, |n|, 1e-12).  A central
    difference resolves nothing finer than the rounding of the two loss
    evaluations it subtracts, so per element, |a - n| at or below
    guard * ulp(|loss|) / (2 * step) counts as zero error; any resolvable
    difference is held to the relative bar in full.

    refine lists alternative step sizes tried, in order, for any element
    whose error exceeds tol at the base step; the element keeps its best
    reading.  A step straddling a rectifier kink fails only at window
    sizes that contain the kink, while a genuinely wrong analytic gradient
    fails at every step size, so refinement removes step artifacts without
    loosening the check.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check requires float64 inputs")
        t.requires_grad = True
        t.zero_grad()

    out = f(*inputs)
    rng = np.random.default_rng(seed)
    # random signs with magnitudes in [0.5, 1.5]: every output element gets
    # a nonzero weight, and no weight is small enough to turn the finite-
    # difference noise floor into a large relative error
    proj = rng.uniform(0.5, 1.5, size=out.shape) * rng.choice([-1.0, 1.0], size=out.shape)

    def scalarize(o: Tensor) -> Tensor:
        return ops.tsum(ops.mul(o, Tensor(proj, dtype=np.float64)))

    projected = scalarize(out)
    loss_scale = max(abs(float(projected.data)), 1.0)
    projected.backward()
    analytic = []
    for t in inputs:
        if t.grad is None:
            raise AssertionError("input received no gradient")
        analytic.append(t.grad.copy())
        t.zero_grad()

    def eval_loss() -> float:
        with no_grad():
            return float((f(*inputs).data * proj).sum())

    def central(flat, i, step):
        orig = flat[i]
        flat[i] = orig + step
        lo_hi = eval_loss()
        flat[i] = orig - step
        lo_lo = eval_loss()
        flat[i] = orig
        return (lo_hi - lo_lo) / (2.0 * step)

    ulp = float(np.finfo(np.float64).eps)
    guard = 64.0

    def element_error(a_i, numeric, step):
        diff = abs(a_i - numeric)
        if diff <= guard * ulp * loss_scale / (2.0 * step):
            return 0.0
        return diff / max(abs(a_i), abs(numeric), 1e-12)

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            best = element_error(aflat[i], central(flat, i, eps), eps)
            for step in refine:
                if best <= tol:
                    break
                best = min(best, element_error(aflat[i], central(flat, i, step), step))
            worst = max(worst, best)
    return worst
