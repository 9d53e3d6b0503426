"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps a float32 or float64 ndarray.  Operations (see ops.py) link
output tensors to their inputs; calling backward() on a scalar loss walks the
graph once in reverse topological order and accumulates gradients into every
tensor that requires them.  Tensors with requires_grad=False never receive a
gradient buffer, so fully frozen subgraphs cost nothing on the backward pass.
"""
from __future__ import annotations

import contextlib

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense array plus optional gradient and graph linkage.

    data          : numpy array, float32 or float64
    grad          : accumulated gradient (same shape/dtype as data) or None
    requires_grad : whether backward() should deliver a gradient here
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        """Propagate gradients from this scalar through the graph.

        Each reachable node is visited exactly once.  Gradients accumulate:
        repeated calls without zero_grad() sum their contributions.  If this
        tensor does not require grad (fully frozen graph) the call is a no-op
        and allocates nothing.
        """
        if self.data.size != 1:
            raise ValueError(
                "backward() requires a scalar tensor, got shape %r" % (self.shape,)
            )
        if not self.requires_grad:
            return

        # Post-order DFS restricted to the requires_grad subgraph.
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward_fn is None:
                continue
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"


def make_result(data: np.ndarray, parents, backward_fn) -> Tensor:
    """Build an op output: links the graph only when grads are enabled."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out
