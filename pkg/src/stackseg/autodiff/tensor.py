"""Dense float64 tensors that record a reverse-mode tape.

A tensor produced by an op keeps references to its parents and a closure that
pushes its gradient into them. ``backward`` orders the recorded graph
topologically and runs every closure exactly once, outputs first.
"""

from __future__ import annotations

import contextlib

import numpy as np


class NonFiniteValue(FloatingPointError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a tape (inference)."""
    global _GRAD_ENABLED
    previous, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = ()
        self._backward = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return float(self.data)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = topological_order(self)
        for node in order:
            if node._backward is not None and node.grad is None:
                node.grad = np.zeros_like(node.data)
        self.grad = self.grad + np.asarray(grad, dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
                # interior gradients are not needed once propagated
                node.grad = None

    # arithmetic sugar used by losses and tests
    def __add__(self, other):
        from .functional import add

        return add(self, other)

    def __mul__(self, other):
        from .functional import scale

        return scale(self, float(other))

    __rmul__ = __mul__


def topological_order(root: Tensor):
    """Nodes reachable from ``root``, each after all of its parents (iterative DFS)."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def make_result(data, parents, backward, op: str) -> Tensor:
    """Wrap an op output; the tape entry is only recorded when some parent needs gradients."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteValue(f"{op} produced non-finite values")
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=False, op=op)
    if needs:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def accumulate(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        np.add(t.grad, g, out=t.grad)
