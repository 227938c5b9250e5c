"""Minimal reverse-mode automatic differentiation over numpy float64 arrays.

Every loss in this package is built from the primitives below, so analytic
gradients come out of a single backward pass instead of per-loss hand
derivations. Graphs are built fresh per evaluation and reductions happen in
a fixed order, so results are bit-reproducible.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Node",
    "constant",
    "leaf",
    "backward",
    "matmul",
    "transpose",
    "nsum",
    "nmean",
    "exp",
    "log",
    "normalize_rows",
    "softmax_rows",
    "take_cols",
    "stop_grad",
    "DegenerateVectorError",
]


class DegenerateVectorError(ValueError):
    """Raised when a vector with (near-)zero norm reaches a normalization."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Node:
    """One value in the computation graph.

    ``links`` is a tuple of ``(parent, vjp)`` pairs where ``vjp`` maps the
    incoming gradient to this node's contribution to ``parent``.
    """

    __slots__ = ("value", "grad", "links")

    def __init__(self, value, links=()):
        self.value = _as_array(value)
        self.grad = None
        self.links = links

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    # elementwise operators (scalars and arrays auto-wrapped as constants)
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def constant(value) -> Node:
    return Node(value)


def leaf(value) -> Node:
    """A parameter node; identical to constant but named for intent."""
    return Node(value)


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Node, b: Node) -> Node:
    return Node(
        a.value + b.value,
        (
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(g, b.value.shape)),
        ),
    )


def sub(a: Node, b: Node) -> Node:
    return Node(
        a.value - b.value,
        (
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(-g, b.value.shape)),
        ),
    )


def mul(a: Node, b: Node) -> Node:
    return Node(
        a.value * b.value,
        (
            (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
        ),
    )


def div(a: Node, b: Node) -> Node:
    return Node(
        a.value / b.value,
        (
            (a, lambda g: _unbroadcast(g / b.value, a.value.shape)),
            (b, lambda g: _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape)),
        ),
    )


def matmul(a: Node, b: Node) -> Node:
    return Node(
        a.value @ b.value,
        (
            (a, lambda g: g @ b.value.T),
            (b, lambda g: a.value.T @ g),
        ),
    )


def transpose(a: Node) -> Node:
    return Node(a.value.T, ((a, lambda g: g.T),))


def nsum(a: Node, axis=None, keepdims: bool = False) -> Node:
    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.value.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.value.shape).copy()

    return Node(a.value.sum(axis=axis, keepdims=keepdims), ((a, vjp),))


def nmean(a: Node, axis=None, keepdims: bool = False) -> Node:
    n = a.value.size if axis is None else a.value.shape[axis]
    return nsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return Node(out, ((a, lambda g: g * out),))


def log(a: Node) -> Node:
    return Node(np.log(a.value), ((a, lambda g: g / a.value),))


def normalize_rows(a: Node, min_norm: float = 1e-12) -> Node:
    """Project each row onto the unit sphere; errors on degenerate rows.

    Backward uses the exact Jacobian (I - y y^T) / ||x|| per row.
    """
    x = np.atleast_2d(a.value)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms < min_norm):
        raise DegenerateVectorError("cannot normalize a (near-)zero vector")
    y = x / norms
    squeeze = a.value.ndim == 1

    def vjp(g):
        gg = np.atleast_2d(g)
        gx = (gg - (gg * y).sum(axis=1, keepdims=True) * y) / norms
        return gx[0] if squeeze else gx

    return Node(y[0] if squeeze else y, ((a, vjp),))


def softmax_rows(a: Node, axis: int = -1) -> Node:
    """Numerically stable softmax along ``axis``."""
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return s * (g - (g * s).sum(axis=axis, keepdims=True))

    return Node(s, ((a, vjp),))


def take_cols(a: Node, start: int, stop: int) -> Node:
    """Column slice [start, stop) of a 2-D node."""

    def vjp(g):
        full = np.zeros_like(a.value)
        full[:, start:stop] = g
        return full

    return Node(a.value[:, start:stop], ((a, vjp),))


def stop_grad(a: Node) -> Node:
    return Node(a.value.copy())


def backward(root: Node) -> None:
    """Accumulate gradients of a scalar ``root`` into every ancestor node."""
    if root.value.size != 1:
        raise ValueError("backward requires a scalar root")
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.links:
            stack.append((parent, False))
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.grad is None:
            continue
        for parent, vjp in node.links:
            contribution = vjp(node.grad)
            if parent.grad is None:
                parent.grad = np.array(contribution, dtype=np.float64, copy=True)
            else:
                parent.grad += contribution
