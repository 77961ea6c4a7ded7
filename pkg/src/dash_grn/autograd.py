"""Tape-based reverse-mode differentiation over numpy arrays.

Every primitive accepts either plain arrays or :class:`Node` objects. With no
``Node`` among the operands the primitive simply evaluates with numpy, so model
and integrator code is written once and used both for fast evaluation and for
training.

    tape = Tape()
    w = tape.variable(np.ones((2, 3)), name="w")
    loss = sum_all(w * w) * 0.5
    grads = grad(loss, {"w": w})   # -> {"w": array equal to w}
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .errors import ContractError, ShapeError


class Node:
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("value", "parents", "vjp", "index", "tape", "op")
    __array_ufunc__ = None  # make ndarray <op> Node defer to Node

    def __init__(self, tape, value, parents, vjp, op):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.index = len(tape.nodes)

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def T(self):
        return transpose(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape})"


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended in evaluation order, which is a topological order of the
    computation graph; the backward pass walks the list in reverse.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def variable(self, value, name: str = "var") -> Node:
        node = Node(self, np.array(value, dtype=np.float64), (), None, name)
        self.nodes.append(node)
        return node

    def record(self, value, parents, vjp, op) -> Node:
        node = Node(self, value, parents, vjp, op)
        self.nodes.append(node)
        return node

    def backward(self, loss: Node) -> list:
        """Return per-node adjoints (``None`` where the loss does not depend on it)."""
        if not isinstance(loss, Node) or loss.tape is not self:
            raise ContractError("loss must be a node recorded on this tape")
        if np.size(loss.value) != 1:
            raise ContractError(f"loss must be scalar, got shape {np.shape(loss.value)}")
        adj: list = [None] * (loss.index + 1)
        adj[loss.index] = np.ones_like(loss.value)
        nodes = self.nodes
        for i in range(loss.index, -1, -1):
            g = adj[i]
            if g is None:
                continue
            node = nodes[i]
            if node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if parent is None or pg is None:
                    continue
                j = parent.index
                adj[j] = pg if adj[j] is None else adj[j] + pg
        return adj


def grad(loss: Node, params: Mapping[str, Node]) -> dict[str, np.ndarray]:
    """Gradient of scalar ``loss`` with respect to each named leaf in ``params``."""
    adj = loss.tape.backward(loss)
    out = {}
    for name, node in params.items():
        g = adj[node.index] if node.index < len(adj) else None
        out[name] = np.zeros_like(node.value) if g is None else np.asarray(g, dtype=np.float64).reshape(node.shape)
    return out


def value(x):
    return x.value if isinstance(x, Node) else x


def _tape(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    return None


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if np.shape(g) == tuple(shape):
        return g
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# -- binary primitives -----------------------------------------------------


def add(a, b):
    tape = _tape(a, b)
    av, bv = value(a), value(b)
    out = np.add(av, bv)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return tape.record(out, (_leaf(a), _leaf(b)), vjp, "add")


def sub(a, b):
    tape = _tape(a, b)
    av, bv = value(a), value(b)
    out = np.subtract(av, bv)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return tape.record(out, (_leaf(a), _leaf(b)), vjp, "sub")


def mul(a, b):
    tape = _tape(a, b)
    av, bv = value(a), value(b)
    out = np.multiply(av, bv)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    need_a, need_b = isinstance(a, Node), isinstance(b, Node)

    def vjp(g):
        ga = _unbroadcast(g * bv, sa) if need_a else None
        gb = _unbroadcast(g * av, sb) if need_b else None
        return ga, gb

    return tape.record(out, (_leaf(a), _leaf(b)), vjp, "mul")


def matmul(a, b):
    tape = _tape(a, b)
    av, bv = value(a), value(b)
    if np.ndim(av) != 2 or np.ndim(bv) != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"cannot multiply shapes {np.shape(av)} and {np.shape(bv)}")
    out = av @ bv
    if tape is None:
        return out
    need_a, need_b = isinstance(a, Node), isinstance(b, Node)

    def vjp(g):
        return (g @ bv.T if need_a else None), (av.T @ g if need_b else None)

    return tape.record(out, (_leaf(a), _leaf(b)), vjp, "matmul")


def _leaf(x):
    return x if isinstance(x, Node) else None


# -- structural --------------------------------------------------------------


def transpose(x):
    if not isinstance(x, Node):
        return np.transpose(x)
    return x.tape.record(x.value.T, (x,), lambda g: (g.T,), "transpose")


def sum_all(x):
    if not isinstance(x, Node):
        return np.sum(x)
    shape = x.shape
    return x.tape.record(np.sum(x.value), (x,), lambda g: (np.broadcast_to(g, shape),), "sum")


def mean_all(x):
    if not isinstance(x, Node):
        return np.mean(x)
    shape = x.shape
    n = float(np.size(x.value))
    return x.tape.record(np.mean(x.value), (x,), lambda g: (np.broadcast_to(g / n, shape),), "mean")


# -- elementwise unary ---------------------------------------------------------


def _unary(x, fwd: Callable, dfwd: Callable, op: str):
    if not isinstance(x, Node):
        return fwd(np.asarray(x, dtype=np.float64))
    v = fwd(x.value)
    d = dfwd(x.value, v)
    return x.tape.record(v, (x,), lambda g: (g * d,), op)


def absolute(x):
    return _unary(x, np.abs, lambda xv, v: np.sign(xv), "abs")


def exp(x):
    return _unary(x, np.exp, lambda xv, v: v, "exp")


def log(x):
    return _unary(x, np.log, lambda xv, v: 1.0 / xv, "log")


def reciprocal(x):
    return _unary(x, lambda xv: 1.0 / xv, lambda xv, v: -v * v, "reciprocal")


def square(x):
    return _unary(x, np.square, lambda xv, v: 2.0 * xv, "square")


def relu(x):
    return _unary(x, lambda xv: np.maximum(xv, 0.0), lambda xv, v: (xv > 0).astype(np.float64), "relu")


def elu(x):
    return _unary(x, _elu, lambda xv, v: np.where(xv > 0, 1.0, v + 1.0), "elu")


def _elu(xv):
    return np.where(xv > 0, xv, np.expm1(np.minimum(xv, 0.0)))


def _hill_sigma(xv):
    u = xv - 0.5
    return u / (1.0 + np.abs(u))


def _d_hill_sigma(xv, v=None):
    d = 1.0 + np.abs(xv - 0.5)
    return 1.0 / (d * d)


def _hill_pi(xv):
    return np.log1p(_hill_sigma(xv))


def _d_hill_pi(xv, v=None):
    u = xv - 0.5
    a = 1.0 + np.abs(u)
    return 1.0 / (a * (a + u))


def hill_sigma(x):
    """(x - 0.5) / (1 + |x - 0.5|), odd about 0.5 with range (-1, 1)."""
    return _unary(x, _hill_sigma, _d_hill_sigma, "hill_sigma")


def hill_pi(x):
    """log(hill_sigma(x) + 1)."""
    return _unary(x, _hill_pi, _d_hill_pi, "hill_pi")
