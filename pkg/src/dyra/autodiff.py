"""Scalar reverse-mode automatic differentiation and a central-difference checker.

A :class:`Tape` stores nodes in creation order, so parents always precede
children and ``backward`` is a single reverse sweep. :class:`Node` is a thin
handle with arithmetic operators; the module-level functions (``log``,
``sigmoid``, ...) accept plain floats too, which lets one function body serve
both the tape and finite-difference probes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import DomainError


class TapeDomainError(DomainError):
    def __init__(self, message, node_index):
        super().__init__(f"{message} (node {node_index})")
        self.node_index = node_index


class Tape:
    def __init__(self):
        self.values: list[float] = []
        self.ops: list[str] = []
        self.parents: list[tuple] = []
        self.partials: list[tuple] = []

    def __len__(self):
        return len(self.values)

    def _push(self, op, value, parents=(), partials=()):
        self.values.append(value)
        self.ops.append(op)
        self.parents.append(parents)
        self.partials.append(partials)
        return Node(self, len(self.values) - 1)

    def var(self, value) -> "Node":
        return self._push("var", float(value))

    def vars(self, values) -> list["Node"]:
        return [self.var(v) for v in values]

    def _lift(self, x):
        if isinstance(x, Node):
            if x.tape is not self:
                raise ValueError("operand belongs to another tape")
            return x
        return self._push("const", float(x))

    def record(self, op, *operands, const=None) -> "Node":
        """Append ``op`` applied to ``operands``; ``const`` is the constant of pow/max/min."""
        xs = [self._lift(o) for o in operands]
        idx = [x.index for x in xs]
        v = [self.values[i] for i in idx]
        n = len(self.values)
        if op == "add":
            return self._push(op, v[0] + v[1], tuple(idx), (1.0, 1.0))
        if op == "sub":
            return self._push(op, v[0] - v[1], tuple(idx), (1.0, -1.0))
        if op == "mul":
            return self._push(op, v[0] * v[1], tuple(idx), (v[1], v[0]))
        if op == "div":
            if v[1] == 0.0:
                raise TapeDomainError("division by zero", n)
            return self._push(op, v[0] / v[1], tuple(idx), (1.0 / v[1], -v[0] / (v[1] * v[1])))
        if op == "neg":
            return self._push(op, -v[0], tuple(idx), (-1.0,))
        if op == "exp":
            e = math.exp(v[0])
            return self._push(op, e, tuple(idx), (e,))
        if op == "log":
            if v[0] <= 0.0:
                raise TapeDomainError(f"log of non-positive value {v[0]}", n)
            return self._push(op, math.log(v[0]), tuple(idx), (1.0 / v[0],))
        if op == "pow_const":
            c = float(const)
            if v[0] <= 0.0 and not float(c).is_integer():
                raise TapeDomainError("fractional power of non-positive value", n)
            return self._push(op, v[0] ** c, tuple(idx), (c * v[0] ** (c - 1.0),))
        if op == "sigmoid":
            if v[0] >= 0:
                s = 1.0 / (1.0 + math.exp(-v[0]))
            else:
                e = math.exp(v[0])
                s = e / (1.0 + e)
            return self._push(op, s, tuple(idx), (s * (1.0 - s),))
        if op == "tanh":
            t = math.tanh(v[0])
            return self._push(op, t, tuple(idx), (1.0 - t * t,))
        if op == "cos":
            return self._push(op, math.cos(v[0]), tuple(idx), (-math.sin(v[0]),))
        if op == "abs":
            # subgradient +1 at zero
            return self._push(op, abs(v[0]), tuple(idx), (1.0 if v[0] >= 0 else -1.0,))
        if op == "max_const":
            c = float(const)
            return self._push(op, max(v[0], c), tuple(idx), (1.0 if v[0] >= c else 0.0,))
        if op == "min_const":
            c = float(const)
            return self._push(op, min(v[0], c), tuple(idx), (1.0 if v[0] <= c else 0.0,))
        if op == "sum":
            return self._push(op, math.fsum(v), tuple(idx), (1.0,) * len(idx))
        if op == "mean":
            if not idx:
                raise TapeDomainError("mean of empty sequence", n)
            k = len(idx)
            return self._push(op, math.fsum(v) / k, tuple(idx), (1.0 / k,) * k)
        raise ValueError(f"unknown op {op!r}")

    def backward(self, root: "Node") -> list[float]:
        """Adjoint of ``root`` with respect to every node, indexed by node position."""
        adj = [0.0] * (root.index + 1)
        adj[root.index] = 1.0
        parents, partials = self.parents, self.partials
        for i in range(root.index, -1, -1):
            a = adj[i]
            if a == 0.0:
                continue
            for p, d in zip(parents[i], partials[i]):
                adj[p] += a * d
        return adj + [0.0] * (len(self.values) - len(adj))


class Node:
    __slots__ = ("tape", "index")

    def __init__(self, tape, index):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> float:
        return self.tape.values[self.index]

    def __repr__(self):
        return f"Node({self.index}, {self.value!r})"

    def __add__(self, o):
        return self.tape.record("add", self, o)

    def __radd__(self, o):
        return self.tape.record("add", o, self)

    def __sub__(self, o):
        return self.tape.record("sub", self, o)

    def __rsub__(self, o):
        return self.tape.record("sub", o, self)

    def __mul__(self, o):
        return self.tape.record("mul", self, o)

    def __rmul__(self, o):
        return self.tape.record("mul", o, self)

    def __truediv__(self, o):
        return self.tape.record("div", self, o)

    def __rtruediv__(self, o):
        return self.tape.record("div", o, self)

    def __neg__(self):
        return self.tape.record("neg", self)

    def __pow__(self, c):
        return self.tape.record("pow_const", self, const=c)

    def __abs__(self):
        return self.tape.record("abs", self)

    # comparisons act on values; used for branch selection only
    def __lt__(self, o):
        return self.value < _val(o)

    def __le__(self, o):
        return self.value <= _val(o)

    def __gt__(self, o):
        return self.value > _val(o)

    def __ge__(self, o):
        return self.value >= _val(o)

    def __float__(self):
        return self.value


def _val(x):
    return x.value if isinstance(x, Node) else float(x)


def value(x) -> float:
    return _val(x)


def _find_tape(xs):
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    return None


def _unary(op, fn):
    def f(x):
        if isinstance(x, Node):
            return x.tape.record(op, x)
        return fn(float(x))

    f.__name__ = op
    return f


def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _log(x):
    if x <= 0.0:
        raise DomainError(f"log of non-positive value {x}")
    return math.log(x)


exp = _unary("exp", math.exp)
log = _unary("log", _log)
sigmoid = _unary("sigmoid", _sigmoid)
tanh = _unary("tanh", math.tanh)
cos = _unary("cos", math.cos)


def maximum(x, c):
    """max(x, c) for a constant c; gradient goes to x on ties."""
    if isinstance(x, Node):
        return x.tape.record("max_const", x, const=c)
    return max(float(x), float(c))


def minimum(x, c):
    if isinstance(x, Node):
        return x.tape.record("min_const", x, const=c)
    return min(float(x), float(c))


def clip(x, lo, hi):
    return minimum(maximum(x, lo), hi)


def sum_(xs: Sequence):
    xs = list(xs)
    tape = _find_tape(xs)
    if tape is None:
        return math.fsum(float(x) for x in xs)
    return tape.record("sum", *xs)


def mean(xs: Sequence):
    xs = list(xs)
    if not xs:
        raise DomainError("mean of empty sequence")
    tape = _find_tape(xs)
    if tape is None:
        return math.fsum(float(x) for x in xs) / len(xs)
    return tape.record("mean", *xs)


def dot(a: Sequence, b: Sequence):
    return sum_(x * y for x, y in zip(a, b))


def matvec(w, x):
    """``w`` is a nested sequence (rows); ``x`` a sequence; returns a list."""
    return [dot(row, x) for row in w]


def grad(f: Callable, point) -> tuple[float, np.ndarray]:
    """Value and gradient of scalar ``f(list_of_nodes)`` at ``point`` via the tape."""
    tape = Tape()
    xs = tape.vars(np.asarray(point, dtype=np.float64).ravel())
    out = f(xs)
    if not isinstance(out, Node):
        # output does not depend on the inputs
        return float(out), np.zeros(len(xs))
    adj = tape.backward(out)
    return out.value, np.array([adj[x.index] for x in xs])


@dataclass
class GradReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tol: float = 1e-4
    names: list = field(default_factory=list)

    @property
    def failed(self) -> np.ndarray:
        return np.flatnonzero(self.rel_error > self.tol)

    @property
    def ok(self) -> bool:
        return self.failed.size == 0

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0

    def table(self) -> str:
        lines = [f"{'param':>12} {'analytic':>16} {'numeric':>16} {'rel_err':>10}"]
        for i, (a, n, r) in enumerate(zip(self.analytic, self.numeric, self.rel_error)):
            name = self.names[i] if i < len(self.names) else str(i)
            flag = "" if r <= self.tol else "  FAIL"
            lines.append(f"{name:>12} {a:16.9e} {n:16.9e} {r:10.2e}{flag}")
        return "\n".join(lines)


def relative_error(a, n):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(1e-12, np.abs(a) + np.abs(n))


def gradcheck(f: Callable, point, h: float = 1e-5, grad_fn: Callable | None = None,
              tol: float = 1e-4, names=None) -> GradReport:
    """Compare an analytic gradient against central differences.

    ``f`` maps a parameter vector to a scalar. Without ``grad_fn`` the analytic
    gradient comes from running ``f`` on tape nodes, so ``f`` must be written
    with this module's functions; with ``grad_fn`` it may be any numpy code.
    """
    p = np.asarray(point, dtype=np.float64).ravel().copy()
    if grad_fn is None:
        _, analytic = grad(lambda xs: f(xs), p)

        def evaluate(q):
            return float(_val(f([float(v) for v in q])))
    else:
        analytic = np.asarray(grad_fn(p), dtype=np.float64).ravel()

        def evaluate(q):
            return float(f(q))

    numeric = np.empty_like(p)
    for i in range(p.size):
        q = p.copy()
        q[i] = p[i] + h
        fp = evaluate(q)
        q[i] = p[i] - h
        fm = evaluate(q)
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise DomainError(f"non-finite function value probing coordinate {i}")
        numeric[i] = (fp - fm) / (2.0 * h)
    return GradReport(analytic, numeric, relative_error(analytic, numeric), tol, list(names or []))
