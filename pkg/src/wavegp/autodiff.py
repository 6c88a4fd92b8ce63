"""Reverse-mode automatic differentiation plus order-2 forward jets.

The reverse engine records primitive operations on an explicit tape as
they execute.  Tape variables (`Var`) hold float64 numpy arrays; ops are
array-valued primitives (affine/matmul, sine, product, sum, reciprocal,
exponential, log, ...) so a Gram-matrix computation costs a handful of
nodes rather than one node per scalar.  `backward` walks the node list
in reverse topological order exactly once and returns gradients for a
requested parameter list; parameters the output never referenced get
exact zeros.

`Jet2` carries (value, first, second directional derivative) through
the same primitives with truncated Taylor arithmetic.  Its components
may be plain arrays or `Var`s, so propagating a jet under an active
tape yields input-derivative quantities whose parameter gradients come
out of the ordinary backward pass (forward-over-reverse).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

Array = np.ndarray


class CycleDetected(Exception):
    """A tape node consumes a value produced by a later node."""


class NonFiniteGradient(Exception):
    """A gradient came back NaN or infinite."""


_TAPE_STACK: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Var:
    """A float64 array on the tape.

    Arithmetic operators delegate to the module-level primitives, which
    accept any mix of `Var` and array-like operands and record a node
    when a tape is active.
    """

    __slots__ = ("value", "tape_index")
    __array_ufunc__ = None  # force numpy to defer binary ops to Var.__r*__

    def __init__(self, value: Any):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape_index: int | None = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def T(self) -> "Var":
        return transpose(self)

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)


@dataclass
class Node:
    op: str
    inputs: tuple
    out: Var
    vjp: Callable[[Array], tuple]
    recompute: Callable[[], Array] | None = None


class Tape:
    """Append-only list of nodes in execution order.

    Used as a context manager; the innermost active tape receives new
    nodes.  Dropping the tape releases every node and intermediate
    value, so per-step memory is reclaimed by ordinary refcounting.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self) -> bool:
        """Re-execute every recorded op from its inputs.

        Returns True iff every node reproduces its recorded output
        exactly (bit-for-bit).  Nothing on the tape is mutated.
        """
        for node in self.nodes:
            if node.recompute is None:
                continue
            if not np.array_equal(node.recompute(), node.out.value):
                return False
        return True

    def check_topology(self) -> None:
        """Raise CycleDetected if any node consumes a later value."""
        for k, node in enumerate(self.nodes):
            for v in node.inputs:
                if isinstance(v, Var) and v.tape_index is not None and v.tape_index >= k:
                    raise CycleDetected(
                        f"node {k} ({node.op}) consumes the output of node {v.tape_index}"
                    )


def value_of(x: Any) -> Array:
    """Underlying float64 array of a Var or array-like."""
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def record(op: str, out_value: Array, inputs: Sequence, vjp: Callable,
           recompute: Callable[[], Array] | None = None) -> Var:
    """Wrap `out_value` in a Var and append a node to the active tape.

    Public so other modules can register primitives with custom
    adjoints (the PSD solve/logdet live in linalg).  With no active
    tape the Var is returned unrecorded; downstream ops still work,
    there is just nothing to differentiate.
    """
    out = Var(out_value)
    tape = active_tape()
    if tape is not None:
        out.tape_index = len(tape.nodes)
        tape.nodes.append(Node(op, tuple(inputs), out, vjp, recompute))
    return out


def backward(out: Var, wrt: Sequence[Var], tape: Tape | None = None) -> list[Array]:
    """Gradients of the scalar `out` w.r.t. each Var in `wrt`.

    Visits each node at most once, in reverse topological (= reverse
    execution) order.  Parameters that do not influence `out` receive
    exact zero arrays of their shape.
    """
    if tape is None:
        tape = active_tape()
    if tape is None:
        raise ValueError("backward requires a tape")
    if not isinstance(out, Var):
        raise TypeError("backward expects a Var output")
    if out.value.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {out.value.shape}")
    tape.check_topology()

    adjoint: dict[int, Array] = {id(out): np.ones_like(out.value)}
    if out.tape_index is not None:
        for node in reversed(tape.nodes[: out.tape_index + 1]):
            g = adjoint.get(id(node.out))
            if g is None:
                continue
            for v, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not isinstance(v, Var):
                    continue
                acc = adjoint.get(id(v))
                adjoint[id(v)] = gi if acc is None else acc + gi
    return [adjoint.get(id(v), np.zeros_like(v.value)) for v in wrt]


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Sum `g` back down to `shape` after numpy broadcasting."""
    g = np.asarray(g, dtype=np.float64)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _any_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


# ---------------------------------------------------------------- primitives

def add(a, b):
    if not _any_var(a, b):
        return np.asarray(a, dtype=np.float64) + np.asarray(b, dtype=np.float64)
    av, bv = value_of(a), value_of(b)
    vjp = lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape))
    return record("add", av + bv, (a, b), vjp, lambda: value_of(a) + value_of(b))


def sub(a, b):
    if not _any_var(a, b):
        return np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    av, bv = value_of(a), value_of(b)
    vjp = lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape))
    return record("sub", av - bv, (a, b), vjp, lambda: value_of(a) - value_of(b))


def mul(a, b):
    if not _any_var(a, b):
        return np.asarray(a, dtype=np.float64) * np.asarray(b, dtype=np.float64)
    av, bv = value_of(a), value_of(b)
    vjp = lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    return record("mul", av * bv, (a, b), vjp, lambda: value_of(a) * value_of(b))


def div(a, b):
    if not _any_var(a, b):
        return np.asarray(a, dtype=np.float64) / np.asarray(b, dtype=np.float64)
    av, bv = value_of(a), value_of(b)

    def vjp(g):
        return (_unbroadcast(g / bv, av.shape),
                _unbroadcast(-g * av / (bv * bv), bv.shape))

    return record("div", av / bv, (a, b), vjp, lambda: value_of(a) / value_of(b))


def neg(a):
    if not _any_var(a):
        return -np.asarray(a, dtype=np.float64)
    av = value_of(a)
    return record("neg", -av, (a,), lambda g: (-g,), lambda: -value_of(a))


def reciprocal(a):
    if not _any_var(a):
        return 1.0 / np.asarray(a, dtype=np.float64)
    av = value_of(a)
    out = 1.0 / av
    return record("reciprocal", out, (a,), lambda g: (-g * out * out,),
                  lambda: 1.0 / value_of(a))


def power(a, p: float):
    """Elementwise a**p for a constant exponent p."""
    if isinstance(p, Var):
        raise TypeError("power exponent must be a constant")
    if not _any_var(a):
        return np.asarray(a, dtype=np.float64) ** p
    av = value_of(a)
    vjp = lambda g: (g * p * av ** (p - 1.0),)
    return record("power", av ** p, (a,), vjp, lambda: value_of(a) ** p)


def exp(a):
    if not _any_var(a):
        return np.exp(np.asarray(a, dtype=np.float64))
    out_val = np.exp(value_of(a))
    return record("exp", out_val, (a,), lambda g: (g * out_val,),
                  lambda: np.exp(value_of(a)))


def log(a):
    if not _any_var(a):
        return np.log(np.asarray(a, dtype=np.float64))
    av = value_of(a)
    return record("log", np.log(av), (a,), lambda g: (g / av,),
                  lambda: np.log(value_of(a)))


def sin(a):
    if not _any_var(a):
        return np.sin(np.asarray(a, dtype=np.float64))
    av = value_of(a)
    return record("sin", np.sin(av), (a,), lambda g: (g * np.cos(av),),
                  lambda: np.sin(value_of(a)))


def cos(a):
    if not _any_var(a):
        return np.cos(np.asarray(a, dtype=np.float64))
    av = value_of(a)
    return record("cos", np.cos(av), (a,), lambda g: (-g * np.sin(av),),
                  lambda: np.cos(value_of(a)))


def sqrt(a):
    if not _any_var(a):
        return np.sqrt(np.asarray(a, dtype=np.float64))
    out_val = np.sqrt(value_of(a))
    return record("sqrt", out_val, (a,), lambda g: (g * 0.5 / out_val,),
                  lambda: np.sqrt(value_of(a)))


def matmul(a, b):
    """2-D matrix product; the affine-map primitive."""
    if not _any_var(a, b):
        return np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64)
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {av.shape} @ {bv.shape}")

    def vjp(g):
        return (g @ bv.T, av.T @ g)

    return record("matmul", av @ bv, (a, b), vjp,
                  lambda: value_of(a) @ value_of(b))


def transpose(a):
    if not _any_var(a):
        return np.asarray(a, dtype=np.float64).T
    av = value_of(a)
    return record("transpose", av.T.copy(), (a,), lambda g: (g.T,),
                  lambda: value_of(a).T)


def reshape(a, shape):
    if not _any_var(a):
        return np.asarray(a, dtype=np.float64).reshape(shape)
    av = value_of(a)
    vjp = lambda g: (g.reshape(av.shape),)
    return record("reshape", av.reshape(shape), (a,), vjp,
                  lambda: value_of(a).reshape(shape))


def sum(a, axis=None, keepdims: bool = False):  # noqa: A001 - mirrors numpy
    if not _any_var(a):
        return np.sum(np.asarray(a, dtype=np.float64), axis=axis, keepdims=keepdims)
    av = value_of(a)
    out_val = np.sum(av, axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return record("sum", out_val, (a,), vjp,
                  lambda: np.sum(value_of(a), axis=axis, keepdims=keepdims))


# ------------------------------------------------------------------- jets

@dataclass
class Jet2:
    """Order-2 jet: value, first and second derivative along one input
    direction.  Components may be floats, arrays, or tape Vars."""

    v: Any
    d1: Any
    d2: Any

    def __add__(self, o):
        if isinstance(o, Jet2):
            return Jet2(add(self.v, o.v), add(self.d1, o.d1), add(self.d2, o.d2))
        return Jet2(add(self.v, o), self.d1, self.d2)

    __radd__ = __add__

    def __sub__(self, o):
        if isinstance(o, Jet2):
            return Jet2(sub(self.v, o.v), sub(self.d1, o.d1), sub(self.d2, o.d2))
        return Jet2(sub(self.v, o), self.d1, self.d2)

    def __mul__(self, o):
        if isinstance(o, Jet2):
            # (ab)' = a'b + ab', (ab)'' = a''b + 2a'b' + ab''
            return Jet2(
                mul(self.v, o.v),
                add(mul(self.d1, o.v), mul(self.v, o.d1)),
                add(add(mul(self.d2, o.v), mul(2.0, mul(self.d1, o.d1))),
                    mul(self.v, o.d2)),
            )
        return Jet2(mul(self.v, o), mul(self.d1, o), mul(self.d2, o))

    __rmul__ = __mul__

    def __neg__(self):
        return Jet2(neg(self.v), neg(self.d1), neg(self.d2))


def jet_sin(j: Jet2) -> Jet2:
    c, s = cos(j.v), sin(j.v)
    return Jet2(s, mul(c, j.d1),
                sub(mul(c, j.d2), mul(s, mul(j.d1, j.d1))))


def jet_cos(j: Jet2) -> Jet2:
    c, s = cos(j.v), sin(j.v)
    return Jet2(c, mul(neg(s), j.d1),
                sub(mul(neg(s), j.d2), mul(c, mul(j.d1, j.d1))))


def jet_exp(j: Jet2) -> Jet2:
    e = exp(j.v)
    return Jet2(e, mul(e, j.d1), mul(e, add(j.d2, mul(j.d1, j.d1))))


def jet_log(j: Jet2) -> Jet2:
    inv = reciprocal(j.v)
    return Jet2(log(j.v), mul(inv, j.d1),
                sub(mul(inv, j.d2), mul(mul(inv, inv), mul(j.d1, j.d1))))


def jet_reciprocal(j: Jet2) -> Jet2:
    inv = reciprocal(j.v)
    inv2 = mul(inv, inv)
    return Jet2(inv, mul(neg(inv2), j.d1),
                add(mul(neg(inv2), j.d2),
                    mul(2.0, mul(mul(inv2, inv), mul(j.d1, j.d1)))))


def jet_matmul(j: Jet2, w) -> Jet2:
    """Right-multiply each channel by a constant-in-x matrix (the
    linear part of an affine layer)."""
    return Jet2(matmul(j.v, w), matmul(j.d1, w), matmul(j.d2, w))


def jet_affine(j: Jet2, w, b) -> Jet2:
    """x -> x @ w + b; the bias touches only the value channel."""
    lin = jet_matmul(j, w)
    return Jet2(add(lin.v, b), lin.d1, lin.d2)


def jet_sum(*jets: Jet2) -> Jet2:
    out = jets[0]
    for j in jets[1:]:
        out = out + j
    return out


_JET_UNARY = {
    "sin": jet_sin,
    "cos": jet_cos,
    "exp": jet_exp,
    "log": jet_log,
    "reciprocal": jet_reciprocal,
    "neg": lambda j: -j,
}


def jet_propagate(op: str, *args) -> Jet2:
    """Apply one primitive to jets by name.

    Unary: sin, cos, exp, log, reciprocal, neg.  Binary/n-ary:
    product, sum.  Affine: jet_propagate("affine", j, W, b).
    """
    if op in _JET_UNARY:
        (j,) = args
        return _JET_UNARY[op](j)
    if op == "product":
        out = args[0]
        for j in args[1:]:
            out = out * j
        return out
    if op == "sum":
        return jet_sum(*args)
    if op == "affine":
        j, w, b = args
        return jet_affine(j, w, b)
    raise ValueError(f"unknown jet primitive: {op}")


# -------------------------------------------------------------- grad check

def grad_check(loss: Callable, params: list[Array], step: float) -> float:
    """Max relative disagreement between reverse-mode and central
    finite-difference gradients.

    `loss` must accept a list of parameter arrays (Vars during the
    analytic pass, plain ndarrays during the FD probes) and return a
    scalar.  Relative error per entry is
    |analytic - fd| / max(|analytic|, |fd|, 1e-12).
    """
    with Tape() as tape:
        pvars = [Var(p) for p in params]
        out = loss(pvars)
        grads = backward(out, pvars, tape)

    worst = 0.0
    for k, p in enumerate(params):
        gflat = grads[k].reshape(-1)
        for i in range(p.size):
            idx = np.unravel_index(i, p.shape)
            orig = p[idx]
            p[idx] = orig + step
            f_plus = float(value_of(loss(params)))
            p[idx] = orig - step
            f_minus = float(value_of(loss(params)))
            p[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            an = float(gflat[i])
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-12)
            worst = max(worst, rel)
    return worst
