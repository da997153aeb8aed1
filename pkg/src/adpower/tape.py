"""Reverse-mode automatic differentiation on a flat operation tape.

Every arithmetic operation on an :class:`ADScalar` appends one record to its
:class:`Tape`. A record stores the forward value (one entry per lane) and the
local partial derivatives with respect to its (at most two) inputs, so the
backward sweep is a single reverse pass of multiply-accumulate steps.

Lanes are independent copies of the same program evaluated at different
inputs: one tape with ``lane_count = 8`` carries eight simulations at once.

Plain numbers (and lane-shaped numpy arrays) mixed into arithmetic are treated
as constants and folded into the partials instead of becoming nodes.
"""

from __future__ import annotations

import numbers
from dataclasses import dataclass

import numpy as np

__all__ = [
    "OP_KINDS",
    "ADScalar",
    "DomainError",
    "GradientSet",
    "Tape",
    "TapeMismatchError",
    "apply",
    "atan2",
    "backward",
    "clamp",
    "cos",
    "exp",
    "grad_of",
    "log",
    "maximum",
    "minimum",
    "sin",
    "sqrt",
    "tape_new",
    "tape_reset",
    "var",
]

OP_KINDS = (
    "const", "var", "add", "sub", "mul", "div", "neg", "exp", "ln", "abs",
    "pow_int", "min", "max", "clamp", "sin", "cos", "sqrt", "atan2",
)
_KIND_CODE = {k: i for i, k in enumerate(OP_KINDS)}


class DomainError(ValueError):
    """An operation was evaluated outside its domain in at least one lane."""

    def __init__(self, op: str, lane: int, value: float):
        super().__init__(f"{op}: argument {value!r} outside domain in lane {lane}")
        self.op = op
        self.lane = lane
        self.value = value


class TapeMismatchError(ValueError):
    """Operands live on different tapes (or with different lane counts)."""


def _first_bad_lane(mask: np.ndarray) -> int:
    return int(np.flatnonzero(mask)[0])


class Tape:
    """Append-only record of elementary operations.

    Node ``i`` may only reference nodes ``< i``; the backward sweep therefore
    needs no sorting.
    """

    def __init__(self, lane_count: int):
        if int(lane_count) != lane_count or lane_count < 1:
            raise ValueError(f"lane_count must be a positive integer, got {lane_count!r}")
        self.lane_count = int(lane_count)
        self._ones = np.ones(self.lane_count)
        self._neg_ones = -self._ones
        self._clear()

    def _clear(self) -> None:
        self.kinds: list[int] = []
        self.in_a: list[int] = []
        self.in_b: list[int] = []
        # None stands for a partial of exactly 1.
        self.d_a: list[np.ndarray | None] = []
        self.d_b: list[np.ndarray | None] = []
        self.values: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.values)

    def __repr__(self) -> str:
        return f"Tape(lane_count={self.lane_count}, nodes={len(self)})"

    def reset(self) -> "Tape":
        """Drop every node; the lane count is preserved."""
        self._clear()
        return self

    def lanes(self, values) -> np.ndarray:
        """Broadcast ``values`` to a float64 lane vector, checking its length."""
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim == 0:
            return np.full(self.lane_count, float(arr))
        if arr.shape != (self.lane_count,):
            raise ValueError(
                f"expected {self.lane_count} lane values, got shape {arr.shape}"
            )
        return arr.copy()

    def _push(self, kind: str, value, a=-1, da=None, b=-1, db=None) -> "ADScalar":
        idx = len(self.values)
        self.kinds.append(_KIND_CODE[kind])
        self.in_a.append(a)
        self.in_b.append(b)
        self.d_a.append(da)
        self.d_b.append(db)
        self.values.append(value)
        return ADScalar(self, idx, value)

    def var(self, values) -> "ADScalar":
        """Create a differentiable leaf.  Scalars broadcast to every lane."""
        return self._push("var", self.lanes(values))

    def const(self, values) -> "ADScalar":
        return self._push("const", self.lanes(values))

    def kind_of(self, index: int) -> str:
        return OP_KINDS[self.kinds[index]]

    def backward(self, loss: "ADScalar", seed=None) -> "GradientSet":
        """One reverse sweep from ``loss``; returns the adjoint of every node."""
        if loss.tape is not self:
            raise TapeMismatchError("loss is not recorded on this tape")
        n = loss.index + 1
        adj: list[np.ndarray | None] = [None] * len(self.values)
        adj[loss.index] = self._ones.copy() if seed is None else self.lanes(seed)
        in_a, in_b, d_a, d_b = self.in_a, self.in_b, self.d_a, self.d_b
        for i in range(n - 1, -1, -1):
            g = adj[i]
            if g is None:
                continue
            ia = in_a[i]
            if ia >= 0:
                d = d_a[i]
                c = g if d is None else g * d
                prev = adj[ia]
                adj[ia] = c if prev is None else prev + c
                ib = in_b[i]
                if ib >= 0:
                    d = d_b[i]
                    c = g if d is None else g * d
                    prev = adj[ib]
                    adj[ib] = c if prev is None else prev + c
        return GradientSet(self, adj)


@dataclass
class GradientSet:
    """Adjoints ``dL/d(node)`` per lane after one backward sweep."""

    tape: Tape
    adjoints: list

    def __getitem__(self, x: "ADScalar | int") -> np.ndarray:
        idx = x.index if isinstance(x, ADScalar) else int(x)
        if isinstance(x, ADScalar) and x.tape is not self.tape:
            raise TapeMismatchError("node belongs to another tape")
        g = self.adjoints[idx] if idx < len(self.adjoints) else None
        return np.zeros(self.tape.lane_count) if g is None else g.copy()


class ADScalar:
    """A tape-recorded real scalar carrying one value per lane."""

    __slots__ = ("tape", "index", "value")
    __array_ufunc__ = None  # numpy arrays defer to our reflected operators

    def __init__(self, tape: Tape, index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    def __repr__(self) -> str:
        return f"ADScalar(node={self.index}, value={self.value})"

    def __float__(self) -> float:
        if self.tape.lane_count != 1:
            raise TypeError("float() of a multi-lane ADScalar")
        return float(self.value[0])

    # operand handling
    def _other(self, other):
        """Return (is_node, payload) where payload is an ADScalar or a lane array."""
        if isinstance(other, ADScalar):
            if other.tape is not self.tape:
                raise TapeMismatchError("operands are recorded on different tapes")
            return True, other
        if isinstance(other, numbers.Real):
            return False, float(other)
        arr = np.asarray(other, dtype=np.float64)
        if arr.ndim and arr.shape != (self.tape.lane_count,):
            raise TapeMismatchError(f"constant of shape {arr.shape} does not match lanes")
        return False, arr

    def _lane_const(self, c) -> np.ndarray:
        return np.full(self.tape.lane_count, c) if isinstance(c, float) else c

    def __add__(self, other):
        node, o = self._other(other)
        t = self.tape
        if node:
            return t._push("add", self.value + o.value, self.index, None, o.index, None)
        return t._push("add", self.value + o, self.index, None)

    __radd__ = __add__

    def __sub__(self, other):
        node, o = self._other(other)
        t = self.tape
        if node:
            return t._push("sub", self.value - o.value, self.index, None, o.index, t._neg_ones)
        return t._push("sub", self.value - o, self.index, None)

    def __rsub__(self, other):
        _, o = self._other(other)
        return self.tape._push("sub", o - self.value, self.index, self.tape._neg_ones)

    def __mul__(self, other):
        node, o = self._other(other)
        t = self.tape
        if node:
            return t._push("mul", self.value * o.value, self.index, o.value, o.index, self.value)
        return t._push("mul", self.value * o, self.index, o)

    __rmul__ = __mul__

    def __truediv__(self, other):
        node, o = self._other(other)
        t = self.tape
        if node:
            den = o.value
            if not den.all():
                raise DomainError("div", _first_bad_lane(den == 0), 0.0)
            inv = 1.0 / den
            val = self.value * inv
            return t._push("div", val, self.index, inv, o.index, -val * inv)
        if not np.all(o):
            raise DomainError("div", _first_bad_lane(np.atleast_1d(o) == 0), 0.0)
        inv = 1.0 / o
        return t._push("mul", self.value * inv, self.index, inv)

    def __rtruediv__(self, other):
        _, o = self._other(other)
        den = self.value
        if not den.all():
            raise DomainError("div", _first_bad_lane(den == 0), 0.0)
        inv = 1.0 / den
        val = o * inv
        return self.tape._push("div", val, self.index, -val * inv)

    def __neg__(self):
        return self.tape._push("neg", -self.value, self.index, self.tape._neg_ones)

    def __pos__(self):
        return self

    def __pow__(self, n):
        if isinstance(n, bool) or not isinstance(n, numbers.Integral):
            raise TypeError("only integer powers are supported")
        n = int(n)
        x = self.value
        if n < 0 and not x.all():
            raise DomainError("pow_int", _first_bad_lane(x == 0), 0.0)
        if n == 0:
            return self.tape._push("pow_int", np.ones_like(x), self.index, np.zeros_like(x))
        return self.tape._push("pow_int", x**n, self.index, n * x ** (n - 1))

    def __abs__(self):
        return self.tape._push("abs", np.abs(self.value), self.index, np.sign(self.value))

    # unary helpers, also exposed as module functions
    def exp(self):
        v = np.exp(self.value)
        return self.tape._push("exp", v, self.index, v)

    def log(self):
        x = self.value
        if (x <= 0).any():
            lane = _first_bad_lane(x <= 0)
            raise DomainError("ln", lane, float(x[lane]))
        return self.tape._push("ln", np.log(x), self.index, 1.0 / x)

    def sin(self):
        return self.tape._push("sin", np.sin(self.value), self.index, np.cos(self.value))

    def cos(self):
        return self.tape._push("cos", np.cos(self.value), self.index, -np.sin(self.value))

    def sqrt(self):
        x = self.value
        if (x <= 0).any():
            lane = _first_bad_lane(x <= 0)
            raise DomainError("sqrt", lane, float(x[lane]))
        v = np.sqrt(x)
        return self.tape._push("sqrt", v, self.index, 0.5 / v)


def exp(x: ADScalar) -> ADScalar:
    return x.exp()


def log(x: ADScalar) -> ADScalar:
    return x.log()


def sin(x: ADScalar) -> ADScalar:
    return x.sin()


def cos(x: ADScalar) -> ADScalar:
    return x.cos()


def sqrt(x: ADScalar) -> ADScalar:
    return x.sqrt()


def atan2(y, x) -> ADScalar:
    """Four-quadrant arctangent of ``y/x``; either argument may be a constant."""
    if isinstance(y, ADScalar):
        tape = y.tape
        if isinstance(x, ADScalar) and x.tape is not tape:
            raise TapeMismatchError("operands are recorded on different tapes")
    elif isinstance(x, ADScalar):
        tape = x.tape
    else:
        raise TypeError("atan2 needs at least one tape operand")
    yv = y.value if isinstance(y, ADScalar) else tape.lanes(y)
    xv = x.value if isinstance(x, ADScalar) else tape.lanes(x)
    r2 = xv * xv + yv * yv
    if (r2 == 0).any():
        raise DomainError("atan2", _first_bad_lane(r2 == 0), 0.0)
    val = np.arctan2(yv, xv)
    dy, dx = xv / r2, -yv / r2
    if isinstance(y, ADScalar) and isinstance(x, ADScalar):
        return tape._push("atan2", val, y.index, dy, x.index, dx)
    if isinstance(y, ADScalar):
        return tape._push("atan2", val, y.index, dy)
    return tape._push("atan2", val, x.index, dx)


def minimum(a: ADScalar, b) -> ADScalar:
    """Elementwise min; ties pass the gradient to ``a``."""
    node, o = a._other(b)
    t = a.tape
    bv = o.value if node else a._lane_const(o)
    take_a = a.value <= bv
    val = np.where(take_a, a.value, bv)
    da = take_a.astype(np.float64)
    if node:
        return t._push("min", val, a.index, da, o.index, 1.0 - da)
    return t._push("min", val, a.index, da)


def maximum(a: ADScalar, b) -> ADScalar:
    """Elementwise max; ties pass the gradient to ``a``."""
    node, o = a._other(b)
    t = a.tape
    bv = o.value if node else a._lane_const(o)
    take_a = a.value >= bv
    val = np.where(take_a, a.value, bv)
    da = take_a.astype(np.float64)
    if node:
        return t._push("max", val, a.index, da, o.index, 1.0 - da)
    return t._push("max", val, a.index, da)


def clamp(x: ADScalar, lo, hi) -> ADScalar:
    """Limit ``x`` to ``[lo, hi]``.

    Constant bounds give a single ``clamp`` node whose derivative is 1 on the
    closed interval and 0 outside.  Tape-recorded bounds fall back to
    ``min(max(x, lo), hi)`` so the bounds receive gradients too.
    """
    if isinstance(lo, ADScalar) or isinstance(hi, ADScalar):
        return minimum(maximum(x, lo), hi)
    lo_v = x._lane_const(float(lo)) if isinstance(lo, numbers.Real) else np.asarray(lo, float)
    hi_v = x._lane_const(float(hi)) if isinstance(hi, numbers.Real) else np.asarray(hi, float)
    if np.any(lo_v > hi_v):
        raise ValueError("clamp: lower bound exceeds upper bound")
    v = x.value
    inside = (v >= lo_v) & (v <= hi_v)
    return x.tape._push("clamp", np.clip(v, lo_v, hi_v), x.index, inside.astype(np.float64))


# functional interface

def tape_new(lane_count: int) -> Tape:
    return Tape(lane_count)


def tape_reset(tape: Tape) -> Tape:
    return tape.reset()


def var(tape: Tape, values) -> ADScalar:
    return tape.var(values)


_UNARY = {
    "neg": ADScalar.__neg__, "exp": exp, "ln": log, "abs": abs,
    "sin": sin, "cos": cos, "sqrt": sqrt,
}
_BINARY = {
    "add": ADScalar.__add__, "sub": ADScalar.__sub__, "mul": ADScalar.__mul__,
    "div": ADScalar.__truediv__, "min": minimum, "max": maximum, "atan2": atan2,
}


def apply(op_kind: str, a: ADScalar, b=None, **kwargs) -> ADScalar:
    """Record ``op_kind`` applied to ``a`` (and ``b``) by name.

    ``pow_int`` takes the exponent as ``b``; ``clamp`` takes ``lo`` and ``hi``
    keyword arguments.
    """
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    if op_kind in _BINARY:
        if b is None:
            raise TypeError(f"{op_kind} needs two operands")
        if isinstance(b, ADScalar) and b.tape is not a.tape:
            raise TapeMismatchError("operands are recorded on different tapes")
        return _BINARY[op_kind](a, b)
    if op_kind == "pow_int":
        return a ** b
    if op_kind == "clamp":
        return clamp(a, kwargs["lo"], kwargs["hi"])
    raise ValueError(f"unknown op kind {op_kind!r}")


def backward(loss: ADScalar, seed=None) -> GradientSet:
    return loss.tape.backward(loss, seed)


def grad_of(gs: GradientSet, p: ADScalar) -> np.ndarray:
    return gs[p]
