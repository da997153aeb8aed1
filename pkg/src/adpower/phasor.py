"""Complex algebra and a dense network solver on top of the tape.

A :class:`Phasor` component is either an :class:`~adpower.tape.ADScalar` or a
plain constant (float or lane array).  Constants stay off the tape, so a
network whose admittances are not being optimised costs no nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .tape import ADScalar

__all__ = [
    "AdmittanceMatrix",
    "Phasor",
    "SingularMatrixError",
    "apply_fault",
    "clear_fault",
    "phasor_arith",
    "solve_network",
    "value_of",
]

PIVOT_TOL = 1e-12


class SingularMatrixError(ArithmeticError):
    def __init__(self, lane: int, step: int, magnitude: float):
        super().__init__(
            f"singular admittance matrix: pivot |{magnitude:.3e}| < {PIVOT_TOL:g} "
            f"in lane {lane} at elimination step {step}"
        )
        self.lane = lane
        self.step = step


def value_of(x) -> np.ndarray | float:
    """Forward value of a tape scalar or constant."""
    return x.value if isinstance(x, ADScalar) else x


class Phasor:
    """Complex number as a (re, im) pair."""

    __slots__ = ("re", "im")

    def __init__(self, re, im=0.0):
        self.re = re
        self.im = im

    @classmethod
    def from_complex(cls, z) -> "Phasor":
        z = np.asarray(z, dtype=complex)
        if z.ndim == 0:
            return cls(float(z.real), float(z.imag))
        return cls(z.real.copy(), z.imag.copy())

    def to_complex(self) -> np.ndarray:
        return np.asarray(value_of(self.re)) + 1j * np.asarray(value_of(self.im))

    def __repr__(self) -> str:
        return f"Phasor({self.to_complex()})"

    def __add__(self, other):
        o = _as_phasor(other)
        return Phasor(self.re + o.re, self.im + o.im)

    __radd__ = __add__

    def __sub__(self, other):
        o = _as_phasor(other)
        return Phasor(self.re - o.re, self.im - o.im)

    def __rsub__(self, other):
        return _as_phasor(other) - self

    def __neg__(self):
        return Phasor(-self.re, -self.im)

    def __mul__(self, other):
        if not isinstance(other, (Phasor, complex)):
            return self.scale(other)
        o = _as_phasor(other)
        return Phasor(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (Phasor, complex)):
            return self.scale(1.0 / other)
        return self * _as_phasor(other).reciprocal()

    def __rtruediv__(self, other):
        return _as_phasor(other) * self.reciprocal()

    def scale(self, k) -> "Phasor":
        """Multiply by a real factor (tape scalar or constant)."""
        return Phasor(self.re * k, self.im * k)

    def conj(self) -> "Phasor":
        return Phasor(self.re, -self.im)

    def abs2(self):
        return self.re * self.re + self.im * self.im

    def reciprocal(self) -> "Phasor":
        den = self.abs2()
        if not np.all(value_of(den)):
            bad = np.atleast_1d(value_of(den)) == 0
            raise ZeroDivisionError(f"division by zero phasor in lane {int(np.flatnonzero(bad)[0])}")
        inv = 1.0 / den
        return Phasor(self.re * inv, -self.im * inv)

    def rotate(self, cos_a, sin_a) -> "Phasor":
        """Multiply by exp(j*a) given its cosine and sine."""
        return Phasor(self.re * cos_a - self.im * sin_a, self.re * sin_a + self.im * cos_a)


def _as_phasor(x) -> Phasor:
    if isinstance(x, Phasor):
        return x
    if isinstance(x, complex):
        return Phasor(x.real, x.imag)
    return Phasor(x, 0.0)


def phasor_arith(kind: str, a: Phasor, b=None) -> Phasor:
    """Named complex operation: add, sub, mul, div, conj or scale."""
    if kind == "add":
        return a + b
    if kind == "sub":
        return a - b
    if kind == "mul":
        return a * _as_phasor(b)
    if kind == "div":
        return a * _as_phasor(b).reciprocal()
    if kind == "conj":
        return a.conj()
    if kind == "scale":
        return a.scale(b)
    raise ValueError(f"unknown phasor operation {kind!r}")


@dataclass(frozen=True)
class FaultOverlay:
    bus: int
    y_fault: Phasor
    active: bool = True


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Dense bus admittance matrix with an optional shunt-fault overlay."""

    n_bus: int
    entries: tuple  # n_bus tuples of n_bus Phasors
    fault: FaultOverlay | None = field(default=None)

    @classmethod
    def from_complex(cls, y: np.ndarray) -> "AdmittanceMatrix":
        y = np.asarray(y, dtype=complex)
        if y.ndim != 2 or y.shape[0] != y.shape[1]:
            raise ValueError("admittance matrix must be square")
        n = y.shape[0]
        rows = tuple(tuple(Phasor(float(y[i, j].real), float(y[i, j].imag)) for j in range(n))
                     for i in range(n))
        return cls(n, rows)

    def with_entries(self, entries) -> "AdmittanceMatrix":
        return replace(self, entries=tuple(tuple(r) for r in entries))

    def add_shunt(self, bus: int, y: Phasor) -> "AdmittanceMatrix":
        """Base matrix with ``y`` added to a diagonal entry (permanent change)."""
        rows = [list(r) for r in self.entries]
        rows[bus][bus] = rows[bus][bus] + y
        return self.with_entries(rows)

    def entry(self, i: int, j: int) -> Phasor:
        """Effective entry, overlay included."""
        e = self.entries[i][j]
        f = self.fault
        if f is not None and f.active and i == j == f.bus:
            return e + f.y_fault
        return e

    def effective(self) -> list[list[Phasor]]:
        return [[self.entry(i, j) for j in range(self.n_bus)] for i in range(self.n_bus)]

    def to_complex(self) -> np.ndarray:
        """Forward values, shape (n_bus, n_bus) or (n_bus, n_bus, lanes)."""
        return np.array([[self.entry(i, j).to_complex() for j in range(self.n_bus)]
                         for i in range(self.n_bus)])


def apply_fault(y: AdmittanceMatrix, bus: int, y_fault: Phasor) -> AdmittanceMatrix:
    if not 0 <= bus < y.n_bus:
        raise IndexError(f"fault bus {bus} outside 0..{y.n_bus - 1}")
    return replace(y, fault=FaultOverlay(bus, _as_phasor(y_fault), True))


def clear_fault(y: AdmittanceMatrix) -> AdmittanceMatrix:
    return replace(y, fault=None)


def _blend(mask: np.ndarray, a: Phasor, b: Phasor) -> Phasor:
    """Per-lane select: ``a`` where mask else ``b``, exact for finite inputs."""
    m = mask.astype(np.float64)
    return a.scale(m) + b.scale(1.0 - m)


def solve_network(y: AdmittanceMatrix, currents: Sequence[Phasor]) -> list[Phasor]:
    """Solve ``Y V = I`` by Gaussian elimination with partial pivoting.

    Pivots are chosen by squared magnitude, independently per lane.  When the
    lanes disagree on the pivot row the swap is done with constant 0/1 masks,
    so every lane sees exactly its own elimination order.
    """
    n = y.n_bus
    if len(currents) != n:
        raise ValueError(f"expected {n} current injections, got {len(currents)}")
    a = y.effective()
    b = [_as_phasor(c) for c in currents]

    for k in range(n):
        shape = _lane_shape(a, b)
        mags = np.array([np.broadcast_to(_abs2_value(a[i][k]), shape) for i in range(k, n)])
        best = np.argmax(mags, axis=0) + k
        top = mags.max(axis=0)
        bad = top < PIVOT_TOL**2  # NaN lanes are left to propagate
        if bad.any():
            lane = int(np.flatnonzero(bad)[0])
            raise SingularMatrixError(lane, k, float(np.sqrt(top[lane])))
        rows = np.unique(best)
        if len(rows) == 1:
            p = int(rows[0])
            if p != k:
                a[k], a[p] = a[p], a[k]
                b[k], b[p] = b[p], b[k]
        else:
            for p in rows:
                p = int(p)
                if p == k:
                    continue
                mask = best == p
                ak, ap, bk, bp = a[k], a[p], b[k], b[p]
                a[k] = [_blend(mask, ap[j], ak[j]) for j in range(n)]
                a[p] = [_blend(mask, ak[j], ap[j]) for j in range(n)]
                b[k] = _blend(mask, bp, bk)
                b[p] = _blend(mask, bk, bp)
        inv = a[k][k].reciprocal()
        for i in range(k + 1, n):
            f = a[i][k] * inv
            for j in range(k + 1, n):
                a[i][j] = a[i][j] - f * a[k][j]
            b[i] = b[i] - f * b[k]
        a[k][k] = inv  # keep the reciprocal for back substitution

    x: list[Phasor | None] = [None] * n
    for k in range(n - 1, -1, -1):
        acc = b[k]
        for j in range(k + 1, n):
            acc = acc - a[k][j] * x[j]
        x[k] = acc * a[k][k]
    return x


def _abs2_value(p: Phasor):
    re, im = value_of(p.re), value_of(p.im)
    return re * re + im * im


def _lane_shape(a, b) -> tuple:
    for row in a:
        for e in row:
            for c in (e.re, e.im):
                if isinstance(c, ADScalar):
                    return c.value.shape
                if isinstance(c, np.ndarray) and c.ndim:
                    return c.shape
    for e in b:
        for c in (e.re, e.im):
            if isinstance(c, ADScalar):
                return c.value.shape
            if isinstance(c, np.ndarray) and c.ndim:
                return c.shape
    return (1,)
