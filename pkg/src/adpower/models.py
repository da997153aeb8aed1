"""Differentiable device models: 6th-order synchronous machine, SEXS, STAB1.

Parameters may be plain floats, lane arrays or tape scalars; every function
here is written with ordinary arithmetic so it records onto the tape exactly
when its inputs do.

Machine quantities are per unit on the machine rating.  The network side
(:func:`gen_norton`) converts to the system base with ``S_n / s_base``.

Frame convention: the q axis of a machine points along ``exp(j*delta)`` in
the network frame and the d axis lags it by 90 degrees, so a network phasor
``X`` has machine components ``x_d + j x_q = X * exp(j*(pi/2 - delta))``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .phasor import Phasor, value_of
from .tape import ADScalar, clamp

__all__ = [
    "GEN_STATES",
    "PSS_STATES",
    "AVR_STATES",
    "GenParams",
    "SexsParams",
    "Stab1Params",
    "electrical_torque",
    "from_dq",
    "gen_currents",
    "gen_derivatives",
    "gen_norton",
    "saliency_correction",
    "sexs_derivatives",
    "stab1_derivatives",
    "to_dq",
    "trig",
]

GEN_STATES = ("speed", "angle", "e_q_t", "e_d_t", "e_q_st", "e_d_st")
AVR_STATES = ("x_ll", "e_f")
PSS_STATES = ("x_w", "x_1", "x_2")


def _v(x) -> np.ndarray:
    return np.asarray(value_of(x), dtype=float)


def _positive(obj, names) -> None:
    for n in names:
        if not np.all(_v(getattr(obj, n)) > 0):
            raise ValueError(f"{type(obj).__name__}.{n} must be > 0, got {_v(getattr(obj, n))}")


@dataclass
class GenParams:
    """Sixth-order machine data, per unit on the machine rating ``S_n`` (MVA)."""

    H: float
    D: float
    X_d: float
    X_q: float
    X_d_t: float
    X_q_t: float
    X_d_st: float
    X_q_st: float
    T_d0_t: float
    T_q0_t: float
    T_d0_st: float
    T_q0_st: float
    S_n: float

    def __post_init__(self):
        _positive(self, ("H", "T_d0_t", "T_q0_t", "T_d0_st", "T_q0_st", "X_d_st", "X_q_st", "S_n"))
        if np.any(_v(self.D) < 0):
            raise ValueError("GenParams.D must be >= 0")
        for a, b, c in (("X_d", "X_d_t", "X_d_st"), ("X_q", "X_q_t", "X_q_st")):
            va, vb, vc = _v(getattr(self, a)), _v(getattr(self, b)), _v(getattr(self, c))
            if not (np.all(va >= vb) and np.all(vb >= vc)):
                raise ValueError(f"GenParams requires {a} >= {b} >= {c} > 0")

    @classmethod
    def names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


@dataclass
class SexsParams:
    """Simple exciter: K (1 + sT_a)/(1 + sT_b) * 1/(1 + sT_e), output limited."""

    K: float = 100.0
    T_a: float = 4.0
    T_b: float = 10.0
    T_e: float = 0.1
    E_min: float = -3.0
    E_max: float = 3.0

    def __post_init__(self):
        _positive(self, ("T_a", "T_b", "T_e"))
        if not np.all(_v(self.E_min) < _v(self.E_max)):
            raise ValueError("SexsParams requires E_min < E_max")

    @classmethod
    def names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


@dataclass
class Stab1Params:
    """Speed-input stabiliser.

    K * sT_w/(1 + sT_w) * (1 + sT_1)/(1 + sT_3) * (1 + sT_2)/(1 + sT_4),
    output limited to +-H_lim.
    """

    K: float = 40.0
    T_w: float = 11.0
    T_1: float = 0.08
    T_2: float = 0.50
    T_3: float = 0.10
    T_4: float = 0.05
    H_lim: float = 0.03

    def __post_init__(self):
        _positive(self, ("T_w", "T_1", "T_2", "T_3", "T_4", "H_lim"))

    @classmethod
    def names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


def trig(angle):
    """(sin, cos) of a state angle; plain numpy when the angle is a constant."""
    if isinstance(angle, ADScalar):
        return angle.sin(), angle.cos()
    return np.sin(angle), np.cos(angle)


def to_dq(x: Phasor, sin_d, cos_d):
    """Network phasor -> machine (d, q) components."""
    d = x.re * sin_d - x.im * cos_d
    q = x.re * cos_d + x.im * sin_d
    return d, q


def from_dq(d, q, sin_d, cos_d) -> Phasor:
    """Machine (d, q) components -> network phasor."""
    return Phasor(d * sin_d + q * cos_d, q * sin_d - d * cos_d)


def electrical_torque(p: GenParams, s, i_d, i_q):
    """Air-gap torque behind subtransient reactance, stator resistance neglected."""
    e_q_st, e_d_st = s[4], s[5]
    te = e_d_st * i_d + e_q_st * i_q
    if _salient(p):
        te = te + (p.X_q_st - p.X_d_st) * i_d * i_q
    return te


def gen_derivatives(p: GenParams, s, i_d, i_q, e_f, t_m, omega_base: float):
    """Right-hand side of the sixth-order model.

    ``s`` is ordered as :data:`GEN_STATES`.  The rotor angle advances at
    ``speed * omega_base`` rad/s because speed is in per unit.
    """
    speed, _, e_q_t, e_d_t, e_q_st, e_d_st = s
    t_e = electrical_torque(p, s, i_d, i_q)
    d_speed = (t_m - t_e) / (2 * p.H) - p.D * speed
    d_angle = speed * omega_base
    d_e_q_t = (e_f - e_q_t - (p.X_d - p.X_d_t) * i_d) / p.T_d0_t
    d_e_d_t = ((p.X_q - p.X_q_t) * i_q - e_d_t) / p.T_q0_t
    d_e_q_st = (e_q_t - e_q_st - (p.X_d_t - p.X_d_st) * i_d) / p.T_d0_st
    d_e_d_st = (e_d_t - e_d_st + (p.X_q_t - p.X_q_st) * i_q) / p.T_q0_st
    return [d_speed, d_angle, d_e_q_t, d_e_d_t, d_e_q_st, d_e_d_st]


def _salient(p: GenParams) -> bool:
    if isinstance(p.X_d_st, ADScalar) or isinstance(p.X_q_st, ADScalar):
        return True
    return bool(np.any(_v(p.X_d_st) != _v(p.X_q_st)))


def machine_admittance(p: GenParams, s_base: float) -> Phasor:
    """Norton admittance 1/(jX''_d) on the system base."""
    return Phasor(0.0, -(p.S_n / s_base) / p.X_d_st)


def gen_norton(p: GenParams, s, s_base: float, sc=None):
    """Norton current source behind the subtransient reactance.

    Returns ``(injection, y_machine)`` on the system base.  ``sc`` is an
    optional precomputed ``(sin(delta), cos(delta))`` pair.
    """
    sin_d, cos_d = sc if sc is not None else trig(s[1])
    e_st = from_dq(s[5], s[4], sin_d, cos_d)
    k = p.S_n / s_base
    # E''/(jX''d) = -j E''/X''d
    g = k / p.X_d_st
    inj = Phasor(e_st.im * g, -(e_st.re * g))
    return inj, machine_admittance(p, s_base)


def saliency_correction(p: GenParams, s, v_term: Phasor, s_base: float, sc=None) -> Phasor:
    """Extra injection restoring the q-axis current when X''_q != X''_d.

    The Norton source uses X''_d on both axes; the true q-axis current is
    ``(v_d - E''_d)/X''_q``.  The difference is evaluated at ``v_term``.
    """
    sin_d, cos_d = sc if sc is not None else trig(s[1])
    v_d, _ = to_dq(v_term, sin_d, cos_d)
    delta_iq = (v_d - s[5]) * (1.0 / p.X_q_st - 1.0 / p.X_d_st) * (p.S_n / s_base)
    return Phasor(delta_iq * cos_d, delta_iq * sin_d)


def gen_currents(p: GenParams, s, v_term: Phasor, sc=None):
    """Stator currents (I_d, I_q) on the machine base from terminal voltage."""
    sin_d, cos_d = sc if sc is not None else trig(s[1])
    v_d, v_q = to_dq(v_term, sin_d, cos_d)
    i_d = (s[4] - v_q) / p.X_d_st
    i_q = (v_d - s[5]) / p.X_q_st
    return i_d, i_q


def sexs_derivatives(p: SexsParams, s, v_meas, v_pss, v_ref):
    """SEXS exciter.  Returns ``([dx_ll, de_f], e_f_out)``.

    The stabiliser signal adds to the voltage error.
    """
    x_ll, e_f = s
    u = v_ref - v_meas + v_pss
    ratio = p.T_a / p.T_b
    y = u * ratio + x_ll * (1 - ratio)
    dx_ll = (u - x_ll) / p.T_b
    de_f = (y * p.K - e_f) / p.T_e
    return [dx_ll, de_f], _limit(e_f, p.E_min, p.E_max)


def stab1_derivatives(p: Stab1Params, s, speed):
    """STAB1 stabiliser.  Returns ``([dx_w, dx_1, dx_2], v_pss)``."""
    x_w, x_1, x_2 = s
    y_w = speed - x_w
    dx_w = y_w / p.T_w
    r1 = p.T_1 / p.T_3
    y_1 = y_w * r1 + x_1 * (1 - r1)
    dx_1 = (y_w - x_1) / p.T_3
    r2 = p.T_2 / p.T_4
    y_2 = y_1 * r2 + x_2 * (1 - r2)
    dx_2 = (y_1 - x_2) / p.T_4
    return [dx_w, dx_1, dx_2], _limit(y_2 * p.K, -p.H_lim, p.H_lim)


def _limit(x, lo, hi):
    if isinstance(x, ADScalar) or isinstance(lo, ADScalar) or isinstance(hi, ADScalar):
        if not isinstance(x, ADScalar):
            # constant signal against tape-recorded limits
            tape = lo.tape if isinstance(lo, ADScalar) else hi.tape
            x = tape.const(x)
        return clamp(x, lo, hi)
    return np.clip(x, lo, hi)
