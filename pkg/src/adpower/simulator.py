"""Network assembly, steady-state initialisation and explicit Euler runs.

The algebraic network equations are eliminated every step by solving
``Y V = I(x)`` for the bus voltages, leaving an ODE in the device states that
is advanced with ``x += f(x) * dt``.  When any model parameter is a tape
scalar, the whole run is recorded and can be differentiated afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import models
from .models import GenParams, SexsParams, Stab1Params
from .phasor import AdmittanceMatrix, Phasor, apply_fault, clear_fault, solve_network, value_of
from .tape import ADScalar, atan2

__all__ = [
    "Event",
    "EventSchedule",
    "Generator",
    "PowerFlowError",
    "RUN_COUNTER",
    "Simulation",
    "SimulationInstability",
    "SteadyStateSolution",
    "SystemModel",
    "SystemState",
    "Trajectory",
    "init_steady_state",
    "power_flow",
    "run",
    "step_euler",
]

STEADY_STATE_TOL = 1e-8


class PowerFlowError(RuntimeError):
    """Load flow failed to converge or the operating point is infeasible."""


class SimulationInstability(RuntimeError):
    """A state became non-finite; ``trajectory`` holds the steps up to that point."""

    def __init__(self, time: float, lane: int, trajectory: "Trajectory"):
        super().__init__(f"non-finite state at t = {time:.6g} s in lane {lane}")
        self.time = time
        self.lane = lane
        self.trajectory = trajectory


class RunCounter:
    """Counts forward simulations, for bookkeeping in tests and summaries."""

    def __init__(self):
        self.count = 0

    def reset(self) -> None:
        self.count = 0


RUN_COUNTER = RunCounter()


@dataclass
class Generator:
    name: str
    bus: int
    params: GenParams
    P: float = 0.0  # MW, ignored at the slack bus
    V: float = 1.0  # per unit voltage setpoint
    avr: SexsParams | None = None
    pss: Stab1Params | None = None

    def __post_init__(self):
        if self.pss is not None and self.avr is None:
            raise ValueError(f"generator {self.name}: a stabiliser needs an AVR to act on")


@dataclass
class SystemModel:
    """Buses, passive network and generators on a common MVA base."""

    buses: list[str]
    y_network: np.ndarray  # complex (n_bus, n_bus), machines excluded
    generators: list[Generator]
    slack_bus: int
    s_base: float
    f_n: float = 60.0
    fault_admittance: complex = 1e5 - 1e5j

    def __post_init__(self):
        self.y_network = np.asarray(self.y_network, dtype=complex)
        n = len(self.buses)
        if self.y_network.shape != (n, n):
            raise ValueError(f"y_network must be {n}x{n}")
        if not 0 <= self.slack_bus < n:
            raise ValueError("slack bus index out of range")
        seen = set()
        for g in self.generators:
            if not 0 <= g.bus < n:
                raise ValueError(f"generator {g.name} references bus {g.bus}, not in 0..{n - 1}")
            if g.bus in seen:
                raise ValueError(f"more than one generator on bus {self.buses[g.bus]}")
            seen.add(g.bus)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def omega_base(self) -> float:
        return 2 * math.pi * self.f_n

    def generator(self, name: str) -> Generator:
        for g in self.generators:
            if g.name == name:
                return g
        raise KeyError(f"no generator named {name!r}")

    def generator_index(self, name: str) -> int:
        return self.generators.index(self.generator(name))

    def with_device_params(self, gen: str, device: str, **values) -> "SystemModel":
        """Copy with some parameters of one device replaced (``device`` in gen/avr/pss)."""
        gens = []
        for g in self.generators:
            if g.name == gen:
                attr = "params" if device == "gen" else device
                current = getattr(g, attr)
                if current is None:
                    raise KeyError(f"generator {gen} has no {device}")
                g = replace(g, **{attr: replace(current, **values)})
            gens.append(g)
        return replace(self, generators=gens)

    def lane_count(self) -> int:
        n = 1
        for g in self.generators:
            for dev in (g.params, g.avr, g.pss):
                if dev is None:
                    continue
                for v in vars(dev).values():
                    v = value_of(v)
                    if isinstance(v, np.ndarray) and v.ndim:
                        n = max(n, v.shape[0])
        return n


@dataclass(frozen=True)
class Event:
    time: float
    action: str  # "apply_fault" | "clear_fault"
    bus: int | None = None
    y_fault: complex | None = None

    def __post_init__(self):
        if self.action not in ("apply_fault", "clear_fault"):
            raise ValueError(f"unknown event action {self.action!r}")
        if self.action == "apply_fault" and self.bus is None:
            raise ValueError("apply_fault needs a bus")


@dataclass(frozen=True)
class EventSchedule:
    events: tuple[Event, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        times = [e.time for e in self.events]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("event times must be strictly increasing")
        if any(t < 0 for t in times):
            raise ValueError("event times must be non-negative")

    @classmethod
    def short_circuit(cls, bus: int, t_on: float, t_off: float, y_fault=None) -> "EventSchedule":
        return cls((Event(t_on, "apply_fault", bus, y_fault), Event(t_off, "clear_fault")))

    def step_indices(self, dt: float) -> dict[int, Event]:
        """Map step index -> event; every time must sit exactly on the grid."""
        out = {}
        for e in self.events:
            k = _grid_index(e.time, dt, f"event at t = {e.time}")
            out[k] = e
        return out


def _grid_index(t: float, dt: float, what: str) -> int:
    k = round(t / dt)
    if abs(k * dt - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError(f"{what} is not an integer multiple of dt = {dt}")
    return int(k)


# load flow (plain numbers, off tape)

def power_flow(model: SystemModel, max_iter: int = 50, tol: float = 1e-12) -> np.ndarray:
    """Newton-Raphson load flow; returns complex bus voltages.

    Generator buses are PV (slack: V and angle 0), other buses PQ with zero
    injection.
    """
    n = model.n_bus
    y = model.y_network
    p_spec = np.zeros(n)
    v_mag = np.ones(n)
    is_pv = np.zeros(n, bool)
    for g in model.generators:
        p_spec[g.bus] = g.P / model.s_base
        v_mag[g.bus] = g.V
        is_pv[g.bus] = True
    slack = model.slack_bus
    if not is_pv[slack]:
        raise PowerFlowError("the slack bus needs a generator")
    pvpq = [i for i in range(n) if i != slack]
    pq = [i for i in range(n) if not is_pv[i]]
    theta = np.zeros(n)
    for it in range(max_iter + 1):
        v = v_mag * np.exp(1j * theta)
        i_bus = y @ v
        s = v * np.conj(i_bus)
        mis = np.r_[s.real[pvpq] - p_spec[pvpq], s.imag[pq]]
        if not np.all(np.isfinite(mis)):
            raise PowerFlowError("load flow produced non-finite mismatch")
        if np.max(np.abs(mis), initial=0.0) < tol:
            return v
        if it == max_iter:
            break
        dv = np.diag(v)
        ds_dth = 1j * dv @ np.conj(np.diag(i_bus) - y @ dv)
        ds_dvm = dv @ np.conj(y @ np.diag(v / np.abs(v))) + np.conj(np.diag(i_bus)) @ np.diag(v / np.abs(v))
        jac = np.block([
            [ds_dth.real[np.ix_(pvpq, pvpq)], ds_dvm.real[np.ix_(pvpq, pq)]],
            [ds_dth.imag[np.ix_(pq, pvpq)], ds_dvm.imag[np.ix_(pq, pq)]],
        ])
        try:
            dx = np.linalg.solve(jac, -mis)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError(f"singular load-flow Jacobian at iteration {it}") from exc
        theta[pvpq] += dx[: len(pvpq)]
        v_mag[pq] += dx[len(pvpq):]
    raise PowerFlowError(
        f"load flow did not converge in {max_iter} iterations "
        f"(mismatch {np.max(np.abs(mis)):.3e}); operating point may be infeasible"
    )


# initial conditions

@dataclass
class SystemState:
    """Per-generator device states plus last terminal voltages."""

    gen: list[list]
    avr: list[list | None]
    pss: list[list | None]
    v_term: list[Phasor]


@dataclass
class SteadyStateSolution:
    state: SystemState
    t_m: list
    e_f: list  # field voltage used when the generator has no AVR
    v_ref: list
    bus_voltages: np.ndarray
    residual: float


def init_steady_state(model: SystemModel) -> SteadyStateSolution:
    """Load flow off tape, then device states back-solved on tape.

    The load flow does not depend on machine parameters, so only the
    back-substitution is recorded; gradients with respect to reactances see
    how the initial state moves with them.
    """
    v_bus = power_flow(model)
    s_inj = v_bus * np.conj(model.y_network @ v_bus)
    gen_states, avr_states, pss_states = [], [], []
    t_m, e_f_list, v_ref, v_term = [], [], [], []
    for g in model.generators:
        p = g.params
        v = v_bus[g.bus]
        i_sys = np.conj(s_inj[g.bus] / v)
        i_m = i_sys * model.s_base / p.S_n if not isinstance(p.S_n, ADScalar) else None
        if i_m is None:
            raise TypeError("S_n cannot be a tape variable")
        # q axis along E_Q = V + j X_q I
        eq_re = v.real - p.X_q * i_m.imag
        eq_im = v.imag + p.X_q * i_m.real
        if isinstance(eq_re, ADScalar) or isinstance(eq_im, ADScalar):
            delta = atan2(eq_im, eq_re)
        else:
            delta = np.arctan2(eq_im, eq_re)
        sc = models.trig(delta)
        i_d, i_q = models.to_dq(Phasor(i_m.real, i_m.imag), *sc)
        v_d, v_q = models.to_dq(Phasor(v.real, v.imag), *sc)
        e_q_st = v_q + p.X_d_st * i_d
        e_d_st = v_d - p.X_q_st * i_q
        e_q_t = e_q_st + (p.X_d_t - p.X_d_st) * i_d
        e_d_t = e_d_st - (p.X_q_t - p.X_q_st) * i_q
        e_f = e_q_t + (p.X_d - p.X_d_t) * i_d
        s = [0.0, delta, e_q_t, e_d_t, e_q_st, e_d_st]
        gen_states.append(s)
        t_m.append(models.electrical_torque(p, s, i_d, i_q))
        e_f_list.append(e_f)
        v_term.append(Phasor(v.real, v.imag))
        if g.avr is not None:
            a = g.avr
            ef_v = np.asarray(value_of(e_f))
            if np.any(ef_v < value_of(a.E_min)) or np.any(ef_v > value_of(a.E_max)):
                raise PowerFlowError(f"{g.name}: required field voltage {ef_v} outside AVR limits")
            u0 = e_f / a.K
            avr_states.append([u0, e_f])
            v_ref.append(abs(v) + u0)
        else:
            avr_states.append(None)
            v_ref.append(None)
        pss_states.append([0.0, 0.0, 0.0] if g.pss is not None else None)
    state = SystemState(gen_states, avr_states, pss_states, v_term)
    sol = SteadyStateSolution(state, t_m, e_f_list, v_ref, v_bus, float("nan"))
    sim = Simulation(model, sol)
    dx, _ = sim.derivatives(state, sim.y_base)
    sol.residual = max(float(np.max(np.abs(value_of(d)))) for group in dx for d in group)
    if not sol.residual < STEADY_STATE_TOL:
        raise PowerFlowError(f"steady-state residual {sol.residual:.3e} exceeds {STEADY_STATE_TOL}")
    return sol


# time stepping

class Simulation:
    """A model bound to its initial conditions, ready to be stepped."""

    def __init__(self, model: SystemModel, init: SteadyStateSolution):
        self.model = model
        self.init = init
        y = AdmittanceMatrix.from_complex(model.y_network)
        for g in model.generators:
            y = y.add_shunt(g.bus, models.machine_admittance(g.params, model.s_base))
        self.y_base = y
        self._salient = [models._salient(g.params) for g in model.generators]

    def faulted(self, bus: int, y_fault=None) -> AdmittanceMatrix:
        yf = self.model.fault_admittance if y_fault is None else y_fault
        return apply_fault(self.y_base, bus, Phasor(complex(yf).real, complex(yf).imag))

    def derivatives(self, x: SystemState, y_mat: AdmittanceMatrix):
        """State derivatives and algebraic outputs at state ``x``."""
        model, init = self.model, self.init
        s_base = model.s_base
        gens = model.generators
        trigs = [models.trig(s[1]) for s in x.gen]
        currents = [Phasor(0.0, 0.0) for _ in range(model.n_bus)]
        for k, g in enumerate(gens):
            inj, _ = models.gen_norton(g.params, x.gen[k], s_base, trigs[k])
            if self._salient[k]:
                inj = inj + models.saliency_correction(g.params, x.gen[k], x.v_term[k], s_base, trigs[k])
            currents[g.bus] = currents[g.bus] + inj
        v_bus = solve_network(y_mat, currents)
        d_gen, d_avr, d_pss, v_term = [], [], [], []
        for k, g in enumerate(gens):
            s = x.gen[k]
            vt = v_bus[g.bus]
            v_term.append(vt)
            i_d, i_q = models.gen_currents(g.params, s, vt, trigs[k])
            if g.avr is not None:
                v_pss = 0.0
                if g.pss is not None:
                    dp, v_pss = models.stab1_derivatives(g.pss, x.pss[k], s[0])
                    d_pss.append(dp)
                else:
                    d_pss.append(None)
                v_meas = _magnitude(vt)
                da, e_f = models.sexs_derivatives(g.avr, x.avr[k], v_meas, v_pss, init.v_ref[k])
                d_avr.append(da)
            else:
                e_f = init.e_f[k]
                d_avr.append(None)
                d_pss.append(None)
            d_gen.append(models.gen_derivatives(g.params, s, i_d, i_q, e_f, init.t_m[k], model.omega_base))
        dx = [d for d in d_gen] + [d for d in d_avr if d is not None] + [d for d in d_pss if d is not None]
        return dx, (d_gen, d_avr, d_pss, v_term)

    def step(self, x: SystemState, y_mat: AdmittanceMatrix, dt: float) -> SystemState:
        if not dt > 0:
            raise ValueError("dt must be positive")
        _, (d_gen, d_avr, d_pss, v_term) = self.derivatives(x, y_mat)
        return SystemState(
            gen=[_euler(s, d, dt) for s, d in zip(x.gen, d_gen)],
            avr=[None if s is None else _euler(s, d, dt) for s, d in zip(x.avr, d_avr)],
            pss=[None if s is None else _euler(s, d, dt) for s, d in zip(x.pss, d_pss)],
            v_term=v_term,
        )


def _euler(state, deriv, dt):
    return [s + d * dt for s, d in zip(state, deriv)]


def _magnitude(v: Phasor):
    m2 = v.abs2()
    return m2.sqrt() if isinstance(m2, ADScalar) else np.sqrt(m2)


def step_euler(sim: Simulation, state: SystemState, y_mat: AdmittanceMatrix, dt: float) -> SystemState:
    """One explicit Euler step ``x + f(x) dt`` with the network solved at ``x``."""
    return sim.step(state, y_mat, dt)


@dataclass
class Trajectory:
    """Recorded signals; entries stay tape scalars until exported."""

    times: np.ndarray
    signals: dict[str, list] = field(default_factory=dict)
    lane_count: int = 1
    dt: float = 0.0

    def signal(self, name: str) -> list:
        return self.signals[name]

    def values(self, name: str) -> np.ndarray:
        """Detached values, shape (len(times), lane_count)."""
        rows = [np.broadcast_to(np.asarray(value_of(v), float), (self.lane_count,))
                for v in self.signals[name]]
        return np.array(rows)

    def truncated(self, n: int) -> "Trajectory":
        return Trajectory(self.times[:n].copy(), {k: v[:n] for k, v in self.signals.items()},
                          self.lane_count, self.dt)


def run(model: SystemModel, schedule: EventSchedule, t_end: float, dt: float,
        *, init: SteadyStateSolution | None = None, on_nonfinite: str = "raise",
        record: Sequence[str] = ("speed", "angle")) -> Trajectory:
    """Simulate from steady state to ``t_end`` with explicit Euler.

    ``on_nonfinite="raise"`` aborts at the first non-finite speed with
    :class:`SimulationInstability`; ``"continue"`` lets NaN lanes run on, which
    is what batched optimisation wants.
    """
    if not t_end > 0 or not dt > 0:
        raise ValueError("t_end and dt must be positive")
    if on_nonfinite not in ("raise", "continue"):
        raise ValueError("on_nonfinite must be 'raise' or 'continue'")
    n_steps = _grid_index(t_end, dt, f"t_end = {t_end}")
    events = schedule.step_indices(dt)
    if events and max(events) > n_steps:
        raise ValueError("event scheduled after t_end")
    RUN_COUNTER.count += 1

    if init is None:
        init = init_steady_state(model)
    sim = Simulation(model, init)
    lanes = model.lane_count()
    times = np.arange(n_steps + 1) * dt
    names = [g.name for g in model.generators]
    signals = {f"{n}.{r}": [] for n in names for r in record}
    rec_idx = [models.GEN_STATES.index(r) for r in record]

    x = init.state
    y_mat = sim.y_base

    def _record(state):
        for n, s in zip(names, state.gen):
            for r, i in zip(record, rec_idx):
                signals[f"{n}.{r}"].append(s[i])

    _record(x)
    for k in range(n_steps):
        ev = events.get(k)
        if ev is not None:
            y_mat = sim.faulted(ev.bus, ev.y_fault) if ev.action == "apply_fault" else clear_fault(y_mat)
        x = sim.step(x, y_mat, dt)
        _record(x)
        if on_nonfinite == "raise":
            for s in x.gen:
                sv = np.asarray(value_of(s[0]))
                if not np.all(np.isfinite(sv)):
                    lane = int(np.flatnonzero(~np.isfinite(np.atleast_1d(sv)))[0])
                    traj = Trajectory(times[: k + 2], signals, lanes, dt)
                    raise SimulationInstability(float(times[k + 1]), lane, traj)
    return Trajectory(times, signals, lanes, dt)
