"""Losses, step-clipped gradient descent, multi-start lanes and landscape scans.

One optimisation iteration is: fresh tape -> simulate -> loss -> backward ->
clipped step.  Every lane of the tape is an independent start point, so a
vector of initial guesses costs one simulation per iteration, not one per
guess.

Learning rates are relative.  A parameter with nominal magnitude ``s`` moves
by ``lr * s**2 * dL/dp / loss_scale`` (the descent step of the dimensionless
loss ``L / loss_scale`` in the dimensionless coordinate ``p / s``), clipped to
``max_step * s``.  A lane whose loss rises rejects the step, halves its learning
rate and retries from its last accepted point.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .simulator import RUN_COUNTER, Trajectory
from .tape import ADScalar, Tape

log = logging.getLogger(__name__)

__all__ = [
    "LossSpec",
    "OptProblem",
    "OptTrace",
    "OptimizerAbort",
    "ParamSpec",
    "ScanResult",
    "clipped_step",
    "fd_gradient",
    "landscape_scan",
    "loss_mae_window",
    "loss_mse",
    "optimize",
]


class OptimizerAbort(RuntimeError):
    """Every lane failed; ``trace`` holds what was computed before."""

    def __init__(self, message: str, trace: "OptTrace"):
        super().__init__(message)
        self.trace = trace


# losses

def _window_slice(times: np.ndarray, window) -> slice:
    if window is None:
        return slice(0, len(times))
    t0, t1 = window
    dt = times[1] - times[0]
    i0 = int(round((t0 - times[0]) / dt))
    i1 = int(round((t1 - times[0]) / dt))
    for t, i in ((t0, i0), (t1, i1)):
        if abs(times[0] + i * dt - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"loss window bound {t} is not on the simulation grid")
    if i0 < 0 or i1 >= len(times):
        raise ValueError(f"loss window {window} outside trajectory [{times[0]}, {times[-1]}]")
    if i1 < i0:
        raise ValueError(f"empty loss window {window}")
    return slice(i0, i1 + 1)


def loss_mse(sim: Sequence, ref: np.ndarray):
    """Mean squared error between a simulated signal and a reference series.

    ``sim`` is a sequence of tape scalars (or plain values), ``ref`` an array
    of equal length, optionally with a lane axis.
    """
    ref = np.asarray(ref, dtype=float)
    if len(sim) != len(ref):
        raise ValueError(f"signal length {len(sim)} != reference length {len(ref)}")
    if len(ref) == 0:
        raise ValueError("empty series")
    acc = 0.0
    for s, r in zip(sim, ref):
        d = s - r
        acc = acc + d * d
    return acc * (1.0 / len(ref))


def loss_mae_window(sim: Sequence, times: np.ndarray, window: tuple[float, float]):
    """Mean absolute value of a signal over ``[t_start, t_end]`` (inclusive)."""
    if len(sim) != len(times):
        raise ValueError("signal and time grid differ in length")
    sl = _window_slice(np.asarray(times), window)
    part = sim[sl]
    acc = 0.0
    for s in part:
        acc = acc + abs(s)
    return acc * (1.0 / len(part))


@dataclass
class LossSpec:
    """Which loss to evaluate on a trajectory.

    kind ``"mse"`` compares ``signal`` with ``reference`` (already on the
    simulation grid); kind ``"mae"`` averages ``|signal|`` over ``window``.
    """

    kind: str
    signal: str
    reference: np.ndarray | None = None
    window: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind not in ("mse", "mae"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind == "mse" and self.reference is None:
            raise ValueError("mse loss needs a reference series")
        if self.kind == "mae" and self.window is None:
            raise ValueError("mae loss needs a window")

    def __call__(self, traj: Trajectory):
        sig = traj.signal(self.signal)
        if self.kind == "mae":
            return loss_mae_window(sig, traj.times, self.window)
        sl = _window_slice(traj.times, self.window)
        ref = np.asarray(self.reference, dtype=float)
        if len(ref) != len(traj.times):
            raise ValueError(
                f"reference has {len(ref)} samples, simulation grid has {len(traj.times)}"
            )
        return loss_mse(sig[sl], ref[sl])

    def natural_scale(self) -> float | None:
        """Mean squared reference for mse, else None (taken from the first losses)."""
        if self.kind != "mse":
            return None
        p = float(np.mean(np.asarray(self.reference, dtype=float) ** 2))
        return p if p > 0 else None


# the update rule

def clipped_step(params: np.ndarray, grads: np.ndarray, lr, max_step,
                 lower=None, upper=None):
    """One descent step with per-parameter step clipping.

    ``params`` and ``grads`` have shape (n_params, lanes); ``lr`` and
    ``max_step`` broadcast against them.  Returns ``(new_params, step,
    frozen)`` where ``frozen`` flags lanes with a non-finite gradient: those
    lanes are left unchanged.
    """
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape:
        raise ValueError(f"shape mismatch: params {params.shape} vs grads {grads.shape}")
    frozen = ~np.all(np.isfinite(grads), axis=0) if grads.ndim == 2 else ~np.isfinite(grads)
    g = np.where(np.isfinite(grads), grads, 0.0)
    max_step = np.asarray(max_step, dtype=float)
    step = np.clip(np.asarray(lr) * g, -max_step, max_step)
    step = np.where(frozen, 0.0, step)
    new = params - step
    if lower is not None:
        new = np.maximum(new, lower)
    if upper is not None:
        new = np.minimum(new, upper)
    return new, new - params, frozen


def fd_gradient(evaluate: Callable[[dict[str, np.ndarray]], np.ndarray],
                point: dict[str, float], names: Sequence[str] | None = None,
                rel_step: float = 1e-4, abs_step: float = 1e-6) -> dict[str, float]:
    """Central-difference gradient, one two-lane simulation per parameter.

    ``evaluate`` maps a dict of lane arrays to per-lane losses.  Each
    parameter is perturbed by ``h = rel_step * |p|`` (``abs_step`` when p is
    zero) in a two-lane run, all others held at ``point``.
    """
    names = list(point) if names is None else list(names)
    out = {}
    for n in names:
        p = float(point[n])
        h = rel_step * abs(p) if p != 0 else abs_step
        vals = {k: np.full(2, float(v)) for k, v in point.items()}
        vals[n] = np.array([p + h, p - h])
        lp, lm = np.asarray(evaluate(vals), dtype=float)
        out[n] = (lp - lm) / (2 * h)
    return out


# problem and trace

@dataclass
class ParamSpec:
    name: str
    initial: np.ndarray
    lower: float | None = None
    upper: float | None = None
    scale: np.ndarray | float | None = None  # nominal magnitude, defaults to |initial|
    units: str = ""

    def __post_init__(self):
        self.initial = np.atleast_1d(np.asarray(self.initial, dtype=float))
        if self.scale is None:
            self.scale = np.abs(self.initial)
        self.scale = np.broadcast_to(np.asarray(self.scale, dtype=float), self.initial.shape).copy()
        if np.any(self.scale <= 0):
            raise ValueError(f"{self.name}: parameter scale must be positive (give an explicit scale)")
        if self.lower is not None and self.upper is not None and self.lower >= self.upper:
            raise ValueError(f"{self.name}: lower bound must be below upper bound")


@dataclass
class OptProblem:
    params: list[ParamSpec]
    loss: LossSpec | Callable[[Trajectory], ADScalar]
    learning_rate: float = 0.05
    max_step: float = 0.05
    epsilon: float = 1e-6
    loss_threshold: float | None = None
    max_iter: int = 200
    lr_growth: float = 1.5
    lr_shrink: float = 0.5
    loss_scale: float | None = None

    def __post_init__(self):
        if not self.params:
            raise ValueError("no parameters to optimise")
        lanes = {p.initial.shape[0] for p in self.params}
        if len(lanes) != 1:
            raise ValueError("all parameters need the same number of initial guesses")
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        for k in ("learning_rate", "max_step", "epsilon"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be > 0")
        if not 0 < self.lr_shrink < 1 or self.lr_growth < 1:
            raise ValueError("need 0 < lr_shrink < 1 <= lr_growth")

    @property
    def lane_count(self) -> int:
        return self.params[0].initial.shape[0]

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.params]


@dataclass
class OptTrace:
    names: list[str]
    params: list[np.ndarray] = field(default_factory=list)  # each (n_params, lanes)
    loss: list[np.ndarray] = field(default_factory=list)
    grad: list[np.ndarray] = field(default_factory=list)
    step: list[np.ndarray] = field(default_factory=list)
    accepted: list[np.ndarray] = field(default_factory=list)
    lr: list[np.ndarray] = field(default_factory=list)
    status: np.ndarray | None = None
    reason: str = ""
    simulations: int = 0
    final_params: np.ndarray | None = None
    final_loss: np.ndarray | None = None
    loss_scale: float = 1.0

    @property
    def iterations(self) -> int:
        """Completed parameter updates (evaluations minus one)."""
        return max(len(self.loss) - 1, 0)

    @property
    def best_lane(self) -> int:
        fl = np.where(np.isfinite(self.final_loss), self.final_loss, np.inf)
        return int(np.argmin(fl))

    def best_params(self) -> dict[str, float]:
        lane = self.best_lane
        return {n: float(self.final_params[i, lane]) for i, n in enumerate(self.names)}

    def accepted_losses(self, lane: int = 0) -> np.ndarray:
        return np.array([l[lane] for l, a in zip(self.loss, self.accepted) if a[lane]])


def optimize(problem: OptProblem, simulate: Callable[[dict[str, ADScalar]], Trajectory],
             callback: Callable[[int, OptTrace, Trajectory], None] | None = None) -> OptTrace:
    """Gradient descent with step clipping, one batched simulation per iteration.

    ``simulate`` receives a dict of tape variables (one per parameter, all on
    one fresh tape) and returns the trajectory the loss is evaluated on.

    ``callback(iteration, trace, trajectory)`` runs after each evaluation.
    Lanes stop when a step changes no parameter by more than ``epsilon``,
    when the loss falls below ``loss_threshold``, or at ``max_iter``.
    """
    lanes = problem.lane_count
    n_par = len(problem.params)
    theta = np.array([p.initial for p in problem.params])
    scale = np.array([p.scale for p in problem.params])
    lower = np.array([-np.inf if p.lower is None else p.lower for p in problem.params])[:, None]
    upper = np.array([np.inf if p.upper is None else p.upper for p in problem.params])[:, None]
    theta = np.clip(theta, lower, upper)
    max_step = problem.max_step * scale
    lr = np.full(lanes, problem.learning_rate)
    lr_cap = problem.learning_rate * 1e4

    loss_fn = problem.loss
    loss_scale = problem.loss_scale
    if loss_scale is None and isinstance(loss_fn, LossSpec):
        loss_scale = loss_fn.natural_scale()

    status = np.array(["active"] * lanes, dtype=object)
    best_theta = theta.copy()
    best_loss = np.full(lanes, np.inf)
    best_grad = np.zeros_like(theta)
    trace = OptTrace(problem.names)
    runs_before = RUN_COUNTER.count

    for it in range(problem.max_iter + 1):
        tape = Tape(lanes)
        leaves = {p.name: tape.var(theta[i]) for i, p in enumerate(problem.params)}
        traj = simulate(leaves)
        loss = loss_fn(traj)
        if isinstance(loss, ADScalar):
            gs = tape.backward(loss)
            grad = np.array([gs[leaves[n]] for n in problem.names])
            lval = loss.value.copy()
        else:
            grad = np.zeros((n_par, lanes))
            lval = np.broadcast_to(np.asarray(loss, float), (lanes,)).copy()
        del tape, leaves, loss

        if loss_scale is None:
            finite = lval[np.isfinite(lval) & (lval > 0)]
            loss_scale = float(finite.min()) if finite.size else 1.0
        trace.loss_scale = loss_scale

        ok = np.isfinite(lval) & np.all(np.isfinite(grad), axis=0)
        active = status == "active"
        first = it == 0
        accept = active & ok & (first | (lval < best_loss))
        reject = active & ~accept
        if first:
            dead = active & ~ok
            status[dead] = "diverged"
            reject &= ~dead
        best_theta[:, accept] = theta[:, accept]
        best_loss[accept] = lval[accept]
        best_grad[:, accept] = grad[:, accept]
        if not first:
            lr[accept] = np.minimum(lr[accept] * problem.lr_growth, lr_cap)
        lr[reject] *= problem.lr_shrink

        trace.params.append(theta.copy())
        trace.loss.append(lval)
        trace.grad.append(grad)
        trace.accepted.append(accept.copy())
        trace.lr.append(lr.copy())

        if problem.loss_threshold is not None:
            hit = (status == "active") & (best_loss <= problem.loss_threshold)
            status[hit] = "threshold"

        eff_lr = lr[None, :] * scale**2 / loss_scale
        new, step, _ = clipped_step(best_theta, best_grad, eff_lr, max_step, lower, upper)
        small = np.max(np.abs(step), axis=0) < problem.epsilon
        status[(status == "active") & small] = "converged"
        moving = status == "active"
        theta = np.where(moving[None, :], new, best_theta)
        trace.step.append(np.where(moving[None, :], step, 0.0))

        log.debug("iter %d loss %s params %s", it, lval, theta)
        if callback is not None:
            callback(it, trace, traj)
        del traj
        if not np.any(status == "active"):
            break

    trace.simulations = RUN_COUNTER.count - runs_before
    trace.status = status
    trace.final_params = best_theta
    trace.final_loss = best_loss
    if np.all(status == "diverged"):
        trace.reason = "aborted"
        raise OptimizerAbort("every lane produced a non-finite loss or gradient", trace)
    if np.any(status == "active"):
        trace.reason = "max_iter"
    elif np.all(status == "threshold"):
        trace.reason = "threshold"
    else:
        trace.reason = "converged"
    return trace


# landscape scan

@dataclass
class ScanResult:
    """Loss and gradient of one parameter over a relative grid (others nominal)."""

    name: str
    nominal: float
    factors: np.ndarray
    values: np.ndarray
    loss: np.ndarray
    grad: np.ndarray
    valid: np.ndarray  # False where the parameter set was invalid

    @property
    def normalized_grad(self) -> np.ndarray:
        """Gradient divided by the row's largest finite |gradient|."""
        g = self.grad
        m = np.nanmax(np.abs(np.where(np.isfinite(g), g, np.nan))) if np.any(np.isfinite(g)) else np.nan
        return g / m if m and np.isfinite(m) and m > 0 else np.zeros_like(g)

    def sign_changes(self, exclude: float = 0.0) -> list[int]:
        """Grid indices ``i`` where the gradient sign differs between ``i`` and ``i+1``.

        Changes whose interval contains a factor within ``exclude`` of 1 (the
        nominal point) are left out; those mark the global optimum.
        """
        g = self.grad
        out = []
        for i in range(len(g) - 1):
            a, b = g[i], g[i + 1]
            if not (np.isfinite(a) and np.isfinite(b)) or a == 0 or b == 0:
                continue
            if np.sign(a) != np.sign(b):
                lo, hi = self.factors[i], self.factors[i + 1]
                if lo - exclude <= 1.0 <= hi + exclude:
                    continue
                out.append(i)
        return out


def landscape_scan(make_loss: Callable[[str, ADScalar], ADScalar], names: Sequence[str],
                   nominal: dict[str, float], factors: np.ndarray,
                   validate: Callable[[str, float], bool] | None = None) -> list[ScanResult]:
    """Vary each parameter over ``factors * nominal`` with the others held.

    ``make_loss(name, leaf)`` simulates with parameter ``name`` set to the
    multi-lane tape variable ``leaf`` and returns the loss.  Cells rejected by
    ``validate`` (an impossible parameter set) are not simulated; cells whose
    simulation goes unstable come back as NaN.  Both are recorded, neither
    raises.
    """
    factors = np.asarray(factors, dtype=float)
    if factors.size < 3:
        raise ValueError("scan grid needs at least 3 points")
    results = []
    for name in names:
        nom = float(nominal[name])
        vals = factors * nom
        loss = np.full(factors.size, np.nan)
        grad = np.full(factors.size, np.nan)
        valid = np.array([validate is None or bool(validate(name, v)) for v in vals])
        idx = np.flatnonzero(valid)
        if idx.size:
            loss[idx], grad[idx] = _scan_cells(make_loss, name, vals[idx])
        results.append(ScanResult(name, nom, factors, vals, loss, grad, valid))
    return results


def _scan_cells(make_loss, name, vals):
    tape = Tape(len(vals))
    leaf = tape.var(vals)
    with np.errstate(all="ignore"):
        loss = make_loss(name, leaf)
        if not isinstance(loss, ADScalar):
            return np.broadcast_to(loss, vals.shape), np.zeros_like(vals)
        g = tape.backward(loss)[leaf]
    return loss.value.copy(), g
