"""Configuration, reference data, noise and experiment orchestration.

Two YAML documents drive everything:

* a *system file* (``schema: adpower-system/1``) with buses, lines and
  generators.  Two ship with the package as ``builtin:kundur_smib`` and
  ``builtin:kundur_smib_pss``;
* an *experiment config* (``schema: adpower-experiment/1``) naming the system
  file, the disturbance, the parameters to fit or tune, the loss, and where
  to write results.

:func:`run_experiment` returns a process exit code and writes CSV files and a
``summary.yaml`` into the output directory.  All randomness comes from
``numpy.random.default_rng(seed)``.
"""

from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .models import GenParams, SexsParams, Stab1Params
from .optimizer import (
    LossSpec,
    OptimizerAbort,
    OptProblem,
    OptTrace,
    ParamSpec,
    landscape_scan,
    loss_mse,
    optimize,
)
from .simulator import (
    Event,
    EventSchedule,
    Generator,
    PowerFlowError,
    SimulationInstability,
    SystemModel,
    Trajectory,
    run,
)

log = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "EXIT_ABORT",
    "EXIT_CONFIG",
    "EXIT_INSTABILITY",
    "EXIT_OK",
    "ExperimentConfig",
    "ParamRef",
    "ReferenceSeries",
    "add_noise",
    "build_system",
    "load_config",
    "load_reference",
    "load_system",
    "resample",
    "resolve_param",
    "run_experiment",
    "write_reference",
]

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_INSTABILITY = 0, 1, 2, 3

SYSTEM_SCHEMA = "adpower-system/1"
EXPERIMENT_SCHEMA = "adpower-experiment/1"
EXPERIMENTS = ("identify", "tune-pss", "scan", "simulate")
REFERENCE_HEADER = ("time_s", "delta_omega_pu")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration; the message names the key."""


def _fmt(x: float) -> str:
    return repr(float(x))


# reference series

@dataclass
class ReferenceSeries:
    times: np.ndarray
    values: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.shape != self.values.shape or self.times.ndim != 1:
            raise ValueError("times and values must be 1-D arrays of equal length")
        bad = np.flatnonzero(np.diff(self.times) <= 0)
        if bad.size:
            raise ValueError(f"times must be strictly increasing (sample {bad[0] + 1})")


def load_reference(path: str | Path) -> ReferenceSeries:
    """Read a ``time_s,delta_omega_pu`` CSV.  Errors name the file line."""
    path = Path(path)
    times, vals = [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != REFERENCE_HEADER:
            raise ConfigError(f"{path}: header must be '{','.join(REFERENCE_HEADER)}', got {header}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 2:
                raise ConfigError(f"{path}, line {line}: expected 2 columns, got {len(row)}")
            try:
                t, v = float(row[0]), float(row[1])
            except ValueError:
                raise ConfigError(f"{path}, line {line}: not a number: {row}") from None
            if times and t <= times[-1]:
                raise ConfigError(
                    f"{path}, line {line}: time {t} does not increase (previous {times[-1]})"
                )
            times.append(t)
            vals.append(v)
    if len(times) < 2:
        raise ConfigError(f"{path}: need at least two samples")
    return ReferenceSeries(np.array(times), np.array(vals), str(path))


def write_reference(path: str | Path, series: ReferenceSeries) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REFERENCE_HEADER)
        for t, v in zip(series.times, series.values):
            w.writerow((_fmt(t), _fmt(v)))


def resample(series: ReferenceSeries, grid: np.ndarray) -> np.ndarray:
    """Linear interpolation onto ``grid``; the grid may not leave the data range."""
    grid = np.asarray(grid, dtype=float)
    tol = 1e-9 * max(1.0, abs(series.times[-1]))
    if grid[0] < series.times[0] - tol or grid[-1] > series.times[-1] + tol:
        raise ValueError(
            f"simulation grid [{grid[0]}, {grid[-1]}] extends beyond reference data "
            f"[{series.times[0]}, {series.times[-1]}]"
        )
    return np.interp(grid, series.times, series.values)


def add_noise(series: ReferenceSeries, level: float, seed: int | None) -> ReferenceSeries:
    """Add white Gaussian noise with standard deviation ``level * RMS(values)``."""
    if level < 0:
        raise ValueError("noise level must be >= 0")
    if level == 0:
        return ReferenceSeries(series.times.copy(), series.values.copy(), series.source)
    rng = np.random.default_rng(seed)
    rms = float(np.sqrt(np.mean(series.values**2)))
    noisy = series.values + rng.normal(0.0, level * rms, series.values.shape)
    return ReferenceSeries(series.times.copy(), noisy, f"{series.source} + {level:g} RMS noise")


# system files

def _read_yaml(path: str | Path, what: str) -> dict:
    try:
        with Path(path).open() as fh:
            doc = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{what} not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    return doc


def _builtin(name: str) -> dict:
    res = resources.files("adpower") / "data" / f"{name}.yaml"
    if not res.is_file():
        raise ConfigError(f"unknown builtin system {name!r}")
    return yaml.safe_load(res.read_text())


def load_system(ref: str | Path, base_dir: Path | None = None) -> SystemModel:
    """Load a system from a YAML path or ``builtin:<name>``."""
    ref = str(ref)
    if ref.startswith("builtin:"):
        return build_system(_builtin(ref.split(":", 1)[1]), ref)
    path = Path(ref)
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    return build_system(_read_yaml(path, "system file"), str(path))


def _need(doc: dict, key: str, where: str):
    if key not in doc:
        raise ConfigError(f"{where}: missing key '{key}'")
    return doc[key]


def _device(cls, doc: dict, where: str, defaults: bool):
    names = set(cls.names())
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"{where}: unknown parameter(s) {sorted(unknown)}; known: {sorted(names)}")
    if not defaults:
        missing = names - set(doc)
        if missing:
            raise ConfigError(f"{where}: missing parameter(s) {sorted(missing)}")
    try:
        return cls(**{k: float(v) for k, v in doc.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def build_system(doc: dict, where: str = "system") -> SystemModel:
    if doc.get("schema") != SYSTEM_SCHEMA:
        raise ConfigError(f"{where}: 'schema' must be '{SYSTEM_SCHEMA}', got {doc.get('schema')!r}")
    buses = [str(b) for b in _need(doc, "buses", where)]
    index = {b: i for i, b in enumerate(buses)}

    def bus_of(name, ctx):
        if str(name) not in index:
            raise ConfigError(f"{ctx}: unknown bus {name!r}; buses are {buses}")
        return index[str(name)]

    y = np.zeros((len(buses), len(buses)), dtype=complex)
    for i, line in enumerate(doc.get("lines", [])):
        ctx = f"{where}: lines[{i}]"
        a, b = bus_of(_need(line, "from", ctx), ctx), bus_of(_need(line, "to", ctx), ctx)
        z = complex(float(line.get("r", 0.0)), float(_need(line, "x", ctx)))
        if z == 0:
            raise ConfigError(f"{ctx}: zero impedance")
        yl = 1 / z
        y[a, a] += yl
        y[b, b] += yl
        y[a, b] -= yl
        y[b, a] -= yl
    gens = []
    for i, g in enumerate(_need(doc, "generators", where)):
        ctx = f"{where}: generators[{i}]"
        name = str(_need(g, "name", ctx))
        params = _device(GenParams, _need(g, "params", ctx), f"{ctx}.params", defaults=False)
        avr = _device(SexsParams, g["avr"] or {}, f"{ctx}.avr", True) if "avr" in g else None
        pss = _device(Stab1Params, g["pss"] or {}, f"{ctx}.pss", True) if "pss" in g else None
        try:
            gens.append(Generator(name, bus_of(_need(g, "bus", ctx), ctx), params,
                                  float(g.get("P", 0.0)), float(g.get("V", 1.0)), avr, pss))
        except ValueError as exc:
            raise ConfigError(f"{ctx}: {exc}") from None
    try:
        return SystemModel(buses, y, gens, bus_of(_need(doc, "slack", where), where),
                           float(_need(doc, "s_base", where)), float(doc.get("f_n", 60.0)))
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


# parameter names

_DEVICES = {"gen": GenParams, "avr": SexsParams, "pss": Stab1Params}
_ATTR = {"gen": "params", "avr": "avr", "pss": "pss"}


def _norm(s: str) -> str:
    return s.replace("_", "").lower()


@dataclass(frozen=True)
class ParamRef:
    """One scalar parameter of one device of one generator."""

    generator: str
    device: str  # gen | avr | pss
    field: str

    @property
    def key(self) -> str:
        if self.device == "gen":
            return f"{self.generator}.{self.field}"
        return f"{self.generator}.{self.device}.{self.field}"

    def get(self, model: SystemModel) -> float:
        dev = getattr(model.generator(self.generator), _ATTR[self.device])
        return float(getattr(dev, self.field))


def resolve_param(model: SystemModel, name: str, generator: str | int | None = None) -> ParamRef:
    """Map a user-facing parameter name onto a :class:`ParamRef`.

    Accepted forms: ``G1.H``, ``G1.pss.K``, or a bare name plus ``generator``
    (a name, or a 1-based index).  Bare names may carry a device suffix
    (``H_gen``, ``K_pss``); underscores and case are ignored when matching
    field names, so ``T1`` finds ``T_1``.
    """
    parts = name.split(".")
    device = None
    if len(parts) == 3:
        generator, device, fname = parts
    elif len(parts) == 2:
        generator, fname = parts
    elif len(parts) == 1:
        fname = name
    else:
        raise ConfigError(f"cannot parse parameter name {name!r}")
    if device is None:
        for suffix in _DEVICES:
            if fname.lower().endswith("_" + suffix):
                device, fname = suffix, fname[: -len(suffix) - 1]
                break
    if generator is None:
        raise ConfigError(f"parameter {name!r}: say which generator (e.g. 'G1.{fname}')")
    if isinstance(generator, int) or str(generator).isdigit():
        k = int(generator)
        if not 1 <= k <= len(model.generators):
            raise ConfigError(f"parameter {name!r}: no generator number {k}")
        gen = model.generators[k - 1]
    else:
        try:
            gen = model.generator(str(generator))
        except KeyError:
            raise ConfigError(f"parameter {name!r}: unknown generator {generator!r}") from None
    devices = [device] if device else list(_DEVICES)
    if device is not None and device not in _DEVICES:
        raise ConfigError(f"parameter {name!r}: unknown device {device!r}")
    hits = []
    for dev in devices:
        if getattr(gen, _ATTR[dev]) is None:
            continue
        for f in _DEVICES[dev].names():
            if _norm(f) == _norm(fname):
                hits.append(ParamRef(gen.name, dev, f))
    if not hits:
        raise ConfigError(f"unknown parameter {name!r} for generator {gen.name}")
    if len(hits) > 1:
        opts = ", ".join(h.key for h in hits)
        raise ConfigError(f"parameter {name!r} is ambiguous ({opts}); qualify the device")
    return hits[0]


def apply_params(model: SystemModel, values: dict[ParamRef, Any]) -> SystemModel:
    """Copy of ``model`` with the given parameters replaced (values may be tape scalars)."""
    groups: dict[tuple[str, str], dict] = {}
    for ref, v in values.items():
        groups.setdefault((ref.generator, ref.device), {})[ref.field] = v
    for (gen, dev), vals in groups.items():
        model = model.with_device_params(gen, dev, **vals)
    return model


# experiment config

_OPT_DEFAULTS = dict(learning_rate=0.05, max_step=0.05, epsilon=1e-6, loss_threshold=None,
                     max_iter=200, lr_growth=1.5, lr_shrink=0.5, horizons=[], stage_epsilon=1e-4)
_DEFAULTS = {
    "integrator": {"dt": 0.005, "t_end": 10.0},
    "events": [{"kind": "short_circuit", "bus": 0, "t_on": 1.0, "t_off": 1.05}],
    "loss": {"kind": "mse", "signal": None, "window": None},
    "optimizer": _OPT_DEFAULTS,
    "noise": 0.0,
    "seed": 0,
    "output": {"dir": "out", "snapshot_every": 10},
    "scan": {"parameters": None, "grid": {"start": 0.5, "stop": 2.0, "points": 16}},
}


@dataclass
class ExperimentConfig:
    experiment: str
    system: SystemModel
    system_ref: str
    dt: float
    t_end: float
    schedule: EventSchedule
    params: list[tuple[ParamRef, np.ndarray, float | None, float | None]]
    loss: dict
    optimizer: dict
    noise: float
    seed: int
    out_dir: Path
    snapshot_every: int
    reference_csv: Path | None = None
    truth: dict[ParamRef, float] = field(default_factory=dict)
    scan_params: list[ParamRef] = field(default_factory=list)
    scan_factors: np.ndarray | None = None
    raw: dict = field(default_factory=dict)

    @property
    def signal(self) -> str:
        return self.loss["signal"]


def _merge(defaults: dict, doc: dict) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in doc.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _initial(spec, ctx) -> np.ndarray:
    if isinstance(spec, dict):
        if "logspace" in spec:
            lo, hi, n = spec["logspace"]
            return np.geomspace(float(lo), float(hi), int(n))
        if "linspace" in spec:
            lo, hi, n = spec["linspace"]
            return np.linspace(float(lo), float(hi), int(n))
        raise ConfigError(f"{ctx}: 'initial' mapping needs 'logspace' or 'linspace'")
    arr = np.atleast_1d(np.asarray(spec, dtype=float))
    if arr.ndim != 1 or arr.size == 0:
        raise ConfigError(f"{ctx}: 'initial' must be a number or a list of numbers")
    return arr


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    """Read and validate an experiment config, filling documented defaults."""
    path = Path(path)
    doc = _read_yaml(path, "config file")
    return config_from_dict(doc, base_dir=path.parent, overrides=overrides, where=str(path))


def config_from_dict(doc: dict, base_dir: Path = Path("."), overrides: dict | None = None,
                     where: str = "config") -> ExperimentConfig:
    if doc.get("schema") != EXPERIMENT_SCHEMA:
        raise ConfigError(f"{where}: 'schema' must be '{EXPERIMENT_SCHEMA}', got {doc.get('schema')!r}")
    known = set(_DEFAULTS) | {"schema", "experiment", "system", "parameters", "reference"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    cfg = _merge(_DEFAULTS, doc)
    for k, v in (overrides or {}).items():
        if v is not None:
            if k == "out":
                cfg["output"]["dir"] = str(v)
            else:
                cfg[k] = v

    kind = _need(cfg, "experiment", where)
    if kind not in EXPERIMENTS:
        raise ConfigError(f"{where}: 'experiment' must be one of {EXPERIMENTS}, got {kind!r}")
    sys_ref = str(_need(cfg, "system", where))
    model = load_system(sys_ref, base_dir)

    integ = cfg["integrator"]
    try:
        dt, t_end = float(integ["dt"]), float(integ["t_end"])
    except (KeyError, TypeError, ValueError):
        raise ConfigError(f"{where}: integrator needs numeric 'dt' and 't_end'") from None
    if not (dt > 0 and t_end > 0):
        raise ConfigError(f"{where}: integrator.dt and integrator.t_end must be > 0")

    events = []
    for i, ev in enumerate(cfg["events"] or []):
        ctx = f"{where}: events[{i}]"
        if ev.get("kind") != "short_circuit":
            raise ConfigError(f"{ctx}: only kind 'short_circuit' is supported")
        bus = ev.get("bus", 0)
        if isinstance(bus, str):
            if bus not in model.buses:
                raise ConfigError(f"{ctx}: unknown bus {bus!r}")
            bus = model.buses.index(bus)
        y_f = ev.get("y_fault")
        y_f = complex(*y_f) if y_f is not None else None
        events += [Event(float(_need(ev, "t_on", ctx)), "apply_fault", int(bus), y_f),
                   Event(float(_need(ev, "t_off", ctx)), "clear_fault")]
    try:
        schedule = EventSchedule(tuple(events))
        schedule.step_indices(dt)
    except ValueError as exc:
        raise ConfigError(f"{where}: events: {exc}") from None

    params = []
    for i, p in enumerate(cfg.get("parameters") or []):
        ctx = f"{where}: parameters[{i}]"
        ref = resolve_param(model, str(_need(p, "name", ctx)), p.get("generator"))
        init = _initial(p["initial"], ctx) if "initial" in p else np.array([ref.get(model)])
        lo, hi = (p.get("bounds") or [None, None])
        params.append((ref, init, None if lo is None else float(lo), None if hi is None else float(hi)))
    if kind in ("identify", "tune-pss") and not params:
        raise ConfigError(f"{where}: experiment '{kind}' needs a 'parameters' list")
    if len({len(p[1]) for p in params}) > 1:
        raise ConfigError(f"{where}: all parameters need the same number of initial guesses")

    loss = dict(cfg["loss"])
    if loss.get("kind") not in ("mse", "mae"):
        raise ConfigError(f"{where}: loss.kind must be 'mse' or 'mae'")
    if loss.get("signal") is None:
        loss["signal"] = f"{model.generators[0].name}.speed"
    if loss.get("window") is not None:
        loss["window"] = tuple(float(x) for x in loss["window"])
    if loss["kind"] == "mae" and loss.get("window") is None:
        loss["window"] = (0.0, t_end)

    opt = _merge(_OPT_DEFAULTS, cfg["optimizer"] or {})
    unknown = set(opt) - set(_OPT_DEFAULTS)
    if unknown:
        raise ConfigError(f"{where}: unknown optimizer key(s) {sorted(unknown)}")
    for k in ("learning_rate", "max_step", "epsilon"):
        if not float(opt[k]) > 0:
            raise ConfigError(f"{where}: optimizer.{k} must be > 0")
    opt["horizons"] = [float(h) for h in opt["horizons"]]
    if any(not 0 < h < t_end for h in opt["horizons"]):
        raise ConfigError(f"{where}: optimizer.horizons must lie strictly inside (0, t_end)")

    noise = float(cfg["noise"])
    if noise < 0:
        raise ConfigError(f"{where}: noise must be >= 0")
    seed = int(cfg["seed"])

    truth, ref_csv = {}, None
    refdoc = cfg.get("reference") or {}
    if "csv" in refdoc:
        ref_csv = Path(refdoc["csv"])
        if not ref_csv.is_absolute():
            ref_csv = base_dir / ref_csv
    for k, v in (refdoc.get("truth") or {}).items():
        truth[resolve_param(model, str(k), refdoc.get("generator"))] = float(v)
    if kind == "identify" and ref_csv is None and not truth:
        raise ConfigError(f"{where}: identify needs reference.csv or reference.truth")
    if "csv" in refdoc and "truth" in refdoc:
        log.info("reference.csv given; reference.truth is used only for error reporting")

    scan_refs, factors = [], None
    if kind == "scan":
        names = cfg["scan"].get("parameters")
        g0 = model.generators[0].name
        if names is None:
            scan_refs = [ParamRef(g0, "gen", f) for f in GenParams.names() if f != "S_n"]
        else:
            scan_refs = [resolve_param(model, str(n), cfg["scan"].get("generator", g0)) for n in names]
        grid = cfg["scan"]["grid"]
        factors = np.linspace(float(grid["start"]), float(grid["stop"]), int(grid["points"]))
        if factors.size < 3:
            raise ConfigError(f"{where}: scan.grid.points must be >= 3")

    out = cfg["output"]
    return ExperimentConfig(
        experiment=kind, system=model, system_ref=sys_ref, dt=dt, t_end=t_end, schedule=schedule,
        params=params, loss=loss, optimizer=opt, noise=noise, seed=seed,
        out_dir=Path(out["dir"]), snapshot_every=int(out.get("snapshot_every", 10)),
        reference_csv=ref_csv, truth=truth, scan_params=scan_refs, scan_factors=factors, raw=cfg,
    )


# orchestration

def _simulate(cfg: ExperimentConfig, model: SystemModel, t_end: float,
              on_nonfinite: str = "continue") -> Trajectory:
    return run(model, cfg.schedule, t_end, cfg.dt, on_nonfinite=on_nonfinite,
               record=("speed", "angle"))


def _grid(cfg: ExperimentConfig, t_end: float | None = None) -> np.ndarray:
    n = int(round((t_end or cfg.t_end) / cfg.dt))
    return np.arange(n + 1) * cfg.dt


def _reference(cfg: ExperimentConfig) -> ReferenceSeries:
    """Reference on the simulation grid, noise included."""
    if cfg.reference_csv is not None:
        series = load_reference(cfg.reference_csv)
    else:
        model = apply_params(cfg.system, cfg.truth)
        traj = _simulate(cfg, model, cfg.t_end, on_nonfinite="raise")
        series = ReferenceSeries(traj.times, traj.values(cfg.signal)[:, 0], "simulated truth")
    grid = _grid(cfg)
    series = ReferenceSeries(grid, resample(series, grid), series.source)
    return add_noise(series, cfg.noise, cfg.seed)


class _Writer:
    """Streams the optimisation trace and trajectory snapshots to disk."""

    def __init__(self, cfg: ExperimentConfig, names: list[str]):
        self.cfg = cfg
        self.names = names
        self.snap_dir = cfg.out_dir / "trajectories"
        self.snap_dir.mkdir(parents=True, exist_ok=True)
        self.fh = (cfg.out_dir / "trace.csv").open("w", newline="")
        self.w = csv.writer(self.fh, lineterminator="\n")
        cols = ["stage", "iteration", "lane", "loss", "accepted"]
        cols += names + [f"grad_{n}" for n in names] + [f"step_{n}" for n in names]
        cols.append("learning_rate")
        self.w.writerow(cols)
        self.stage = 0
        self.offset = 0

    def __call__(self, it: int, trace: OptTrace, traj: Trajectory) -> None:
        k = self.offset + it
        params, grad, step = trace.params[-1], trace.grad[-1], trace.step[-1]
        for lane in range(params.shape[1]):
            self.w.writerow([self.stage, k, lane, _fmt(trace.loss[-1][lane]),
                             int(trace.accepted[-1][lane])]
                            + [_fmt(v) for v in params[:, lane]]
                            + [_fmt(v) for v in grad[:, lane]]
                            + [_fmt(v) for v in step[:, lane]]
                            + [_fmt(trace.lr[-1][lane])])
        self.fh.flush()
        if self.cfg.snapshot_every > 0 and it % self.cfg.snapshot_every == 0:
            self.snapshot(f"iter_{k:04d}", traj)

    def snapshot(self, tag: str, traj: Trajectory) -> None:
        vals = traj.values(self.cfg.signal)
        with (self.snap_dir / f"{tag}.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time_s"] + [f"lane{i}" for i in range(vals.shape[1])])
            for t, row in zip(traj.times, vals):
                w.writerow([_fmt(t)] + [_fmt(v) for v in row])

    def close(self) -> None:
        self.fh.close()


def _optimise(cfg: ExperimentConfig, reference: ReferenceSeries | None, writer: _Writer):
    """Run the configured horizon stages, each warm-started from the last."""
    opt = cfg.optimizer
    refs = [p[0] for p in cfg.params]
    theta = np.array([p[1] for p in cfg.params])
    scale = np.abs(theta)
    scale[scale == 0] = 1.0
    stages = list(opt["horizons"]) + [cfg.t_end]
    traces = []
    for s, horizon in enumerate(stages):
        last = s == len(stages) - 1
        n = int(round(horizon / cfg.dt)) + 1
        if cfg.loss["kind"] == "mse":
            loss = LossSpec("mse", cfg.signal, reference=reference.values[:n],
                            window=cfg.loss.get("window"))
        else:
            w = cfg.loss["window"]
            loss = LossSpec("mae", cfg.signal, window=(w[0], min(w[1], horizon)))
        problem = OptProblem(
            [ParamSpec(r.key, theta[i], cfg.params[i][2], cfg.params[i][3], scale[i])
             for i, r in enumerate(refs)],
            loss,
            learning_rate=float(opt["learning_rate"]),
            max_step=float(opt["max_step"]),
            epsilon=float(opt["epsilon"] if last else opt["stage_epsilon"]),
            loss_threshold=opt["loss_threshold"] if last else None,
            max_iter=int(opt["max_iter"]),
            lr_growth=float(opt["lr_growth"]),
            lr_shrink=float(opt["lr_shrink"]),
        )
        key_of = {r.key: r for r in refs}

        def simulate(leaves, _h=horizon):
            model = apply_params(cfg.system, {key_of[k]: v for k, v in leaves.items()})
            return _simulate(cfg, model, _h)

        writer.stage = s
        trace = optimize(problem, simulate, writer)
        writer.offset += len(trace.loss)
        traces.append(trace)
        theta = trace.final_params.copy()
        log.info("stage %d (t_end %.3g s): %s after %d iterations", s, horizon, trace.reason,
                 trace.iterations)
    return traces


def _summary_base(cfg: ExperimentConfig) -> dict:
    return {
        "schema": "adpower-summary/1",
        "experiment": cfg.experiment,
        "system": cfg.system_ref,
        "seed": cfg.seed,
        "noise": cfg.noise,
        "dt": cfg.dt,
        "t_end": cfg.t_end,
    }


def _write_summary(cfg: ExperimentConfig, summary: dict) -> None:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    with (cfg.out_dir / "summary.yaml").open("w") as fh:
        yaml.safe_dump(summary, fh, sort_keys=False)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_plain(v) for v in x.tolist()]
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, (np.integer, int)) and not isinstance(x, bool):
        return int(x)
    return x


def run_experiment(cfg: ExperimentConfig) -> int:
    """Run one experiment, write its artifacts, return the exit code."""
    t0 = time.perf_counter()
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    summary = _summary_base(cfg)
    try:
        if cfg.experiment == "simulate":
            code = _run_simulate(cfg, summary)
        elif cfg.experiment == "scan":
            code = _run_scan(cfg, summary)
        else:
            code = _run_optimisation(cfg, summary)
    except SimulationInstability as exc:
        summary.update(status="unstable", message=str(exc), unstable_time_s=exc.time)
        code = EXIT_INSTABILITY
    except (PowerFlowError, ConfigError) as exc:
        summary.update(status="config_error", message=str(exc))
        code = EXIT_CONFIG
    summary["exit_code"] = code
    summary["wall_time_s"] = round(time.perf_counter() - t0, 3)
    _write_summary(cfg, _plain(summary))
    return code


def _run_simulate(cfg: ExperimentConfig, summary: dict) -> int:
    values = {r: float(v[0]) for r, v, *_ in cfg.params}
    values.update(cfg.truth)
    model = apply_params(cfg.system, values)
    try:
        traj = _simulate(cfg, model, cfg.t_end, on_nonfinite="raise")
    except SimulationInstability as exc:
        t = exc.trajectory
        write_reference(cfg.out_dir / "trajectory.csv",
                        ReferenceSeries(t.times[: len(t.signal(cfg.signal))],
                                        t.values(cfg.signal)[:, 0], "partial"))
        raise
    series = add_noise(ReferenceSeries(traj.times, traj.values(cfg.signal)[:, 0], "simulate"),
                       cfg.noise, cfg.seed)
    write_reference(cfg.out_dir / "trajectory.csv", series)
    summary.update(status="ok", samples=len(series.times),
                   parameters={r.key: v for r, v in values.items()},
                   max_abs_signal=float(np.max(np.abs(series.values))))
    return EXIT_OK


def _run_optimisation(cfg: ExperimentConfig, summary: dict) -> int:
    reference = _reference(cfg) if cfg.loss["kind"] == "mse" else None
    if reference is not None:
        write_reference(cfg.out_dir / "reference.csv", reference)
    names = [p[0].key for p in cfg.params]
    writer = _Writer(cfg, names)
    try:
        traces = _optimise(cfg, reference, writer)
    except OptimizerAbort as exc:
        writer.close()
        summary.update(status="aborted", message=str(exc), iterations=exc.trace.iterations)
        return EXIT_ABORT
    except ValueError as exc:  # an optimiser step produced an impossible parameter set
        writer.close()
        summary.update(status="config_error", message=str(exc))
        return EXIT_CONFIG
    final = traces[-1]
    best = final.best_lane
    model = apply_params(cfg.system, {p[0]: float(final.final_params[i, best])
                                      for i, p in enumerate(cfg.params)})
    traj = _simulate(cfg, model, cfg.t_end)
    writer.snapshot("final", traj)
    writer.close()
    write_reference(cfg.out_dir / "trajectory_final.csv",
                    ReferenceSeries(traj.times, traj.values(cfg.signal)[:, 0], "best lane"))

    first = traces[0]
    summary.update(
        status="ok",
        termination=final.reason,
        stages=[{"t_end": h, "iterations": t.iterations, "termination": t.reason}
                for h, t in zip(list(cfg.optimizer["horizons"]) + [cfg.t_end], traces)],
        iterations=sum(t.iterations for t in traces),
        simulations=sum(t.simulations for t in traces),
        lanes=int(final.final_params.shape[1]),
        best_lane=best,
        lane_status=[str(s) for s in final.status],
        initial_params={n: [float(v) for v in first.params[0][i]] for i, n in enumerate(names)},
        final_params={n: float(final.final_params[i, best]) for i, n in enumerate(names)},
        lane_final_params={n: [float(v) for v in final.final_params[i]] for i, n in enumerate(names)},
        final_loss=float(final.final_loss[best]),
        lane_final_loss=[float(v) for v in final.final_loss],
    )
    if len(traces) == 1 or cfg.experiment == "tune-pss":
        summary["initial_loss"] = [float(v) for v in first.loss[0]]
        init = float(first.loss[0][best])
        if np.isfinite(init) and init > 0:
            summary["loss_reduction_pct"] = 100.0 * (1.0 - float(final.final_loss[best]) / init)
    if cfg.truth:
        err = {}
        for i, n in enumerate(names):
            ref = cfg.params[i][0]
            if ref in cfg.truth:
                true = cfg.truth[ref]
                err[n] = [100.0 * (float(v) - true) / true for v in final.final_params[i]]
        summary["truth"] = {r.key: v for r, v in cfg.truth.items()}
        summary["relative_error_pct"] = {n: e[best] for n, e in err.items()}
        summary["lane_relative_error_pct"] = err
    return EXIT_OK


def _run_scan(cfg: ExperimentConfig, summary: dict) -> int:
    reference = _reference(cfg)
    write_reference(cfg.out_dir / "reference.csv", reference)
    truth_model = apply_params(cfg.system, cfg.truth)
    nominal = {r.key: r.get(truth_model) for r in cfg.scan_params}
    key_of = {r.key: r for r in cfg.scan_params}
    n = len(reference.values)

    def make_loss(name, leaf):
        model = apply_params(truth_model, {key_of[name]: leaf})
        traj = _simulate(cfg, model, cfg.t_end)
        return loss_mse(traj.signal(cfg.signal)[:n], reference.values)

    def validate(name, value):
        try:
            apply_params(truth_model, {key_of[name]: float(value)})
            return True
        except ValueError:
            return False

    results = landscape_scan(make_loss, list(nominal), nominal, cfg.scan_factors, validate)
    with (cfg.out_dir / "scan.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "factor", "value", "loss", "grad", "grad_normalized", "valid",
                    "sign_change"])
        for r in results:
            changes = set(r.sign_changes())
            ng = r.normalized_grad
            for i in range(len(r.factors)):
                w.writerow([r.name, _fmt(r.factors[i]), _fmt(r.values[i]), _fmt(r.loss[i]),
                            _fmt(r.grad[i]), _fmt(ng[i]), int(r.valid[i]), int(i in changes)])
    summary.update(
        status="ok",
        gradient_normalisation="per parameter row, divided by the largest finite |gradient|",
        factors=[float(f) for f in cfg.scan_factors],
        sign_changes={r.name: [float(r.factors[i]) for i in r.sign_changes()] for r in results},
        invalid_cells={r.name: [float(r.factors[i]) for i in np.flatnonzero(~r.valid)]
                       for r in results},
        non_finite_cells={r.name: [float(r.factors[i]) for i in
                                   np.flatnonzero(r.valid & ~np.isfinite(r.loss))]
                          for r in results},
    )
    return EXIT_OK
