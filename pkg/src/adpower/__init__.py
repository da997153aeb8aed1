"""Differentiable power system simulation with a reverse-mode tape.

Make parameters tape variables, simulate, evaluate a loss, call
``backward`` once: gradients for every parameter come back together.
"""

from .cli_io import apply_params, load_system, resolve_param
from .models import GenParams, SexsParams, Stab1Params
from .optimizer import (
    LossSpec,
    OptimizerAbort,
    OptProblem,
    OptTrace,
    ParamSpec,
    clipped_step,
    fd_gradient,
    landscape_scan,
    loss_mae_window,
    loss_mse,
    optimize,
)
from .phasor import AdmittanceMatrix, Phasor, SingularMatrixError, solve_network
from .simulator import (
    RUN_COUNTER,
    EventSchedule,
    Generator,
    SimulationInstability,
    SystemModel,
    Trajectory,
    init_steady_state,
    run,
)
from .tape import ADScalar, DomainError, Tape, backward, var

__version__ = "0.1.0"

__all__ = [
    "ADScalar",
    "AdmittanceMatrix",
    "DomainError",
    "EventSchedule",
    "GenParams",
    "Generator",
    "LossSpec",
    "OptProblem",
    "OptTrace",
    "OptimizerAbort",
    "ParamSpec",
    "Phasor",
    "RUN_COUNTER",
    "SexsParams",
    "SimulationInstability",
    "SingularMatrixError",
    "Stab1Params",
    "SystemModel",
    "Tape",
    "Trajectory",
    "apply_params",
    "backward",
    "clipped_step",
    "fd_gradient",
    "init_steady_state",
    "landscape_scan",
    "load_system",
    "loss_mae_window",
    "loss_mse",
    "optimize",
    "resolve_param",
    "run",
    "solve_network",
    "var",
]
