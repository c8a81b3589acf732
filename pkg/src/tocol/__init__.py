"""Time-optimal trajectory optimization by Hermite-Simpson collocation.

The transcription uses a single shared step length as the decision
variable for the final time, is solved by a sparse augmented-Lagrangian
method and can be run in a shrinking-horizon predictive control loop.
"""

from .mpc import MpcConfig, mpc_step, run_closed_loop
from .solver import SolverConfig, SolverResult, Status, solve
from .systems import PropagatorConfig, SystemModel, make_double_integrator, make_linear, make_rocket, make_vdp
from .trajectory import Solution, dynamics_error, solve_ocp, total_variation, violation_profile
from .transcription import CollocationForm, ControlParam, OcpSpec, TargetSpec, assemble_nlp, initial_guess

__version__ = "0.1.0"

__all__ = [
    "CollocationForm", "ControlParam", "MpcConfig", "OcpSpec", "PropagatorConfig", "Solution",
    "SolverConfig", "SolverResult", "Status", "SystemModel", "TargetSpec", "assemble_nlp",
    "dynamics_error", "initial_guess", "make_double_integrator", "make_linear", "make_rocket",
    "make_vdp", "mpc_step", "run_closed_loop", "solve", "solve_ocp", "total_variation",
    "violation_profile",
]
