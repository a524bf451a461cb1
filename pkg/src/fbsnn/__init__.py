"""Forward-backward stochastic neural network solvers for incompressible
Navier-Stokes, a diagonalized Cahn-Hilliard system, and their coupling,
with whole-space, absorbing, reflecting, mixed, and periodic boundary
handling, plus a benchmark command line."""

from .estimator import FbsnnSolver
from .experiments import EXPERIMENT_IDS, ExperimentConfig, build_plan, run_experiment
from .fnn import Network, load_checkpoint, save_checkpoint
from .metrics import MetricsReport, relative_errors

__version__ = "0.1.0"

__all__ = [
    "EXPERIMENT_IDS",
    "ExperimentConfig",
    "FbsnnSolver",
    "MetricsReport",
    "Network",
    "build_plan",
    "load_checkpoint",
    "relative_errors",
    "run_experiment",
    "save_checkpoint",
    "__version__",
]
