"""Frequency control and congestion management on lossless power networks.

Physical grid model (``network``, ``dynamics``), the unified controller, its
decoupled variant and an AGC baseline (``controller``), small-signal
analysis (``stability``), the dispatch optimum the controllers should settle
at (``oracle``) and scenario-driven experiments (``experiments``, ``cli``).
"""

from .controller import AGC, DROOP, DUC, UC, ControllerConfig
from .dynamics import ClosedLoop, Disturbance, TurbineModel, integrate, rk4_step
from .network import GridModel, data_path, grid_from_dict, line_flows, load_grid, solve_equilibrium
from .oracle import DispatchProblem, DispatchSolution, solve_dispatch, verify_equilibrium
from .stability import EigenReport, LinearModel, eigenvalues, gain_sweep, linearize

__version__ = "0.1.0"

__all__ = [
    "AGC", "DROOP", "DUC", "UC", "ControllerConfig", "ClosedLoop", "Disturbance", "TurbineModel",
    "integrate", "rk4_step", "GridModel", "data_path", "grid_from_dict", "line_flows", "load_grid",
    "solve_equilibrium", "DispatchProblem", "DispatchSolution", "solve_dispatch", "verify_equilibrium",
    "EigenReport", "LinearModel", "eigenvalues", "gain_sweep", "linearize",
]
