"""Numerical laboratory for exact controllability of a refined stochastic
wave system: weight geometry, forward/adjoint solvers, identity and
observability verification, HUM control synthesis."""

from .geometry import (CarlemanParams, ConditionReport, ControlTimeReport,
                       GeometrySpec, choose_beta, compute_report,
                       verify_conditions)
from .grid import Grid
from .timegrid import TimeGrid, timegrid_for
from .coefficients import CoefficientSet
from .noise import BrownianPath, Ensemble, mc_mean, sample_path
from .forward import ControlTriple, solve_forward
from .adjoint import TerminalData, solve_adjoint

__version__ = "0.1.0"

__all__ = [
    "BrownianPath", "CarlemanParams", "CoefficientSet", "ConditionReport",
    "ControlTimeReport", "ControlTriple", "Ensemble", "GeometrySpec", "Grid",
    "TerminalData", "TimeGrid", "choose_beta", "compute_report", "mc_mean",
    "sample_path", "solve_adjoint", "solve_forward", "timegrid_for",
    "verify_conditions", "__version__",
]
