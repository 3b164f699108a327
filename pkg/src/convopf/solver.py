"""Solvers: the interior-point NLP solver and the Newton-Raphson power flow."""

from .ipm import (
    INFEASIBLE,
    MAX_ITER,
    NUMERICAL_FAILURE,
    OPTIMAL,
    Solution,
    SolverOptions,
    kkt_residuals,
    solve,
    write_log_csv,
)
from .powerflow import PfSolution, bus_mismatch, dispatch_from_point, newton_raphson_pf

__all__ = [
    "Solution",
    "SolverOptions",
    "solve",
    "kkt_residuals",
    "write_log_csv",
    "OPTIMAL",
    "MAX_ITER",
    "INFEASIBLE",
    "NUMERICAL_FAILURE",
    "PfSolution",
    "newton_raphson_pf",
    "dispatch_from_point",
    "bus_mismatch",
]
