"""Optimal control of linear and nonlinear Fredholm and Volterra integral equations."""

from .discretize import (Arity, Grid, GridFunction, MatrixKernelField, Rule, make_grid,
                         volterra_weights)
from .errors import (DomainError, IEControlError, NonConvergenceError, ProblemError,
                     SingularOperatorError, SolverError)
from .kernelspec import ProblemKind, ProblemSpec, load_problem, parse_problem

__all__ = [
    "Arity", "Grid", "GridFunction", "MatrixKernelField", "Rule", "make_grid",
    "volterra_weights", "DomainError", "IEControlError", "NonConvergenceError",
    "ProblemError", "SingularOperatorError", "SolverError", "ProblemKind", "ProblemSpec",
    "load_problem", "parse_problem",
]
