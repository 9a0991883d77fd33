"""Exception hierarchy.

Problem-input errors derive from :class:`ProblemError`, numerical failures
from :class:`SolverError`. The CLI maps the two families (and
:class:`NonConvergenceError`) to distinct exit codes.
"""

from __future__ import annotations


class IEControlError(Exception):
    """Base class for all package errors."""


class DomainError(IEControlError, ValueError):
    """Invalid grid parameters or mismatched grids/shapes."""


class ProblemError(IEControlError):
    """Malformed or inconsistent problem definition."""


class ProblemSyntaxError(ProblemError):
    """JSON or expression syntax error.

    ``line`` and ``column`` are 1-based positions in the problem document
    (JSON errors) or in the expression string (expression errors).
    """

    def __init__(self, message: str, line: int | None = None,
                 column: int | None = None, source: str | None = None):
        self.line = line
        self.column = column
        self.source = source
        where = []
        if source:
            where.append(source)
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class UnknownRoleError(ProblemError):
    """A kernel role or top-level key that is not part of the schema."""


class ShapeError(ProblemError):
    """A kernel matrix whose shape disagrees with the declared dimensions."""


class UnknownIdentifierError(ProblemError):
    """An expression references a variable or function that is not allowed."""


class SolverError(IEControlError):
    """Numerical failure while solving a problem."""


class EvaluationError(SolverError):
    """Expression evaluation left the function's domain (log of a
    nonpositive number, division by zero, ...)."""


class SingularOperatorError(SolverError):
    """Dense Nystrom system is numerically singular.

    At the discrete level this is the failing branch of the Fredholm
    alternative: the homogeneous equation has a nontrivial solution.
    """

    def __init__(self, message: str, rcond: float | None = None):
        self.rcond = rcond
        super().__init__(message)


class PreconditionError(SolverError):
    """An operation was called on data violating its precondition."""


class GradientCheckError(SolverError):
    """A user-supplied state gradient disagrees with finite differences."""


class VerificationError(SolverError):
    """A post-solve consistency check failed."""


class NonConvergenceError(IEControlError):
    """Iteration budget exhausted; ``history`` holds per-iteration residuals."""

    def __init__(self, message: str, history=None):
        self.history = list(history or [])
        super().__init__(message)
