"""Second-kind Fredholm and Volterra equations by the Nystrom method."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .discretize import (Arity, GridFunction, MatrixKernelField, block_matrix,
                         unblock_matrix, volterra_weights)
from .errors import DomainError, SingularOperatorError

#: reciprocal 1-norm condition estimate below which a system is declared singular
RCOND_MIN = 1e-12


def dense_solve(M: np.ndarray, rhs: np.ndarray, what: str = "Nystrom system") -> np.ndarray:
    """LU solve with a condition check.

    Raises SingularOperatorError when the reciprocal condition estimate is
    below :data:`RCOND_MIN`.
    """
    anorm = np.linalg.norm(M, 1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(M, check_finite=True)
    if anorm == 0.0 or np.any(np.diag(lu) == 0.0):
        rcond = 0.0
    else:
        rcond, info = sla.lapack.dgecon(lu, anorm, norm="1")
    if not rcond >= RCOND_MIN:
        raise SingularOperatorError(
            f"{what} is singular (reciprocal condition {rcond:.3e} < {RCOND_MIN:g}); "
            "the homogeneous equation has a nontrivial solution at this discretization",
            rcond=float(rcond))
    return sla.lu_solve((lu, piv), rhs)


def _square_two_arg(K: MatrixKernelField):
    if K.arity is not Arity.TWO:
        raise DomainError("expected a two-argument kernel")
    if K.rows != K.cols:
        raise DomainError(f"kernel blocks must be square, got {K.rows}x{K.cols}")


def nystrom_matrix(K: MatrixKernelField) -> np.ndarray:
    """Block matrix of the discrete operator f -> sum_j w_j K(., x_j) f_j."""
    return block_matrix(K.data * K.grid.weights[None, :, None, None])


def solve_second_kind(K: MatrixKernelField, g: GridFunction, sign: int = 1) -> GridFunction:
    """Solve w = g + sign * int K(x, y) w(y) dy on the grid."""
    _square_two_arg(K)
    if sign not in (1, -1):
        raise DomainError("sign must be +1 or -1")
    if not K.grid.same_as(g.grid) or g.dim != K.rows:
        raise DomainError("kernel and right-hand side do not match")
    size = K.grid.n * K.rows
    M = np.eye(size) - sign * nystrom_matrix(K)
    w = dense_solve(M, g.values.reshape(size))
    return GridFunction(g.grid, w.reshape(K.grid.n, K.rows))


@dataclass(frozen=True, eq=False)
class ResolventKernel:
    base: MatrixKernelField
    resolvent: MatrixKernelField
    residual_norm: float
    tolerance: float


def resolvent(A: MatrixKernelField, tol: float = 1e-9) -> ResolventKernel:
    """Resolvent K of A: K(x, y) = A(x, y) + int A(x, z) K(z, y) dz.

    All column blocks share one LU factorization of I - A W.
    """
    _square_two_arg(A)
    N, n = A.grid.n, A.rows
    AW = nystrom_matrix(A)
    Ablk = block_matrix(A.data)
    Kblk = dense_solve(np.eye(N * n) - AW, Ablk, "resolvent system")
    defect = Kblk - Ablk - AW @ Kblk
    scale = 1.0 + np.max(np.abs(Ablk), initial=0.0)
    residual = float(np.max(np.abs(defect), initial=0.0)) / scale
    if residual > tol:
        raise SingularOperatorError(
            f"resolvent defect {residual:.3e} exceeds {tol:g}; system is ill-conditioned")
    K = MatrixKernelField(A.grid, Arity.TWO, unblock_matrix(Kblk, N, N, n, n))
    return ResolventKernel(A, K, residual, tol)


def resolvent_identity_defect(res: ResolventKernel) -> float:
    """Max-norm of (I - A W)(I + K W) - I, the discrete (d - A)o(d + K) = d."""
    A = res.base
    n = A.grid.n * A.rows
    AW = nystrom_matrix(A)
    KW = nystrom_matrix(res.resolvent)
    return float(np.max(np.abs((np.eye(n) - AW) @ (np.eye(n) + KW) - np.eye(n))))


def solve_volterra_second_kind(C: MatrixKernelField, g: GridFunction,
                               direction: str = "forward") -> GridFunction:
    """Solve a second-kind Volterra equation on the grid.

    forward:  w(t) = g(t) + int_a^t C(t, s) w(s) ds
    backward: w(t) = g(t) + int_t^b w(s) C(s, t) ds   (w a row vector)

    The kernel is masked to the causal (anticausal) triangle and each row
    uses the trapezoid weights of its own subinterval.
    """
    _square_two_arg(C)
    if not C.grid.same_as(g.grid) or g.dim != C.rows:
        raise DomainError("kernel and right-hand side do not match")
    if direction not in ("forward", "backward"):
        raise DomainError(f"direction must be forward or backward, got {direction!r}")
    N, n = C.grid.n, C.rows
    nu = volterra_weights(C.grid, backward=direction == "backward")
    if direction == "forward":
        blocks = nu[:, :, None, None] * C.data
    else:
        # row convention: w_i^T = g_i^T + sum_j nu_ij C(t_j, t_i)^T w_j^T
        blocks = nu[:, :, None, None] * np.swapaxes(C.data, 0, 1).swapaxes(-1, -2)
    M = np.eye(N * n) - block_matrix(blocks)
    w = dense_solve(M, g.values.reshape(N * n), "Volterra system")
    return GridFunction(g.grid, w.reshape(N, n))
