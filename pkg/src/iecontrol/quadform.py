"""Quadratic functionals on L2 and their minimization.

    E(w) = 1/2 <<w, K2 w>> + int { 1/2 w^T K1 w + r0^T w } dx

A pair (K1, K2) is certified positive definite when every K1(x) is SPD
and the smallest eigenvalue of the discretized operator
K1^{-1/2}(x) K2(x, y) K1^{-1/2}(y) exceeds -1. The minimizer then solves
the second-kind equation K1 w + int K2 w + r0 = 0.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from . import fredholm
from .discretize import Arity, GridFunction, MatrixKernelField, block_matrix
from .errors import DomainError, PreconditionError, SingularOperatorError

PD_MARGIN = 1e-9
SYMMETRY_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class QuadFormProblem:
    K1: MatrixKernelField
    K2: MatrixKernelField
    r0: GridFunction

    def __post_init__(self):
        if self.K1.arity is not Arity.ONE or self.K2.arity is not Arity.TWO:
            raise DomainError("K1 must be one-argument and K2 two-argument")
        n = self.r0.dim
        if (self.K1.rows, self.K1.cols) != (n, n) or (self.K2.rows, self.K2.cols) != (n, n):
            raise DomainError(f"K1, K2 blocks must be {n}x{n}")
        if not (self.K1.grid.same_as(self.r0.grid) and self.K2.grid.same_as(self.r0.grid)):
            raise DomainError("K1, K2 and r0 must share one grid")

    @property
    def grid(self):
        return self.r0.grid

    @property
    def n(self) -> int:
        return self.r0.dim

    @classmethod
    def from_spec(cls, spec, grid) -> "QuadFormProblem":
        from .kernelspec import grid_function, kernel_field
        return cls(kernel_field(spec, "K1", grid), kernel_field(spec, "K2", grid),
                   grid_function(spec, "r0", grid))


class Verdict(str, enum.Enum):
    POSITIVE_DEFINITE = "PositiveDefinite"
    POSITIVE_SEMIDEFINITE = "PositiveSemiDefinite"
    INDEFINITE = "Indefinite"


@dataclass(frozen=True)
class PdCertificate:
    min_eigenvalue: float | None   # None when some K1(x) is not SPD
    verdict: Verdict
    k1_spd: bool
    grid_n: int

    def to_dict(self) -> dict:
        return {"min_eigenvalue": self.min_eigenvalue, "verdict": self.verdict.value,
                "k1_spd": self.k1_spd, "grid_n": self.grid_n}


@dataclass(frozen=True, eq=False)
class QuadFormSolution:
    w_star: GridFunction
    E_min: float
    certificate: PdCertificate
    stationary_only: bool
    identity_gap: float        # |E(w*) - 1/2 <r0, w*>|
    equation_residual: float   # max-norm defect of K1 w + int K2 w + r0


def symmetrize(K1: MatrixKernelField, K2: MatrixKernelField):
    """K1 -> (K1 + K1^T)/2 and K2(x, y) -> (K2(x, y) + K2(y, x)^T)/2."""
    S1 = 0.5 * (K1.data + np.swapaxes(K1.data, -1, -2))
    S2 = 0.5 * (K2.data + np.swapaxes(np.swapaxes(K2.data, 0, 1), -1, -2))
    return (MatrixKernelField(K1.grid, Arity.ONE, S1),
            MatrixKernelField(K2.grid, Arity.TWO, S2))


def symmetrized(p: QuadFormProblem) -> QuadFormProblem:
    K1, K2 = symmetrize(p.K1, p.K2)
    return QuadFormProblem(K1, K2, p.r0)


def _check_w(p: QuadFormProblem, w: GridFunction):
    if not w.grid.same_as(p.grid) or w.dim != p.n:
        raise DomainError("w does not match the problem's grid/dimension")


def eval_Eq(p: QuadFormProblem, w: GridFunction) -> float:
    """Purely quadratic part of E."""
    _check_w(p, w)
    q = p.grid.weights
    v = w.values
    local = 0.5 * np.einsum("i,ia,iab,ib->", q, v, p.K1.data, v)
    double = 0.5 * np.einsum("i,j,ia,ijab,jb->", q, q, v, p.K2.data, v)
    return float(local + double)


def eval_E(p: QuadFormProblem, w: GridFunction) -> float:
    _check_w(p, w)
    linear = np.einsum("i,ia,ia->", p.grid.weights, p.r0.values, w.values)
    return eval_Eq(p, w) + float(linear)


def extended_kernel(p: QuadFormProblem) -> np.ndarray:
    """Block kernel [[K1(x)/|G|, K2(x,y)], [K2(y,x), K1(y)/|G|]], shape (N, N, 2n, 2n)."""
    N, n = p.grid.n, p.n
    G = p.grid.measure
    Kt = np.empty((N, N, 2 * n, 2 * n))
    Kt[:, :, :n, :n] = p.K1.data[:, None] / G
    Kt[:, :, :n, n:] = p.K2.data
    Kt[:, :, n:, :n] = np.swapaxes(p.K2.data, 0, 1)
    Kt[:, :, n:, n:] = p.K1.data[None, :] / G
    return Kt


def _stacked_pair(w: GridFunction, v: GridFunction) -> np.ndarray:
    N = w.grid.n
    z = np.empty((N, N, 2 * w.dim))
    z[:, :, :w.dim] = w.values[:, None, :]
    z[:, :, w.dim:] = v.values[None, :, :]
    return z


def eval_E_extended_q(p: QuadFormProblem, w: GridFunction, v: GridFunction) -> float:
    _check_w(p, w)
    _check_w(p, v)
    q = p.grid.weights
    z = _stacked_pair(w, v)
    return float(0.25 * np.einsum("i,j,ija,ijab,ijb->", q, q, z, extended_kernel(p), z))


def eval_E_extended(p: QuadFormProblem, w: GridFunction, v: GridFunction) -> float:
    """E~(w, v) on (L2)^2; E~(w, w) = E(w)."""
    q = p.grid.weights
    G = p.grid.measure
    N, n = p.grid.n, p.n
    rt = np.empty((N, N, 2 * n))
    rt[:, :, :n] = p.r0.values[:, None, :] / G
    rt[:, :, n:] = p.r0.values[None, :, :] / G
    z = _stacked_pair(w, v)
    linear = 0.5 * np.einsum("i,j,ija,ija->", q, q, rt, z)
    return eval_E_extended_q(p, w, v) + float(linear)


def _is_symmetric(p: QuadFormProblem) -> bool:
    d1 = p.K1.data
    d2 = p.K2.data
    s1 = max(1.0, float(np.max(np.abs(d1))))
    s2 = max(1.0, float(np.max(np.abs(d2), initial=0.0)))
    asym1 = np.max(np.abs(d1 - np.swapaxes(d1, -1, -2)))
    asym2 = np.max(np.abs(d2 - np.swapaxes(np.swapaxes(d2, 0, 1), -1, -2)))
    return asym1 <= SYMMETRY_TOL * s1 and asym2 <= SYMMETRY_TOL * s2


def coercivity_matrix(p: QuadFormProblem) -> np.ndarray | None:
    """Blocks sqrt(w_i) K1^{-1/2}(x_i) K2(x_i, x_j) K1^{-1/2}(x_j) sqrt(w_j).

    Returns None when some K1(x_i) is not positive definite.
    """
    evals, evecs = np.linalg.eigh(p.K1.data)
    if np.any(evals <= 0.0):
        return None
    inv_sqrt = np.einsum("iab,ib,icb->iac", evecs, 1.0 / np.sqrt(evals), evecs)
    sq = np.sqrt(p.grid.weights)
    blocks = np.einsum("iab,ijbc,jcd->ijad", inv_sqrt, p.K2.data, inv_sqrt)
    blocks *= (sq[:, None] * sq[None, :])[:, :, None, None]
    M = block_matrix(blocks)
    return 0.5 * (M + M.T)


def certify_pd(p: QuadFormProblem, margin: float = PD_MARGIN) -> PdCertificate:
    """Discrete coercivity check of the pair (K1, K2); call on a symmetrized problem."""
    if not _is_symmetric(p):
        raise PreconditionError("K1/K2 are not symmetric; call symmetrize first")
    M = coercivity_matrix(p)
    if M is None:
        return PdCertificate(None, Verdict.INDEFINITE, False, p.grid.n)
    lam = float(np.linalg.eigvalsh(M)[0])
    if lam > -1.0 + margin:
        verdict = Verdict.POSITIVE_DEFINITE
    elif abs(lam + 1.0) <= margin:
        verdict = Verdict.POSITIVE_SEMIDEFINITE
    else:
        verdict = Verdict.INDEFINITE
    return PdCertificate(lam, verdict, True, p.grid.n)


def stationarity_defect(p: QuadFormProblem, w: GridFunction) -> float:
    """Max-norm of K1 w + int K2 w + r0."""
    lhs = np.einsum("iab,ib->ia", p.K1.data, w.values)
    lhs += np.einsum("j,ijab,jb->ia", p.grid.weights, p.K2.data, w.values)
    return float(np.max(np.abs(lhs + p.r0.values)))


def minimize(p: QuadFormProblem, identity_tol: float = 1e-8) -> QuadFormSolution:
    """Minimize E by solving w = -int K1^{-1} K2 w - K1^{-1} r0.

    Without a positive-definite certificate the result is only claimed to be
    a stationary point, and a warning is issued.
    """
    ps = symmetrized(p)
    cert = certify_pd(ps)
    stationary_only = cert.verdict is not Verdict.POSITIVE_DEFINITE
    if stationary_only:
        warnings.warn(f"pair (K1, K2) is {cert.verdict.value}; the solution is only "
                      "a stationary point of E", stacklevel=2)
    try:
        K1inv = np.linalg.inv(ps.K1.data)
    except np.linalg.LinAlgError:
        raise SingularOperatorError("K1(x) is singular at some node") from None
    kernel = MatrixKernelField(p.grid, Arity.TWO,
                               np.einsum("iab,ijbc->ijac", K1inv, ps.K2.data))
    g = GridFunction(p.grid, -np.einsum("iab,ib->ia", K1inv, ps.r0.values))
    w = fredholm.solve_second_kind(kernel, g, sign=-1)
    E_min = eval_E(ps, w)
    half_pairing = 0.5 * float(np.einsum("i,ia,ia->", p.grid.weights, p.r0.values, w.values))
    gap = abs(E_min - half_pairing)
    if gap > identity_tol * (1.0 + abs(E_min)):
        warnings.warn(f"minimum-value identity violated by {gap:.3e}", stacklevel=2)
    return QuadFormSolution(w, E_min, cert, stationary_only, gap,
                            stationarity_defect(ps, w))
