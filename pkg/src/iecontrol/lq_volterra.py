"""Quadratic control of a linear Volterra system.

    y(t) = y0(t) + int_0^t { A(t, s) y(s) + B(t, s) u(s) } ds
    J    = int_0^T { 1/2 y^T P y + y^T Q u + 1/2 u^T R u } dt

The costate psi is a row vector. Eliminating u through the Hamiltonian
stationarity condition

    y^T(t) Q(t) + u^T(t) R(t) + int_t^T psi(s) B(s, t) ds = 0

couples a forward Volterra equation for y with a backward one for psi
over the whole horizon. The primary path solves that joint system; the
cross-check path eliminates y with the Volterra resolvent of

    C(t, s) = A^T(t, s) - Q(s) R^{-1}(s) B^T(t, s)

and solves a single second-kind Fredholm equation for psi.

Discretization. Forward running integrals use the row-wise weights
``nu`` of :func:`volterra_weights`; backward integrals use the adjoint
weights ``mu[k, i] = w[i] nu[i, k] / w[k]`` so that the discrete
optimality system is exactly the KKT system of the quadrature-discretized
problem. Consequently

    K1(t_i, s_l) = sum_j nu[l, j] nu[i, j] / w[j] * B(s_l, t_j) R^{-1}(t_j) B^T(t_i, t_j)

which equals the quadrature of int_0^{min(t, s)} B(s, r) R^{-1}(r) B^T(t, r) dr
off the diagonal and carries an O(h) defect on it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fredholm
from .discretize import (Arity, GridFunction, MatrixKernelField, block_matrix,
                         volterra_weights)
from .errors import DomainError, PreconditionError


@dataclass(frozen=True, eq=False)
class VolterraLQProblem:
    A: MatrixKernelField
    B: MatrixKernelField
    y0: GridFunction
    P: MatrixKernelField
    Q: MatrixKernelField
    R: MatrixKernelField

    def __post_init__(self):
        n, m = self.y0.dim, self.B.cols
        expected = {"A": (n, n), "B": (n, m), "P": (n, n), "Q": (n, m), "R": (m, m)}
        for name, shape in expected.items():
            K = getattr(self, name)
            if (K.rows, K.cols) != shape:
                raise DomainError(f"{name} blocks must be {shape}, got {(K.rows, K.cols)}")
            if not K.grid.same_as(self.y0.grid):
                raise DomainError(f"{name} lives on a different grid")
        for name in ("P", "R"):
            K = getattr(self, name)
            sym = 0.5 * (K.data + np.swapaxes(K.data, -1, -2))
            object.__setattr__(self, name, MatrixKernelField(K.grid, Arity.ONE, sym))

    @property
    def grid(self):
        return self.y0.grid

    @property
    def n(self) -> int:
        return self.y0.dim

    @property
    def m(self) -> int:
        return self.B.cols

    @classmethod
    def from_spec(cls, spec, grid) -> "VolterraLQProblem":
        from .kernelspec import grid_function, kernel_field
        return cls(kernel_field(spec, "A", grid), kernel_field(spec, "B", grid),
                   grid_function(spec, "y0", grid), kernel_field(spec, "P", grid),
                   kernel_field(spec, "Q", grid), kernel_field(spec, "R", grid))


@dataclass(frozen=True, eq=False)
class DerivedKernels:
    K1: MatrixKernelField
    C: MatrixKernelField
    printed: bool


@dataclass(frozen=True, eq=False)
class VolterraSolution:
    u_star: GridFunction
    y_star: GridFunction
    psi_star: GridFunction         # rows are the covectors psi(t_i)
    cost: float
    path_agreement: float | None   # max |y_joint - y_resolvent|
    stationarity_residual: float
    costate_residual: float
    state_residual: float
    printed_k1: bool = False


def _weights(p: VolterraLQProblem):
    w = p.grid.weights
    nu = volterra_weights(p.grid)
    mu = (w[None, :] * nu.T) / w[:, None]
    return w, nu, mu


def _R_inverse(p: VolterraLQProblem) -> np.ndarray:
    cond = np.linalg.cond(p.R.data)
    if not np.all(np.isfinite(cond)) or np.any(cond > 1e12):
        bad = int(np.argmax(np.where(np.isfinite(cond), cond, np.inf)))
        raise PreconditionError(f"R(t) is not invertible at t={p.grid.nodes[bad]:.17g}")
    return np.linalg.inv(p.R.data)


def derived_kernels(p: VolterraLQProblem, printed: bool = False) -> DerivedKernels:
    """K1 and C of the eliminated state equation.

    ``printed=True`` keeps the first factor of the K1 integrand at
    B(s, t) instead of B(s, r); that variant does not reproduce the state
    equation and is kept only for comparison.
    """
    w, nu, _ = _weights(p)
    Rinv = _R_inverse(p)
    B = p.B.data
    prod = nu[None, :, :] * nu[:, None, :] / w[None, None, :]   # [l, i, j] = nu_lj nu_ij / w_j
    if printed:
        first = np.swapaxes(B, 0, 1)                    # first[i, l] = B(s_l, t_i)
        K1 = np.einsum("lij,ilab,jbc,ijdc->ilad", prod, first, Rinv, B)
    else:
        K1 = np.einsum("lij,ljab,jbc,ijdc->ilad", prod, B, Rinv, B)
    C = np.swapaxes(p.A.data, -1, -2) - np.einsum("jab,jbc,ijdc->ijad", p.Q.data, Rinv, B)
    return DerivedKernels(MatrixKernelField(p.grid, Arity.TWO, K1),
                          MatrixKernelField(p.grid, Arity.TWO, C), printed)


def control_from_costate(p: VolterraLQProblem, y: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """u(t_k) = -R^{-1}(t_k) [Q^T y + sum_i mu_ki B^T(t_i, t_k) psi_i^T]."""
    _, _, mu = _weights(p)
    Rinv = _R_inverse(p)
    s = np.einsum("kba,kb->ka", p.Q.data, y)
    s += np.einsum("ki,ikba,ib->ka", mu, p.B.data, psi)
    return -np.einsum("kab,kb->ka", Rinv, s)


def _costate_blocks(p: VolterraLQProblem, Rinv):
    """M_k = P - Q R^{-1} Q^T and D(t_i, t_k) = A - B R^{-1} Q^T (at t_k)."""
    Q = p.Q.data
    M = p.P.data - np.einsum("kab,kbc,kdc->kad", Q, Rinv, Q)
    D = p.A.data - np.einsum("ikab,kbc,kdc->ikad", p.B.data, Rinv, Q)
    return M, D


def solve_joint(p: VolterraLQProblem, dk: DerivedKernels | None = None,
                compare_paths: bool = False) -> VolterraSolution:
    """One dense system in the unknowns (y(t_i), psi^T(t_i))."""
    if dk is None:
        dk = derived_kernels(p)
    w, nu, mu = _weights(p)
    N, n = p.grid.n, p.n
    Rinv = _R_inverse(p)
    M, D = _costate_blocks(p, Rinv)
    size = N * n
    # state rows:   y_i - sum_j nu_ij C_ij^T y_j + sum_l w_l K1_il^T psi_l^T = y0_i
    # costate rows: psi_k^T - M_k^T y_k - sum_i mu_ki D_ik^T psi_i^T = 0
    Cblk = block_matrix(nu[:, :, None, None] * np.swapaxes(dk.C.data, -1, -2))
    Kblk = block_matrix(w[None, :, None, None] * np.swapaxes(dk.K1.data, -1, -2))
    Mblk = np.zeros((size, size))
    for k in range(N):
        Mblk[k * n:(k + 1) * n, k * n:(k + 1) * n] = M[k].T
    Dblk = block_matrix(mu[:, :, None, None] * np.swapaxes(np.swapaxes(D, 0, 1), -1, -2))
    big = np.block([[np.eye(size) - Cblk, Kblk],
                    [-Mblk, np.eye(size) - Dblk]])
    rhs = np.concatenate([p.y0.values.reshape(size), np.zeros(size)])
    z = fredholm.dense_solve(big, rhs, "joint state/costate system")
    y = z[:size].reshape(N, n)
    psi = z[size:].reshape(N, n)
    return _finish(p, y, psi, dk.printed)


def solve_resolvent_path(p: VolterraLQProblem, dk: DerivedKernels | None = None) -> VolterraSolution:
    """Eliminate y with the Volterra resolvent of C and solve for psi alone.

    y^T(t) = y0^T(t) + int_0^t y0^T(s) S(t, s) ds
             - int_0^T psi(s) K1(t, s) ds - int_0^T psi(s) S1(t, s) ds
    S1(t, s) = int_0^t K1(r, s) S(t, r) dr

    The Volterra resolvent is the Fredholm resolvent of the causally
    masked kernel nu_ij / w_j * C^T(t_i, t_j).
    """
    if dk is None:
        dk = derived_kernels(p)
    w, nu, _ = _weights(p)
    N, n = p.grid.n, p.n
    Rinv = _R_inverse(p)
    masked = (nu / w[None, :])[:, :, None, None] * np.swapaxes(dk.C.data, -1, -2)
    Kt = fredholm.resolvent(MatrixKernelField(p.grid, Arity.TWO, masked)).resolvent.data
    S = np.swapaxes(Kt, -1, -2)                                   # row convention
    S1 = np.einsum("r,rsab,trbc->tsac", w, dk.K1.data, S)
    base = p.y0.values + np.einsum("j,ijab,jb->ia", w, Kt, p.y0.values)
    M, D = _costate_blocks(p, Rinv)
    # psi_k^T = M_k^T [base_k - sum_l w_l (K1 + S1)_kl^T psi_l^T] + sum_i w_i (nu_ik / w_k) D_ik^T psi_i^T
    KS = np.swapaxes(dk.K1.data + S1, -1, -2)
    L = (nu.T / w[:, None])[:, :, None, None] * np.swapaxes(np.swapaxes(D, 0, 1), -1, -2)
    L -= np.einsum("kba,klbc->klac", M, KS)
    g = GridFunction(p.grid, np.einsum("kba,kb->ka", M, base))
    psi = fredholm.solve_second_kind(MatrixKernelField(p.grid, Arity.TWO, L), g, sign=1).values
    y = base - np.einsum("l,ilab,lb->ia", w, KS, psi)
    return _finish(p, y, psi, dk.printed)


def _finish(p: VolterraLQProblem, y, psi, printed, path_agreement=None) -> VolterraSolution:
    u = control_from_costate(p, y, psi)
    grid = p.grid
    yg, ug, pg = GridFunction(grid, y), GridFunction(grid, u), GridFunction(grid, psi)
    return VolterraSolution(
        u_star=ug, y_star=yg, psi_star=pg, cost=cost(p, yg, ug),
        path_agreement=path_agreement,
        stationarity_residual=stationarity_residual(p, yg, ug, pg),
        costate_residual=costate_residual(p, yg, ug, pg),
        state_residual=state_residual(p, yg, ug), printed_k1=printed)


def stationarity_residual(p, y: GridFunction, u: GridFunction, psi: GridFunction) -> float:
    """Max-norm of y^T Q + u^T R + int_t^T psi(s) B(s, t) ds."""
    _, _, mu = _weights(p)
    lhs = np.einsum("ka,kab->kb", y.values, p.Q.data)
    lhs += np.einsum("ka,kab->kb", u.values, p.R.data)
    lhs += np.einsum("ki,ia,ikab->kb", mu, psi.values, p.B.data)
    return float(np.max(np.abs(lhs)))


def costate_residual(p, y: GridFunction, u: GridFunction, psi: GridFunction) -> float:
    """Max-norm of psi - [y^T P + u^T Q^T + int_t^T psi(s) A(s, t) ds]."""
    _, _, mu = _weights(p)
    rhs = np.einsum("ka,kab->kb", y.values, p.P.data)
    rhs += np.einsum("ka,kba->kb", u.values, p.Q.data)
    rhs += np.einsum("ki,ia,ikab->kb", mu, psi.values, p.A.data)
    return float(np.max(np.abs(psi.values - rhs)))


def state_residual(p, y: GridFunction, u: GridFunction) -> float:
    """Max-norm defect of the controlled Volterra state equation."""
    nu = volterra_weights(p.grid)
    rhs = p.y0.values + np.einsum("ij,ijab,jb->ia", nu, p.A.data, y.values)
    rhs += np.einsum("ij,ijab,jb->ia", nu, p.B.data, u.values)
    return float(np.max(np.abs(y.values - rhs)))


def cost(p, y: GridFunction, u: GridFunction) -> float:
    w = p.grid.weights
    val = 0.5 * np.einsum("i,ia,iab,ib->", w, y.values, p.P.data, y.values)
    val += np.einsum("i,ia,iab,ib->", w, y.values, p.Q.data, u.values)
    val += 0.5 * np.einsum("i,ia,iab,ib->", w, u.values, p.R.data, u.values)
    return float(val)


def solve(p: VolterraLQProblem, compare_paths: bool = True,
          printed_k1: bool = False) -> VolterraSolution:
    """Joint system as the primary path, resolvent path as cross-check."""
    dk = derived_kernels(p, printed=printed_k1)
    joint = solve_joint(p, dk)
    if not compare_paths:
        return joint
    other = solve_resolvent_path(p, dk)
    gap = float(np.max(np.abs(joint.y_star.values - other.y_star.values)))
    return VolterraSolution(**{**joint.__dict__, "path_agreement": gap})
