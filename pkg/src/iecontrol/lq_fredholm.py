"""Quadratic control of a linear Fredholm system.

    phi(x) = phi0(x) + int { A(x, y) phi(y) + B(x, y) u(y) } dy
    J      = int { 1/2 phi^T P phi + phi^T Q u + 1/2 u^T R u } dx

With K the resolvent of A the state is phi = phi1 + int B1 u, which makes
J a quadratic functional of u alone. The optimal control is obtained two
ways: as the minimizer of that reduced form (with a positive-definiteness
certificate), and from the stationarity integral equation directly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import fredholm, quadform
from .discretize import Arity, GridFunction, MatrixKernelField
from .errors import DomainError, PreconditionError
from .quadform import PdCertificate, QuadFormProblem, Verdict


@dataclass(frozen=True, eq=False)
class FredholmLQProblem:
    A: MatrixKernelField
    B: MatrixKernelField
    phi0: GridFunction
    P: MatrixKernelField
    Q: MatrixKernelField
    R: MatrixKernelField

    def __post_init__(self):
        n, m = self.phi0.dim, self.B.cols
        expected = {"A": (n, n), "B": (n, m), "P": (n, n), "Q": (n, m), "R": (m, m)}
        for name, shape in expected.items():
            K = getattr(self, name)
            if (K.rows, K.cols) != shape:
                raise DomainError(f"{name} blocks must be {shape}, got {(K.rows, K.cols)}")
            if not K.grid.same_as(self.phi0.grid):
                raise DomainError(f"{name} lives on a different grid")
        # P and R enter only through symmetric quadratic forms
        object.__setattr__(self, "P", _sym_one(self.P))
        object.__setattr__(self, "R", _sym_one(self.R))

    @property
    def grid(self):
        return self.phi0.grid

    @property
    def n(self) -> int:
        return self.phi0.dim

    @property
    def m(self) -> int:
        return self.B.cols

    @classmethod
    def from_spec(cls, spec, grid) -> "FredholmLQProblem":
        from .kernelspec import grid_function, kernel_field
        return cls(kernel_field(spec, "A", grid), kernel_field(spec, "B", grid),
                   grid_function(spec, "phi0", grid), kernel_field(spec, "P", grid),
                   kernel_field(spec, "Q", grid), kernel_field(spec, "R", grid))


def _sym_one(K: MatrixKernelField) -> MatrixKernelField:
    return MatrixKernelField(K.grid, Arity.ONE, 0.5 * (K.data + np.swapaxes(K.data, -1, -2)))


@dataclass(frozen=True, eq=False)
class LQSolution:
    u_star: GridFunction
    state: GridFunction
    cost: float
    stationarity_residual: float
    certificate: PdCertificate
    stationary_only: bool
    state_residual: float


def reduce_state(p: FredholmLQProblem):
    """phi1 = phi0 + int K phi0 and B1 = B + int K B, with K the resolvent of A."""
    K = fredholm.resolvent(p.A).resolvent.data
    w = p.grid.weights
    phi1 = p.phi0.values + np.einsum("z,izab,zb->ia", w, K, p.phi0.values)
    B1 = p.B.data + np.einsum("z,izab,zjbc->ijac", w, K, p.B.data)
    return GridFunction(p.grid, phi1), MatrixKernelField(p.grid, Arity.TWO, B1)


def assemble_reduced_form(p: FredholmLQProblem, phi1: GridFunction, B1: MatrixKernelField):
    """Quadratic form of J in u after eliminating the state.

    K1(x)       = R(x)
    K2(x1, x2)  = int B1^T(y, x1) P(y) B1(y, x2) dy
                  + B1^T(x2, x1) Q(x2) + Q^T(x1) B1(x1, x2)
    r(x)        = int B1^T(y, x) P(y) phi1(y) dy + Q^T(x) phi1(x)

    Returns the form and the control-independent constant 1/2 int phi1^T P phi1.
    """
    w = p.grid.weights
    b1 = B1.data
    Q = p.Q.data
    K2 = np.einsum("y,yiab,yac,yjcd->ijbd", w, b1, p.P.data, b1)
    K2 += np.einsum("jiba,jbc->ijac", b1, Q)
    K2 += np.einsum("iba,ijbc->ijac", Q, b1)
    r = np.einsum("y,yxab,yac,yc->xb", w, b1, p.P.data, phi1.values)
    r += np.einsum("xba,xb->xa", Q, phi1.values)
    const = 0.5 * float(np.einsum("i,ia,iab,ib->", w, phi1.values, p.P.data, phi1.values))
    form = QuadFormProblem(p.R, MatrixKernelField(p.grid, Arity.TWO, K2),
                           GridFunction(p.grid, r))
    return form, const


def _stationarity_terms(p: FredholmLQProblem, phi1: GridFunction, B1: MatrixKernelField):
    """Source and kernel of the stationarity equation, before applying R^{-1}.

    u*(x) = -R^{-1}(x) [ Q^T(x) phi1(x) + int B1^T(z, x) P(z) phi1(z) dz
                         + int { Q^T(x) B1(x, y) + B1^T(y, x) Q(y)
                                 + int B1^T(z, x) P(z) B1(z, y) dz } u*(y) dy ]
    """
    w = p.grid.weights
    b1 = B1.data
    P = p.P.data
    Q = p.Q.data
    source = np.einsum("xba,xb->xa", Q, phi1.values)
    source += np.einsum("z,zxba,zbc,zc->xa", w, b1, P, phi1.values)
    kernel = np.einsum("xba,xybc->xyac", Q, b1)
    kernel += np.einsum("yxba,ybc->xyac", b1, Q)
    kernel += np.einsum("z,zxba,zbc,zycd->xyad", w, b1, P, b1)
    return source, kernel


def _R_inverse(p: FredholmLQProblem) -> np.ndarray:
    R = p.R.data
    cond = np.linalg.cond(R)
    if not np.all(np.isfinite(cond)) or np.any(cond > 1e12):
        bad = int(np.argmax(np.where(np.isfinite(cond), cond, np.inf)))
        raise PreconditionError(f"R(x) is not invertible at x={p.grid.nodes[bad]:.17g}")
    return np.linalg.inv(R)


def stationarity_residual(p: FredholmLQProblem, phi1: GridFunction,
                          B1: MatrixKernelField, u: GridFunction) -> float:
    """Max-norm defect of the stationarity equation at u."""
    source, kernel = _stationarity_terms(p, phi1, B1)
    Rinv = _R_inverse(p)
    inner = source + np.einsum("y,xyab,yb->xa", p.grid.weights, kernel, u.values)
    return float(np.max(np.abs(u.values + np.einsum("xab,xb->xa", Rinv, inner))))


def solve_stationarity(p: FredholmLQProblem, phi1: GridFunction, B1: MatrixKernelField):
    """Solve the stationarity equation as a second-kind Fredholm equation.

    Returns (u*, residual).
    """
    Rinv = _R_inverse(p)
    source, kernel = _stationarity_terms(p, phi1, B1)
    L = MatrixKernelField(p.grid, Arity.TWO, np.einsum("xab,xybc->xyac", Rinv, kernel))
    g = GridFunction(p.grid, -np.einsum("xab,xb->xa", Rinv, source))
    u = fredholm.solve_second_kind(L, g, sign=-1)
    return u, stationarity_residual(p, phi1, B1, u)


def state_from_control(phi1: GridFunction, B1: MatrixKernelField, u: GridFunction) -> GridFunction:
    w = phi1.grid.weights
    return GridFunction(phi1.grid, phi1.values + np.einsum("j,ijab,jb->ia", w, B1.data, u.values))


def dynamics_residual(p: FredholmLQProblem, phi: GridFunction, u: GridFunction) -> float:
    """Max-norm defect of phi = phi0 + int (A phi + B u)."""
    w = p.grid.weights
    rhs = p.phi0.values + np.einsum("j,ijab,jb->ia", w, p.A.data, phi.values)
    rhs += np.einsum("j,ijab,jb->ia", w, p.B.data, u.values)
    return float(np.max(np.abs(phi.values - rhs)))


def cost(p: FredholmLQProblem, phi: GridFunction, u: GridFunction) -> float:
    """Direct quadrature of J."""
    w = p.grid.weights
    f, v = phi.values, u.values
    val = 0.5 * np.einsum("i,ia,iab,ib->", w, f, p.P.data, f)
    val += np.einsum("i,ia,iab,ib->", w, f, p.Q.data, v)
    val += 0.5 * np.einsum("i,ia,iab,ib->", w, v, p.R.data, v)
    return float(val)


def solve(p: FredholmLQProblem) -> LQSolution:
    """Reduce, certify and minimize; cross-check with the stationarity equation."""
    phi1, B1 = reduce_state(p)
    form, _ = assemble_reduced_form(p, phi1, B1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        qs = quadform.minimize(form)
    if qs.stationary_only:
        warnings.warn(f"reduced pair (R, K2) is {qs.certificate.verdict.value}; "
                      "u* is a stationary point only", stacklevel=2)
    u = qs.w_star
    phi = state_from_control(phi1, B1, u)
    return LQSolution(
        u_star=u, state=phi, cost=cost(p, phi, u),
        stationarity_residual=stationarity_residual(p, phi1, B1, u),
        certificate=qs.certificate,
        stationary_only=qs.certificate.verdict is not Verdict.POSITIVE_DEFINITE,
        state_residual=dynamics_residual(p, phi, u))
