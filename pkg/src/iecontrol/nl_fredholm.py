"""Control of a Fredholm system that is nonlinear in the state and affine in the control.

    phi(x) = phi0(x) + int { f(x, y, phi(y)) + F(x, y, phi(y)) u(y) } dy
    J      = int { g0(x, phi) + g1^T(x, phi) u + 1/2 u^T G(x, phi) u } dx

The Hamiltonian at x is

    H = g0 + g1^T u + 1/2 u^T G u + int psi(y) [f(y, x, phi) + F(y, x, phi) u] dy

with psi a row covector. Its u-stationarity gives

    u*(x) = -G^{-1}(x, phi) [g1(x, phi) + int F^T(y, x, phi) psi^T(y) dy]

and substituting u* into the state and costate equations leaves a coupled
pair of second-kind equations in (phi, psi), quadratic in psi. The pair is
solved by damped Picard (Jacobi) iteration.

Gradient layouts: the state component is always the last index, so
``grad_f`` is (n, n), ``grad_F`` (n, m, n), ``grad_g0`` (n), ``grad_g1``
(m, n) and ``grad_G`` (m, m, n).

Callables take broadcastable coordinate arrays and a state array of shape
(..., n); two-argument families are called as ``f(x, y, phi)`` with phi the
state at y, one-argument families as ``g0(x, phi)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .discretize import Grid, GridFunction
from .errors import (DomainError, GradientCheckError, NonConvergenceError,
                     PreconditionError, SingularOperatorError, VerificationError)

COND_MAX = 1e12


@dataclass(frozen=True, eq=False)
class NonlinearFredholmProblem:
    phi0: GridFunction
    m: int
    f: Callable
    F: Callable
    g0: Callable
    g1: Callable
    G: Callable
    grad_f: Callable
    grad_F: Callable
    grad_g0: Callable
    grad_g1: Callable
    grad_G: Callable

    @property
    def grid(self) -> Grid:
        return self.phi0.grid

    @property
    def n(self) -> int:
        return self.phi0.dim

    @classmethod
    def from_spec(cls, spec, grid) -> "NonlinearFredholmProblem":
        """Callables backed by the problem's kernel expressions."""
        from .kernelspec import evaluate_array, grid_function, state_env
        xv, yv = spec.variables

        def two(role):
            exprs = spec.kernels[role]

            def fn(x, y, phi):
                env = {xv: np.asarray(x, dtype=float), yv: np.asarray(y, dtype=float)}
                env.update(state_env(spec, np.asarray(phi, dtype=float)))
                return evaluate_array(exprs, env)
            return fn

        def one(role):
            exprs = spec.kernels[role]

            def fn(x, phi):
                env = {xv: np.asarray(x, dtype=float)}
                env.update(state_env(spec, np.asarray(phi, dtype=float)))
                return evaluate_array(exprs, env)
            return fn

        return cls(grid_function(spec, "phi0", grid), spec.m,
                   f=two("f"), F=two("F"), g0=one("g0"), g1=one("g1"), G=one("G"),
                   grad_f=two("grad_f"), grad_F=two("grad_F"), grad_g0=one("grad_g0"),
                   grad_g1=one("grad_g1"), grad_G=one("grad_G"))


@dataclass(frozen=True, eq=False)
class CoupledIterate:
    phi: GridFunction
    psi: GridFunction          # rows are the covectors psi(x_i)
    residual_phi: float
    residual_psi: float
    iteration: int


@dataclass(frozen=True, eq=False)
class NonlinearSolution:
    iterate: CoupledIterate
    u_star: GridFunction
    cost: float
    state_residual: float           # controlled state equation at u*
    costate_residual: float         # psi = grad_phi H at (phi*, u*, psi*)
    stationarity_residual: float    # grad_u H at u*
    printed_discrepancy: float      # printed vs derived costate right-hand side
    gradient_errors: dict = field(default_factory=dict)
    history: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# evaluation on the grid


@dataclass(frozen=True, eq=False)
class _Pairs:
    f: np.ndarray    # [i, j] = f(x_i, x_j, phi_j), (N, N, n)
    F: np.ndarray    # (N, N, n, m)
    df: np.ndarray   # (N, N, n, n)
    dF: np.ndarray   # (N, N, n, m, n)


@dataclass(frozen=True, eq=False)
class _Nodes:
    g1: np.ndarray     # (N, m)
    G: np.ndarray      # (N, m, m)
    Ginv: np.ndarray
    dg0: np.ndarray    # (N, n)
    dg1: np.ndarray    # (N, m, n)
    dG: np.ndarray     # (N, m, m, n)


def _shaped(val, lead, shape, what):
    arr = np.asarray(val, dtype=float)
    try:
        return np.broadcast_to(arr, lead + shape).copy()
    except ValueError:
        raise DomainError(f"{what} returned shape {arr.shape}, expected {lead + shape}") from None


def _eval_pairs(p: NonlinearFredholmProblem, phi: np.ndarray) -> _Pairs:
    x = p.grid.nodes
    N, n, m = p.grid.n, p.n, p.m
    X, Y, S = x[:, None], x[None, :], phi[None, :, :]
    return _Pairs(_shaped(p.f(X, Y, S), (N, N), (n,), "f"),
                  _shaped(p.F(X, Y, S), (N, N), (n, m), "F"),
                  _shaped(p.grad_f(X, Y, S), (N, N), (n, n), "grad_f"),
                  _shaped(p.grad_F(X, Y, S), (N, N), (n, m, n), "grad_F"))


def _G_inverse(G: np.ndarray, x: np.ndarray) -> np.ndarray:
    scale = np.maximum(1.0, np.max(np.abs(G), axis=(-2, -1)))
    asym = np.max(np.abs(G - np.swapaxes(G, -1, -2)), axis=(-2, -1))
    if np.any(asym > 1e-12 * scale):
        k = int(np.argmax(asym / scale))
        raise PreconditionError(f"G(x, phi) is not symmetric at x={x[k]:.17g}")
    cond = np.linalg.cond(G)
    bad = ~np.isfinite(cond) | (cond > COND_MAX)
    if np.any(bad):
        k = int(np.argmax(bad))
        raise SingularOperatorError(f"G(x, phi) is singular at x={x[k]:.17g} "
                                    f"(condition {cond[k]:.3e})")
    return np.linalg.inv(G)


def _eval_nodes(p: NonlinearFredholmProblem, phi: np.ndarray) -> _Nodes:
    x = p.grid.nodes
    N, n, m = p.grid.n, p.n, p.m
    G = _shaped(p.G(x, phi), (N,), (m, m), "G")
    return _Nodes(_shaped(p.g1(x, phi), (N,), (m,), "g1"), G, _G_inverse(G, x),
                  _shaped(p.grad_g0(x, phi), (N,), (n,), "grad_g0"),
                  _shaped(p.grad_g1(x, phi), (N,), (m, n), "grad_g1"),
                  _shaped(p.grad_G(x, phi), (N,), (m, m, n), "grad_G"))


def _F_psi(w, pe: _Pairs, psi: np.ndarray) -> np.ndarray:
    """v_i = sum_j w_j F^T(x_j, x_i, phi_i) psi_j^T."""
    return np.einsum("j,jiab,ja->ib", w, pe.F, psi)


# ---------------------------------------------------------------------------
# pointwise operations


def hamiltonian(x: float, phi_at_x, u_at_x, psi: GridFunction,
                p: NonlinearFredholmProblem) -> float:
    """H(x, phi, u, psi), with the psi-integral taken by the grid quadrature."""
    phi_x = np.asarray(phi_at_x, dtype=float).reshape(p.n)
    u = np.asarray(u_at_x, dtype=float).reshape(p.m)
    y = p.grid.nodes
    w = p.grid.weights
    g0 = float(np.asarray(p.g0(x, phi_x), dtype=float))
    g1 = _shaped(p.g1(x, phi_x), (), (p.m,), "g1")
    G = _shaped(p.G(x, phi_x), (), (p.m, p.m), "G")
    f = _shaped(p.f(y, x, phi_x), (p.grid.n,), (p.n,), "f")
    F = _shaped(p.F(y, x, phi_x), (p.grid.n,), (p.n, p.m), "F")
    dyn = f + np.einsum("jab,b->ja", F, u)
    return g0 + float(g1 @ u) + 0.5 * float(u @ G @ u) + float(np.einsum("j,ja,ja->", w, psi.values, dyn))


def control_from_costate(x: float, phi_at_x, psi: GridFunction,
                         p: NonlinearFredholmProblem) -> np.ndarray:
    """u*(x) = -G^{-1} [g1 + int F^T(y, x, phi) psi^T(y) dy]."""
    phi_x = np.asarray(phi_at_x, dtype=float).reshape(p.n)
    y = p.grid.nodes
    G = _shaped(p.G(x, phi_x), (1,), (p.m, p.m), "G")
    Ginv = _G_inverse(G, np.array([x], dtype=float))[0]
    F = _shaped(p.F(y, x, phi_x), (p.grid.n,), (p.n, p.m), "F")
    s = _shaped(p.g1(x, phi_x), (), (p.m,), "g1") + np.einsum("j,jab,ja->b", p.grid.weights, F, psi.values)
    return -Ginv @ s


def _controls(p, pe: _Pairs, ne: _Nodes, psi: np.ndarray) -> np.ndarray:
    s = ne.g1 + _F_psi(p.grid.weights, pe, psi)
    return -np.einsum("iab,ib->ia", ne.Ginv, s)


# ---------------------------------------------------------------------------
# right-hand sides of the coupled system


def state_rhs(p: NonlinearFredholmProblem, phi: np.ndarray, psi: np.ndarray,
              pe: _Pairs | None = None, ne: _Nodes | None = None) -> np.ndarray:
    """phi0 + int f - int F G^{-1} g1 - int int F G^{-1} F^T psi^T, with the states
    evaluated at the integration variable."""
    pe = pe or _eval_pairs(p, phi)
    ne = ne or _eval_nodes(p, phi)
    w = p.grid.weights
    v = _F_psi(w, pe, psi)
    out = p.phi0.values + np.einsum("j,ija->ia", w, pe.f)
    out -= np.einsum("j,ijab,jbc,jc->ia", w, pe.F, ne.Ginv, ne.g1)
    out -= np.einsum("j,ijab,jbc,jc->ia", w, pe.F, ne.Ginv, v)
    return out


def costate_rhs(p: NonlinearFredholmProblem, phi: np.ndarray, psi: np.ndarray,
                pe: _Pairs | None = None, ne: _Nodes | None = None,
                printed: bool = False) -> np.ndarray:
    """Costate equation with u* substituted, term by term.

    With s = g1 + v and v = int F^T psi^T, the cross term of
    1/2 s^T G^{-1} grad G G^{-1} s is g1^T G^{-1} grad G G^{-1} v.
    ``printed=True`` drops the second G^{-1} in that term.
    """
    pe = pe or _eval_pairs(p, phi)
    ne = ne or _eval_nodes(p, phi)
    w = p.grid.weights
    v = _F_psi(w, pe, psi)
    Gg1 = np.einsum("iab,ib->ia", ne.Ginv, ne.g1)
    Gv = np.einsum("iab,ib->ia", ne.Ginv, v)
    out = ne.dg0.copy()
    out -= np.einsum("iac,ia->ic", ne.dg1, Gg1 + Gv)
    out += 0.5 * np.einsum("ia,iabc,ib->ic", Gv, ne.dG, Gv)
    out += 0.5 * np.einsum("ia,iabc,ib->ic", Gg1, ne.dG, Gg1)
    out += np.einsum("ia,iabc,ib->ic", Gg1, ne.dG, v if printed else Gv)
    out += np.einsum("j,ja,jiac->ic", w, psi, pe.df)
    out -= np.einsum("j,ja,jiabc,ib->ic", w, psi, pe.dF, Gg1 + Gv)
    return out


# ---------------------------------------------------------------------------
# independent residuals


def state_residual(p: NonlinearFredholmProblem, phi: np.ndarray, u: np.ndarray) -> float:
    """Controlled state equation with a given control."""
    pe = _eval_pairs(p, phi)
    w = p.grid.weights
    rhs = p.phi0.values + np.einsum("j,ija->ia", w, pe.f) + np.einsum("j,ijab,jb->ia", w, pe.F, u)
    return float(np.max(np.abs(phi - rhs)))


def costate_equation_rhs(p: NonlinearFredholmProblem, phi: np.ndarray, u: np.ndarray,
                         psi: np.ndarray) -> np.ndarray:
    """grad_phi H at (phi, u, psi), with u given rather than eliminated."""
    pe = _eval_pairs(p, phi)
    ne = _eval_nodes(p, phi)
    w = p.grid.weights
    rhs = ne.dg0 + np.einsum("ia,iac->ic", u, ne.dg1)
    rhs += 0.5 * np.einsum("ia,iabc,ib->ic", u, ne.dG, u)
    rhs += np.einsum("j,ja,jiac->ic", w, psi, pe.df)
    rhs += np.einsum("j,ja,jiabc,ib->ic", w, psi, pe.dF, u)
    return rhs


def costate_residual(p: NonlinearFredholmProblem, phi: np.ndarray, u: np.ndarray,
                     psi: np.ndarray) -> float:
    """Max-norm of psi - grad_phi H at (phi, u, psi)."""
    return float(np.max(np.abs(psi - costate_equation_rhs(p, phi, u, psi))))


def stationarity_residual(p: NonlinearFredholmProblem, phi: np.ndarray, u: np.ndarray,
                          psi: np.ndarray) -> float:
    """Max-norm of g1^T + u^T G + int psi F."""
    pe = _eval_pairs(p, phi)
    ne = _eval_nodes(p, phi)
    lhs = ne.g1 + np.einsum("ia,iab->ib", u, ne.G) + _F_psi(p.grid.weights, pe, psi)
    return float(np.max(np.abs(lhs)))


def cost(p: NonlinearFredholmProblem, phi: np.ndarray, u: np.ndarray) -> float:
    x = p.grid.nodes
    N = p.grid.n
    g0 = _shaped(p.g0(x, phi), (N,), (), "g0")
    g1 = _shaped(p.g1(x, phi), (N,), (p.m,), "g1")
    G = _shaped(p.G(x, phi), (N,), (p.m, p.m), "G")
    run = g0 + np.einsum("ia,ia->i", g1, u) + 0.5 * np.einsum("ia,iab,ib->i", u, G, u)
    return float(p.grid.weights @ run)


# ---------------------------------------------------------------------------
# gradient validation


def _fd_check(name, base, grad, args, phi, out_shape, n, rtol, step):
    analytic = _shaped(grad(*args, phi), (phi.shape[0],), out_shape + (n,), name)
    worst = 0.0
    for c in range(n):
        h = step * np.maximum(1.0, np.abs(phi[:, c]))
        up, dn = phi.copy(), phi.copy()
        up[:, c] += h
        dn[:, c] -= h
        bshape = out_shape
        fd = (_shaped(base(*args, up), (phi.shape[0],), bshape, name)
              - _shaped(base(*args, dn), (phi.shape[0],), bshape, name))
        fd /= (2.0 * h).reshape((-1,) + (1,) * len(bshape))
        a = analytic[..., c]
        err = np.abs(a - fd) / np.maximum(1.0, np.abs(a))
        if np.any(err > rtol):
            k = np.unravel_index(int(np.argmax(err)), err.shape)
            raise GradientCheckError(
                f"{name}{list(int(i) for i in k[1:])} w.r.t. state component {c + 1} "
                f"disagrees with finite differences at sample {k[0]}: "
                f"analytic {a[k]:.10g}, finite difference {fd[k]:.10g}")
        worst = max(worst, float(err.max(initial=0.0)))
    return worst


def validate_gradients(p: NonlinearFredholmProblem, samples: int = 100, seed: int = 0,
                       rtol: float = 1e-5, step: float = 1e-6) -> dict:
    """Compare every supplied gradient with central differences of its base family.

    States are drawn around the range of phi0. Returns the worst relative
    error per gradient; raises GradientCheckError on the first failure.
    """
    rng = np.random.default_rng(seed)
    a, b = p.grid.a, p.grid.b
    n, m = p.n, p.m
    lo = p.phi0.values.min(axis=0) - 1.0
    hi = p.phi0.values.max(axis=0) + 1.0
    x = rng.uniform(a, b, samples)
    y = rng.uniform(a, b, samples)
    phi = rng.uniform(lo, hi, (samples, n))
    return {
        "grad_f": _fd_check("grad_f", p.f, p.grad_f, (x, y), phi, (n,), n, rtol, step),
        "grad_F": _fd_check("grad_F", p.F, p.grad_F, (x, y), phi, (n, m), n, rtol, step),
        "grad_g0": _fd_check("grad_g0", p.g0, p.grad_g0, (x,), phi, (), n, rtol, step),
        "grad_g1": _fd_check("grad_g1", p.g1, p.grad_g1, (x,), phi, (m,), n, rtol, step),
        "grad_G": _fd_check("grad_G", p.G, p.grad_G, (x,), phi, (m, m), n, rtol, step),
    }


# ---------------------------------------------------------------------------
# solver


def solve_coupled(p: NonlinearFredholmProblem, tol: float = 1e-10, max_iter: int = 2000,
                  damping: float = 0.5, printed: bool = False):
    """Damped Picard iteration on the coupled (phi, psi) system.

    Both right-hand sides are evaluated at the current iterate, then
    z <- (1 - damping) z + damping * RHS(z). Starts from phi = phi0, psi = 0.
    Returns (CoupledIterate, u*, history) where history lists the residual
    pairs of every sweep.
    """
    if not 0.0 < damping <= 1.0:
        raise DomainError(f"damping must lie in (0, 1], got {damping}")
    if not tol > 0.0 or max_iter < 1:
        raise DomainError("tol must be positive and max_iter at least 1")
    phi = p.phi0.values.copy()
    psi = np.zeros_like(phi)
    history = []
    for it in range(max_iter + 1):
        pe = _eval_pairs(p, phi)
        ne = _eval_nodes(p, phi)
        rphi = state_rhs(p, phi, psi, pe, ne)
        rpsi = costate_rhs(p, phi, psi, pe, ne, printed=printed)
        res = (float(np.max(np.abs(phi - rphi))), float(np.max(np.abs(psi - rpsi))))
        history.append(res)
        if not all(np.isfinite(res)):
            raise NonConvergenceError(f"iteration diverged at sweep {it}", history)
        if res[0] <= tol and res[1] <= tol:
            u = _controls(p, pe, ne, psi)
            it_ = CoupledIterate(GridFunction(p.grid, phi), GridFunction(p.grid, psi),
                                 res[0], res[1], it)
            return it_, GridFunction(p.grid, u), history
        if it == max_iter:
            break
        phi = (1.0 - damping) * phi + damping * rphi
        psi = (1.0 - damping) * psi + damping * rpsi
    raise NonConvergenceError(
        f"no convergence in {max_iter} iterations (residuals phi {history[-1][0]:.3e}, "
        f"psi {history[-1][1]:.3e}, tol {tol:g})", history)


def solve(p: NonlinearFredholmProblem, tol: float = 1e-10, max_iter: int = 2000,
          damping: float = 0.5, validate: bool = True) -> NonlinearSolution:
    """Validate gradients, iterate to convergence and verify the optimality system."""
    grad_errors = validate_gradients(p) if validate else {}
    it, u, history = solve_coupled(p, tol, max_iter, damping)
    phi, psi = it.phi.values, it.psi.values
    checks = {
        "state": state_residual(p, phi, u.values),
        "costate": costate_residual(p, phi, u.values, psi),
        "stationarity": stationarity_residual(p, phi, u.values, psi),
    }
    for name, val in checks.items():
        if not val <= 10.0 * tol:
            raise VerificationError(f"{name} residual {val:.3e} exceeds {10 * tol:g} at the solution")
    printed_gap = float(np.max(np.abs(costate_rhs(p, phi, psi, printed=True)
                                      - costate_rhs(p, phi, psi))))
    return NonlinearSolution(it, u, cost(p, phi, u.values), checks["state"], checks["costate"],
                             checks["stationarity"], printed_gap, grad_errors, history)
