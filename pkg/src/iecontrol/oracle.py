"""Brute-force reference optimizer.

Each problem is discretized directly: the quadrature of the cost becomes a
function of the stacked control vector (node-major, ``u[i * m + c]``), the
state is eliminated by a dense solve of the discretized dynamics, and the
result is minimized with dense linear algebra. Nothing here touches the
integral-equation solvers; only grids and expression evaluation are
shared.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy import optimize

from .discretize import Grid, GridFunction, volterra_weights
from .errors import PreconditionError, SingularOperatorError, SolverError
from .kernelspec import (ROLES, ProblemKind, ProblemSpec, eval_kernel, evaluate_array,
                         state_env)


@dataclass(frozen=True, eq=False)
class DiscreteQP:
    """J(u) = 1/2 u^T H u + r^T u + c0 over the stacked control vector."""
    H: np.ndarray
    r: np.ndarray
    c0: float
    n_nodes: int
    n_controls: int

    @property
    def map(self) -> str:
        return f"index = node * {self.n_controls} + component"

    def value(self, u: np.ndarray) -> float:
        return float(0.5 * u @ self.H @ u + self.r @ u + self.c0)


def _field(spec: ProblemSpec, role: str, grid: Grid) -> np.ndarray:
    return eval_kernel(spec.kernels[role], grid, ROLES[spec.kind][role].arity,
                       spec.variables).data


def _blocks(weighted: np.ndarray) -> np.ndarray:
    N, M, r, c = weighted.shape
    return weighted.transpose(0, 2, 1, 3).reshape(N * r, M * c)


def _blockdiag(w: np.ndarray, blocks: np.ndarray) -> np.ndarray:
    N, r, c = blocks.shape
    out = np.zeros((N * r, N * c))
    for i in range(N):
        out[i * r:(i + 1) * r, i * c:(i + 1) * c] = w[i] * blocks[i]
    return out


class _LinearModel:
    """Discretized linear dynamics y = y0 + D y + E u and quadratic cost."""

    def __init__(self, spec: ProblemSpec, grid: Grid):
        w = grid.weights
        N, n, m = grid.n, spec.n, spec.m
        start = "phi0" if spec.kind is ProblemKind.FREDHOLM_LQ else "y0"
        if spec.kind is ProblemKind.FREDHOLM_LQ:
            quad = np.broadcast_to(w[None, :], (N, N))
        else:
            quad = volterra_weights(grid)
        A = _field(spec, "A", grid)
        B = _field(spec, "B", grid)
        self.D = _blocks(quad[:, :, None, None] * A)
        self.E = _blocks(quad[:, :, None, None] * B)
        self.y0 = _field(spec, start, grid)[:, :, 0].reshape(N * n)
        P = _field(spec, "P", grid)
        Q = _field(spec, "Q", grid)
        R = _field(spec, "R", grid)
        self.Pw = _blockdiag(w, 0.5 * (P + np.swapaxes(P, 1, 2)))
        self.Qw = _blockdiag(w, Q)
        self.Rw = _blockdiag(w, 0.5 * (R + np.swapaxes(R, 1, 2)))
        M = np.eye(N * n) - self.D
        try:
            self.lu = sla.lu_factor(M)
        except (ValueError, sla.LinAlgError) as exc:
            raise SingularOperatorError(f"discretized dynamics: {exc}") from None
        if np.linalg.cond(M) > 1e12:
            raise SingularOperatorError("discretized dynamics are singular")
        self.N, self.n, self.m = N, n, m

    def state(self, u: np.ndarray) -> np.ndarray:
        return sla.lu_solve(self.lu, self.y0 + self.E @ u)

    def cost(self, u: np.ndarray) -> float:
        y = self.state(u)
        return float(0.5 * y @ self.Pw @ y + y @ self.Qw @ u + 0.5 * u @ self.Rw @ u)


class _NonlinearModel:
    """phi = phi0 + sum_j w_j [f(x_i, x_j, phi_j) + F(x_i, x_j, phi_j) u_j]."""

    def __init__(self, spec: ProblemSpec, grid: Grid):
        self.spec = spec
        self.grid = grid
        self.N, self.n, self.m = grid.n, spec.n, spec.m
        self.phi0 = _field(spec, "phi0", grid)[:, :, 0]
        x = grid.nodes
        self._x2 = {"x": x[:, None], "y": x[None, :]}
        self._x1 = {"x": x}

    def _env2(self, phi):
        env = dict(self._x2)
        env.update(state_env(self.spec, phi[None, :, :]))
        return env

    def _env1(self, phi):
        env = dict(self._x1)
        env.update(state_env(self.spec, phi))
        return env

    def _residual(self, flat, u):
        phi = flat.reshape(self.N, self.n)
        env = self._env2(phi)
        f = evaluate_array(self.spec.kernels["f"], env)
        F = evaluate_array(self.spec.kernels["F"], env)
        w = self.grid.weights
        rhs = self.phi0 + np.einsum("j,ija->ia", w, f) + np.einsum("j,ijab,jb->ia", w, F, u)
        return (phi - rhs).reshape(-1)

    def state(self, u_flat: np.ndarray, guess: np.ndarray | None = None) -> np.ndarray:
        u = u_flat.reshape(self.N, self.m)
        x0 = (self.phi0 if guess is None else guess).reshape(-1)
        sol = optimize.root(self._residual, x0, args=(u,), method="hybr",
                            options={"xtol": 1e-14})
        res = np.max(np.abs(self._residual(sol.x, u)))
        if res > 1e-11:
            raise SolverError(f"oracle state solve failed (residual {res:.2e}): {sol.message}")
        return sol.x.reshape(self.N, self.n)

    def cost(self, u_flat: np.ndarray, guess=None) -> float:
        phi = self.state(u_flat, guess)
        u = u_flat.reshape(self.N, self.m)
        env = self._env1(phi)
        g0 = evaluate_array(self.spec.kernels["g0"], env)
        g1 = evaluate_array(self.spec.kernels["g1"], env)
        G = evaluate_array(self.spec.kernels["G"], env)
        run = g0 + np.einsum("ia,ia->i", g1, u) + 0.5 * np.einsum("ia,iab,ib->i", u, G, u)
        return float(self.grid.weights @ run)


def _model(spec: ProblemSpec, grid: Grid):
    if spec.kind in (ProblemKind.FREDHOLM_LQ, ProblemKind.VOLTERRA_LQ):
        return _LinearModel(spec, grid)
    if spec.kind is ProblemKind.NONLINEAR_FREDHOLM:
        return _NonlinearModel(spec, grid)
    return None


def assemble_qp(spec: ProblemSpec, grid: Grid) -> DiscreteQP:
    """Dense quadratic program of a QuadForm, FredholmLQ or VolterraLQ problem."""
    w = grid.weights
    N = grid.n
    if spec.kind is ProblemKind.QUADFORM:
        n = spec.n
        K1 = _field(spec, "K1", grid)
        K2 = _field(spec, "K2", grid)
        r0 = _field(spec, "r0", grid)[:, :, 0]
        H = _blockdiag(w, K1) + _blocks((w[:, None] * w[None, :])[:, :, None, None] * K2)
        H = 0.5 * (H + H.T)
        return DiscreteQP(H, (w[:, None] * r0).reshape(-1), 0.0, N, n)
    if spec.kind is ProblemKind.NONLINEAR_FREDHOLM:
        raise PreconditionError("NonlinearFredholm problems have no quadratic program")
    lm = _LinearModel(spec, grid)
    Phi0 = sla.lu_solve(lm.lu, lm.y0)
    T = sla.lu_solve(lm.lu, lm.E)          # one solve per control basis vector
    H = T.T @ lm.Pw @ T + T.T @ lm.Qw + lm.Qw.T @ T + lm.Rw
    H = 0.5 * (H + H.T)
    r = T.T @ lm.Pw @ Phi0 + lm.Qw.T @ Phi0
    c0 = 0.5 * float(Phi0 @ lm.Pw @ Phi0)
    return DiscreteQP(H, r, c0, N, spec.m)


def qp_minimize(qp: DiscreteQP):
    """Returns (u, value, hessian_pd)."""
    evals = np.linalg.eigvalsh(qp.H)
    scale = max(np.max(np.abs(evals)), np.finfo(float).tiny)
    if np.min(np.abs(evals)) <= 1e-13 * scale:
        raise SingularOperatorError("QP Hessian is singular")
    u = sla.solve(qp.H, -qp.r, assume_a="sym")
    return u, qp.value(u), bool(evals[0] > 0.0)


def qp_solution(qp: DiscreteQP, grid: Grid) -> GridFunction:
    u, _, _ = qp_minimize(qp)
    return GridFunction(grid, u.reshape(qp.n_nodes, qp.n_controls))


def direct_cost(spec: ProblemSpec, grid: Grid, u) -> float:
    """Cost of the discretized problem at control u (dynamics solved afresh)."""
    uf = np.asarray(u.values if isinstance(u, GridFunction) else u, dtype=float).reshape(-1)
    if spec.kind is ProblemKind.QUADFORM:
        return assemble_qp(spec, grid).value(uf)
    return _model(spec, grid).cost(uf)


def direct_state(spec: ProblemSpec, grid: Grid, u) -> GridFunction:
    uf = np.asarray(u.values if isinstance(u, GridFunction) else u, dtype=float).reshape(-1)
    model = _model(spec, grid)
    st = model.state(uf)
    return GridFunction(grid, st.reshape(grid.n, spec.n))


def fd_gradient(spec: ProblemSpec, grid: Grid, u, step: float = 1e-5) -> GridFunction:
    """Central differences of the direct cost w.r.t. every control coordinate."""
    if not step > 0:
        raise PreconditionError("step must be positive")
    uf = np.asarray(u.values if isinstance(u, GridFunction) else u, dtype=float).reshape(-1)
    if spec.kind is ProblemKind.QUADFORM:
        qp = assemble_qp(spec, grid)
        cost = qp.value
        width = spec.n
    else:
        model = _model(spec, grid)
        width = spec.m
        if isinstance(model, _NonlinearModel):
            base = model.state(uf)

            def cost(v):
                return model.cost(v, guess=base)
        else:
            cost = model.cost
    grad = np.empty_like(uf)
    for k in range(uf.size):
        up = uf.copy()
        um = uf.copy()
        up[k] += step
        um[k] -= step
        grad[k] = (cost(up) - cost(um)) / (2.0 * step)
    return GridFunction(grid, grad.reshape(grid.n, width))


def probe_local_minimum(spec: ProblemSpec, grid: Grid, u, n_dirs: int = 20,
                        radius: float = 1e-3, seed: int = 0) -> float:
    """Smallest cost increase over random perturbations of size ``radius``.

    A nonnegative value (up to roundoff) is consistent with a local minimum.
    """
    rng = np.random.default_rng(seed)
    uf = np.asarray(u.values if isinstance(u, GridFunction) else u, dtype=float).reshape(-1)
    base = direct_cost(spec, grid, uf)
    worst = np.inf
    for _ in range(n_dirs):
        d = rng.standard_normal(uf.size)
        d *= radius / np.max(np.abs(d))
        for sgn in (1.0, -1.0):
            worst = min(worst, direct_cost(spec, grid, uf + sgn * d) - base)
    return float(worst)


def descent_check(spec: ProblemSpec, grid: Grid, u, iters: int = 5,
                  step: float = 1e-5) -> float:
    """Relative cost decrease achieved by a few backtracking gradient steps from u.

    Near zero at a local minimum; no global claim is made.
    """
    uf = np.asarray(u.values if isinstance(u, GridFunction) else u, dtype=float).reshape(-1)
    start = direct_cost(spec, grid, uf)
    cur = start
    for _ in range(iters):
        g = fd_gradient(spec, grid, uf, step).values.reshape(-1)
        gg = float(g @ g)
        if gg == 0.0:
            break
        t = 1.0 / grid.weights.min()
        while t > 1e-12:
            trial = uf - t * g
            val = direct_cost(spec, grid, trial)
            if val <= cur - 1e-4 * t * gg:
                uf, cur = trial, val
                break
            t *= 0.5
        else:
            break
    return float((start - cur) / max(1.0, abs(start)))
