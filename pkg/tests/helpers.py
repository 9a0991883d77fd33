"""Shared builders for tests: random problem documents and a manufactured solution."""

from __future__ import annotations

import json
import re

import numpy as np

from iecontrol.discretize import GridFunction, make_grid
from iecontrol.kernelspec import parse_problem
from iecontrol.nl_fredholm import NonlinearFredholmProblem


def _c(v: float) -> str:
    return repr(round(float(v), 6))


def smooth_scalar(rng, x="x", y="y", amp=0.3) -> str:
    """Random smooth two-argument expression with sup-norm at most ``amp``."""
    a, b, c = rng.uniform(-1, 1, 3)
    kind = rng.integers(3)
    if kind == 0:
        return f"{_c(amp * a)}*exp(-{_c(abs(b) + 0.1)}*({x}-{y})^2)"
    if kind == 1:
        return f"{_c(amp * a)}*cos({_c(b)}*{x} + {_c(c)}*{y})"
    return f"{_c(amp * a / 2)}*(1 + {_c(b)}*{x}*{y})"


def smooth_unary(rng, x="x", lo=0.5, hi=1.5) -> str:
    """Random smooth positive one-argument expression with values in [lo, hi]."""
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    a, b = rng.uniform(-1, 1, 2)
    return f"{_c(mid)} + {_c(half * a)}*sin({_c(2 * b)}*{x})"


def matrix(rows, cols, fn):
    return [[fn(i, j) for j in range(cols)] for i in range(rows)]


def random_quadform(rng, n: int, N: int = 65) -> dict:
    """Random QuadForm document: K1 SPD, K2 symmetric and small, r0 smooth."""
    base = [[smooth_scalar(rng, amp=0.25 / n) for _ in range(n)] for _ in range(n)]
    # symmetric K2(x, y) = K2(y, x)^T by swapping the arguments of the transposed entry
    K2 = [[f"0.5*(({base[i][j]}) + ({_swap(base[j][i])}))" for j in range(n)] for i in range(n)]
    K1 = matrix(n, n, lambda i, j: smooth_unary(rng) if i == j else "0")
    if n > 1:
        off = _c(rng.uniform(-0.2, 0.2))
        K1[0][1] = K1[1][0] = off
    r0 = [smooth_unary(rng, lo=-1, hi=1) for _ in range(n)]
    return {"kind": "QuadForm", "domain": {"a": 0, "b": 1}, "dims": {"n": n},
            "kernels": {"K1": K1, "K2": K2, "r0": r0}, "settings": {"grid_n": N}}


def _swap(expr: str, a="x", b="y") -> str:
    return re.sub(rf"\b({a}|{b})\b", lambda mt: b if mt.group(1) == a else a, expr)


def random_lq(rng, kind: str, n: int, m: int, N: int = 65) -> dict:
    """Random FredholmLQ or VolterraLQ document with smooth kernels."""
    x, y = ("x", "y") if kind == "FredholmLQ" else ("t", "s")
    start = "phi0" if kind == "FredholmLQ" else "y0"
    A = matrix(n, n, lambda i, j: smooth_scalar(rng, x, y, amp=0.4 / n))
    B = matrix(n, m, lambda i, j: smooth_unary(rng, x) if i == j else smooth_scalar(rng, x, y))
    P = matrix(n, n, lambda i, j: smooth_unary(rng, x) if i == j else "0.1")
    Q = matrix(n, m, lambda i, j: f"{_c(rng.uniform(-0.2, 0.2))}")
    R = matrix(m, m, lambda i, j: smooth_unary(rng, x) if i == j else "0.05")
    phi0 = [smooth_unary(rng, x, lo=-1, hi=1) for _ in range(n)]
    return {"kind": kind, "domain": {"a": 0, "b": 1}, "dims": {"n": n, "m": m},
            "kernels": {"A": A, "B": B, start: phi0, "P": P, "Q": Q, "R": R},
            "settings": {"grid_n": N}}


def spec_of(doc: dict):
    return parse_problem(json.dumps(doc))


# ---------------------------------------------------------------------------
# manufactured nonlinear problem


def manufactured_problem(grid, ref_nodes: int = 48):
    """Scalar nonlinear problem whose exact optimality pair is (phi_hat, psi_hat).

    phi0 and a linear source term c(x) phi in g0 are computed with a
    high-order reference quadrature so that both the state equation and the
    costate equation hold exactly for the chosen pair.
    """
    phi_hat = lambda x: 1.0 + 0.5 * np.sin(np.pi * x)           # noqa: E731
    psi_hat = lambda x: 0.2 + 0.3 * np.cos(x)                     # noqa: E731

    f = lambda x, y, p: 0.3 * np.exp(-x * y)[..., None] * np.sin(p)          # noqa: E731
    df = lambda x, y, p: (0.3 * np.exp(-x * y)[..., None] * np.cos(p))[..., None]  # noqa: E731
    F = lambda x, y, p: (0.5 + 0.2 * x * y + 0.1 * p[..., 0])[..., None, None]     # noqa: E731
    dF = lambda x, y, p: np.full(np.broadcast_shapes(np.shape(x), np.shape(y), p.shape[:-1])
                                 + (1, 1, 1), 0.1)                                  # noqa: E731
    g1 = lambda x, p: (0.1 * p[..., 0] * np.cos(x))[..., None]                     # noqa: E731
    dg1 = lambda x, p: np.broadcast_to(0.1 * np.cos(x), p.shape[:-1])[..., None, None]  # noqa: E731
    G = lambda x, p: (1.0 + 0.2 * p[..., 0] ** 2)[..., None, None]                 # noqa: E731
    dG = lambda x, p: (0.4 * p[..., 0])[..., None, None, None]                     # noqa: E731

    ref = make_grid(grid.a, grid.b, ref_nodes, "gauss")
    yr, wr = ref.nodes, ref.weights

    def u_hat(x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        ph = phi_hat(x)[:, None]
        # int F(y, x, phi_hat(x)) psi_hat(y) dy
        Fyx = F(yr[None, :], x[:, None], ph[:, None, :])[..., 0, 0]
        s = g1(x, ph)[:, 0] + Fyx @ (wr * psi_hat(yr))
        return -s / G(x, ph)[:, 0, 0]

    uref = u_hat(yr)

    def c_of(x):
        x = np.asarray(x, dtype=float)
        flat = np.atleast_1d(x).reshape(-1)
        ph = phi_hat(flat)[:, None]
        u = u_hat(flat)
        rest = ph[:, 0] + 0.2 * ph[:, 0] ** 3
        rest += u * 0.1 * np.cos(flat)
        rest += 0.5 * u * u * 0.4 * ph[:, 0]
        dfyx = df(yr[None, :], flat[:, None], ph[:, None, :])[..., 0, 0]
        rest += dfyx @ (wr * psi_hat(yr)) + 0.1 * u * (wr @ psi_hat(yr))
        return (psi_hat(flat) - rest).reshape(x.shape)

    def g0(x, p):
        return 0.5 * p[..., 0] ** 2 + 0.05 * p[..., 0] ** 4 + c_of(np.broadcast_to(x, p.shape[:-1])) * p[..., 0]

    def dg0(x, p):
        return (p[..., 0] + 0.2 * p[..., 0] ** 3 + c_of(np.broadcast_to(x, p.shape[:-1])))[..., None]

    xs = grid.nodes
    ph_r = phi_hat(yr)[:, None]
    integrand = f(xs[:, None], yr[None, :], ph_r[None, :, :])[..., 0]
    integrand += F(xs[:, None], yr[None, :], ph_r[None, :, :])[..., 0, 0] * uref[None, :]
    phi0 = phi_hat(xs) - integrand @ wr
    prob = NonlinearFredholmProblem(GridFunction(grid, phi0), 1, f=f, F=F, g0=g0, g1=g1, G=G,
                                    grad_f=df, grad_F=dF, grad_g0=dg0, grad_g1=dg1, grad_G=dG)
    return prob, phi_hat, psi_hat, u_hat
