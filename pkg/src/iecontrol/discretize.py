"""Quadrature grids and sampled functions/kernels on an interval.

Every integral operator becomes a weighted matrix product and every L2
pairing a weighted dot product. Weights are kept on the grid rather than
folded into kernels so that one grid serves every solver.

Array layouts
-------------
GridFunction.values          (N, dim)
MatrixKernelField.data       (N, rows, cols)     arity ONE
                             (N, N, rows, cols)  arity TWO, data[i, j] = K(x_i, x_j)
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import DomainError


class Rule(str, enum.Enum):
    TRAPEZOID = "trapezoid"
    GAUSS = "gauss"

    @classmethod
    def parse(cls, name) -> "Rule":
        if isinstance(name, Rule):
            return name
        key = str(name).strip().lower()
        aliases = {"trapezoid": cls.TRAPEZOID, "trap": cls.TRAPEZOID,
                   "gauss": cls.GAUSS, "gausslegendre": cls.GAUSS,
                   "gauss-legendre": cls.GAUSS, "gauss_legendre": cls.GAUSS}
        try:
            return aliases[key]
        except KeyError:
            raise DomainError(f"unknown quadrature rule {name!r}") from None


class Arity(str, enum.Enum):
    ONE = "one"
    TWO = "two"


@dataclass(frozen=True, eq=False)
class Grid:
    a: float
    b: float
    nodes: np.ndarray
    weights: np.ndarray
    rule: Rule

    @property
    def n(self) -> int:
        return self.nodes.shape[0]

    @property
    def measure(self) -> float:
        return self.b - self.a

    def same_as(self, other: "Grid") -> bool:
        return self is other or (
            self.rule == other.rule and self.n == other.n
            and self.a == other.a and self.b == other.b
            and np.array_equal(self.nodes, other.nodes))

    def describe(self) -> dict:
        return {"a": self.a, "b": self.b, "n": self.n, "rule": self.rule.value}


def make_grid(a: float, b: float, n: int, rule="trapezoid") -> Grid:
    """Nodes and weights on [a, b].

    Trapezoid uses n uniform nodes including both endpoints; Gauss uses the
    n-point Gauss-Legendre rule mapped from [-1, 1].
    """
    rule = Rule.parse(rule)
    a = float(a)
    b = float(b)
    if not (np.isfinite(a) and np.isfinite(b)) or not a < b:
        raise DomainError(f"need finite a < b, got a={a}, b={b}")
    if int(n) != n or n < 2:
        raise DomainError(f"need an integer n >= 2, got {n}")
    n = int(n)
    if rule is Rule.TRAPEZOID:
        nodes = np.linspace(a, b, n)
        h = (b - a) / (n - 1)
        weights = np.full(n, h)
        weights[0] = weights[-1] = 0.5 * h
    else:
        t, wt = np.polynomial.legendre.leggauss(n)
        half = 0.5 * (b - a)
        nodes = a + half * (t + 1.0)
        weights = half * wt
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return Grid(a, b, nodes, weights, rule)


@dataclass(frozen=True, eq=False)
class GridFunction:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] != self.grid.n:
            raise DomainError(
                f"values must be (N, dim) with N={self.grid.n}, got {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_callable(cls, grid: Grid, fn) -> "GridFunction":
        return cls(grid, np.asarray(fn(grid.nodes), dtype=float))

    @classmethod
    def zeros(cls, grid: Grid, dim: int) -> "GridFunction":
        return cls(grid, np.zeros((grid.n, dim)))

    def max_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def __add__(self, other):
        return GridFunction(self.grid, self.values + _values(other, self))

    def __sub__(self, other):
        return GridFunction(self.grid, self.values - _values(other, self))

    def __mul__(self, c):
        return GridFunction(self.grid, self.values * float(c))

    __rmul__ = __mul__

    def __neg__(self):
        return GridFunction(self.grid, -self.values)


def _values(other, ref: GridFunction) -> np.ndarray:
    if isinstance(other, GridFunction):
        _check_same_grid(ref.grid, other.grid)
        if other.dim != ref.dim:
            raise DomainError(f"dim mismatch: {ref.dim} vs {other.dim}")
        return other.values
    return np.asarray(other, dtype=float)


@dataclass(frozen=True, eq=False)
class MatrixKernelField:
    grid: Grid
    arity: Arity
    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=float)
        arity = Arity(self.arity)
        lead = 1 if arity is Arity.ONE else 2
        n = self.grid.n
        if d.ndim != lead + 2 or d.shape[:lead] != (n,) * lead:
            raise DomainError(
                f"arity-{arity.value} kernel data must have shape "
                f"{(n,) * lead + ('rows', 'cols')}, got {d.shape}")
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "arity", arity)

    @property
    def rows(self) -> int:
        return self.data.shape[-2]

    @property
    def cols(self) -> int:
        return self.data.shape[-1]

    @classmethod
    def zeros(cls, grid: Grid, arity, rows: int, cols: int) -> "MatrixKernelField":
        lead = (grid.n,) if Arity(arity) is Arity.ONE else (grid.n, grid.n)
        return cls(grid, arity, np.zeros(lead + (rows, cols)))

    @classmethod
    def from_callable(cls, grid: Grid, fn, arity=Arity.TWO) -> "MatrixKernelField":
        """Sample ``fn`` at nodes (arity one) or node pairs (arity two).

        ``fn`` is called once with broadcastable node arrays and must return
        an array whose trailing two axes are the block shape.
        """
        x = grid.nodes
        if Arity(arity) is Arity.ONE:
            out = np.asarray(fn(x), dtype=float)
            if out.ndim == 1:
                out = out[:, None, None]
        else:
            out = np.asarray(fn(x[:, None], x[None, :]), dtype=float)
            if out.ndim == 2:
                out = out[:, :, None, None]
        return cls(grid, arity, out)

    def transpose_blocks(self) -> "MatrixKernelField":
        return MatrixKernelField(self.grid, self.arity, np.swapaxes(self.data, -1, -2))


def _check_same_grid(g1: Grid, g2: Grid):
    if not g1.same_as(g2):
        raise DomainError("grid mismatch")


def inner_product(f: GridFunction, g: GridFunction) -> float:
    """Weighted L2 pairing sum_i w_i <f_i, g_i>."""
    _check_same_grid(f.grid, g.grid)
    if f.dim != g.dim:
        raise DomainError(f"dim mismatch: {f.dim} vs {g.dim}")
    return float(np.einsum("i,ia,ia->", f.grid.weights, f.values, g.values))


def apply_kernel(K: MatrixKernelField, f: GridFunction) -> GridFunction:
    """(Kf)(x_i) = sum_j w_j K(x_i, x_j) f(x_j)."""
    if K.arity is not Arity.TWO:
        raise DomainError("apply_kernel needs a two-argument kernel")
    _check_same_grid(K.grid, f.grid)
    if K.cols != f.dim:
        raise DomainError(f"kernel has {K.cols} columns but f has dim {f.dim}")
    vals = np.einsum("j,ijab,jb->ia", K.grid.weights, K.data, f.values)
    return GridFunction(f.grid, vals)


def block_matrix(K: np.ndarray) -> np.ndarray:
    """Flatten (N, N, r, c) blocks into an (N*r, N*c) matrix."""
    N, M, r, c = K.shape
    return K.transpose(0, 2, 1, 3).reshape(N * r, M * c)


def unblock_matrix(M: np.ndarray, n_rows: int, n_cols: int, r: int, c: int) -> np.ndarray:
    return M.reshape(n_rows, r, n_cols, c).transpose(0, 2, 1, 3)


def volterra_weights(grid: Grid, backward: bool = False) -> np.ndarray:
    """Row-wise weights for running integrals over [a, t_i] (or [t_i, b]).

    Row i integrates the piecewise-linear interpolant of the nodal values
    over the subinterval ending (starting) at t_i. The gap between the
    domain endpoint and the first (last) node, which is empty for
    trapezoid grids, is covered by constant extrapolation. On a uniform
    trapezoid grid row i is exactly the trapezoid rule on [a, t_i].
    """
    x = grid.nodes
    N = grid.n
    dx = np.diff(x)
    W = np.zeros((N, N))
    if not backward:
        head = x[0] - grid.a
        for i in range(N):
            W[i, 0] += head
            if i > 0:
                W[i, :i] += 0.5 * dx[:i]
                W[i, 1:i + 1] += 0.5 * dx[:i]
    else:
        tail = grid.b - x[-1]
        for i in range(N):
            W[i, -1] += tail
            if i < N - 1:
                W[i, i:N - 1] += 0.5 * dx[i:]
                W[i, i + 1:] += 0.5 * dx[i:]
    return W
