"""Problem files: symbolic kernel expressions, parsing and evaluation.

A problem file is one JSON document::

    {
      "kind": "FredholmLQ",
      "domain": {"a": 0, "b": 1},
      "dims": {"n": 1, "m": 1},
      "kernels": {"A": [["0.2*exp(-(x-y)^2)"]], "B": [["1"]], ...},
      "settings": {"grid_n": 65, "rule": "trapezoid"}
    }

Matrix entries are expression strings, row-major. A bare string is
accepted for 1x1 entries and a flat list for vectors. Unknown keys are
rejected.

Expression grammar (``^`` binds tightest and is right-associative, then
unary minus, then ``* /``, then ``+ -``)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?
    atom   := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'
"""

from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .discretize import Arity, Grid, MatrixKernelField, Rule
from .errors import (DomainError, EvaluationError, ProblemError,
                     ProblemSyntaxError, ShapeError, UnknownIdentifierError,
                     UnknownRoleError)

# ---------------------------------------------------------------------------
# Expression trees


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple


Expr = Num | Var | Neg | BinOp | Call

FUNCTIONS = {"sin": 1, "cos": 1, "exp": 1, "log": 1, "sqrt": 1, "abs": 1,
             "min": 2, "max": 2}
CONSTANTS = {"pi": math.pi}

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^(),])
""", re.VERBOSE)


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    pos: int


def _tokenize(src: str, label: str | None) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(src):
        m = _TOKEN_RE.match(src, pos)
        if m is None:
            raise ProblemSyntaxError(f"unexpected character {src[pos]!r}",
                                     line=1, column=pos + 1, source=label)
        if m.lastgroup != "ws":
            toks.append(_Tok(m.lastgroup, m.group(), pos))
        pos = m.end()
    toks.append(_Tok("end", "", len(src)))
    return toks


class _Parser:
    def __init__(self, src: str, variables, label):
        self.src = src
        self.toks = _tokenize(src, label)
        self.i = 0
        self.variables = variables
        self.label = label

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def take(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def error(self, tok: _Tok, msg: str):
        shown = tok.text if tok.kind != "end" else "end of input"
        return ProblemSyntaxError(f"{msg} at {shown!r}", line=1,
                                  column=tok.pos + 1, source=self.label)

    def expect(self, text: str):
        tok = self.take()
        if tok.text != text or tok.kind == "end":
            raise self.error(tok, f"expected {text!r}")
        return tok

    def parse(self) -> Expr:
        e = self.expr()
        tok = self.peek()
        if tok.kind != "end":
            raise self.error(tok, "unexpected token")
        return e

    def expr(self):
        left = self.term()
        while self.peek().text in ("+", "-") and self.peek().kind == "op":
            op = self.take().text
            left = BinOp(op, left, self.term())
        return left

    def term(self):
        left = self.unary()
        while self.peek().text in ("*", "/") and self.peek().kind == "op":
            op = self.take().text
            left = BinOp(op, left, self.unary())
        return left

    def unary(self):
        if self.peek().kind == "op" and self.peek().text == "-":
            self.take()
            return Neg(self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek().kind == "op" and self.peek().text == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self):
        tok = self.take()
        if tok.kind == "num":
            return Num(float(tok.text))
        if tok.kind == "name":
            if self.peek().text == "(" and self.peek().kind == "op":
                if tok.text not in FUNCTIONS:
                    raise UnknownIdentifierError(
                        f"{self._where(tok)}unknown function {tok.text!r}")
                self.take()
                args = [self.expr()]
                while self.peek().text == ",":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                if len(args) != FUNCTIONS[tok.text]:
                    raise self.error(
                        tok, f"{tok.text} takes {FUNCTIONS[tok.text]} argument(s), "
                             f"got {len(args)}")
                return Call(tok.text, tuple(args))
            if tok.text in CONSTANTS:
                return Var(tok.text)
            if self.variables is not None and tok.text not in self.variables:
                allowed = ", ".join(sorted(self.variables)) or "none"
                raise UnknownIdentifierError(
                    f"{self._where(tok)}unknown identifier {tok.text!r} "
                    f"(allowed variables: {allowed})")
            return Var(tok.text)
        if tok.kind == "op" and tok.text == "(":
            e = self.expr()
            self.expect(")")
            return e
        raise self.error(tok, "unexpected token")

    def _where(self, tok):
        label = f"{self.label}, " if self.label else ""
        return f"[{label}column {tok.pos + 1}] "


def parse_expr(src: str, variables=None, label: str | None = None) -> Expr:
    """Parse one expression string.

    ``variables`` restricts the allowed identifiers (constants such as
    ``pi`` are always allowed); ``None`` allows any name.
    """
    if not isinstance(src, str):
        raise ProblemSyntaxError(f"expression must be a string, got {src!r}",
                                 source=label)
    return _Parser(src, None if variables is None else set(variables), label).parse()


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}


def format_expr(e: Expr) -> str:
    """Print an expression so that reparsing yields the same tree."""
    if isinstance(e, Num):
        return repr(float(e.value))
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        return f"(-{format_expr(e.operand)})"
    if isinstance(e, Call):
        return f"{e.func}({', '.join(format_expr(a) for a in e.args)})"
    return f"({format_expr(e.left)} {e.op} {format_expr(e.right)})"


def variables_of(e: Expr) -> set:
    if isinstance(e, Var):
        return set() if e.name in CONSTANTS else {e.name}
    if isinstance(e, Num):
        return set()
    if isinstance(e, Neg):
        return variables_of(e.operand)
    if isinstance(e, BinOp):
        return variables_of(e.left) | variables_of(e.right)
    out = set()
    for a in e.args:
        out |= variables_of(a)
    return out


# ---------------------------------------------------------------------------
# Vectorized evaluation


def _domain_fail(what: str, bad: np.ndarray, env: Mapping[str, np.ndarray]):
    shape = bad.shape
    idx = np.unravel_index(int(np.argmax(bad)), shape) if bad.ndim else ()
    coords = []
    for name in sorted(env):
        v = np.broadcast_to(np.asarray(env[name], dtype=float), shape) if shape else env[name]
        coords.append(f"{name}={float(np.asarray(v)[idx]):.17g}")
    raise EvaluationError(f"{what} at {', '.join(coords)}")


def evaluate(e: Expr, env: Mapping[str, np.ndarray]):
    """Evaluate over numpy arrays that broadcast against each other."""
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        if e.name in env:
            return env[e.name]
        if e.name in CONSTANTS:
            return CONSTANTS[e.name]
        raise UnknownIdentifierError(f"unbound variable {e.name!r}")
    if isinstance(e, Neg):
        return -evaluate(e.operand, env)
    if isinstance(e, BinOp):
        lhs = evaluate(e.left, env)
        rhs = evaluate(e.right, env)
        if e.op == "+":
            return lhs + rhs
        if e.op == "-":
            return lhs - rhs
        if e.op == "*":
            return lhs * rhs
        if e.op == "/":
            zero = np.asarray(rhs) == 0
            if np.any(zero):
                _domain_fail("division by zero", np.broadcast_to(
                    zero, np.broadcast(lhs, rhs).shape), env)
            return lhs / rhs
        with np.errstate(all="ignore"):
            out = np.power(np.asarray(lhs, dtype=float), rhs)
        bad = ~np.isfinite(out) & np.isfinite(lhs) & np.isfinite(rhs)
        if np.any(bad):
            _domain_fail("power outside its domain", bad, env)
        return out
    args = [evaluate(a, env) for a in e.args]
    f = e.func
    if f == "log":
        bad = np.asarray(args[0]) <= 0
        if np.any(bad):
            _domain_fail("log of a nonpositive number", bad, env)
        return np.log(args[0])
    if f == "sqrt":
        bad = np.asarray(args[0]) < 0
        if np.any(bad):
            _domain_fail("sqrt of a negative number", bad, env)
        return np.sqrt(args[0])
    if f == "min":
        return np.minimum(args[0], args[1])
    if f == "max":
        return np.maximum(args[0], args[1])
    with np.errstate(over="ignore"):
        out = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "abs": np.abs}[f](args[0])
    if f == "exp" and not np.all(np.isfinite(out)):
        _domain_fail("exp overflow", ~np.isfinite(np.asarray(out)), env)
    return out


def evaluate_array(exprs: np.ndarray, env: Mapping[str, np.ndarray]) -> np.ndarray:
    """Evaluate an object array of expressions.

    Returns an array of shape ``broadcast(env) + exprs.shape``.
    """
    base = np.broadcast_shapes(*(np.shape(v) for v in env.values())) if env else ()
    out = np.empty(base + exprs.shape)
    for idx in np.ndindex(*exprs.shape):
        out[(...,) + idx] = evaluate(exprs[idx], env)
    return out


# ---------------------------------------------------------------------------
# Problem specification


class ProblemKind(str, enum.Enum):
    QUADFORM = "QuadForm"
    FREDHOLM_LQ = "FredholmLQ"
    NONLINEAR_FREDHOLM = "NonlinearFredholm"
    VOLTERRA_LQ = "VolterraLQ"


@dataclass(frozen=True)
class RoleSpec:
    shape: tuple          # entries are "n", "m" or ints
    arity: str            # "one" | "two"
    state: bool = False   # expression may reference the state components
    required: bool = True


ROLES: dict[ProblemKind, dict[str, RoleSpec]] = {
    ProblemKind.QUADFORM: {
        "K1": RoleSpec(("n", "n"), "one"),
        "K2": RoleSpec(("n", "n"), "two"),
        "r0": RoleSpec(("n",), "one"),
    },
    ProblemKind.FREDHOLM_LQ: {
        "A": RoleSpec(("n", "n"), "two"),
        "B": RoleSpec(("n", "m"), "two"),
        "phi0": RoleSpec(("n",), "one"),
        "P": RoleSpec(("n", "n"), "one"),
        "Q": RoleSpec(("n", "m"), "one", required=False),
        "R": RoleSpec(("m", "m"), "one"),
    },
    ProblemKind.VOLTERRA_LQ: {
        "A": RoleSpec(("n", "n"), "two"),
        "B": RoleSpec(("n", "m"), "two"),
        "y0": RoleSpec(("n",), "one"),
        "P": RoleSpec(("n", "n"), "one"),
        "Q": RoleSpec(("n", "m"), "one", required=False),
        "R": RoleSpec(("m", "m"), "one"),
    },
    ProblemKind.NONLINEAR_FREDHOLM: {
        "phi0": RoleSpec(("n",), "one"),
        "f": RoleSpec(("n",), "two", state=True),
        "F": RoleSpec(("n", "m"), "two", state=True),
        "g0": RoleSpec((), "one", state=True),
        "g1": RoleSpec(("m",), "one", state=True),
        "G": RoleSpec(("m", "m"), "one", state=True),
        "grad_f": RoleSpec(("n", "n"), "two", state=True),
        "grad_F": RoleSpec(("n", "m", "n"), "two", state=True),
        "grad_g0": RoleSpec(("n",), "one", state=True),
        "grad_g1": RoleSpec(("m", "n"), "one", state=True),
        "grad_G": RoleSpec(("m", "m", "n"), "one", state=True),
    },
}

VARIABLES = {
    ProblemKind.QUADFORM: ("x", "y"),
    ProblemKind.FREDHOLM_LQ: ("x", "y"),
    ProblemKind.NONLINEAR_FREDHOLM: ("x", "y"),
    ProblemKind.VOLTERRA_LQ: ("t", "s"),
}


def state_names(n: int) -> tuple:
    """Names of the state components inside expressions.

    ``phi1 .. phin``; for a scalar state ``phi`` is accepted as well.
    """
    names = tuple(f"phi{k + 1}" for k in range(n))
    return names + ("phi",) if n == 1 else names


@dataclass(frozen=True)
class Settings:
    grid_n: int = 65
    rule: Rule = Rule.TRAPEZOID
    tol: float = 1e-10
    max_iter: int = 2000
    damping: float = 0.5

    def replace(self, **kw) -> "Settings":
        data = {k: getattr(self, k) for k in self.__dataclass_fields__}
        data.update({k: v for k, v in kw.items() if v is not None})
        return Settings(**data)


@dataclass(frozen=True)
class ProblemSpec:
    kind: ProblemKind
    domain: tuple
    dims: tuple
    kernels: dict = field(default_factory=dict)   # role -> object ndarray of Expr
    settings: Settings = Settings()
    source: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def n(self) -> int:
        return self.dims[0]

    @property
    def m(self) -> int:
        return self.dims[1]

    @property
    def variables(self) -> tuple:
        return VARIABLES[self.kind]

    def role_shape(self, role: str) -> tuple:
        return _concrete_shape(ROLES[self.kind][role].shape, self.n, self.m)


def _concrete_shape(shape, n, m) -> tuple:
    return tuple(n if s == "n" else m if s == "m" else int(s) for s in shape)


_TOP_KEYS = {"kind", "domain", "dims", "kernels", "settings"}
_SETTING_KEYS = {"grid_n", "rule", "tol", "max_iter", "damping"}


def _nested_shape(obj, role) -> tuple:
    if isinstance(obj, str):
        return ()
    if not isinstance(obj, list) or not obj:
        raise ShapeError(f"kernel {role!r}: entries must be strings or nonempty lists")
    inner = {_nested_shape(o, role) for o in obj}
    if len(inner) != 1:
        raise ShapeError(f"kernel {role!r}: ragged matrix")
    return (len(obj),) + inner.pop()


def _squeeze(shape) -> tuple:
    return tuple(s for s in shape if s != 1)


def parse_problem(text: str) -> ProblemSpec:
    """Parse and validate a problem document (JSON text)."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProblemSyntaxError(exc.msg, line=exc.lineno, column=exc.colno,
                                 source="problem file") from None
    if not isinstance(doc, dict):
        raise ProblemError("problem document must be a JSON object")
    extra = set(doc) - _TOP_KEYS
    if extra:
        raise UnknownRoleError(f"unknown top-level key(s): {sorted(extra)}")
    for key in ("kind", "domain", "dims", "kernels"):
        if key not in doc:
            raise ProblemError(f"missing top-level key {key!r}")

    try:
        kind = ProblemKind(doc["kind"])
    except ValueError:
        raise ProblemError(f"unknown kind {doc['kind']!r}; expected one of "
                           f"{[k.value for k in ProblemKind]}") from None

    dom = doc["domain"]
    if not isinstance(dom, dict) or set(dom) != {"a", "b"}:
        raise ProblemError("domain must be an object with exactly keys a, b")
    a, b = float(dom["a"]), float(dom["b"])
    if not a < b:
        raise ProblemError(f"domain needs a < b, got a={a}, b={b}")

    dims = doc["dims"]
    if not isinstance(dims, dict) or not set(dims) <= {"n", "m"} or "n" not in dims:
        raise ProblemError("dims must be an object with key n (and m)")
    n = dims["n"]
    m = dims.get("m", 0 if kind is ProblemKind.QUADFORM else None)
    if m is None:
        raise ProblemError(f"dims.m is required for kind {kind.value}")
    for label, v in (("n", n), ("m", m)):
        if not isinstance(v, int) or isinstance(v, bool) or v < 0:
            raise ProblemError(f"dims.{label} must be a nonnegative integer")
    if n < 1 or (kind is not ProblemKind.QUADFORM and m < 1):
        raise ProblemError("dimensions must be positive")

    raw_settings = doc.get("settings", {})
    if not isinstance(raw_settings, dict):
        raise ProblemError("settings must be an object")
    extra = set(raw_settings) - _SETTING_KEYS
    if extra:
        raise UnknownRoleError(f"unknown settings key(s): {sorted(extra)}")
    settings = _parse_settings(raw_settings)

    roles = ROLES[kind]
    raw_kernels = doc["kernels"]
    if not isinstance(raw_kernels, dict):
        raise ProblemError("kernels must be an object")
    unknown = set(raw_kernels) - set(roles)
    if unknown:
        raise UnknownRoleError(
            f"unknown kernel role(s) for {kind.value}: {sorted(unknown)}; "
            f"allowed: {sorted(roles)}")
    missing = [r for r, spec in roles.items() if spec.required and r not in raw_kernels]
    if missing:
        raise ProblemError(f"missing kernel role(s) for {kind.value}: {missing}")

    var_pair = VARIABLES[kind]
    kernels = {}
    for role, rspec in roles.items():
        want = _concrete_shape(rspec.shape, n, m)
        if role not in raw_kernels:
            kernels[role] = np.full(want, Num(0.0), dtype=object) if want else \
                _scalar_obj(Num(0.0))
            continue
        raw = raw_kernels[role]
        got = _nested_shape(raw, role)
        if got != want and _squeeze(got) != _squeeze(want):
            raise ShapeError(f"kernel {role!r} has shape {got}, expected {want} "
                             f"for dims n={n}, m={m}")
        allowed = set(var_pair if rspec.arity == "two" else var_pair[:1])
        if rspec.state:
            allowed |= set(state_names(n))
        flat = np.array(raw, dtype=object).reshape(-1) if got else [raw]
        parsed = np.empty(len(flat), dtype=object)
        for k, src in enumerate(flat):
            idx = np.unravel_index(k, want) if want else ()
            label = f"kernel {role}{list(int(i) for i in idx) if want else ''}"
            parsed[k] = parse_expr(src, allowed, label)
        kernels[role] = parsed.reshape(want) if want else _scalar_obj(parsed[0])

    return ProblemSpec(kind, (a, b), (n, m), kernels, settings, source=doc)


def _scalar_obj(e) -> np.ndarray:
    arr = np.empty((), dtype=object)
    arr[()] = e
    return arr


def _parse_settings(raw: dict) -> Settings:
    s = Settings()
    kw = {}
    try:
        if "grid_n" in raw:
            kw["grid_n"] = int(raw["grid_n"])
            if kw["grid_n"] < 2 or kw["grid_n"] != raw["grid_n"]:
                raise ValueError("grid_n must be an integer >= 2")
        if "rule" in raw:
            kw["rule"] = Rule.parse(raw["rule"])
        if "tol" in raw:
            kw["tol"] = float(raw["tol"])
            if not kw["tol"] > 0:
                raise ValueError("tol must be positive")
        if "max_iter" in raw:
            kw["max_iter"] = int(raw["max_iter"])
            if kw["max_iter"] < 1:
                raise ValueError("max_iter must be positive")
        if "damping" in raw:
            kw["damping"] = float(raw["damping"])
            if not 0 < kw["damping"] <= 1:
                raise ValueError("damping must lie in (0, 1]")
    except (TypeError, ValueError, DomainError) as exc:
        raise ProblemError(f"invalid settings: {exc}") from None
    return s.replace(**kw)


def load_problem(path) -> ProblemSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_problem(fh.read())


# ---------------------------------------------------------------------------
# Evaluation onto grids


def grid_env(grid: Grid, variables: tuple, arity) -> dict:
    x = grid.nodes
    if Arity(arity) is Arity.ONE:
        return {variables[0]: x}
    return {variables[0]: x[:, None], variables[1]: x[None, :]}


def eval_kernel(exprs: np.ndarray, grid: Grid, arity, variables=("x", "y")) -> MatrixKernelField:
    """Sample a matrix of expressions at nodes (arity one) or node pairs.

    Vector expressions (1-d arrays) become single-column blocks.
    """
    exprs = np.asarray(exprs, dtype=object)
    if exprs.ndim == 0:
        exprs = exprs.reshape(1, 1)
    elif exprs.ndim == 1:
        exprs = exprs[:, None]
    env = grid_env(grid, variables, arity)
    lead = (grid.n,) if Arity(arity) is Arity.ONE else (grid.n, grid.n)
    out = np.empty(lead + exprs.shape)
    for idx in np.ndindex(*exprs.shape):
        out[(...,) + idx] = np.broadcast_to(evaluate(exprs[idx], env), lead)
    return MatrixKernelField(grid, arity, out)


def kernel_field(spec: ProblemSpec, role: str, grid: Grid) -> MatrixKernelField:
    rspec = ROLES[spec.kind][role]
    return eval_kernel(spec.kernels[role], grid, rspec.arity, spec.variables)


def grid_function(spec: ProblemSpec, role: str, grid: Grid):
    from .discretize import GridFunction
    field_ = kernel_field(spec, role, grid)
    return GridFunction(grid, field_.data[:, :, 0])


def state_env(spec: ProblemSpec, phi: np.ndarray) -> dict:
    """Expression bindings for the state components of ``phi`` (..., n)."""
    names = state_names(spec.n)
    env = {names[k]: phi[..., k] for k in range(spec.n)}
    if spec.n == 1:
        env["phi"] = phi[..., 0]
    return env
