import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import random_quadform, spec_of
from iecontrol import oracle, quadform
from iecontrol.discretize import Arity, GridFunction, MatrixKernelField, make_grid
from iecontrol.errors import PreconditionError, SingularOperatorError
from iecontrol.quadform import QuadFormProblem, Verdict


def problem(grid, k1, k2, r0):
    N = grid.n
    x = grid.nodes
    K1 = MatrixKernelField(grid, Arity.ONE, np.broadcast_to(k1(x), (N,))[:, None, None].copy())
    K2 = MatrixKernelField(grid, Arity.TWO, np.broadcast_to(k2(x[:, None], x[None, :]), (N, N))[:, :, None, None].copy())
    return QuadFormProblem(K1, K2, GridFunction(grid, np.broadcast_to(r0(x), (N,)).copy()))


def sine(x):
    return np.sqrt(2) * np.sin(np.pi * x)


@pytest.mark.parametrize("c", [0.0, 0.5, 3.0, -0.5])
def test_rank_one_closed_form(c):
    # K1 = 1, K2 = c phi phi, r0 = phi  =>  w* = -phi/(1+c), E = -1/(2(1+c))
    g = make_grid(0, 1, 65, "trapezoid")
    p = problem(g, lambda x: 1.0, lambda x, y: c * sine(x) * sine(y), sine)
    s = quadform.minimize(p)
    np.testing.assert_allclose(s.w_star.values[:, 0], -sine(g.nodes) / (1 + c), atol=1e-13)
    assert s.E_min == pytest.approx(-1 / (2 * (1 + c)), abs=1e-13)
    assert s.certificate.verdict is Verdict.POSITIVE_DEFINITE
    assert s.certificate.min_eigenvalue == pytest.approx(min(c, 0.0), abs=1e-12)


def test_identity_zero_certificate():
    g = make_grid(0, 1, 33, "trapezoid")
    p = problem(g, lambda x: 1.0, lambda x, y: 0.0 * x * y, lambda x: x)
    cert = quadform.certify_pd(p)
    assert cert.verdict is Verdict.POSITIVE_DEFINITE and cert.min_eigenvalue == 0.0
    s = quadform.minimize(p)
    np.testing.assert_allclose(s.w_star.values[:, 0], -g.nodes, atol=1e-15)


def test_indefinite_and_semidefinite_verdicts():
    g = make_grid(0, 1, 65, "trapezoid")
    bad = problem(g, lambda x: 1.0, lambda x, y: -2 * sine(x) * sine(y), lambda x: 1.0 + 0 * x)
    cert = quadform.certify_pd(bad)
    assert cert.verdict is Verdict.INDEFINITE and cert.min_eigenvalue == pytest.approx(-2)
    with pytest.warns(UserWarning, match="stationary"):
        s = quadform.minimize(bad)
    assert s.stationary_only and s.equation_residual < 1e-12
    edge = problem(g, lambda x: 1.0, lambda x, y: -sine(x) * sine(y), lambda x: 1.0 + 0 * x)
    assert quadform.certify_pd(edge).verdict is Verdict.POSITIVE_SEMIDEFINITE
    with pytest.raises(SingularOperatorError), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        quadform.minimize(edge)


def test_non_spd_K1_has_no_eigenvalue():
    g = make_grid(0, 1, 17, "trapezoid")
    p = problem(g, lambda x: x - 0.5, lambda x, y: 0 * x * y, lambda x: 1 + 0 * x)
    cert = quadform.certify_pd(p)
    assert cert.min_eigenvalue is None and not cert.k1_spd
    assert cert.verdict is Verdict.INDEFINITE


def test_asymmetric_pair_needs_symmetrizing():
    g = make_grid(0, 1, 17, "trapezoid")
    p = problem(g, lambda x: 1.0, lambda x, y: 0.3 * x, lambda x: 1 + 0 * x)
    with pytest.raises(PreconditionError):
        quadform.certify_pd(p)
    ps = quadform.symmetrized(p)
    np.testing.assert_allclose(ps.K2.data[:, :, 0, 0], 0.15 * (g.nodes[:, None] + g.nodes[None, :]))
    # the symmetric part carries the whole quadratic form
    w = GridFunction(g, np.cos(g.nodes))
    assert quadform.eval_E(ps, w) == pytest.approx(quadform.eval_E(p, w), rel=1e-14)


@given(seed=st.integers(0, 2**31), n=st.sampled_from([1, 2]))
def test_minimizer_properties(seed, n):
    rng = np.random.default_rng(seed)
    spec = spec_of(random_quadform(rng, n, N=33))
    g = make_grid(0, 1, 33, "trapezoid")
    p = QuadFormProblem.from_spec(spec, g)
    s = quadform.minimize(p)
    assert s.certificate.verdict is Verdict.POSITIVE_DEFINITE
    u, val, pd = oracle.qp_minimize(oracle.assemble_qp(spec, g))
    np.testing.assert_allclose(s.w_star.values.reshape(-1), u, atol=1e-9)
    assert s.E_min == pytest.approx(val, abs=1e-10)
    assert quadform.eval_Eq(p, s.w_star) == pytest.approx(-s.E_min, abs=1e-10)
    # any perturbation increases E
    d = GridFunction(g, rng.standard_normal((33, n)) * 1e-2)
    assert quadform.eval_E(p, s.w_star + d) > s.E_min


@given(seed=st.integers(0, 2**31), n=st.sampled_from([1, 2]))
def test_extension_identity(seed, n):
    rng = np.random.default_rng(seed)
    g = make_grid(-1, 2, 17, "gauss")
    p = QuadFormProblem.from_spec(spec_of(random_quadform(rng, n)), g)
    w = GridFunction(g, rng.standard_normal((17, n)))
    v = GridFunction(g, rng.standard_normal((17, n)))
    E = quadform.eval_E(p, w)
    assert quadform.eval_E_extended(p, w, w) == pytest.approx(E, rel=1e-10, abs=1e-12)
    assert quadform.eval_E_extended_q(p, w, w) == pytest.approx(quadform.eval_Eq(p, w), rel=1e-10)
    # the extended form is symmetric under swapping its arguments once K2 is symmetric
    ps = quadform.symmetrized(p)
    assert quadform.eval_E_extended(ps, w, v) == pytest.approx(quadform.eval_E_extended(ps, v, w), rel=1e-10)


def test_stationarity_defect_at_solution(problems_dir):
    from iecontrol.kernelspec import load_problem
    spec = load_problem(problems_dir / "quadform_n2.json")
    g = make_grid(*spec.domain, 65, spec.settings.rule)
    s = quadform.minimize(QuadFormProblem.from_spec(spec, g))
    assert s.equation_residual < 1e-12 and s.identity_gap < 1e-12
