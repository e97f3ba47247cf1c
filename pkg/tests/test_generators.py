import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qbsdej.errors import ConfigurationError, PreconditionError
from qbsdej.generators import (
    Generator,
    GeneratorParams,
    entropic,
    envelope_check,
    eval_builtin,
    girsanov_reduce,
    gradient_check,
    h_eval,
    j_eval,
    linear,
    make_builtin,
    royer,
    shift_generator,
    zero,
)
from qbsdej.lattice import MarkSpace
from qbsdej.solver import SolutionTriple

ONE = MarkSpace([1.0], [1.0])
finite = st.floats(-5, 5, allow_nan=False)


def test_j_examples():
    assert j_eval(MarkSpace([1.0], [2.0]), [1.0]) == pytest.approx(2 * (math.e - 2), rel=1e-14)
    assert j_eval(ONE, [0.0]) == 0.0
    assert j_eval(ONE, [-1.0]) == pytest.approx(math.exp(-1), rel=1e-14)


def test_h_examples():
    assert h_eval(1.0, 0.0) == 0.0
    assert h_eval(2.0, 1.0) == pytest.approx((math.e**2 - 3) / 2, rel=1e-14)
    assert h_eval(2.0, 1.0) == pytest.approx((math.e - 1) ** 2 / 2 + (math.e - 2), rel=1e-14)
    with pytest.raises(ValueError):
        h_eval(0.0, 1.0)


@settings(max_examples=200)
@given(st.floats(0.01, 5).map(lambda v: v * 1.0) | st.floats(-5, -0.01), finite)
def test_h_doubling_identity(eta, x):
    lhs = h_eval(2 * eta, x)
    rhs = math.expm1(eta * x) ** 2 / (2 * eta) + h_eval(eta, x)
    assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), 1e-300) + 1e-300


@settings(max_examples=200)
@given(st.floats(1e-3, 1e3), st.floats(-20, 20))
def test_elementary_inequalities(a, x):
    assert 2 <= math.exp(x) + math.exp(-x) + 1e-12
    assert x * x <= a * math.expm1(x) ** 2 + math.expm1(-x) ** 2 / a + 1e-12


def _phi(g, v):
    return g * (math.expm1(v / g) - v / g)


@settings(max_examples=300)
@given(st.floats(0.05, 10), st.floats(0.05, 10), finite, finite)
def test_convexity_splitting(g1, g2, x, y):
    lhs = _phi(g1 + g2, x + y)
    rhs = _phi(g1, x) + _phi(g2, y)
    assert lhs <= rhs + 1e-12 * max(1.0, abs(rhs))


@settings(max_examples=200)
@given(st.lists(finite, min_size=2, max_size=2), st.lists(finite, min_size=2, max_size=2))
def test_j_nonnegative_and_convex(u, v):
    marks = MarkSpace([1.0, -0.5], [0.7, 2.0])
    u, v = np.array(u), np.array(v)
    assert j_eval(marks, u) >= 0
    assert j_eval(marks, (u + v) / 2) <= (j_eval(marks, u) + j_eval(marks, v)) / 2 + 1e-12


@settings(max_examples=200)
@given(st.floats(0.1, 3), st.lists(st.floats(-2, 2), min_size=2, max_size=2))
def test_mean_value_bounds(gamma, u):
    marks = MarkSpace([1.0, 2.0], [0.7, 1.3])
    u = np.array(u)
    l2 = float(np.sum(marks.lam * u * u))
    sup = float(np.abs(u).max())
    lo = 0.5 * gamma * math.exp(-gamma * sup) * l2
    hi = 0.5 * gamma * math.exp(gamma * sup) * l2
    for s in (1, -1):
        val = j_eval(marks, s * gamma * u) / gamma
        assert lo - 1e-12 <= val <= hi + 1e-12


def test_entropic_builtin_examples():
    assert eval_builtin("entropic", {"gamma": 1.0}, 0, 0, 0.0, [2.0], [0.0], ONE) == pytest.approx(2.0)
    assert eval_builtin("entropic", {"gamma": 2.0}, 0, 0, 0.0, [0.0], [1.0], ONE) == pytest.approx(
        (math.e**2 - 3) / 2, rel=1e-14)
    g = entropic(1.3, ONE)
    for y in (-3.0, 0.0, 7.0):
        assert g.value(y, 0.0, 0.0) == 0.0


def test_unknown_kind_is_configuration_error():
    with pytest.raises(ConfigurationError):
        make_builtin({"kind": "cubic"}, ONE)


def test_royer_rejects_out_of_band_coefficient():
    with pytest.raises(ConfigurationError):
        royer(1.0, 1.5, MarkSpace([0.5], [1.0]), c2=1.0)


def test_params_invariants():
    with pytest.raises(ConfigurationError):
        GeneratorParams(gamma=0)
    with pytest.raises(ConfigurationError):
        GeneratorParams(c1=-0.9, delta=0.5)


def _samples(rng, n=50, d=1, m=1):
    return [(0, 0, rng.normal(), rng.normal(size=d), rng.normal(size=m)) for _ in range(n)]


def test_envelope_entropic_attained(rng):
    g = entropic(1.0, ONE)
    rep = envelope_check(g, _samples(rng) + [(0, 0, 0.0, [1.0], [0.5])])
    assert rep.passed
    assert abs(rep.upper_slack) < 1e-12


def test_envelope_detects_steep_quadratic():
    gamma = 1.0
    f = lambda k, nodes, y, z, u: 2 * gamma * np.sum(z * z, axis=-1)
    g = Generator(f, GeneratorParams(gamma=gamma), MarkSpace.empty())
    rep = envelope_check(g, [(0, 0, 0.0, [1.0], [])])
    assert not rep.passed
    assert rep.upper_slack == pytest.approx(-1.5 * gamma)


def test_envelope_linear_in_y():
    g = linear(1.0, 0.0, 0.0, MarkSpace.empty(), m_alpha=0.0)
    assert envelope_check(g, [(0, 0, y, [0.0], []) for y in (-3, 0, 2)]).passed


def test_gradient_check_entropic(rng):
    rep = gradient_check(entropic(1.0, ONE), _samples(rng, m=1))
    assert rep.max_deviation < 1e-6
    g = entropic(1.0, ONE)
    assert g.numeric_du(0, np.array([0]), np.zeros(1), np.zeros((1, 1)), np.zeros((1, 1)))[0, 0] == pytest.approx(0, abs=1e-9)


def test_gradient_check_hessian_bound():
    f = lambda k, nodes, y, z, u: np.sum(z * z, axis=-1)
    g = Generator(f, GeneratorParams(theta=1.0, r_bar=10), MarkSpace.empty())
    rep = gradient_check(g, [(0, 0, 0.0, [0.3], [])])
    assert rep.max_hessian_z == pytest.approx(2.0, rel=1e-6)
    assert any(v[0] == "hessian_z_bound" for v in rep.violations)
    assert gradient_check(g.with_params(theta=2.0), [(0, 0, 0.0, [0.3], [])]).passed


def _batch(rng, n=20, d=1, m=1):
    return np.arange(n), rng.normal(size=n), rng.normal(size=(n, d)), rng.normal(size=(n, m))


def test_girsanov_identity_and_cancellation(rng):
    nodes, y, z, u = _batch(rng)
    g = entropic(1.0, ONE)
    np.testing.assert_array_equal(girsanov_reduce(g, 0.0, 0.0)(0, nodes, y, z, u), g(0, nodes, y, z, u))
    lin = linear(0.0, 1.0, 0.0, ONE)
    np.testing.assert_allclose(girsanov_reduce(lin, 1.0, 0.0)(0, nodes, y, z, u), 0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(-2, 2), st.floats(-0.4, 2))
def test_girsanov_add_back(phi, psi):
    rng = np.random.default_rng(1)
    nodes, y, z, u = _batch(rng)
    g = entropic(0.7, ONE)
    gb = girsanov_reduce(g, phi, psi)
    back = gb(0, nodes, y, z, u) + phi * z[:, 0] + psi * ONE.lam[0] * u[:, 0]
    np.testing.assert_allclose(back, g(0, nodes, y, z, u), rtol=0, atol=1e-14 * (1 + np.abs(g(0, nodes, y, z, u))).max())
    np.testing.assert_allclose(gb.g0(0, nodes), g.g0(0, nodes))


def test_girsanov_floor():
    with pytest.raises(PreconditionError):
        girsanov_reduce(entropic(1.0, ONE), 0.0, -0.9)


def _accum(n, Y, Z, U):
    return SolutionTriple([np.full(n, Y)] * 2, [np.full((n, 1), Z)], [np.full((n, 1), U)])


def test_shift_generator_examples(rng):
    nodes, y, z, u = _batch(rng)
    g = entropic(1.5, ONE)
    zero_acc = _accum(len(nodes), 0.0, 0.0, 0.0)
    np.testing.assert_allclose(shift_generator(g, zero_acc)(0, nodes, y, z, u), g(0, nodes, y, z, u))
    acc = _accum(len(nodes), 0.4, -0.7, 0.3)
    gi = shift_generator(g, acc)
    np.testing.assert_array_equal(gi.g0(0, nodes), 0.0)
    zb = -0.7
    only_z = shift_generator(g, _accum(len(nodes), 0.0, zb, 0.0))
    expect = 0.75 * ((zb + z[:, 0]) ** 2 - zb**2)
    np.testing.assert_allclose(only_z(0, nodes, y, z, np.zeros_like(u)), expect, atol=1e-14)


def test_shift_generator_inherits_envelope(rng):
    g = royer(0.8, 0.4, ONE, a=0.3, c0=0.2)
    acc = _accum(1, 0.5, 0.9, -0.6)
    gi = shift_generator(g, acc)
    assert gi.params.gamma == pytest.approx(4 * 0.8) and gi.params.beta == g.params.beta
    samples = [(0, 0, rng.normal() * 3, rng.normal(size=1) * 3, rng.normal(size=1)) for _ in range(300)]
    assert envelope_check(gi, samples).passed


def test_zero_generator():
    g = zero(ONE)
    assert g.value(3.0, [1.0], [2.0]) == 0.0


@pytest.mark.parametrize("coef", [-0.6, 0.0, 0.5, 0.9])
def test_linear_terms_fit_envelope_with_alpha(rng, coef):
    marks = MarkSpace([1.0, -2.0], [0.7, 1.3])
    g = royer(1.2, coef, marks, a=0.3, c0=0.1, c1=-0.7)
    samples = [(0, 0, rng.normal() * 2, rng.normal(size=1) * 2, rng.normal(size=2) * 2) for _ in range(300)]
    assert envelope_check(g, samples).passed
    lin = linear(0.2, [0.8], [coef, 0.3], marks)
    assert envelope_check(lin, samples).passed
    # the alpha is sharp: the optimal u attains the upper envelope
    g1 = royer(1.0, coef, ONE, c1=-0.7)
    u_star = math.log1p(coef)
    rep = envelope_check(g1, [(0, 0, 0.0, [0.0], [u_star])])
    assert abs(rep.upper_slack) < 1e-12
