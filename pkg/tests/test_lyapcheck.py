import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from itots.lyapcheck import (BoundViolated, LyapunovEvaluator, PreconditionViolated,
                             adaptive_simpson, check_generator, check_gradient, check_hessian,
                             check_hessian_bound, check_path_independence, check_positive,
                             constant_certificate, read_sample_report, sample_report)
from itots.stability import LineIntegralCertificate
from itots.tsmodel import beta_bounds


@pytest.fixture(scope="module")
def ev(ex1, ex1_analysis):
    return LyapunovEvaluator(ex1, ex1_analysis.certificate)


def test_simpson_known_integrals():
    assert adaptive_simpson(math.sin, 0.0, math.pi) == pytest.approx(2.0, abs=1e-10)
    assert adaptive_simpson(math.exp, -1.0, 2.0) == pytest.approx(math.e**2 - math.exp(-1), rel=1e-11)
    assert adaptive_simpson(math.cos, 1.0, 1.0) == 0.0
    assert adaptive_simpson(lambda t: t, 2.0, 0.0) == pytest.approx(-2.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=6), st.floats(-5, 5), st.floats(-5, 5))
def test_simpson_against_quad(coeffs, a, b):
    f = np.polynomial.Polynomial(coeffs)
    ref = integrate.quad(f, a, b, epsabs=1e-13)[0]
    assert adaptive_simpson(f, a, b) == pytest.approx(ref, abs=1e-9)


def test_fact2_constant_certificate(ex1, rng):
    G = rng.standard_normal((2, 2))
    P = G @ G.T + np.eye(2)
    cev = LyapunovEvaluator(ex1, constant_certificate(ex1, P))
    for x in rng.uniform(-50, 50, size=(50, 2)):
        assert abs(cev.V(x) - x @ P @ x) <= 1e-10 * max(1.0, x @ P @ x)


def test_value_at_origin_and_positivity(ev):
    assert ev.V(np.zeros(2)) == 0.0
    assert check_positive(ev, samples=50)["ok"]


def test_path_independence(ev):
    r = check_path_independence(ev, samples=10)
    assert r["ok"] and r["max_rel"] <= 1e-8


def test_path_independence_across_the_narrow_bump(ev):
    # e^{-x^2} is narrow relative to the box; splitting at breakpoints keeps it resolved
    for x in ([37.0, 0.1], [-41.0, 3.0], [0.2, -48.0]):
        x = np.array(x)
        assert abs(ev.V(x) - ev.V_path(x)) <= 1e-8 * ev.V_path(x)


def test_gradient_and_hessian(ev):
    assert check_gradient(ev, samples=10)["max_rel"] <= 1e-6
    assert check_hessian(ev, samples=10)["max_rel"] <= 1e-5


def test_hessian_equals_p_at_origin(ev):
    np.testing.assert_allclose(ev.hessian(np.zeros(2)), 2 * ev.P_of(np.zeros(2)), atol=1e-14)


def test_lemma2_bound(ev):
    r = check_hessian_bound(ev, samples=2000)
    assert r["ok"] and r["max_violation"] < 0


def test_lemma2_precondition(ex1, ex1_analysis):
    c = ex1_analysis.certificate
    broken = LineIntegralCertificate(Pbar=c.Pbar, pool=c.pool, D=np.zeros((2, 2)), Q=c.Q,
                                     beta=c.beta, ordinals=c.ordinals)
    with pytest.raises(PreconditionViolated):
        check_hessian_bound(LyapunovEvaluator(ex1, broken), samples=10)


def test_lemma2_violation_raises_when_beta_too_small(ex1, ex1_analysis):
    c = ex1_analysis.certificate
    # with beta = 0 the rank-one Hessian term is left uncovered somewhere in the box
    weak = LyapunovEvaluator(ex1, c, beta=0.0)
    r = check_hessian_bound(weak, samples=2000)
    assert r["max_violation"] > 0
    with pytest.raises(BoundViolated):
        check_hessian_bound(weak, samples=2000, raise_on_violation=True)


def test_generator_negative(ev):
    r = check_generator(ev, samples=2000)
    assert r["ok"]


def test_generator_bound_dominates_exact(ev, rng):
    for x in rng.uniform(-20, 20, size=(100, 2)):
        assert ev.generator_exact(x) <= ev.generator_bound(x) + 1e-9 * (x @ x)


def test_generator_batch_matches_pointwise(ev, rng):
    X = rng.uniform(-20, 20, size=(20, 2))
    np.testing.assert_allclose(ev.generator_bound_batch(X), [ev.generator_bound(x) for x in X],
                               rtol=1e-12, atol=1e-12)


def test_closed_loop_generator(ex2, ex2_synthesis):
    from itots.synthesis import verify_closed_loop
    ver = verify_closed_loop(ex2, ex2_synthesis.gains, beta_bounds(ex2))
    cev = LyapunovEvaluator(ex2, ver.certificate)
    assert check_generator(cev, gains=ex2_synthesis.gains, samples=2000)["ok"]


def test_sample_report_round_trip(ev):
    text = sample_report(ev, samples=5)
    assert text.splitlines()[0] == "x_1,x_2,V,LV_bound"
    data = read_sample_report(text)
    assert data.shape == (5, 4)
    np.testing.assert_allclose(data[:, 2], [ev.V(x) for x in data[:, :2]], rtol=1e-11)
