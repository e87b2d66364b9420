import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from itots.tsmodel import (BetaBounds, Complement, Custom, DegenerateDenominator, Gaussian,
                           MembershipFamily, TSModel, UnboundedDerivative, beta_bounds, member_sup,
                           normalize, round_up, validate)

from conftest import example2

coord = st.floats(-50, 50, allow_nan=False)


def two_rule_model(**kw):
    fam = MembershipFamily((Gaussian(0.5, 1.0), Complement()))
    base = dict(A=[-np.eye(1), -2 * np.eye(1)], C=[np.zeros((1, 1))] * 2,
                ordinals=[[1], [2]], families=[fam])
    base.update(kw)
    return TSModel(**base)


def test_gaussian_rejects_nonpositive_parameters():
    with pytest.raises(ValueError):
        Gaussian(0.0, 1.0)
    with pytest.raises(ValueError):
        Gaussian(1.0, -1.0)


def test_example2_memberships_are_already_normalized(ex2):
    # raw weight and its complement sum to one, so normalization is the identity
    fam = ex2.families[0]
    x = np.linspace(-5, 5, 11)
    np.testing.assert_allclose(fam.normalized(x)[0], 0.0169 * np.exp(-x**2), rtol=1e-14)


def test_normalize_scalar():
    fam = MembershipFamily((Gaussian(2.0, 1.0), Gaussian(1.0, 1.0, 1.0)))
    mu = normalize(fam, 0.3)
    w = [2 * math.exp(-0.09), math.exp(-0.49)]
    assert mu == pytest.approx([w[0] / sum(w), w[1] / sum(w)], rel=1e-14)


@settings(max_examples=200, deadline=None)
@given(coord, coord)
def test_partition_of_unity(x1, x2):
    model = example2()
    h = model.basis([x1, x2])
    assert np.all(h >= -1e-15)
    assert h.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(-8, 8), st.floats(-8, 14))
def test_basis_jacobian_matches_finite_differences(x1, x2):
    model = example2()
    x = np.array([x1, x2])
    J = model.basis_jacobian(x)
    step = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = step
        fd = (model.basis(x + e) - model.basis(x - e)) / (2 * step)
        np.testing.assert_allclose(J[:, j], fd, atol=1e-8)
    # the basis sums to one, so its gradient sums to zero
    np.testing.assert_allclose(J.sum(axis=0), 0.0, atol=1e-14)


def test_basis_batch_matches_pointwise(ex2, rng):
    X = rng.uniform(-10, 10, size=(25, 2))
    H = ex2.basis_batch(X)
    for x, h in zip(X, H):
        np.testing.assert_allclose(h, ex2.basis(x), rtol=1e-13)


def test_degenerate_denominator():
    fam = MembershipFamily((Gaussian(1.0, 1.0, 0.0), Gaussian(1.0, 1.0, 1.0)))
    with pytest.raises(DegenerateDenominator):
        fam.normalized(100.0)


def test_round_up():
    assert round_up(0.0125) == 0.0125
    assert round_up(2 * 0.0169 / math.e) == 0.0125
    assert round_up(0.00301991) == 0.0031
    assert round_up(0.0) == 0.0


def test_beta_closed_form_dimension_one(ex2):
    bb = beta_bounds(ex2)
    assert bb.raw[0, 0] == pytest.approx(2 * 0.0169 / math.e, abs=1e-12)


def _brute_sup(c, a, m, box=50.0, points=2_000_001):
    x = np.linspace(-box, box, points)
    # |x dw/dx| for w = c exp(-a (x-m)^2); the complement has the same magnitude
    return np.max(np.abs(x * 2 * a * (x - m) * c * np.exp(-a * (x - m) ** 2)))


def test_beta_dimension_two_against_dense_grid(ex2):
    bb = beta_bounds(ex2, envelope=False)
    assert bb.raw[0, 1] == pytest.approx(_brute_sup(0.0024, 0.05, 3.0), abs=1e-9)
    assert bb.values[0, 1] == 0.0031


def test_beta_table_envelope(ex2):
    bb = beta_bounds(ex2)
    assert np.all(bb.values == 0.0125)
    assert bb.total == pytest.approx(0.1, abs=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 2.0), st.floats(-5, 5), st.floats(1.0, 40.0), st.floats(0.0, 20.0))
def test_beta_monotone_in_box(a, m, box, extra):
    fam = MembershipFamily((Gaussian(0.3, a, m), Complement()))
    small, _ = member_sup(fam, 1, box)
    large, _ = member_sup(fam, 1, box + extra)
    assert large >= small - 1e-12


def test_unbounded_derivative_detected():
    slow = Custom(lambda x: 0.5 + 0.4 * np.tanh(x / 1000.0),
                  lambda x: 0.4 / 1000.0 / np.cosh(x / 1000.0) ** 2)
    fam = MembershipFamily((slow, Complement()))
    with pytest.raises(UnboundedDerivative):
        member_sup(fam, 1, 50.0)


def test_beta_uniform():
    bb = BetaBounds.uniform(4, 2, 0.0125)
    assert bb.total == pytest.approx(0.1)


def test_validate_accepts_examples(ex1, ex2):
    assert validate(ex1) == []
    assert validate(ex2) == []


def test_validate_duplicate_rule():
    issues = validate(two_rule_model(ordinals=[[1], [1]]))
    assert any(s.startswith("duplicate rule") for s in issues)


def test_validate_incomplete_rule_base():
    model = two_rule_model(A=[-np.eye(1)], C=[np.zeros((1, 1))], ordinals=[[1]])
    assert any(s.startswith("incomplete rule base") for s in validate(model))
    assert validate(model, require_full=False) == []


def test_validate_ordinal_out_of_range():
    issues = validate(two_rule_model(ordinals=[[1], [3]]))
    assert any("out of range" in s for s in issues)


def test_replace_copies_matrices(ex1):
    other = ex1.replace()
    other.A[0][1, 1] = 99.0
    assert ex1.A[0][1, 1] == -1.0
