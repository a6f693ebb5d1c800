import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fastgn.margin import (
    batch_margins,
    logit_gradient,
    logsumexp,
    loss,
    margin_stats,
    scalar_link_derivatives,
    softmax,
    softplus,
)


def logits_and_label(min_c=2, max_c=12, scale=30.0):
    return st.integers(min_c, max_c).flatmap(
        lambda C: st.tuples(
            arrays(np.float64, C, elements=st.floats(-scale, scale, allow_nan=False)),
            st.integers(0, C - 1),
        )
    )


def test_logsumexp_examples():
    assert logsumexp([0.0, 0.0]) == pytest.approx(math.log(2), abs=1e-15)
    assert logsumexp([5.0]) == 5.0
    assert logsumexp([1000.0, 1000.0]) == pytest.approx(1000 + math.log(2), rel=1e-15)


def test_logsumexp_empty():
    with pytest.raises(ValueError, match="empty reduction"):
        logsumexp([])


def test_stats_binary_symmetric():
    st_ = margin_stats([0.0, 0.0], 0)
    assert st_.s == 0.0
    assert st_.p_star == st_.p_dagger == 0.5
    np.testing.assert_array_equal(st_.rho, [1.0])
    assert st_.q == 0.25 and st_.xi == 0.0


def test_stats_three_class():
    st_ = margin_stats([1.0, 0.0, 0.0], 0)
    e = math.e
    assert st_.z_dagger == pytest.approx(math.log(2), abs=1e-15)
    assert st_.s == pytest.approx(math.log(2) - 1, abs=1e-15)
    assert st_.p_star == pytest.approx(e / (e + 2), abs=1e-15)
    np.testing.assert_allclose(st_.rho, [0.5, 0.5], atol=1e-15)
    assert st_.xi == pytest.approx(0.5, abs=1e-15)
    # cross-check against a full softmax
    assert st_.p_star == pytest.approx(softmax(np.array([1.0, 0.0, 0.0]))[0], abs=1e-15)


def test_uniform_competitors_reach_dispersion_bound():
    z = np.zeros(10)
    z[3] = 2.0
    assert margin_stats(z, 3).xi == pytest.approx(8 / 9, abs=1e-15)


def test_one_hot_competitor_gives_zero_dispersion():
    z = np.array([0.0, 60.0, 0.0, 0.0])
    assert margin_stats(z, 0).xi <= 1e-9


def test_loss_examples():
    assert loss([0.0, 0.0], 0) == pytest.approx(math.log(2), abs=1e-15)
    assert loss([1.0, 0.0, 0.0], 0) == pytest.approx(math.log(1 + 2 / math.e), abs=1e-15)
    assert abs(softplus(50.0) - 50.0) <= 1e-12
    assert softplus(-800.0) == 0.0 and np.isfinite(softplus(800.0))


def test_gradient_examples():
    np.testing.assert_allclose(logit_gradient([0.0, 0.0], 0), [-0.5, 0.5], atol=1e-15)
    ps = math.e / (math.e + 2)
    np.testing.assert_allclose(logit_gradient([1.0, 0.0, 0.0], 0),
                               [ps - 1, (1 - ps) / 2, (1 - ps) / 2], atol=1e-15)


def test_link_derivatives():
    assert scalar_link_derivatives(0.0) == (0.5, 0.25)
    phi1, phi2 = scalar_link_derivatives(math.log(3))
    assert phi1 == pytest.approx(0.75, abs=1e-15)
    assert phi2 == pytest.approx(0.1875, abs=1e-15)
    h = 1e-5
    for s in (-3.0, -0.4, 0.0, 1.7, 6.0):
        fd = (scalar_link_derivatives(s + h)[0] - scalar_link_derivatives(s - h)[0]) / (2 * h)
        assert abs(scalar_link_derivatives(s)[1] - fd) <= 1e-6


@pytest.mark.parametrize("bad", [[1.0], [0.0, np.inf], [np.nan, 0.0], [[0.0, 1.0]]])
def test_invalid_logits(bad):
    with pytest.raises(ValueError):
        margin_stats(bad, 0)


def test_label_out_of_range():
    with pytest.raises(ValueError):
        margin_stats([0.0, 1.0], 2)


@settings(max_examples=300, deadline=None)
@given(logits_and_label())
def test_stats_invariants(case):
    z, k = case
    C = z.size
    s = margin_stats(z, k)
    # strict (0, 1) needs the complement to be representable next to 1.0
    assert 0 < s.p_star <= 1 and 0 < s.p_dagger <= 1
    if abs(s.s) < 36:
        assert s.p_star < 1 and s.p_dagger < 1
    assert abs(s.p_star + s.p_dagger - 1) <= 1e-12
    assert np.all(s.rho > 0) and abs(s.rho.sum() - 1) <= 1e-12
    assert 0 < s.q <= 0.25
    assert 0 <= s.xi <= 1 - 1 / (C - 1) + 1e-12


@settings(max_examples=300, deadline=None)
@given(logits_and_label())
def test_loss_and_gradient_match_softmax(case):
    z, k = case
    p = softmax(z)
    direct = -(z[k] - logsumexp(z))
    assert abs(loss(z, k) - direct) <= 1e-12 * max(1.0, abs(direct))
    y = np.zeros_like(z)
    y[k] = 1.0
    g = logit_gradient(z, k)
    assert np.max(np.abs(g - (p - y))) <= 1e-12
    assert abs(g.sum()) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(logits_and_label(scale=10.0), st.floats(-100, 100))
def test_shift_invariance(case, c):
    z, k = case
    a, b = margin_stats(z, k), margin_stats(z + c, k)
    for name in ("s", "p_star", "q", "xi"):
        assert abs(getattr(a, name) - getattr(b, name)) <= 1e-10
    np.testing.assert_allclose(a.rho, b.rho, atol=1e-10)
    assert abs(loss(z, k) - loss(z + c, k)) <= 1e-10
    np.testing.assert_allclose(logit_gradient(z, k), logit_gradient(z + c, k), atol=1e-10)


@settings(max_examples=100, deadline=None)
@given(logits_and_label(scale=5.0))
def test_gradient_finite_differences(case):
    z, k = case
    h = 1e-5
    E = np.eye(z.size) * h
    fd = np.array([(loss(z + e, k) - loss(z - e, k)) / (2 * h) for e in E])
    assert np.max(np.abs(fd - logit_gradient(z, k))) <= 1e-6


def test_batch_margins_agree_with_per_example():
    rng = np.random.default_rng(0)
    Z = 4 * rng.standard_normal((20, 7))
    labels = rng.integers(0, 7, 20)
    m = batch_margins(Z, labels)
    for i in range(20):
        ref = margin_stats(Z[i], labels[i])
        got = m.stats(i)
        assert got.s == pytest.approx(ref.s, abs=1e-13)
        assert got.q == pytest.approx(ref.q, abs=1e-15)
        np.testing.assert_allclose(got.rho, ref.rho, atol=1e-15)
        np.testing.assert_allclose(m.logit_residuals()[i], logit_gradient(Z[i], labels[i]), atol=1e-15)
    np.testing.assert_allclose(m.probs.sum(axis=1), 1.0, atol=1e-14)
    np.testing.assert_allclose(m.margin_rows().sum(axis=1), 0.0, atol=1e-14)
