import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gbpcal.gaussian import (CanonicalGaussian, GaussianError, NotPositiveDefinite,
                             SingularMarginalization, from_moments, marginalize, product,
                             quotient, to_moments)


def random_pd(rng, n, cond=50.0):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return Q @ np.diag(np.geomspace(1.0, cond, n)) @ Q.T


def random_gaussian(rng, n):
    return from_moments(rng.normal(size=n), random_pd(rng, n))


def test_unit_product():
    g = CanonicalGaussian(np.zeros(3), np.eye(3)) * CanonicalGaussian(np.zeros(3), np.eye(3))
    np.testing.assert_array_equal(g.lam, 2 * np.eye(3))
    np.testing.assert_array_equal(g.eta, np.zeros(3))


def test_zero_information_is_identity_element():
    rng = np.random.default_rng(0)
    a = random_gaussian(rng, 4)
    z = CanonicalGaussian.zeros(4)
    for g in (a * z, a / z):
        np.testing.assert_array_equal(g.eta, a.eta)
        np.testing.assert_array_equal(g.lam, a.lam)


def test_product_matches_bayes_fusion():
    # covariance form: fused mean = S2 (S1+S2)^-1 m1 + S1 (S1+S2)^-1 m2
    rng = np.random.default_rng(1)
    for _ in range(20):
        m1, m2 = rng.normal(size=2), rng.normal(size=2)
        S1, S2 = random_pd(rng, 2), random_pd(rng, 2)
        K = np.linalg.inv(S1 + S2)
        mean = S2 @ K @ m1 + S1 @ K @ m2
        cov = S1 @ K @ S2
        m, c = to_moments(from_moments(m1, S1) * from_moments(m2, S2))
        np.testing.assert_allclose(m, mean, atol=1e-10)
        np.testing.assert_allclose(c, cov, atol=1e-10)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 12))
def test_product_quotient_roundtrip(seed, n):
    rng = np.random.default_rng(seed)
    a, b = random_gaussian(rng, n), random_gaussian(rng, n)
    back = quotient(product(a, b), b)
    np.testing.assert_allclose(back.eta, a.eta, atol=1e-12 * (1 + np.abs(b.eta).max()))
    np.testing.assert_allclose(back.lam, a.lam, atol=1e-12 * (1 + np.abs(b.lam).max()))
    ab, ba = a * b, b * a
    np.testing.assert_array_equal(ab.eta, ba.eta)
    np.testing.assert_array_equal(ab.lam, ba.lam)


def test_marginal_of_correlated_pair():
    g = from_moments([1.0, 2.0], [[2.0, 1.0], [1.0, 2.0]])
    m, c = to_moments(marginalize(g, [0]))
    np.testing.assert_allclose(m, [1.0], atol=1e-12)
    np.testing.assert_allclose(c, [[2.0]], atol=1e-12)


def test_block_diagonal_marginal_is_the_block():
    rng = np.random.default_rng(2)
    A, B = random_pd(rng, 2), random_pd(rng, 3)
    lam = np.zeros((5, 5))
    lam[:2, :2], lam[2:, 2:] = A, B
    eta = rng.normal(size=5)
    g = marginalize(CanonicalGaussian(eta, lam), [2, 3, 4])
    np.testing.assert_allclose(g.lam, B, atol=1e-13)
    np.testing.assert_allclose(g.eta, eta[2:], atol=1e-13)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(2, 12))
def test_marginalize_matches_covariance_oracle(seed, n):
    rng = np.random.default_rng(seed)
    mean, cov = rng.normal(size=n), random_pd(rng, n)
    keep = np.sort(rng.choice(n, size=rng.integers(1, n), replace=False))
    g = marginalize(from_moments(mean, cov), keep)
    m, c = to_moments(g)
    np.testing.assert_allclose(m, mean[keep], atol=1e-8)
    np.testing.assert_allclose(c, cov[np.ix_(keep, keep)], atol=1e-8)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(3, 12))
def test_marginalize_is_transitive(seed, n):
    rng = np.random.default_rng(seed)
    g = random_gaussian(rng, n)
    ab = np.sort(rng.choice(n, size=n - 1, replace=False))
    a_pos = np.arange(rng.integers(1, ab.size))
    direct = marginalize(g, ab[a_pos])
    nested = marginalize(marginalize(g, ab), a_pos)
    np.testing.assert_allclose(nested.eta, direct.eta, atol=1e-10)
    np.testing.assert_allclose(nested.lam, direct.lam, atol=1e-10)


def test_moment_conversions():
    m, c = to_moments(CanonicalGaussian(np.zeros(3), np.eye(3)))
    np.testing.assert_array_equal(m, 0)
    np.testing.assert_allclose(c, np.eye(3))
    rng = np.random.default_rng(5)
    for n in range(1, 8):
        mean, cov = rng.normal(size=n), random_pd(rng, n)
        m, c = to_moments(from_moments(mean, cov))
        np.testing.assert_allclose(m, mean, atol=1e-10)
        np.testing.assert_allclose(c, cov, atol=1e-10)


def test_errors():
    with pytest.raises(NotPositiveDefinite):
        to_moments(CanonicalGaussian(np.zeros(2), np.diag([1.0, 0.0])))
    with pytest.raises(SingularMarginalization):
        marginalize(CanonicalGaussian(np.zeros(2), np.diag([1.0, 0.0])), [0])
    with pytest.raises(GaussianError):
        product(CanonicalGaussian.zeros(2), CanonicalGaussian.zeros(3))
    with pytest.raises(GaussianError):
        marginalize(CanonicalGaussian.zeros(2), [2])
