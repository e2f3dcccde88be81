import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from loocmi.exceptions import DomainError
from loocmi.numerics import CovSpec, c_n, gaussian_kl, log_sum_exp, pairwise_kl, pairwise_sq_mahalanobis


def test_c_n_values():
    assert c_n(2) == 2.0
    assert c_n(11) == pytest.approx(1.1)
    assert c_n(1000) == pytest.approx(1000 / 999)


@pytest.mark.parametrize("bad", [1, 0, -3, 2.5, True])
def test_c_n_rejects(bad):
    with pytest.raises(DomainError):
        c_n(bad)


def test_log_sum_exp_large_and_small():
    assert log_sum_exp([1000.0, 1000.0]) == pytest.approx(1000 + math.log(2), abs=1e-12)
    assert log_sum_exp([-1000.0, -1000.0]) == pytest.approx(-1000 + math.log(2), abs=1e-12)
    assert log_sum_exp([0.0, -np.inf]) == 0.0


def test_log_sum_exp_errors():
    for bad in ([], [np.nan, 1.0], [np.inf], [-np.inf, -np.inf]):
        with pytest.raises(DomainError):
            log_sum_exp(bad)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-700, 700)))
def test_log_sum_exp_matches_mpmath(v):
    ref = float(mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(float(x))) for x in v)))
    assert log_sum_exp(v) == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_log_sum_exp_axis():
    v = np.array([[0.0, 0.0], [1.0, -np.inf]])
    np.testing.assert_allclose(log_sum_exp(v, axis=1), [math.log(2), 1.0])


def _random_precision(rng, K):
    A = rng.normal(size=(K, K))
    return A @ A.T + 0.3 * np.eye(K)


def _naive_sq(means, Sinv):
    n = len(means)
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            a = means[i] - means[j]
            D[i, j] = a @ Sinv @ a
    return D


@pytest.mark.parametrize("kind", ["isotropic", "diagonal", "full-inverse"])
def test_pairwise_matches_naive(kind):
    rng = np.random.default_rng(1)
    n, K = 9, 4
    M = rng.normal(size=(n, K))
    if kind == "isotropic":
        cov, Sinv = CovSpec.isotropic(0.7), np.eye(K) / 0.49
    elif kind == "diagonal":
        a = rng.uniform(0.2, 2, size=K)
        cov, Sinv = CovSpec.diagonal(a), np.diag(1 / a)
    else:
        P = _random_precision(rng, K)
        cov, Sinv = CovSpec.full_inverse(P), P
    D = pairwise_sq_mahalanobis(M, cov)
    np.testing.assert_allclose(D, _naive_sq(M, Sinv), rtol=1e-10, atol=1e-12)
    assert np.all(np.diag(D) == 0.0)
    assert np.array_equal(D, D.T)
    np.testing.assert_allclose(pairwise_kl(M, cov), 0.5 * D)
    assert gaussian_kl(M[0], M[3], cov) == pytest.approx(0.5 * D[0, 3], rel=1e-10)


def test_pairwise_blocks_do_not_change_values():
    # more rows than one block
    rng = np.random.default_rng(5)
    M = rng.normal(size=(150, 3))
    D = pairwise_sq_mahalanobis(M, CovSpec.isotropic(1.0))
    ref = ((M[:, None, :] - M[None, :, :]) ** 2).sum(-1)
    np.testing.assert_allclose(D, ref, rtol=1e-12, atol=1e-12)


def test_whiten_unwhiten_roundtrip():
    rng = np.random.default_rng(2)
    P = _random_precision(rng, 3)
    cov = CovSpec.full_inverse(P)
    X = rng.normal(size=(5, 3))
    np.testing.assert_allclose(cov.unwhiten(cov.whiten(X)), X, atol=1e-12)
    assert cov.trace() == pytest.approx(np.trace(np.linalg.inv(P)), rel=1e-10)
    assert CovSpec.diagonal([1.0, 2.0]).trace() == 3.0
    assert CovSpec.isotropic(2.0).trace(3) == 12.0


def test_unwhitened_draws_have_target_covariance():
    rng = np.random.default_rng(3)
    P = _random_precision(rng, 2)
    cov = CovSpec.full_inverse(P)
    Z = rng.standard_normal((200_000, 2))
    emp = np.cov(cov.unwhiten(Z).T)
    np.testing.assert_allclose(emp, np.linalg.inv(P), rtol=0.03, atol=0.01)


def test_covspec_validation():
    with pytest.raises(DomainError):
        CovSpec.isotropic(0.0)
    with pytest.raises(DomainError):
        CovSpec.diagonal([1.0, -1.0])
    with pytest.raises(DomainError):
        CovSpec.full_inverse([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(DomainError):
        CovSpec.full_inverse([[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(DomainError):
        pairwise_kl(np.zeros((3, 2)), CovSpec.diagonal([1.0, 1.0, 1.0]))


def test_scaled_invariance():
    rng = np.random.default_rng(4)
    M = rng.normal(size=(6, 3))
    for cov in (CovSpec.isotropic(0.5), CovSpec.diagonal([0.5, 1, 2]),
                CovSpec.full_inverse(_random_precision(rng, 3))):
        np.testing.assert_allclose(pairwise_kl(3.0 * M, cov.scaled(3.0)), pairwise_kl(M, cov), rtol=1e-10)
