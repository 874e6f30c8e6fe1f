import numpy as np
import pytest

from lrpq import pca
from lrpq.errors import ROutOfRange


def test_normalisations(rng):
    N, T = 20, 15
    X = rng.normal(size=(N, 2)) @ rng.normal(size=(2, T)) + 0.1 * rng.normal(size=(N, T))
    fit = pca.pca_fit(X, 2)
    np.testing.assert_allclose(fit.loadings.T @ fit.loadings / N, np.eye(2), atol=1e-12)
    G = fit.factors.T @ fit.factors / T
    assert abs(G[0, 1]) < 1e-12 and G[0, 0] >= G[1, 1]
    np.testing.assert_allclose(fit.common + fit.residual, X, atol=1e-12)
    assert fit.r == 2


def test_residual_orthogonal_to_loadings(rng):
    X = rng.normal(size=(12, 10))
    fit = pca.pca_fit(X, 3)
    np.testing.assert_allclose(fit.loadings.T @ fit.residual, 0, atol=1e-10)
    np.testing.assert_allclose(fit.residual @ fit.factors, 0, atol=1e-10)


def test_eckart_young_probes(rng):
    X = rng.normal(size=(10, 8))
    r = 2
    best = np.linalg.norm(pca.pca_fit(X, r).residual)
    for _ in range(300):
        L = rng.normal(size=(10, r))
        W = np.linalg.lstsq(L, X, rcond=None)[0]  # best fit given the probe loadings
        assert np.linalg.norm(X - L @ W) >= best - 1e-10


def test_exact_factor_model(rng):
    X = rng.normal(size=(9, 1)) @ rng.normal(size=(1, 7))
    fit = pca.pca_fit(X, 1)
    np.testing.assert_allclose(fit.residual, 0, atol=1e-10)


def test_rank_errors():
    with pytest.raises(ROutOfRange):
        pca.pca_fit(np.ones((4, 3)), 0)
    with pytest.raises(ROutOfRange):
        pca.pca_fit(np.ones((4, 3)), 4)
    with pytest.raises(ROutOfRange):
        pca.estimate_num_factors(np.ones((4, 3)), 3)


def test_eigenvalue_ratio(rng):
    N, T = 60, 50
    X = 3 * rng.normal(size=(N, 2)) @ rng.normal(size=(2, T)) + rng.normal(size=(N, T))
    k, ratio = pca.estimate_num_factors(X, 6, return_ratio=True)
    assert k == 2 and ratio > pca.LOW_CONFIDENCE_RATIO
    _, weak = pca.estimate_num_factors(rng.normal(size=(N, T)), 6, return_ratio=True)
    assert weak < pca.LOW_CONFIDENCE_RATIO
