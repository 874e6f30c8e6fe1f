import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lrpq import rank
from lrpq.admm import NnrConfig


def _diag(sv, N=6, T=5):
    M = np.zeros((N, T))
    M[np.arange(len(sv)), np.arange(len(sv))] = sv
    return M


def test_counting_rule_by_hand():
    # N T nu = 30 * 0.01 = 0.3; threshold = 0.6 sqrt(0.3 * 10) = 1.0392
    M = _diag([10.0, 2.0, 1.04, 1.03])
    assert rank.rank_threshold(M, 0.01) == pytest.approx(0.6 * np.sqrt(3.0))
    assert rank.estimate_rank(M, 0.01) == 3


def test_zero_matrix_flag():
    assert rank.estimate_rank(np.zeros((4, 4)), 0.1, return_flag=True) == (0, True)
    assert rank.estimate_rank(_diag([1.0]), 0.001, return_flag=True) == (1, False)
    with pytest.raises(ValueError):
        rank.estimate_rank(np.eye(3), 0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 100), min_size=1, max_size=5), st.floats(1e-4, 1e-1),
       st.floats(1e-4, 1e-1))
def test_monotone_in_nu(sv, nu1, nu2):
    M = _diag(sorted(sv, reverse=True))
    lo, hi = sorted((nu1, nu2))
    assert rank.estimate_rank(M, hi) <= rank.estimate_rank(M, lo)
    # the leading value clears the threshold exactly when s_1 >= 0.36 N T nu
    assert (rank.estimate_rank(M, lo) >= 1) == (max(sv) >= 0.36 * M.size * lo * (1 - 1e-12))


def test_scale_equivariance():
    # scaling theta by c and nu by c leaves the count unchanged
    M = _diag([5.0, 1.0, 0.5])
    for c in (0.1, 3.0, 50.0):
        assert rank.estimate_rank(c * M, c * 0.02) == rank.estimate_rank(M, 0.02)


def test_estimate_all_ranks_low_rank_panel(rng):
    N, T = 30, 25
    theta0 = np.outer(rng.normal(2, 1, N), rng.normal(2, 1, T))
    X = rng.uniform(0, 1, (N, T))
    Y = theta0 + 2.0 * X + 0.1 * rng.standard_normal((N, T))
    est = rank.estimate_all_ranks(Y, [X], 0.5, NnrConfig(max_iter=3000, warn=False))
    assert est.k_hat == (1, 1)
    assert len(est.singular_values) == 2 and est.constant == rank.RANK_CONSTANT
    # passing the fit back reproduces the same answer
    again = rank.estimate_all_ranks(Y, [X], 0.5, fit=est.fit)
    assert again.k_hat == est.k_hat
