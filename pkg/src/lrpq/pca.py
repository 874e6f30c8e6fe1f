"""Principal-components fits of the regressors: common component and
idiosyncratic residual."""

from dataclasses import dataclass

import numpy as np

from .errors import ROutOfRange
from .lowrank import _orient, as_panel, singular_values

__all__ = ["PcaFit", "pca_fit", "estimate_num_factors", "LOW_CONFIDENCE_RATIO"]

LOW_CONFIDENCE_RATIO = 2.0


@dataclass(frozen=True)
class PcaFit:
    """``X = mu + e`` with ``mu = L W'``, ``L'L/N = I`` and ``W'W/T`` diagonal
    and descending."""

    loadings: np.ndarray
    factors: np.ndarray
    common: np.ndarray
    residual: np.ndarray

    @property
    def r(self):
        return self.loadings.shape[1]


def pca_fit(X, r):
    """Rank-``r`` principal-components fit of an N x T panel."""
    X = as_panel(X, "regressor")
    N, T = X.shape
    if not (1 <= r <= min(N, T)):
        raise ROutOfRange(f"r must lie in [1, {min(N, T)}], got {r}")
    P, D, Qt = np.linalg.svd(X, full_matrices=False)
    # signs fixed on the time side, as for coefficient factors
    P, Q = _orient(P[:, :r], Qt[:r].T)
    L = np.sqrt(N) * P
    W = Q * (D[:r] / np.sqrt(N))
    common = L @ W.T
    return PcaFit(L, W, common, X - common)


def estimate_num_factors(X, r_max, return_ratio=False):
    """Eigenvalue-ratio choice of the number of factors in ``X``.

    Returns ``argmax_{1<=k<=r_max} s_k / s_{k+1}`` over the singular values.
    With ``return_ratio`` also returns the maximal ratio; values below
    ``LOW_CONFIDENCE_RATIO`` indicate no clear factor structure.
    """
    X = as_panel(X, "regressor")
    if not (1 <= r_max < min(X.shape)):
        raise ROutOfRange(f"r_max must lie in [1, {min(X.shape) - 1}], got {r_max}")
    sv = singular_values(X)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = sv[:r_max] / sv[1:r_max + 1]
    ratios = np.where(np.isfinite(ratios), ratios, np.inf)
    k = int(np.argmax(ratios)) + 1
    return (k, float(ratios[k - 1])) if return_ratio else k
