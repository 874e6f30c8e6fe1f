"""SVD utilities: thin SVD, matrix norms, singular value thresholding and
factor extraction under the sqrt(T) factor scaling."""

from dataclasses import dataclass

import numpy as np

from .errors import KOutOfRange, NegativeThreshold, NonFiniteInput, ShapeMismatch

__all__ = [
    "FactorPair",
    "as_panel",
    "thin_svd",
    "svt_prox",
    "nuclear_norm",
    "operator_norm",
    "factor_decompose",
    "RANK_CUTOFF",
]

RANK_CUTOFF = 1e-12

ROLES = ("outcome", "regressor", "coefficient", "residual")


def as_panel(M, role="coefficient", min_dim=2):
    """Validate an N x T panel matrix and return it as a float array.

    ``role`` is informational and only used in error messages.
    """
    A = np.asarray(M, dtype=float)
    if A.ndim != 2:
        raise ShapeMismatch(f"{role} panel must be 2-D, got shape {A.shape}")
    if min(A.shape) < min_dim:
        raise ShapeMismatch(f"{role} panel needs N, T >= {min_dim}, got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NonFiniteInput(f"{role} panel contains non-finite entries")
    return A


def _orient(P, Q):
    # largest-magnitude entry of each right singular vector is made nonnegative
    if Q.shape[1] == 0:
        return P, Q
    idx = np.argmax(np.abs(Q), axis=0)
    sign = np.sign(Q[idx, np.arange(Q.shape[1])])
    sign[sign == 0] = 1.0
    return P * sign, Q * sign


def thin_svd(M, cutoff=RANK_CUTOFF):
    """Thin SVD ``M = P diag(D) Q'`` truncated at the numerical rank.

    Singular values below ``cutoff * D[0]`` are dropped, so ``P`` is N x r and
    ``Q`` is T x r with r the numerical rank (r = 0 for a zero matrix).
    """
    A = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(A)):
        raise NonFiniteInput("thin_svd input contains non-finite entries")
    P, D, Qt = np.linalg.svd(A, full_matrices=False)
    r = int(np.sum(D > cutoff * D[0])) if D.size and D[0] > 0 else 0
    P, Q = _orient(P[:, :r], Qt[:r].T)
    return P, D[:r], Q


def singular_values(M):
    A = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(A)):
        raise NonFiniteInput("matrix contains non-finite entries")
    return np.linalg.svd(A, compute_uv=False)


def nuclear_norm(M):
    return float(np.sum(singular_values(M)))


def operator_norm(M):
    D = singular_values(M)
    return float(D[0]) if D.size else 0.0


def svt_prox(M, threshold):
    """Singular value soft-thresholding.

    Returns ``argmin_X 0.5 * ||M - X||_F^2 + threshold * ||X||_*``.
    """
    if threshold < 0:
        raise NegativeThreshold(f"threshold must be >= 0, got {threshold}")
    A = np.asarray(M, dtype=float)
    if threshold == 0:
        return A.copy()
    P, D, Qt = np.linalg.svd(A, full_matrices=False)
    keep = D > threshold
    return (P[:, keep] * (D[keep] - threshold)) @ Qt[keep]


@dataclass(frozen=True)
class FactorPair:
    """Loadings ``U`` (N x K) and factors ``V`` (T x K) with ``V'V / T = I``."""

    loadings: np.ndarray
    factors: np.ndarray

    @property
    def rank(self):
        return self.factors.shape[1]

    def product(self):
        return self.loadings @ self.factors.T


def factor_decompose(theta, K):
    """Rank-K factor pair of ``theta`` with ``V = sqrt(T) * (top right singular
    vectors)`` and ``U = theta @ V / T``, so ``U @ V.T`` is the best rank-K
    approximation of ``theta``."""
    A = np.asarray(theta, dtype=float)
    N, T = A.shape
    if not (1 <= K <= min(N, T)):
        raise KOutOfRange(f"K must lie in [1, {min(N, T)}], got {K}")
    if not np.all(np.isfinite(A)):
        raise NonFiniteInput("factor_decompose input contains non-finite entries")
    _, _, Qt = np.linalg.svd(A, full_matrices=False)
    Q = Qt[:K].T
    _, Q = _orient(np.zeros((0, K)), Q)
    V = np.sqrt(T) * Q
    U = A @ V / T
    return FactorPair(U, V)
