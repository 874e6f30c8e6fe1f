"""Rank selection for the coefficient matrices by singular value thresholding
of a full-sample regularised fit."""

from dataclasses import dataclass, field
import math

import numpy as np

from .admm import NnrConfig, fit_nnr
from .lowrank import singular_values

__all__ = ["RANK_CONSTANT", "RankEstimate", "rank_threshold", "estimate_rank", "estimate_all_ranks"]

RANK_CONSTANT = 0.6


def rank_threshold(theta, nu):
    """``0.6 * sqrt(N T nu ||theta||_op)``."""
    A = np.asarray(theta, float)
    N, T = A.shape
    sv = singular_values(A)
    return RANK_CONSTANT * math.sqrt(N * T * nu * (sv[0] if sv.size else 0.0))


def estimate_rank(theta, nu, return_flag=False):
    """Number of singular values of ``theta`` at or above :func:`rank_threshold`.

    A zero matrix gives rank 0; with ``return_flag`` the result is
    ``(rank, zero_matrix)`` so callers can tell this case apart.
    """
    if not nu > 0:
        raise ValueError(f"nu must be positive, got {nu}")
    sv = singular_values(theta)
    zero = not (sv.size and sv[0] > 0)
    if zero:
        k = 0
    else:
        thr = RANK_CONSTANT * math.sqrt(np.size(theta) * nu * sv[0])
        k = int(np.sum(sv >= thr))
    return (k, zero) if return_flag else k


@dataclass
class RankEstimate:
    """Estimated ranks, intercept first, with the spectra and thresholds used."""

    k_hat: tuple
    thresholds: tuple
    singular_values: list
    nu: tuple
    zero_matrix: tuple = ()
    fit: object = field(default=None, repr=False)
    constant: float = RANK_CONSTANT


def estimate_all_ranks(Y, X, tau, config=None, fit=None):
    """Fit the regularised model on the full sample and threshold each spectrum.

    A precomputed :class:`~lrpq.admm.NnrFit` may be passed as ``fit``.
    """
    if fit is None:
        fit = fit_nnr(Y, X, tau, config or NnrConfig())
    ks, thr, svs, zeros = [], [], [], []
    for th, nu in zip(fit.theta, fit.nu):
        sv = singular_values(th)
        k, zero = estimate_rank(th, nu, return_flag=True)
        ks.append(k)
        zeros.append(zero)
        svs.append(sv)
        thr.append(rank_threshold(th, nu))
    return RankEstimate(tuple(ks), tuple(thr), svs, tuple(fit.nu), tuple(zeros), fit)
