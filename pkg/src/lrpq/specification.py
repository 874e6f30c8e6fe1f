"""Sup-type specification tests for slope matrices with Gumbel critical values:
homogeneity across units, homogeneity over time, and additivity."""

from dataclasses import dataclass, field
import math
import warnings

import numpy as np

from .errors import NTooSmall, SingularCovariance

__all__ = [
    "ALPHAS",
    "U_COMBOS",
    "V_COMBOS",
    "TestResult",
    "gumbel_b",
    "cv_unit",
    "cv_time",
    "cv_additive",
    "pvalue_unit",
    "pvalue_time",
    "pvalue_additive",
    "sup_quadratic",
    "double_demean",
    "sigma_star",
    "test_homogeneity_u",
    "test_homogeneity_v",
    "test_additive",
]

ALPHAS = (0.01, 0.05, 0.10)
U_COMBOS = ((3, 1), (2, 3), (1, 2))
V_COMBOS = ((3, 1), (2, 3), (1, 3))
_COND_LIMIT = 1e12


def gumbel_b(n):
    """``log n - 0.5 log log n - log Gamma(1/2)``."""
    if n < 3:
        raise NTooSmall(f"gumbel_b needs n >= 3, got {n}")
    return math.log(n) - 0.5 * math.log(math.log(n)) - 0.5 * math.log(math.pi)


def _check_alpha(alpha):
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def cv_unit(n, alpha):
    """``2 b(n) - log |log(1 - alpha)|^2``; used with n = N and n = NT."""
    _check_alpha(alpha)
    return 2.0 * gumbel_b(n) - math.log(math.log(1.0 - alpha) ** 2)


cv_additive = cv_unit


def cv_time(alpha):
    """``-log(-log(1 - alpha) / 3)``."""
    _check_alpha(alpha)
    return -math.log(-math.log(1.0 - alpha) / 3.0)


def pvalue_unit(stat, n):
    """``1 - exp(-exp(-(stat/2 - b(n))))``."""
    return float(-np.expm1(-np.exp(-(0.5 * stat - gumbel_b(n)))))


pvalue_additive = pvalue_unit


def pvalue_time(stat):
    """``1 - exp(-3 exp(-stat))``."""
    return float(-np.expm1(-3.0 * np.exp(-stat)))


@dataclass
class TestResult:
    """Outcome of one specification test."""

    null: str
    statistic: float
    critical_values: dict
    p_value: float
    b_n: float = None
    components: dict = field(default_factory=dict)
    argmax: tuple = None
    flags: dict = field(default_factory=dict)

    __test__ = False  # keep pytest from collecting this class

    def reject(self, alpha=0.05):
        return self.statistic > self.critical_values[alpha]

    def to_dict(self):
        return {
            "null": self.null,
            "statistic": float(self.statistic),
            "b_n": None if self.b_n is None else float(self.b_n),
            "cv": {f"{a:.2f}": float(c) for a, c in self.critical_values.items()},
            "p_value": float(self.p_value),
            "combo_components": {f"{a}{b}": float(s) for (a, b), s in self.components.items()},
        }


def _inverse(S, name):
    S = np.atleast_2d(np.asarray(S, float))
    if not np.all(np.isfinite(S)):
        raise SingularCovariance(f"{name} has non-finite entries")
    cond = np.linalg.cond(S)
    if not cond < _COND_LIMIT:
        raise SingularCovariance(f"{name} is singular (condition number {cond:.3g})")
    return np.linalg.inv(S)


def sup_quadratic(vectors, sigma, scale):
    """``max_r scale * (x_r - xbar)' sigma^{-1} (x_r - xbar)`` and its argmax.

    ``vectors`` is n x K; ``xbar`` is the row mean.
    """
    x = np.asarray(vectors, float)
    c = x - x.mean(axis=0)
    q = scale * np.einsum("rk,kl,rl->r", c, _inverse(sigma, "covariance"), c)
    r = int(np.argmax(q))
    return float(q[r]), r


def test_homogeneity_u(result, sigma_u, j, alphas=ALPHAS):
    """Homogeneity of block ``j`` across units."""
    N = result.split.N
    T = next(iter(result.combos.values())).v_hat[j].shape[0]
    comps, where = {}, {}
    for ab in U_COMBOS:
        ce = result.combos[ab]
        s, r = sup_quadratic(ce.u_hat[j], sigma_u, T)
        comps[ab] = s
        where[ab] = int(ce.units[r])
    best = max(comps, key=comps.get)
    stat = comps[best]
    return TestResult(
        "homogeneous across units",
        stat,
        {a: cv_unit(N, a) for a in alphas},
        pvalue_unit(stat, N),
        gumbel_b(N),
        comps,
        (best, where[best]),
    )


def test_homogeneity_v(result, sigma_v, j, alphas=ALPHAS, scale="subsample"):
    """Homogeneity of block ``j`` over time.

    Each combination's centred factors are scaled by the size of its final
    subsample (``scale="subsample"``) or by the total N (``scale="total"``).
    """
    if scale not in ("subsample", "total"):
        raise ValueError("scale must be 'subsample' or 'total'")
    N = result.split.N
    comps, raw, where = {}, {}, {}
    for ab in V_COMBOS:
        ce = result.combos[ab]
        T = ce.v_hat[j].shape[0]
        n = len(ce.units) if scale == "subsample" else N
        s, t = sup_quadratic(ce.v_hat[j], sigma_v, n)
        raw[ab] = s
        comps[ab] = 0.5 * s - gumbel_b(T)
        where[ab] = t
    best = max(comps, key=comps.get)
    stat = comps[best]
    return TestResult(
        "homogeneous over time",
        stat,
        {a: cv_time(a) for a in alphas},
        pvalue_time(stat),
        gumbel_b(T),
        comps,
        (best, where[best]),
        {"raw_components": raw, "scale": scale},
    )


def double_demean(theta, split):
    """Subtract row means and within-subsample column means, add back the
    within-subsample grand mean."""
    A = np.asarray(theta, float)
    out = A - A.mean(axis=1, keepdims=True)
    for g in split.groups:
        sub = A[g]
        out[g] = out[g] - sub.mean(axis=0, keepdims=True) + sub.mean()
    return out


def sigma_star(result, sigma_u, sigma_v, j):
    """Cellwise variance of the double-demeaned estimate."""
    N = result.split.N
    T = next(iter(result.combos.values())).v_hat[j].shape[0]
    Su = np.atleast_2d(sigma_u)
    Sv = np.atleast_2d(sigma_v)
    out = np.zeros((N, T))
    for ce in result.combos.values():
        u = ce.u_hat[j] - ce.u_hat[j].mean(axis=0)
        v = ce.v_hat[j] - ce.v_hat[j].mean(axis=0)
        out[ce.units] += 0.5 * np.einsum("ik,kl,il->i", u, Sv, u)[:, None] / len(ce.units)
        out += np.einsum("tk,kl,tl->t", v, Su, v)[None, :] / (6.0 * T)
    return out


def test_additive(result, sigma_u, sigma_v, j, alphas=ALPHAS):
    """Additivity of block ``j``; cells with non-positive variance are skipped."""
    if result.ranks[j] != 2:
        warnings.warn(f"additivity test on a block of rank {result.ranks[j]} (2 expected)",
                      RuntimeWarning, stacklevel=2)
    star = double_demean(result.theta[j], result.split)
    var = sigma_star(result, sigma_u, sigma_v, j)
    ok = var > 0
    skipped = int(np.sum(~ok))
    if not ok.any():
        raise SingularCovariance("no cell has a positive variance estimate")
    ratio = np.where(ok, star * star / np.where(ok, var, 1.0), -np.inf)
    i, t = np.unravel_index(int(np.argmax(ratio)), ratio.shape)
    stat = float(ratio[i, t])
    NT = star.size
    return TestResult(
        "additive",
        stat,
        {a: cv_additive(NT, a) for a in alphas},
        pvalue_additive(stat, NT),
        gumbel_b(NT),
        {},
        (int(i), int(t)),
        {"skipped_cells": skipped},
    )
