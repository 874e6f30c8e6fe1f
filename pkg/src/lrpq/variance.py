"""Kernel and HAC estimators of the asymptotic variances of the final
loadings, factors and slope entries."""

from dataclasses import dataclass, field
import math
import warnings

import numpy as np
from scipy import special

from .errors import InvalidConfig, ShapeMismatch, SingularVhat

__all__ = [
    "KernelSpec",
    "VarianceSet",
    "residuals",
    "kernel_eval",
    "default_bandwidth",
    "default_lag",
    "vr_lag",
    "ur_diag",
    "variance_set",
]

_COND_LIMIT = 1e12
_SQRT2PI = math.sqrt(2.0 * math.pi)


def default_bandwidth(eps, scale=1.06):
    """``scale * sd(eps) * min(N, T) ** (-1/5)``."""
    eps = np.asarray(eps, float)
    return scale * float(np.std(eps)) * min(eps.shape) ** (-0.2)


def default_lag(N, T):
    return int(math.ceil(min(N, T) ** 0.25))


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family (only ``"gaussian"``), bandwidth ``h``, HAC lag ``T1`` and
    kernel order."""

    h: float
    T1: int
    family: str = "gaussian"
    order: int = 2

    def __post_init__(self):
        if self.family != "gaussian":
            raise InvalidConfig(f"unsupported kernel family {self.family!r}")
        if not (self.h > 0 and math.isfinite(self.h)):
            raise InvalidConfig(f"bandwidth must be positive, got {self.h}")
        if int(self.T1) != self.T1 or self.T1 < 1:
            raise InvalidConfig(f"T1 must be a positive integer, got {self.T1}")
        if self.order < 1:
            raise InvalidConfig("kernel order must be >= 1")

    @classmethod
    def from_residuals(cls, eps, h_scale=1.06, T1=None):
        eps = np.asarray(eps, float)
        N, T = eps.shape
        return cls(default_bandwidth(eps, h_scale), default_lag(N, T) if T1 is None else T1)


def kernel_eval(u, spec):
    """``(k(u/h)/h, K(u/h))`` with ``K`` the survival function of ``k``."""
    z = np.asarray(u, float) / spec.h
    k = np.exp(-0.5 * z * z) / (_SQRT2PI * spec.h)
    K = 0.5 * special.erfc(z / math.sqrt(2.0))
    if np.ndim(k) == 0:
        return float(k), float(K)
    return k, K


def residuals(Y, X, theta):
    """``Y - Theta_0 - sum_j X_j * Theta_j``."""
    Y = np.asarray(Y, float)
    if len(theta) != len(X) + 1:
        raise ShapeMismatch(f"need {len(X) + 1} coefficient matrices, got {len(theta)}")
    R = Y - theta[0]
    for x, th in zip(X, theta[1:]):
        if np.shape(x) != Y.shape or np.shape(th) != Y.shape:
            raise ShapeMismatch("regressors and coefficients must match the outcome shape")
        R = R - x * th
    return R


def vr_lag(combos, j, lag):
    """``(1/6) sum_(a,b) v_t v_{t+lag}'`` for ``t = 0..T-1-lag``; shape
    (T - lag, K, K)."""
    acc = None
    for ce in combos.values():
        v = ce.v_hat[j]
        T = v.shape[0]
        term = np.einsum("tk,tl->tkl", v[:T - lag], v[lag:])
        acc = term if acc is None else acc + term
    return acc / len(combos)


def ur_diag(combos, j, N):
    """``(1/2) sum_(a,b) u_i u_i' 1{i in I_a}``; shape (N, K, K)."""
    K = next(iter(combos.values())).u_hat[j].shape[1]
    out = np.zeros((N, K, K))
    for ce in combos.values():
        u = ce.u_hat[j]
        out[ce.units] += 0.5 * np.einsum("ik,il->ikl", u, u)
    return out


@dataclass
class VarianceSet:
    j: int
    V_u: np.ndarray
    V_v: np.ndarray
    Omega_u: np.ndarray
    Omega_v: np.ndarray
    Sigma_u: np.ndarray
    Sigma_v: np.ndarray
    Xi: np.ndarray
    eps: np.ndarray = field(repr=False, default=None)
    spec: KernelSpec = None
    clipped: bool = False
    nonpositive_xi: int = 0


def _check_invertible(M, name):
    if not np.all(np.isfinite(M)):
        raise SingularVhat(f"{name} has non-finite entries", cond=math.inf)
    cond = float(np.linalg.cond(M))
    if not cond < _COND_LIMIT:
        raise SingularVhat(f"{name} is singular (condition number {cond:.3g})", cond=cond)
    return np.linalg.inv(M)


def _psd_clip(M, name):
    S = 0.5 * (M + M.T)
    w, Q = np.linalg.eigh(S)
    if w.min() < 0:
        warnings.warn(f"{name} is not positive semidefinite; negative eigenvalues set to 0",
                      RuntimeWarning, stacklevel=3)
        return (Q * np.maximum(w, 0.0)) @ Q.T, True
    return S, False


def omega_u_lags(e, score, combos, j, T1):
    """HAC lag terms of the loading score covariance (sums of ``S_{j,its}``).

    Forward pairs ``(t, t+l)`` are used for ``t <= T - T1`` and backward pairs
    ``(t, t-l)`` for ``t > T1``, ``l = 1..T1`` (1-based ``t``).
    """
    N, T = e.shape
    w = e * score
    K = next(iter(combos.values())).v_hat[j].shape[1]
    total = np.zeros((K, K))
    for lag in range(1, T1 + 1):
        if lag >= T:
            break
        prod = np.sum(w[:, :T - lag] * w[:, lag:], axis=0)  # pair (t, t+lag), 0-based t
        vr = vr_lag(combos, j, lag)  # v_t v_{t+lag}'
        fwd_t = np.arange(T - lag) <= T - T1 - 1
        total += np.einsum("t,tkl->kl", prod * fwd_t, vr)
        # backward pair (s, s-lag) with s = t + lag > T1 - 1 (0-based s >= T1)
        bwd_t = (np.arange(T - lag) + lag) >= T1
        total += np.einsum("t,tkl->kl", prod * bwd_t, np.swapaxes(vr, 1, 2))
    return total


def variance_set(result, eps, spec, j):
    """Variance estimators for slope block ``j`` (1-based).

    ``result`` is an :class:`~lrpq.three_stage.EstimationResult`; ``eps`` the
    residuals at its combined estimate; ``spec`` a :class:`KernelSpec`.
    """
    if not (1 <= j <= result.p):
        raise ValueError(f"j must lie in 1..{result.p}, got {j}")
    if result.ranks[j] == 0:
        raise ValueError(f"block {j} has rank 0; no variance to estimate")
    tau = result.tau
    eps = np.asarray(eps, float)
    N, T = eps.shape
    e = result.pcas[j - 1].residual
    if e.shape != eps.shape:
        raise ShapeMismatch("residual and regressor panels differ in shape")
    if spec.T1 >= T:
        raise InvalidConfig(f"T1 = {spec.T1} must be smaller than T = {T}")
    combos = result.combos
    k, Ksurv = kernel_eval(eps, spec)
    e2 = e * e

    vr0 = vr_lag(combos, j, 0)  # (T, K, K)
    ur = ur_diag(combos, j, N)  # (N, K, K)
    NT = N * T
    V_u = np.einsum("it,tkl->kl", k * e2, vr0) / NT
    V_v = np.einsum("it,ikl->kl", k * e2, ur) / NT
    Omega_v = tau * (1 - tau) * np.einsum("it,ikl->kl", e2, ur) / NT
    base = tau * (1 - tau) * np.einsum("it,tkl->kl", e2, vr0)
    lags = omega_u_lags(e, tau - Ksurv, combos, j, spec.T1)
    Omega_u, clipped = _psd_clip((base + lags) / NT, "Omega_u")
    Omega_v = 0.5 * (Omega_v + Omega_v.T)

    Vu_inv = _check_invertible(V_u, "V_u")
    Vv_inv = _check_invertible(V_v, "V_v")
    Sigma_u = Vu_inv @ Omega_u @ Vu_inv.T
    Sigma_v = Vv_inv @ Omega_v @ Vv_inv.T
    Sigma_u = 0.5 * (Sigma_u + Sigma_u.T)
    Sigma_v = 0.5 * (Sigma_v + Sigma_v.T)

    Xi = np.zeros((N, T))
    for ce in combos.values():
        v = ce.v_hat[j]
        u = ce.u_hat[j]
        Xi += 0.5 * np.einsum("tk,kl,tl->t", v, Sigma_u, v)[None, :] / T
        Xi[ce.units] += 0.5 * np.einsum("ik,kl,il->i", u, Sigma_v, u)[:, None] / len(ce.units)
    nonpos = int(np.sum(Xi <= 0))
    return VarianceSet(j, V_u, V_v, Omega_u, Omega_v, Sigma_u, Sigma_v, Xi, eps, spec,
                       clipped, nonpos)
