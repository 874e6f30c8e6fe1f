"""Check loss and a small dense quantile-regression solver.

The solver works on the bounded form of the quantile-regression dual,

    min  -y'a   s.t.  Z'a = (1 - tau) Z'1,  0 <= a <= 1,

with a Mehrotra predictor-corrector interior-point iteration. Many problems
of identical shape are solved at once (the row- and column-wise regressions
of the estimation stages come in batches). Each solution is then polished to
an interpolating vertex whenever that does not raise the objective, which
makes results reproducible and exact to rounding.
"""

from dataclasses import dataclass
import math

import numpy as np
from scipy.optimize import linprog

from .errors import NonFiniteInput, RankDeficientDesign, ShapeMismatch

__all__ = [
    "QuantileIndex",
    "QrProblem",
    "check_loss",
    "qr_objective",
    "solve_qr",
    "rq",
    "rq_batch",
]

_STEP = 0.99995
_MAX_ITER = 100
_GAP_TOL = 1e-12


class QuantileIndex(float):
    """A float restricted to the open interval (0, 1)."""

    def __new__(cls, tau):
        tau = float(tau)
        if not (0.0 < tau < 1.0):
            raise ValueError(f"quantile index must lie in (0, 1), got {tau}")
        return super().__new__(cls, tau)


def check_loss(u, tau):
    """Pinball loss ``u * (tau - 1{u <= 0})``, elementwise for arrays."""
    tau = QuantileIndex(tau)
    u = np.asarray(u, dtype=float)
    out = u * (tau - (u <= 0))
    return float(out) if out.ndim == 0 else out


def qr_objective(design, response, beta, tau):
    """Mean check loss of the residuals ``response - design @ beta``."""
    r = np.asarray(response, float) - np.asarray(design, float) @ np.asarray(beta, float)
    return float(np.mean(check_loss(r, tau)))


@dataclass(frozen=True)
class QrProblem:
    """A linear quantile regression: rows of ``design`` are observations."""

    design: np.ndarray
    response: np.ndarray
    tau: float

    def __post_init__(self):
        Z = np.atleast_2d(np.asarray(self.design, dtype=float))
        y = np.asarray(self.response, dtype=float).ravel()
        if Z.shape[0] != y.shape[0]:
            if Z.shape[1] == y.shape[0] and Z.shape[0] == 1:
                Z = Z.T
            else:
                raise ShapeMismatch(
                    f"design has {Z.shape[0]} rows but response has {y.shape[0]}"
                )
        if Z.shape[1] < 1:
            raise ShapeMismatch("design needs at least one column")
        if Z.shape[0] < Z.shape[1]:
            raise RankDeficientDesign(
                f"{Z.shape[0]} observations for {Z.shape[1]} coefficients"
            )
        object.__setattr__(self, "design", Z)
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "tau", QuantileIndex(self.tau))

    @property
    def n(self):
        return self.design.shape[0]

    @property
    def k(self):
        return self.design.shape[1]

    def objective(self, beta):
        return qr_objective(self.design, self.response, beta, self.tau)


def solve_qr(problem):
    """Minimise the mean check loss of a :class:`QrProblem`.

    Raises
    ------
    NonFiniteInput
        If the design or response contains NaN or infinity.
    RankDeficientDesign
        If the design does not have full column rank.
    """
    return rq(problem.design, problem.response, problem.tau)


def rq(design, response, tau):
    """Quantile regression coefficients for a single design/response pair."""
    Z = np.asarray(design, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    y = np.asarray(response, dtype=float).ravel()
    return rq_batch(Z[None], y[None], tau)[0]


def _validate_batch(Z, y):
    if Z.ndim != 3 or y.ndim != 2 or Z.shape[:2] != y.shape:
        raise ShapeMismatch(f"incompatible batch shapes {Z.shape} and {y.shape}")
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(y))):
        raise NonFiniteInput("quantile regression inputs must be finite")
    B, n, K = Z.shape
    if n < K:
        raise RankDeficientDesign(f"{n} observations for {K} coefficients")
    ranks = np.linalg.matrix_rank(Z)
    bad = np.flatnonzero(ranks < K)
    if bad.size:
        raise RankDeficientDesign(
            f"design of problem {int(bad[0])} has rank {int(ranks[bad[0]])} < {K}",
            context={"problems": bad.tolist()},
        )


def rq_batch(Z, y, tau):
    """Solve ``B`` independent quantile regressions of identical shape.

    Parameters
    ----------
    Z : array, shape (B, n, K)
    y : array, shape (B, n)
    tau : float in (0, 1)

    Returns
    -------
    beta : array, shape (B, K)
    """
    tau = QuantileIndex(tau)
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=float)
    _validate_batch(Z, y)
    B, n, K = Z.shape
    beta = np.empty((B, K))

    # intercept-only designs get the conventional order statistic
    ones = (K == 1) & np.all(Z == 1.0, axis=(1, 2))
    if np.any(ones):
        idx = max(int(math.ceil(n * tau)), 1) - 1
        beta[ones, 0] = np.sort(y[ones], axis=1)[:, idx]
    rest = np.flatnonzero(~ones)
    if rest.size:
        beta[rest] = _ipm_batch(Z[rest], y[rest], tau)
    return beta


def _objective_batch(Z, y, beta, tau):
    r = y - np.einsum("bnk,bk->bn", Z, beta)
    return np.sum(r * (tau - (r <= 0)), axis=1)


def _max_step(v, dv):
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dv < 0, -v / dv, np.inf)
    return np.min(ratio, axis=1)


def _ipm_batch(Z, y, tau):
    B, n, K = Z.shape
    A = np.swapaxes(Z, 1, 2)  # (B, K, n)
    c = -y
    b = (1.0 - tau) * Z.sum(axis=1)

    x = np.full((B, n), 1.0 - tau)
    s = np.full((B, n), tau)
    yd = -np.linalg.lstsq(Z[0], y[0], rcond=None)[0][None] if B == 1 else -np.stack(
        [np.linalg.lstsq(Z[i], y[i], rcond=None)[0] for i in range(B)]
    )
    r = c - np.einsum("bkn,bk->bn", A, yd)
    shift = 0.1 * np.mean(np.abs(r), axis=1, keepdims=True) + 1e-3
    z = np.maximum(r, 0.0) + shift
    w = z - r

    active = np.ones(B, dtype=bool)
    failed = np.zeros(B, dtype=bool)
    best = -yd.copy()

    def newton(rp, rd, rhs_xz, rhs_sw):
        q = 1.0 / (z / x + w / s)
        g = -rd + rhs_xz / x - rhs_sw / s
        Q = np.matmul(A * q[:, None, :], Z)
        rhs = rp - np.einsum("bkn,bn->bk", A, q * g)
        dy = np.linalg.solve(Q, rhs[..., None])[..., 0]
        dx = q * (np.einsum("bkn,bk->bn", A, dy) + g)
        dz = (rhs_xz - z * dx) / x
        dw = (rhs_sw + w * dx) / s
        return dx, dy, dz, dw

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for _ in range(_MAX_ITER):
            beta = -yd
            f = _objective_batch(Z, y, beta, tau)
            lower = np.sum(y * (x - (1.0 - tau)), axis=1)
            done = active & (f - lower <= _GAP_TOL * (1.0 + np.abs(f)))
            best[active] = beta[active]
            active &= ~done
            if not active.any():
                break

            rp = b - np.einsum("bkn,bn->bk", A, x)
            rd = c - np.einsum("bkn,bk->bn", A, yd) - z + w
            mu = (np.sum(x * z, axis=1) + np.sum(s * w, axis=1)) / (2 * n)

            dxa, _, dza, dwa = newton(rp, rd, -x * z, -s * w)
            dsa = -dxa
            ap = np.minimum(1.0, np.minimum(_max_step(x, dxa), _max_step(s, dsa)))
            ad = np.minimum(1.0, np.minimum(_max_step(z, dza), _max_step(w, dwa)))
            mu_aff = (
                np.sum((x + ap[:, None] * dxa) * (z + ad[:, None] * dza), axis=1)
                + np.sum((s + ap[:, None] * dsa) * (w + ad[:, None] * dwa), axis=1)
            ) / (2 * n)
            sigma = np.clip(mu_aff / mu, 0.0, 1.0) ** 3
            smu = (sigma * mu)[:, None]

            dx, dy, dz, dw = newton(
                rp, rd, smu - x * z - dxa * dza, smu - s * w - dsa * dwa
            )
            ds = -dx
            ap = np.minimum(1.0, _STEP * np.minimum(_max_step(x, dx), _max_step(s, ds)))
            ad = np.minimum(1.0, _STEP * np.minimum(_max_step(z, dz), _max_step(w, dw)))

            bad = ~(np.isfinite(ap) & np.isfinite(ad))
            bad |= ~np.all(np.isfinite(dy), axis=1)
            failed |= active & bad
            active &= ~bad
            ap = np.where(active, ap, 0.0)[:, None]
            ad = np.where(active, ad, 0.0)[:, None]
            dx, ds, dz, dw = (np.nan_to_num(v) for v in (dx, ds, dz, dw))
            dy = np.nan_to_num(dy)

            x = x + ap * dx
            s = s + ap * ds
            yd = yd + ad * dy
            z = z + ad * dz
            w = w + ad * dw
        else:
            failed |= active

    out = np.empty((B, K))
    for i in range(B):
        if failed[i]:
            out[i] = _linprog_fallback(Z[i], y[i], tau)
        else:
            out[i] = _polish(Z[i], y[i], best[i], tau)
    return out


def _polish(Z, y, beta, tau):
    """Move to an interpolating vertex when that does not raise the objective."""
    n, K = Z.shape
    r = y - Z @ beta
    order = np.argsort(np.abs(r), kind="stable")
    basis = []
    for i in order:
        trial = basis + [i]
        if np.linalg.matrix_rank(Z[trial]) == len(trial):
            basis = trial
            if len(basis) == K:
                break
    if len(basis) < K:
        return beta
    Zh = Z[basis]
    if np.linalg.cond(Zh) > 1e12:
        return beta
    vertex = np.linalg.solve(Zh, y[basis])
    f0 = float(np.sum(r * (tau - (r <= 0))))
    rv = y - Z @ vertex
    f1 = float(np.sum(rv * (tau - (rv <= 0))))
    if f1 <= f0 + 1e-12 * (1.0 + abs(f0)):
        return vertex
    return beta


def _linprog_fallback(Z, y, tau):
    n, K = Z.shape
    cost = np.concatenate([np.zeros(K), np.full(n, tau), np.full(n, 1.0 - tau)])
    A_eq = np.hstack([Z, np.eye(n), -np.eye(n)])
    bounds = [(None, None)] * K + [(0, None)] * (2 * n)
    res = linprog(cost, A_eq=A_eq, b_eq=y, bounds=bounds, method="highs")
    if not res.success:
        raise RankDeficientDesign(f"quantile regression LP failed: {res.message}")
    return res.x[:K]
