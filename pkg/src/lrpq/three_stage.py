"""Three-stage estimation with sample splitting.

Units are split into I_1, I_2, I_3. For each ordered pair (a, b) with a != b,
a regularised fit on I_b supplies time factors (step 1), row- and column-wise
quantile regressions on the remaining subsample I_c refine them (step 2), and
regressions on I_a with the principal-components residuals of the regressors
remove the first-stage bias (step 3).
"""

from dataclasses import dataclass, field
import math
import warnings

import numpy as np

from .admm import NnrConfig, fit_nnr
from .errors import LrpqError, RankDeficientDesign, ShapeMismatch, TooFewUnits
from .lowrank import _orient, as_panel, thin_svd
from .pca import estimate_num_factors, pca_fit
from .quantile_core import QuantileIndex, rq_batch
from .rank import estimate_all_ranks

__all__ = [
    "COMBOS",
    "SampleSplit",
    "Stage2Result",
    "ComboEstimate",
    "EstimationResult",
    "split_sample",
    "stage1",
    "stage2",
    "stage3",
    "combine",
    "estimate",
]

COMBOS = ((3, 1), (3, 2), (2, 1), (2, 3), (1, 2), (1, 3))


@dataclass(frozen=True)
class SampleSplit:
    """Partition of the units ``0..N-1`` into three groups (labelled 1, 2, 3)."""

    groups: tuple
    seed: object = None

    @property
    def N(self):
        return sum(len(g) for g in self.groups)

    @property
    def sizes(self):
        return tuple(len(g) for g in self.groups)

    def group(self, a):
        return self.groups[a - 1]

    def membership(self):
        """Group label of every unit."""
        lab = np.empty(self.N, dtype=int)
        for a, g in enumerate(self.groups, start=1):
            lab[g] = a
        return lab

    def other(self, a, b):
        (c,) = {1, 2, 3} - {a, b}
        return c


def split_sample(N, seed=0):
    """Random partition with sizes ``floor(N/3)``; the remainder goes to I_1
    then I_2."""
    if N < 6:
        raise TooFewUnits(f"need at least 6 units to split in three, got {N}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(N)
    base, rem = divmod(N, 3)
    sizes = [base + (rem >= 1), base + (rem >= 2), base]
    cuts = np.cumsum([0] + sizes)
    groups = tuple(np.sort(perm[cuts[k]:cuts[k + 1]]) for k in range(3))
    return SampleSplit(groups, seed)


def _factors_from_theta(theta, K, T):
    if K == 0:
        return np.zeros((T, 0))
    _, _, Qt = np.linalg.svd(theta / math.sqrt(theta.size), full_matrices=False)
    _, Q = _orient(np.zeros((0, K)), Qt[:K].T)
    return math.sqrt(T) * Q


def stage1(Y, X, tau, ranks, config=None):
    """Regularised fit on a row subsample and its leading time factors.

    Returns ``(factors, fit)`` where ``factors[j]`` is T x K_j with
    ``V'V / T = I``.
    """
    Y = as_panel(Y, "outcome")
    if len(ranks) != len(X) + 1:
        raise ShapeMismatch(f"expected {len(X) + 1} ranks, got {len(ranks)}")
    fit = fit_nnr(Y, X, tau, config or NnrConfig())
    T = Y.shape[1]
    for j, (th, k) in enumerate(zip(fit.theta, ranks)):
        r = thin_svd(th)[1].size
        if r < k:
            warnings.warn(f"stage-1 block {j} has numerical rank {r} < {k}; its factors are "
                          "not identified", RuntimeWarning, stacklevel=2)
    return [_factors_from_theta(th, k, T) for th, k in zip(fit.theta, ranks)], fit


def _solve(Z, y, tau, where, labels):
    if Z.shape[2] == 0:
        return np.zeros((Z.shape[0], 0))
    try:
        return rq_batch(Z, y, tau)
    except RankDeficientDesign as exc:
        bad = (exc.context or {}).get("problems", [])
        idx = [int(labels[k]) for k in bad]
        raise RankDeficientDesign(f"{where}: {exc}", context={"stage": where, "index": idx}) from None


def _split_cols(B, ranks):
    out, start = [], 0
    for k in ranks:
        out.append(B[:, start:start + k])
        start += k
    return out


def row_qr(Y, X, factors, tau, units=None, where="row regression"):
    """For every row i: regress ``Y[i]`` on ``(v_0(t), v_j(t) X_j[i, t])``.

    Returns loadings per coefficient block, each n x K_j.
    """
    n, T = Y.shape
    blocks = [np.broadcast_to(factors[0], (n, T, factors[0].shape[1]))]
    blocks += [x[:, :, None] * f[None] for x, f in zip(X, factors[1:])]
    Z = np.concatenate(blocks, axis=2)
    units = np.arange(n) if units is None else units
    beta = _solve(Z, Y, tau, where, units)
    return _split_cols(beta, [f.shape[1] for f in factors])


def col_qr(Y, X, loadings, tau, where="column regression"):
    """For every column t: regress ``Y[:, t]`` on ``(u_0(i), u_j(i) X_j[i, t])``.

    Returns factors per coefficient block, each T x K_j.
    """
    n, T = Y.shape
    blocks = [np.broadcast_to(loadings[0][None], (T, n, loadings[0].shape[1]))]
    blocks += [x.T[:, :, None] * u[None] for x, u in zip(X, loadings[1:])]
    Z = np.concatenate(blocks, axis=2)
    beta = _solve(Z, Y.T, tau, where, np.arange(T))
    return _split_cols(beta, [u.shape[1] for u in loadings])


@dataclass
class Stage2Result:
    """Loadings on the second subsample, refined factors, and loadings on the
    target subsample obtained with the refined factors."""

    u_second: list
    v_dot: list
    u_dot: list


def stage2(Y, X, tau, factors, rows_second, rows_target):
    """Row- and column-wise regressions given first-stage factors."""
    Yc = Y[rows_second]
    Xc = [x[rows_second] for x in X]
    u_c = row_qr(Yc, Xc, factors, tau, rows_second, "stage 2 rows")
    v_dot = col_qr(Yc, Xc, u_c, tau, "stage 2 columns")
    u_a = row_qr(Y[rows_target], [x[rows_target] for x in X], v_dot, tau, rows_target,
                 "stage 2 target rows")
    return Stage2Result(u_c, v_dot, u_a)


def stage3(Y, X, tau, u_dot, v_dot, pcas, rows_target):
    """Debiased regressions on the target subsample.

    The common components ``mu_j`` are partialled out with the current
    loadings, and the residuals ``e_j`` serve as regressors. Returns
    ``(u_hat, v_hat)``.
    """
    Ya = Y[rows_target]
    mu = [p.common[rows_target] for p in pcas]
    e = [p.residual[rows_target] for p in pcas]
    Ytil = Ya.copy()
    for m, u, v in zip(mu, u_dot[1:], v_dot[1:]):
        Ytil = Ytil - m * (u @ v.T)
    u_hat = row_qr(Ytil, e, v_dot, tau, rows_target, "stage 3 rows")
    Yhat = Ya.copy()
    for m, u, v in zip(mu, u_hat[1:], v_dot[1:]):
        Yhat = Yhat - m * (u @ v.T)
    v_hat = col_qr(Yhat, e, u_hat, tau, "stage 3 columns")
    return u_hat, v_hat


@dataclass
class ComboEstimate:
    """Final loadings (rows of I_a) and factors for one (a, b) pair."""

    a: int
    b: int
    units: np.ndarray
    u_hat: list
    v_hat: list
    u_dot: list = field(default=None, repr=False)
    v_dot: list = field(default=None, repr=False)

    def product(self, j):
        return self.u_hat[j] @ self.v_hat[j].T


def combine(combos, split, shape, n_blocks):
    """``Theta_j[i, t] = 1/2 sum_{b != a} u_hat_i' v_hat_t`` for ``i`` in I_a."""
    N, T = shape
    theta = [np.zeros((N, T)) for _ in range(n_blocks)]
    weight = np.zeros(N)
    for ce in combos.values():
        weight[ce.units] += 1.0
        for j in range(n_blocks):
            theta[j][ce.units] += 0.5 * ce.product(j)
    if not np.all(weight == 2.0):
        raise LrpqError("each unit must be covered by exactly two combinations")
    return theta


@dataclass
class EstimationResult:
    theta: list
    combos: dict
    split: SampleSplit
    ranks: tuple
    tau: float
    pcas: list
    objective: float
    rank_estimate: object = field(default=None, repr=False)
    stage1_fits: dict = field(default_factory=dict, repr=False)
    diagnostics: dict = field(default_factory=dict)

    @property
    def p(self):
        return len(self.theta) - 1


def _objective(Y, X, theta, tau):
    R = Y - theta[0]
    for x, th in zip(X, theta[1:]):
        R = R - x * th
    return float(np.mean(R * (tau - (R <= 0))))


def _pca_ranks(X, pca_ranks):
    if pca_ranks is not None:
        if len(pca_ranks) != len(X):
            raise ShapeMismatch(f"expected {len(X)} regressor factor counts, got {len(pca_ranks)}")
        return tuple(int(r) for r in pca_ranks)
    out = []
    for x in X:
        r_max = min(8, min(x.shape) - 1)
        out.append(estimate_num_factors(x, r_max))
    return tuple(out)


def _run_split(Y, X, tau, ranks, split, config, pcas):
    N, T = Y.shape
    fits, factors = {}, {}
    for b in (1, 2, 3):
        rows = split.group(b)
        try:
            factors[b], fits[b] = stage1(Y[rows], [x[rows] for x in X], tau, ranks, config)
        except LrpqError as exc:
            raise type(exc)(f"stage 1 on I_{b}: {exc}") from exc
    combos = {}
    for a, b in COMBOS:
        c = split.other(a, b)
        s2 = stage2(Y, X, tau, factors[b], split.group(c), split.group(a))
        u_hat, v_hat = stage3(Y, X, tau, s2.u_dot, s2.v_dot, pcas, split.group(a))
        combos[(a, b)] = ComboEstimate(a, b, split.group(a), u_hat, v_hat, s2.u_dot, s2.v_dot)
    theta = combine(combos, split, (N, T), len(X) + 1)
    return theta, combos, fits


def estimate(Y, X, tau, ranks=None, config=None, seed=0, n_splits=1, pca_ranks=None,
             rank_fit=None):
    """Full three-stage estimator.

    Parameters
    ----------
    Y : (N, T) array
    X : sequence of p (N, T) arrays
    tau : quantile index
    ranks : sequence of p + 1 ints, optional
        Ranks of the coefficient matrices (intercept first). Estimated from a
        full-sample regularised fit when omitted.
    config : NnrConfig, optional
        Settings for every regularised fit.
    seed : int or SeedSequence
        Drives the sample split(s).
    n_splits : int
        Number of random splits tried; the one with the smallest full-sample
        check loss is kept.
    pca_ranks : sequence of p ints, optional
        Number of factors in each regressor (eigenvalue-ratio rule if omitted).
    rank_fit : NnrFit, optional
        Precomputed full-sample fit used for rank selection.
    """
    tau = QuantileIndex(tau)
    Y = as_panel(Y, "outcome")
    X = [as_panel(x, "regressor") for x in X]
    if any(x.shape != Y.shape for x in X):
        raise ShapeMismatch("every regressor must match the outcome shape")
    N, T = Y.shape
    if N < 6:
        raise TooFewUnits(f"need at least 6 units, got {N}")
    if n_splits < 1:
        raise ValueError("n_splits must be >= 1")
    config = config or NnrConfig()

    rank_est = None
    if ranks is None:
        rank_est = estimate_all_ranks(Y, X, tau, config, fit=rank_fit)
        ranks = rank_est.k_hat
    ranks = tuple(int(k) for k in ranks)
    if len(ranks) != len(X) + 1:
        raise ShapeMismatch(f"expected {len(X) + 1} ranks, got {len(ranks)}")
    if any(k < 0 or k > min(N // 3, T) for k in ranks):
        raise ValueError(f"ranks {ranks} out of range for subsamples of {N // 3} x {T}")
    if ranks[0] == 0:
        warnings.warn("intercept rank is 0; the intercept block is dropped", RuntimeWarning,
                      stacklevel=2)

    pr = _pca_ranks(X, pca_ranks)
    pcas = [pca_fit(x, r) for x, r in zip(X, pr)]

    seeds = np.random.SeedSequence(seed).spawn(n_splits) if n_splits > 1 else [seed]
    best = None
    objectives = []
    for s in seeds:
        split = split_sample(N, s)
        theta, combos, fits = _run_split(Y, X, tau, ranks, split, config, pcas)
        obj = _objective(Y, X, theta, tau)
        objectives.append(obj)
        if best is None or obj < best[0]:
            best = (obj, theta, combos, fits, split)
    obj, theta, combos, fits, split = best
    diag = {
        "split_objectives": objectives,
        "pca_ranks": pr,
        "stage1_converged": {b: f.converged for b, f in fits.items()},
        "stage1_iterations": {b: f.iterations for b, f in fits.items()},
    }
    return EstimationResult(theta, combos, split, ranks, float(tau), pcas, obj, rank_est,
                            fits, diag)
