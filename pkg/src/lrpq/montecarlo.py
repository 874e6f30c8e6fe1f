"""Simulation designs, true conditional-quantile coefficients, and the
replication harness behind the RMSE / rank / size-power tables."""

from dataclasses import dataclass, field
from concurrent.futures import ProcessPoolExecutor
import functools
import math
import warnings

import numpy as np
from scipy import stats

from .errors import LrpqError, ShapeMismatch
from .quantile_core import QuantileIndex

__all__ = [
    "DgpSpec",
    "SimDraw",
    "quantile_of_error",
    "generate",
    "rmse",
    "TRUE_RANKS",
    "TABLES",
    "Replication",
    "TableResult",
    "run_replication",
    "run_table",
]

AR_COEF = 0.2
AR_BURN_IN = 200
SCALE_COEF = 0.1
TRUE_RANKS = {1: (1, 1, 1), 2: (1, 1, 1), 3: (1, 1, 1), 4: (1, 1, 1), 5: (1, 2, 2), 6: (1, 2, 2)}


@dataclass(frozen=True)
class DgpSpec:
    """One simulation design.

    ``variance_param`` controls how the second argument of the normal laws
    N(2, 5), N(0, 5), N(0, 2) is read: "variance" (default) or "sd".
    """

    id: int
    N: int
    T: int
    tau: float = 0.5
    seed: int = 0
    variance_param: str = "variance"

    def __post_init__(self):
        if self.id not in TRUE_RANKS:
            raise ValueError(f"DGP id must be 1..6, got {self.id}")
        if self.N < 6 or self.T < 3:
            raise ValueError("need N >= 6 and T >= 3")
        if self.variance_param not in ("variance", "sd"):
            raise ValueError("variance_param must be 'variance' or 'sd'")
        object.__setattr__(self, "tau", QuantileIndex(self.tau))

    @property
    def serial(self):
        return self.id in (3, 4, 6)

    @property
    def family(self):
        return "ar1" if self.serial else "iid"


@dataclass
class SimDraw:
    Y: np.ndarray
    X: list
    theta: list
    ranks: tuple
    spec: DgpSpec = None
    errors: np.ndarray = field(default=None, repr=False)


def _t3_scaled_quantile(tau):
    return stats.t.ppf(tau, 3) / math.sqrt(3.0)


@functools.lru_cache(maxsize=64)
def _ar1_quantile(tau, n_draws=10_000_000, seed=20240501):
    if tau == 0.5:
        return 0.0
    # stationary AR(1) law: sum_k 0.2^k eps_k, truncated where 0.2^k < 1e-16
    rng = np.random.default_rng(seed)
    lags = int(math.ceil(math.log(1e-16) / math.log(AR_COEF)))
    out = np.empty(n_draws)
    chunk = 1_000_000
    for start in range(0, n_draws, chunk):
        m = min(chunk, n_draws - start)
        acc = np.zeros(m)
        for k in range(lags):
            acc += AR_COEF**k * rng.standard_t(3, size=m)
        out[start:start + m] = acc / math.sqrt(3.0)
    return float(np.quantile(out, tau))


def quantile_of_error(family, tau, n_draws=10_000_000):
    """tau-quantile of the stationary error law.

    ``family`` is "iid" (t(3)/sqrt(3)) or "ar1" (AR(1) with coefficient 0.2
    and t(3)/sqrt(3) innovations; evaluated by simulation and cached).
    """
    tau = float(QuantileIndex(tau))
    if family == "iid":
        return 0.0 if tau == 0.5 else float(_t3_scaled_quantile(tau))
    if family == "ar1":
        return _ar1_quantile(tau, n_draws)
    raise ValueError(f"unknown error family {family!r}")


def _normal(rng, mean, second, size, spec):
    sd = math.sqrt(second) if spec.variance_param == "variance" else second
    return rng.normal(mean, sd, size)


def _errors(rng, spec):
    N, T = spec.N, spec.T
    if not spec.serial:
        return rng.standard_t(3, size=(N, T)) / math.sqrt(3.0)
    eps = rng.standard_t(3, size=(N, T + AR_BURN_IN)) / math.sqrt(3.0)
    u = np.zeros(N)
    out = np.empty((N, T))
    for t in range(T + AR_BURN_IN):
        u = AR_COEF * u + eps[:, t]
        if t >= AR_BURN_IN:
            out[:, t - AR_BURN_IN] = u
    return out


def generate(spec, rng=None):
    """Draw one panel from design ``spec``.

    Regressors follow ``X_j = l_j w_j' + noise``; the outcome is
    ``Y = Theta_0 + sum_j X_j Theta_j + (1 + 0.1 X_1 + 0.1 X_2) u``. The
    returned ``theta`` are the conditional tau-quantile coefficients,
    ``Theta_0 + Q_tau(u)`` and ``Theta_j + 0.1 Q_tau(u)``; ``ranks`` are their
    ranks, which exceed ``TRUE_RANKS`` by one for shifted factor blocks when
    ``Q_tau(u) != 0``.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    N, T = spec.N, spec.T

    lam = _normal(rng, 2.0, 5.0, N, spec)
    f = _normal(rng, 2.0, 5.0, T, spec)
    theta0 = np.outer(lam, f)

    if spec.id in (1, 3):
        slopes = [np.full((N, T), 2.0), np.full((N, T), 2.0)]
    elif spec.id in (2, 4):
        slopes = []
        for _ in range(2):
            a = _normal(rng, 0.0, 2.0, N, spec)
            g = _normal(rng, 0.0, 2.0, T, spec)
            slopes.append(np.outer(a, g))
    else:
        a1 = _normal(rng, 2.0, 5.0, N, spec)
        g1 = _normal(rng, 2.0, 5.0, T, spec)
        a2 = _normal(rng, 0.0, 5.0, (N, 2), spec)
        g2 = _normal(rng, 0.0, 5.0, (T, 2), spec)
        slopes = [a1[:, None] + g1[None, :], a2 @ g2.T]

    if spec.id <= 4:
        X = [np.outer(rng.uniform(0, 1, N), rng.uniform(0, 1, T)) + rng.uniform(0, 1, (N, T))
             for _ in range(2)]
    else:
        X = [
            np.outer(rng.uniform(0, 4, N), rng.uniform(0, 4, T)) + rng.uniform(0, 4, (N, T)),
            np.outer(rng.beta(2, 5, N), rng.beta(2, 5, T)) + rng.beta(2, 5, (N, T)),
        ]

    u = _errors(rng, spec)
    Y = theta0 + X[0] * slopes[0] + X[1] * slopes[1] + (1.0 + SCALE_COEF * (X[0] + X[1])) * u

    q = quantile_of_error(spec.family, spec.tau)
    theta = [theta0 + q] + [s + SCALE_COEF * q for s in slopes]
    ranks = TRUE_RANKS[spec.id] if q == 0 else tuple(_shifted_rank(th) for th in theta)
    return SimDraw(Y, X, theta, ranks, spec, u)


def _shifted_rank(theta):
    # a constant shift adds the all-ones direction unless it is already spanned
    return int(np.linalg.matrix_rank(theta, tol=1e-9 * np.abs(theta).max()))


def rmse(estimate, truth):
    """``||estimate - truth||_F / sqrt(N T)``."""
    A = np.asarray(estimate, float)
    B = np.asarray(truth, float)
    if A.shape != B.shape:
        raise ShapeMismatch(f"shapes {A.shape} and {B.shape} differ")
    return float(np.linalg.norm(A - B) / math.sqrt(A.size))


TABLES = ("rmse", "rank", "size_power_homog", "size_power_additive")
_TABLE_COLUMNS = {
    "rmse": ("dgp", "N", "T", "tau", "rmse0", "rmse1", "rmse2"),
    "rank": ("dgp", "N", "T", "tau", "freq0", "freq1", "freq2"),
    "size_power_homog": ("dgp", "N", "T", "tau", "test", "j", "rej_0.01", "rej_0.05",
                         "rej_0.10", "n_ok", "n_failed"),
    "size_power_additive": ("dgp", "N", "T", "tau", "test", "j", "rej_0.01", "rej_0.05",
                            "rej_0.10", "n_ok", "n_failed"),
}


@dataclass
class Replication:
    """Outcome of one replication: a flat dict of metrics, or an error."""

    table: str
    spec: DgpSpec
    rep: int
    metrics: dict = field(default_factory=dict)
    error: str = None
    warnings: int = 0


@dataclass
class TableResult:
    table: str
    columns: tuple
    rows: list
    replications: list

    def to_csv(self, path):
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: row[k] for k in self.columns})


def _homog_metrics(draw, options):
    from . import specification as sp
    from .three_stage import estimate
    from .variance import KernelSpec, residuals, variance_set

    res = _estimate(draw, options, estimate)
    eps = residuals(draw.Y, draw.X, res.theta)
    spec = KernelSpec.from_residuals(eps, options.get("h_scale", 1.06), options.get("T1"))
    out = {}
    for j in (1, 2):
        vs = variance_set(res, eps, spec, j)
        tu = sp.test_homogeneity_u(res, vs.Sigma_u, j)
        tv = sp.test_homogeneity_v(res, vs.Sigma_v, j, scale=options.get("v_scale", "subsample"))
        for name, t in (("u", tu), ("v", tv)):
            out[f"{name}{j}_stat"] = t.statistic
            for a in sp.ALPHAS:
                out[f"{name}{j}_rej_{a:.2f}"] = bool(t.reject(a))
    return out


def _additive_metrics(draw, options):
    from . import specification as sp
    from .three_stage import estimate
    from .variance import KernelSpec, residuals, variance_set

    res = _estimate(draw, options, estimate)
    eps = residuals(draw.Y, draw.X, res.theta)
    spec = KernelSpec.from_residuals(eps, options.get("h_scale", 1.06), options.get("T1"))
    out = {}
    # block 1 is additive (size), block 2 has two free factors (power)
    for j in (1, 2):
        vs = variance_set(res, eps, spec, j)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            t = sp.test_additive(res, vs.Sigma_u, vs.Sigma_v, j)
        out[f"a{j}_stat"] = t.statistic
        for a in sp.ALPHAS:
            out[f"a{j}_rej_{a:.2f}"] = bool(t.reject(a))
    return out


def _estimate(draw, options, estimate):
    ranks = draw.ranks if options.get("ranks", "true") == "true" else None
    return estimate(draw.Y, draw.X, draw.spec.tau, ranks=ranks, config=options.get("config"),
                    seed=options.get("split_seed", 0), pca_ranks=options.get("pca_ranks", (1, 1)))


def _nnr_metrics(draw, options, table):
    from .rank import estimate_all_ranks

    re = estimate_all_ranks(draw.Y, draw.X, draw.spec.tau, options.get("config"))
    if table == "rmse":
        return {f"rmse{j}": rmse(th, t) for j, (th, t) in enumerate(zip(re.fit.theta, draw.theta))}
    return {f"k{j}": int(k) for j, k in enumerate(re.k_hat)} | {
        f"ok{j}": bool(k == t) for j, (k, t) in enumerate(zip(re.k_hat, draw.ranks))
    }


def run_replication(table, spec, rep, seed_seq, options=None):
    """One replication of ``table`` for design ``spec`` with its own RNG stream."""
    options = options or {}
    out = Replication(table, spec, rep)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            draw = generate(spec, np.random.default_rng(seed_seq))
            if table in ("rmse", "rank"):
                out.metrics = _nnr_metrics(draw, options, table)
            elif table == "size_power_homog":
                out.metrics = _homog_metrics(draw, options)
            else:
                out.metrics = _additive_metrics(draw, options)
        except (LrpqError, np.linalg.LinAlgError) as exc:
            out.error = f"{type(exc).__name__}: {exc}"
    out.warnings = sum(issubclass(w.category, RuntimeWarning) for w in caught)
    return out


def _call(args):
    return run_replication(*args)


def _reduce(table, spec, reps, stat):
    ok = [r for r in reps if r.error is None]
    base = {"dgp": spec.id, "N": spec.N, "T": spec.T, "tau": float(spec.tau)}
    if table == "rmse":
        f = np.median if stat == "median" else np.mean
        vals = {f"rmse{j}": float(f([r.metrics[f"rmse{j}"] for r in ok])) if ok else math.nan
                for j in range(3)}
        return [base | vals]
    if table == "rank":
        vals = {f"freq{j}": float(np.mean([r.metrics[f"ok{j}"] for r in ok])) if ok else math.nan
                for j in range(3)}
        return [base | vals]
    rows = []
    tests = ("u", "v") if table == "size_power_homog" else ("a",)
    for j in (1, 2):
        for name in tests:
            row = base | {"test": name, "j": j, "n_ok": len(ok), "n_failed": len(reps) - len(ok)}
            for a in (0.01, 0.05, 0.10):
                key = f"{name}{j}_rej_{a:.2f}"
                row[f"rej_{a:.2f}"] = float(np.mean([r.metrics[key] for r in ok])) if ok else math.nan
            rows.append(row)
    return rows


def run_table(table, grid, reps, seed=0, workers=1, options=None, stat="mean"):
    """Replicate ``table`` over a grid of designs.

    Parameters
    ----------
    table : one of ``TABLES``
    grid : iterable of DgpSpec
        The ``seed`` field of each spec is ignored; replication streams come
        from ``seed``.
    reps : int
    seed : int
        Master seed. Replication ``r`` of grid cell ``g`` uses the stream
        ``SeedSequence(seed).spawn(len(grid))[g].spawn(reps)[r]``, so results
        do not depend on ``workers``.
    workers : int
        Process count; 1 runs in-process.
    options : dict, optional
        ``config`` (NnrConfig), ``ranks`` ("true" or "estimated"),
        ``pca_ranks``, ``h_scale``, ``T1``, ``v_scale``, ``split_seed``.
    stat : "mean" or "median"
        Reduction of per-replication RMSEs.
    """
    if table not in TABLES:
        raise ValueError(f"table must be one of {TABLES}, got {table!r}")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    grid = list(grid)
    cells = np.random.SeedSequence(seed).spawn(len(grid))
    jobs = []
    for g, (spec, ss) in enumerate(zip(grid, cells)):
        for r, child in enumerate(ss.spawn(reps)):
            jobs.append((table, spec, r, child, options))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_call, jobs, chunksize=1))
    else:
        results = [_call(j) for j in jobs]
    rows = []
    for g, spec in enumerate(grid):
        rows.extend(_reduce(table, spec, results[g * reps:(g + 1) * reps], stat))
    return TableResult(table, _TABLE_COLUMNS[table], rows, results)
