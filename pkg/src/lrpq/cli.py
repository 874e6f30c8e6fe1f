"""Command-line interface: ``lrpq estimate | test | simulate | cv-table``.

Settings come from built-in defaults, then an INI file (``--config``), then
``LRPQ_*`` environment variables, then command-line flags.
"""

import argparse
import configparser
import csv
from dataclasses import dataclass, field, fields
import json
import os
from pathlib import Path
import sys
import warnings

import numpy as np

from .errors import (
    DuplicateCell,
    InvalidConfig,
    LrpqError,
    NonNumericField,
    NotConvergedWarning,
    UnbalancedPanel,
)

__all__ = ["Panel", "RunConfig", "ingest_panel", "emit_panel", "load_config", "main"]

TABLE_FILES = {"rmse": "table2.csv", "rank": "table3.csv", "size_power_homog": "table4.csv",
               "size_power_additive": "table5.csv"}


# ---------------------------------------------------------------- data files

@dataclass
class Panel:
    Y: np.ndarray
    X: list
    units: list
    times: list
    regressors: list


def _sort_times(times):
    try:
        return sorted(times, key=float)
    except ValueError:
        return sorted(times)


def ingest_panel(path):
    """Read a long-format CSV ``unit,time,y,x1[,x2,...]`` into dense N x T
    matrices. Units keep their order of first appearance; times are sorted
    (numerically when every label is a number)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InvalidConfig(f"{path}: empty file") from None
        if len(header) < 3 or header[:3] != ["unit", "time", "y"]:
            raise InvalidConfig(f"{path}: header must start with unit,time,y; got {header}")
        names = header[3:]
        cells, units, times = {}, {}, {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise NonNumericField(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            u, t = row[0].strip(), row[1].strip()
            vals = []
            for name, raw in zip(header[2:], row[2:]):
                try:
                    vals.append(float(raw))
                except ValueError:
                    raise NonNumericField(f"{path}:{lineno}: field {name!r} is not numeric: {raw!r}") from None
            if (u, t) in cells:
                raise DuplicateCell(f"{path}:{lineno}: duplicate cell (unit={u}, time={t})")
            cells[(u, t)] = vals
            units.setdefault(u, len(units))
            times.setdefault(t, None)
    unit_list = list(units)
    time_list = _sort_times(list(times))
    missing = [(u, t) for u in unit_list for t in time_list if (u, t) not in cells]
    if missing:
        shown = ", ".join(f"({u}, {t})" for u, t in missing[:5])
        more = f" and {len(missing) - 5} more" if len(missing) > 5 else ""
        raise UnbalancedPanel(f"{path}: missing cells {shown}{more}", missing)
    col = {t: k for k, t in enumerate(time_list)}
    arr = np.empty((1 + len(names), len(unit_list), len(time_list)))
    for (u, t), vals in cells.items():
        arr[:, units[u], col[t]] = vals
    return Panel(arr[0], list(arr[1:]), unit_list, time_list, names)


def emit_panel(path, Y, X, units=None, times=None, names=None):
    """Write matrices in the long format read by :func:`ingest_panel`."""
    Y = np.asarray(Y, float)
    N, T = Y.shape
    units = units or [str(i) for i in range(N)]
    times = times or [str(t) for t in range(T)]
    names = names or [f"x{j + 1}" for j in range(len(X))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["unit", "time", "y", *names])
        for i, u in enumerate(units):
            for t, lab in enumerate(times):
                w.writerow([u, lab, repr(float(Y[i, t]))] + [repr(float(x[i, t])) for x in X])


def _write_matrix(path, M, row_labels, col_labels, corner="unit"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([corner, *col_labels])
        for lab, row in zip(row_labels, M):
            w.writerow([lab, *(repr(float(v)) for v in row)])


# ------------------------------------------------------------------- config

def load_schema(name):
    """JSON schema shipped with the package: ``"tests"`` or ``"ranks"``."""
    from importlib import resources

    text = resources.files("lrpq").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def _floats(text):
    return tuple(float(v) for v in str(text).replace(";", ",").split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in str(text).replace(";", ",").split(",") if v.strip())


@dataclass
class RunConfig:
    """Every setting used by the subcommands."""

    tau: tuple = (0.5,)
    ranks: tuple = None
    pca_ranks: tuple = None
    nu_scale: float = None
    rho: float = 1.0
    max_iter: int = 2000
    tol: float = 1e-6
    kernel: str = "gaussian"
    h_scale: float = 1.06
    T1: int = None
    alphas: tuple = (0.01, 0.05, 0.10)
    seed: int = 0
    n_splits: int = 1
    workers: int = 1
    out: str = "."

    _PARSERS = {
        "tau": _floats, "ranks": _ints, "pca_ranks": _ints, "nu_scale": float, "rho": float,
        "max_iter": int, "tol": float, "kernel": str, "h_scale": float, "T1": int,
        "alphas": _floats, "seed": int, "n_splits": int, "workers": int, "out": str,
    }

    def update(self, values, source):
        for key, raw in values.items():
            if raw is None:
                continue
            if key not in self._PARSERS:
                raise InvalidConfig(f"{source}: unknown setting {key!r}")
            try:
                val = self._PARSERS[key](raw) if isinstance(raw, str) else raw
            except ValueError:
                raise InvalidConfig(f"{source}: bad value for {key!r}: {raw!r}") from None
            setattr(self, key, val)
        self.validate()
        return self

    def validate(self):
        if not self.tau or any(not 0 < t < 1 for t in self.tau):
            raise InvalidConfig(f"tau values must lie in (0, 1), got {self.tau}")
        if self.alphas is None or any(not 0 < a < 1 for a in self.alphas):
            raise InvalidConfig(f"alphas must lie in (0, 1), got {self.alphas}")
        if self.nu_scale is not None and not self.nu_scale > 0:
            raise InvalidConfig("nu_scale must be positive")
        if not self.rho > 0 or not self.tol > 0 or self.max_iter < 1:
            raise InvalidConfig("rho and tol must be positive and max_iter >= 1")
        if self.kernel != "gaussian":
            raise InvalidConfig(f"unsupported kernel {self.kernel!r}")
        if not self.h_scale > 0:
            raise InvalidConfig("h_scale must be positive")
        if self.T1 is not None and self.T1 < 1:
            raise InvalidConfig("T1 must be >= 1")
        if self.n_splits < 1 or self.workers < 1:
            raise InvalidConfig("n_splits and workers must be >= 1")
        if self.ranks is not None and any(k < 0 for k in self.ranks):
            raise InvalidConfig("ranks must be nonnegative")
        if self.pca_ranks is not None and any(k < 1 for k in self.pca_ranks):
            raise InvalidConfig("pca_ranks must be positive")

    def nnr_config(self):
        from .admm import NnrConfig

        kw = dict(rho=self.rho, max_iter=self.max_iter, tol_primal=self.tol, tol_dual=self.tol)
        if self.nu_scale is not None:
            kw["nu_scale"] = self.nu_scale
        return NnrConfig(**kw)


_SETTING_NAMES = [f.name for f in fields(RunConfig) if not f.name.startswith("_")]


def load_config(path=None, env=None, flags=None):
    """Defaults, then INI file sections, then ``LRPQ_<KEY>`` variables, then
    flags."""
    cfg = RunConfig()
    if path:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        if not parser.read(path):
            raise InvalidConfig(f"cannot read config file {path}")
        for section in parser.sections():
            cfg.update(dict(parser[section]), f"{path} [{section}]")
    env = os.environ if env is None else env
    lower = {k.lower(): k for k in _SETTING_NAMES}
    from_env = {}
    for var, val in env.items():
        if var.startswith("LRPQ_"):
            key = var[5:].lower()
            if key not in lower:
                raise InvalidConfig(f"environment: unknown setting {var}")
            from_env[lower[key]] = val
    cfg.update(from_env, "environment")
    cfg.update(flags or {}, "command line")
    return cfg


# ----------------------------------------------------------------- commands

def _ranks_payload(res, rank_est, tau):
    out = {"tau": float(tau), "ranks": [int(k) for k in res.ranks],
           "source": "estimated" if rank_est is not None else "given"}
    if rank_est is not None:
        out["thresholds"] = [float(v) for v in rank_est.thresholds]
        out["singular_values"] = [[float(s) for s in sv[:10]] for sv in rank_est.singular_values]
        out["nu"] = [float(v) for v in rank_est.nu]
        out["constant"] = rank_est.constant
    out["pca_ranks"] = [int(r) for r in res.diagnostics["pca_ranks"]]
    return out


def _estimate_one(panel, cfg, tau):
    from .three_stage import estimate

    res = estimate(panel.Y, panel.X, tau, ranks=cfg.ranks, config=cfg.nnr_config(),
                   seed=cfg.seed, n_splits=cfg.n_splits, pca_ranks=cfg.pca_ranks)
    return res


def _write_estimates(res, panel, outdir, figures):
    outdir.mkdir(parents=True, exist_ok=True)
    for j, th in enumerate(res.theta):
        _write_matrix(outdir / f"theta_hat_{j}.csv", th, panel.units, panel.times)
    for (a, b), ce in res.combos.items():
        for j, v in enumerate(ce.v_hat):
            cols = [f"f{k + 1}" for k in range(v.shape[1])]
            _write_matrix(outdir / f"factors_{a}{b}_{j}.csv", v, panel.times, cols, "time")
    with open(outdir / "ranks.json", "w") as fh:
        json.dump(_ranks_payload(res, res.rank_estimate, res.tau), fh, indent=2)
    if figures:
        _figures(res, panel, outdir)


def _figures(res, panel, outdir):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for j in range(len(res.theta)):
        if res.ranks[j] == 0:
            continue
        fig, ax = plt.subplots(figsize=(6, 3))
        for (a, b), ce in res.combos.items():
            ax.plot(range(len(panel.times)), ce.v_hat[j][:, 0], lw=1, label=f"({a},{b})")
        ax.set_xlabel("time index")
        ax.set_ylabel(f"first factor, block {j}")
        ax.legend(fontsize=6, ncol=3)
        fig.tight_layout()
        fig.savefig(outdir / f"fig_factors_{j}.svg")
        plt.close(fig)
        fig, ax = plt.subplots(figsize=(5, 4))
        im = ax.imshow(res.theta[j], aspect="auto", cmap="viridis")
        fig.colorbar(im, ax=ax)
        ax.set_xlabel("time index")
        ax.set_ylabel("unit index")
        fig.tight_layout()
        fig.savefig(outdir / f"fig_theta_{j}.svg")
        plt.close(fig)


def _tau_dir(out, tau, many):
    base = Path(out)
    return base / f"tau_{tau:.2f}" if many else base


def cmd_estimate(cfg, panel, figures=False):
    for tau in cfg.tau:
        res = _estimate_one(panel, cfg, tau)
        _write_estimates(res, panel, _tau_dir(cfg.out, tau, len(cfg.tau) > 1), figures)


def _run_tests(res, panel, cfg, which):
    from . import specification as sp
    from .variance import KernelSpec, residuals, variance_set

    eps = residuals(panel.Y, panel.X, res.theta)
    spec = KernelSpec.from_residuals(eps, cfg.h_scale, cfg.T1)
    records = []
    for j in range(1, res.p + 1):
        if res.ranks[j] == 0:
            continue
        vs = variance_set(res, eps, spec, j)
        runs = []
        if "u" in which:
            runs.append(("unit_homogeneity", sp.test_homogeneity_u(res, vs.Sigma_u, j, cfg.alphas)))
        if "v" in which:
            runs.append(("time_homogeneity", sp.test_homogeneity_v(res, vs.Sigma_v, j, cfg.alphas)))
        if "additive" in which:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                runs.append(("additive", sp.test_additive(res, vs.Sigma_u, vs.Sigma_v, j, cfg.alphas)))
        for kind, t in runs:
            rec = t.to_dict()
            rec["test"] = kind
            rec["j"] = j
            rec["tau"] = float(res.tau)
            records.append(rec)
    return {"h": spec.h, "T1": spec.T1, "tests": records}


def cmd_test(cfg, panel, which=("u", "v", "additive"), figures=False):
    for tau in cfg.tau:
        res = _estimate_one(panel, cfg, tau)
        outdir = _tau_dir(cfg.out, tau, len(cfg.tau) > 1)
        _write_estimates(res, panel, outdir, figures)
        payload = _run_tests(res, panel, cfg, which)
        with open(outdir / "tests.json", "w") as fh:
            json.dump(payload, fh, indent=2)


def cmd_simulate(cfg, table, dgps, Ns, Ts, reps, variance_param="variance", rank_source="true"):
    from .montecarlo import DgpSpec, run_table

    grid = [DgpSpec(d, n, t, tau, 0, variance_param) for d in dgps for n in Ns for t in Ts
            for tau in cfg.tau]
    options = {"config": cfg.nnr_config(), "ranks": rank_source, "h_scale": cfg.h_scale,
               "T1": cfg.T1}
    if cfg.pca_ranks is not None:
        options["pca_ranks"] = cfg.pca_ranks
    result = run_table(table, grid, reps, seed=cfg.seed, workers=cfg.workers, options=options)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    result.to_csv(out / TABLE_FILES[table])
    failed = [r for r in result.replications if r.error]
    for r in failed[:5]:
        print(f"replication {r.rep} of DGP {r.spec.id} (N={r.spec.N}, T={r.spec.T}) failed: "
              f"{r.error}", file=sys.stderr)
    return result


def cmd_cv_table(N, T=None, alphas=(0.01, 0.05, 0.10), stream=None):
    from . import specification as sp

    stream = stream or sys.stdout
    rows = [("unit homogeneity", N, [sp.cv_unit(N, a) for a in alphas]),
            ("time homogeneity", None, [sp.cv_time(a) for a in alphas])]
    if T is not None:
        rows.append(("additive", N * T, [sp.cv_additive(N * T, a) for a in alphas]))
    print("test," + ",".join(f"alpha={a:g}" for a in alphas), file=stream)
    for name, n, cvs in rows:
        label = f"{name} (n={n})" if n else name
        print(label + "," + ",".join(f"{c:.2f}" for c in cvs), file=stream)
    return rows


# ------------------------------------------------------------------- parser

def _common(p):
    p.add_argument("--config", help="INI settings file")
    p.add_argument("--tau", help="quantile index or comma-separated list")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--nu-scale", dest="nu_scale", type=float, help="penalty constant c")
    p.add_argument("--rho", type=float)
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--workers", type=int)


def _estimation_flags(p):
    p.add_argument("--data", required=True, help="long-format CSV: unit,time,y,x1,...")
    p.add_argument("--ranks", help="comma-separated ranks, intercept first")
    p.add_argument("--pca-ranks", dest="pca_ranks", help="factors per regressor")
    p.add_argument("--n-splits", dest="n_splits", type=int)
    p.add_argument("--figures", action="store_true", help="also write fig_*.svg")


def build_parser():
    parser = argparse.ArgumentParser(prog="lrpq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="three-stage estimation")
    _common(p)
    _estimation_flags(p)

    p = sub.add_parser("test", help="estimation plus specification tests")
    _common(p)
    _estimation_flags(p)
    p.add_argument("--tests", default="u,v,additive", help="subset of u,v,additive")
    p.add_argument("--alphas")
    p.add_argument("--h-scale", dest="h_scale", type=float)
    p.add_argument("--T1", type=int)

    p = sub.add_parser("simulate", help="Monte Carlo tables")
    _common(p)
    p.add_argument("--table", required=True, choices=sorted(TABLE_FILES))
    p.add_argument("--dgp", default="1", help="comma-separated DGP ids")
    p.add_argument("--N", default="75")
    p.add_argument("--T", default="35")
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--pca-ranks", dest="pca_ranks")
    p.add_argument("--rank-source", choices=("true", "estimated"), default="true")
    p.add_argument("--variance-param", choices=("variance", "sd"), default="variance")
    p.add_argument("--h-scale", dest="h_scale", type=float)
    p.add_argument("--T1", type=int)

    p = sub.add_parser("cv-table", help="Gumbel critical values")
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--T", type=int)
    p.add_argument("--alphas", default="0.01,0.05,0.10")
    return parser


def _flags(args):
    keys = ("tau", "seed", "out", "nu_scale", "rho", "max_iter", "tol", "workers", "ranks",
            "pca_ranks", "n_splits", "alphas", "h_scale", "T1")
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _origin(exc):
    # module of the innermost frame that raised
    tb, name = exc.__traceback__, "cli"
    while tb is not None:
        name = tb.tb_frame.f_globals.get("__name__", name)
        tb = tb.tb_next
    return name.split(".")[-1]


def main(argv=None):
    """Entry point. Exit status: 0 success, 2 finished with non-convergence
    warnings, 1 error."""
    args = build_parser().parse_args(argv)
    try:
        if args.command == "cv-table":
            alphas = _floats(args.alphas)
            cmd_cv_table(args.N, args.T, alphas)
            return 0
        cfg = load_config(args.config, flags=_flags(args))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", NotConvergedWarning)
            if args.command == "estimate":
                cmd_estimate(cfg, ingest_panel(args.data), args.figures)
            elif args.command == "test":
                which = tuple(w.strip() for w in args.tests.split(",") if w.strip())
                bad = set(which) - {"u", "v", "additive"}
                if bad:
                    raise InvalidConfig(f"unknown tests {sorted(bad)}")
                cmd_test(cfg, ingest_panel(args.data), which, args.figures)
            else:
                cmd_simulate(cfg, args.table, _ints(args.dgp), _ints(args.N), _ints(args.T),
                             args.reps, args.variance_param, args.rank_source)
        stalled = [w for w in caught if issubclass(w.category, NotConvergedWarning)]
        for w in caught:
            if not issubclass(w.category, NotConvergedWarning):
                warnings.showwarning(w.message, w.category, w.filename, w.lineno)
        if stalled:
            print(f"warning: {len(stalled)} regularised fit(s) hit max_iter", file=sys.stderr)
            return 2
        return 0
    except (LrpqError, OSError, ValueError) as exc:
        module = _origin(exc)
        print(f"error [{module}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
