"""Nuclear-norm-regularised panel quantile regression solved by ADMM.

The problem

    min  1/(NT) sum_it rho_tau(Y - Theta_0 - sum_j X_j * Theta_j)
         + sum_j nu_j ||Theta_j||_*

is split with auxiliary blocks V = W, W = Y - sum_j X_j * Theta_j - Z_0,
Z_0 = Theta_0 and Z_j = Theta_j (j >= 1). Block one holds (V, Theta_j,
Theta_0); block two holds (Z_j, (Z_0, W)); all duals are scaled.
"""

from dataclasses import dataclass, field
import math
import warnings

import numpy as np

from .errors import InvalidConfig, NotConvergedWarning, ShapeMismatch
from .lowrank import as_panel, svt_prox
from .quantile_core import QuantileIndex

__all__ = [
    "NnrConfig",
    "AdmmState",
    "NnrFit",
    "default_nu",
    "prox_check_matrix",
    "update_slopes",
    "update_nuclear_blocks",
    "update_w_z0",
    "update_duals",
    "residual_norms",
    "nnr_objective",
    "fit_nnr",
]


def default_nu(N, T, c=1.0):
    """Penalty level ``c * max(sqrt(N), sqrt(T log T)) / (N T)``."""
    if N < 2 or T < 2:
        raise ValueError("N and T must be at least 2")
    if c <= 0:
        raise ValueError("nu scale must be positive")
    return c * max(math.sqrt(N), math.sqrt(T * math.log(T))) / (N * T)


@dataclass
class NnrConfig:
    """ADMM settings.

    ``nu`` gives one penalty per coefficient matrix (intercept first); when
    omitted every block uses :func:`default_nu` with constant ``nu_scale``.
    Tolerances are relative to ``sqrt(N T)``.
    """

    nu: tuple = None
    rho: float = 1.0
    max_iter: int = 2000
    tol_primal: float = 1e-6
    tol_dual: float = 1e-6
    nu_scale: float = 0.4
    adaptive_rho: bool = True
    warn: bool = True

    def __post_init__(self):
        if not self.rho > 0:
            raise InvalidConfig(f"rho must be positive, got {self.rho}")
        if self.max_iter < 1:
            raise InvalidConfig("max_iter must be >= 1")
        if not (self.tol_primal > 0 and self.tol_dual > 0):
            raise InvalidConfig("tolerances must be positive")
        if not self.nu_scale > 0:
            raise InvalidConfig("nu_scale must be positive")
        if self.nu is not None:
            self.nu = tuple(float(v) for v in self.nu)
            if any(v < 0 for v in self.nu):
                raise InvalidConfig("penalties nu_j must be nonnegative")

    def penalties(self, N, T, p):
        if self.nu is None:
            return (default_nu(N, T, self.nu_scale),) * (p + 1)
        if len(self.nu) != p + 1:
            raise InvalidConfig(f"expected {p + 1} penalties, got {len(self.nu)}")
        return self.nu


@dataclass
class AdmmState:
    V: np.ndarray
    W: np.ndarray
    Z0: np.ndarray
    Z: list
    Theta0: np.ndarray
    Theta: list
    Uv: np.ndarray
    UW: np.ndarray
    U0: np.ndarray
    U: list
    iteration: int = 0
    primal_residual: float = math.inf
    dual_residual: float = math.inf

    @classmethod
    def zeros(cls, N, T, p):
        z = lambda: np.zeros((N, T))
        return cls(z(), z(), z(), [z() for _ in range(p)], z(), [z() for _ in range(p)],
                   z(), z(), z(), [z() for _ in range(p)])

    def copy(self):
        cp = lambda L: [a.copy() for a in L]
        return AdmmState(self.V.copy(), self.W.copy(), self.Z0.copy(), cp(self.Z),
                         self.Theta0.copy(), cp(self.Theta), self.Uv.copy(),
                         self.UW.copy(), self.U0.copy(), cp(self.U), self.iteration,
                         self.primal_residual, self.dual_residual)


def prox_check_matrix(A, tau, rho):
    """Elementwise ``argmin_v rho_tau(v) + (rho/2)(v - a)^2``."""
    if not rho > 0:
        raise ValueError("rho must be positive")
    A = np.asarray(A, dtype=float)
    hi = tau / rho
    lo = (1.0 - tau) / rho
    return np.where(A > hi, A - hi, np.where(A < -lo, A + lo, 0.0))


def update_slopes(A, X, targets):
    """Cellwise minimiser of ``(A + sum_j x_j t_j)^2 + sum_j (m_j - t_j)^2``.

    ``targets`` holds ``Z_j + U_j``. The p x p system ``(I + x x') t = m - A x``
    is inverted with the rank-one identity.
    """
    if len(X) == 0:
        return []
    Xs = np.stack([np.asarray(x, float) for x in X])
    M = np.stack([np.asarray(m, float) for m in targets])
    if Xs.shape != M.shape or Xs.shape[1:] != np.shape(A):
        raise ShapeMismatch("slope update blocks must share one shape")
    rhs = M - A * Xs
    coef = np.sum(Xs * rhs, axis=0) / (1.0 + np.sum(Xs * Xs, axis=0))
    return list(rhs - Xs * coef)


def update_nuclear_blocks(state, nu, rho, NT):
    """SVT steps: Theta_0 from ``Z_0 + U_0``; Z_j from ``Theta_j - U_j``.

    The threshold is ``nu_j * NT / rho``. Returns the state and the nuclear
    norms of the new blocks.
    """
    norms = []
    Theta0, n0 = _svt_with_norm(state.Z0 + state.U0, nu[0] * NT / rho)
    state.Theta0 = Theta0
    norms.append(n0)
    for j in range(len(state.Z)):
        state.Z[j], nj = _svt_with_norm(state.Theta[j] - state.U[j], nu[j + 1] * NT / rho)
        norms.append(nj)
    return state, norms


def _svt_with_norm(M, threshold):
    if threshold == 0:
        return M.copy(), float(np.sum(np.linalg.svd(M, compute_uv=False)))
    P, D, Qt = np.linalg.svd(M, full_matrices=False)
    keep = D > threshold
    Dk = D[keep] - threshold
    return (P[:, keep] * Dk) @ Qt[keep], float(np.sum(Dk))


def update_w_z0(state, Y, X):
    """Joint minimiser of ``||W + B||^2 + ||W + Z_0 + A||^2 + ||Z_0 + C||^2``
    with ``A = -Y + sum X_j Theta_j + U_W``, ``B = -V - U_v``,
    ``C = -Theta_0 + U_0``."""
    A = -Y + state.UW
    for x, th in zip(X, state.Theta):
        A = A + x * th
    Bt = -state.V - state.Uv
    C = -state.Theta0 + state.U0
    state.Z0 = (-A - 2.0 * C + Bt) / 3.0
    state.W = -A - C - 2.0 * state.Z0
    return state


def _fit_gap(state, Y, X):
    g = state.W - Y + state.Z0
    for x, th in zip(X, state.Theta):
        g = g + x * th
    return g


def update_duals(state, Y, X):
    state.Uv = state.Uv + state.V - state.W
    state.UW = state.UW + _fit_gap(state, Y, X)
    state.U0 = state.U0 + state.Z0 - state.Theta0
    for j in range(len(state.U)):
        state.U[j] = state.U[j] + state.Z[j] - state.Theta[j]
    return state


def residual_norms(state, Y, X):
    """Combined primal residual: sum of Frobenius norms of every constraint."""
    r = np.linalg.norm(state.V - state.W) + np.linalg.norm(_fit_gap(state, Y, X))
    r += np.linalg.norm(state.Z0 - state.Theta0)
    r += sum(np.linalg.norm(z - th) for z, th in zip(state.Z, state.Theta))
    return float(r)


def nnr_objective(Y, X, thetas, tau, nu):
    """Penalised objective at coefficient matrices ``thetas`` (intercept first)."""
    R = np.asarray(Y, float) - thetas[0]
    for x, th in zip(X, thetas[1:]):
        R = R - x * th
    loss = float(np.mean(R * (tau - (R <= 0))))
    pen = sum(n * float(np.sum(np.linalg.svd(th, compute_uv=False)))
              for n, th in zip(nu, thetas) if n > 0)
    return loss + pen


@dataclass
class NnrFit:
    """Output of :func:`fit_nnr`.

    ``theta`` lists the low-rank coefficient estimates, intercept first. They
    are taken from the SVT-updated blocks (Theta_0 and Z_j), which equal their
    split copies at convergence.
    """

    theta: list
    nu: tuple
    converged: bool
    iterations: int
    objective: float
    primal_history: list = field(default_factory=list)
    dual_history: list = field(default_factory=list)
    rho: float = 1.0
    state: AdmmState = None


def fit_nnr(Y, X, tau, config=None, state=None):
    """Solve the nuclear-norm-regularised quantile regression by ADMM.

    Parameters
    ----------
    Y : (N, T) array
    X : sequence of p (N, T) arrays
    tau : quantile index
    config : NnrConfig, optional
    state : AdmmState, optional
        Starting point; all-zero blocks by default.

    Returns
    -------
    NnrFit
        The iterate with the smallest penalised objective. ``converged`` is
        False (and a :class:`NotConvergedWarning` issued) when ``max_iter`` is
        hit first.
    """
    config = config or NnrConfig()
    tau = QuantileIndex(tau)
    Y = as_panel(Y, "outcome")
    X = [as_panel(x, "regressor") for x in X]
    N, T = Y.shape
    if any(x.shape != Y.shape for x in X):
        raise ShapeMismatch("every regressor must match the outcome shape")
    p = len(X)
    nu = config.penalties(N, T, p)
    NT = N * T
    scale = math.sqrt(NT)
    rho = config.rho
    st = state.copy() if state is not None else AdmmState.zeros(N, T, p)

    prim_hist, dual_hist = [], []
    best_obj, best = math.inf, None
    converged = False
    for k in range(1, config.max_iter + 1):
        W_old, Z0_old = st.W, st.Z0
        Z_old = list(st.Z)

        st.V = prox_check_matrix(st.W - st.Uv, tau, rho)
        A = st.W + st.Z0 + st.UW - Y
        st.Theta = update_slopes(A, X, [z + u for z, u in zip(st.Z, st.U)])
        st, norms = update_nuclear_blocks(st, nu, rho, NT)
        st = update_w_z0(st, Y, X)
        st = update_duals(st, Y, X)

        dW, dZ0 = st.W - W_old, st.Z0 - Z0_old
        s2 = np.sum(dW * dW) + np.sum(dZ0 * dZ0)
        for x, zn, zo in zip(X, st.Z, Z_old):
            g = x * (dW + dZ0) - (zn - zo)
            s2 += np.sum(g * g)
        st.iteration = k
        st.primal_residual = residual_norms(st, Y, X)
        st.dual_residual = rho * math.sqrt(s2)
        prim_hist.append(st.primal_residual)
        dual_hist.append(st.dual_residual)

        R = Y - st.Theta0
        for x, z in zip(X, st.Z):
            R = R - x * z
        obj = float(np.mean(R * (tau - (R <= 0)))) + sum(n * v for n, v in zip(nu, norms))
        if obj < best_obj:
            best_obj = obj
            best = [st.Theta0.copy()] + [z.copy() for z in st.Z]

        if st.primal_residual < config.tol_primal * scale and st.dual_residual < config.tol_dual * scale:
            converged = True
            break

        if config.adaptive_rho and k % 10 == 0 and k <= config.max_iter // 2:
            ratio = st.primal_residual / max(st.dual_residual, 1e-300)
            factor = 2.0 if ratio > 10.0 else 0.5 if ratio < 0.1 else 1.0
            if factor != 1.0:
                rho *= factor
                for name in ("Uv", "UW", "U0"):
                    setattr(st, name, getattr(st, name) / factor)
                st.U = [u / factor for u in st.U]

    if not converged and config.warn:
        warnings.warn(
            f"ADMM stopped after {config.max_iter} iterations "
            f"(primal {st.primal_residual:.3g}, dual {st.dual_residual:.3g})",
            NotConvergedWarning,
            stacklevel=2,
        )
    return NnrFit(best, nu, converged, st.iteration, best_obj, prim_hist, dual_hist, rho, st)
