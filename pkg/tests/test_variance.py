import math

import numpy as np
import pytest
from scipy import stats

from lrpq import variance as va
from lrpq.errors import InvalidConfig, ShapeMismatch, SingularVhat

from conftest import synthetic_result


def naive(result, eps, spec, j):
    """Direct transcription of the displayed sums, loop by loop."""
    tau = result.tau
    e = result.pcas[j - 1].residual
    N, T = eps.shape
    h, T1 = spec.h, spec.T1
    K = result.combos[(1, 2)].v_hat[j].shape[1]
    kh = lambda x: stats.norm.pdf(x / h) / h
    Ks = lambda x: stats.norm.sf(x / h)

    def vr(t, s):
        out = np.zeros((K, K))
        for ce in result.combos.values():
            out += np.outer(ce.v_hat[j][t], ce.v_hat[j][s])
        return out / 6.0

    def ur(i):
        out = np.zeros((K, K))
        for ce in result.combos.values():
            hit = np.flatnonzero(ce.units == i)
            if hit.size:
                u = ce.u_hat[j][hit[0]]
                out += np.outer(u, u)
        return out / 2.0

    def S(i, t, s):
        return (e[i, t] * e[i, s] * vr(t, s) * (tau - Ks(eps[i, t])) * (tau - Ks(eps[i, s])))

    Vu = np.zeros((K, K))
    Vv = np.zeros((K, K))
    Ou = np.zeros((K, K))
    Ov = np.zeros((K, K))
    for i in range(N):
        for t in range(T):
            Vu += kh(eps[i, t]) * e[i, t] ** 2 * vr(t, t)
            Vv += kh(eps[i, t]) * e[i, t] ** 2 * ur(i)
            Ou += tau * (1 - tau) * e[i, t] ** 2 * vr(t, t)
            Ov += tau * (1 - tau) * e[i, t] ** 2 * ur(i)
        # 1-based t = 1..T-T1 and s = t+1..t+T1
        for t in range(1, T - T1 + 1):
            for s in range(t + 1, t + T1 + 1):
                Ou += S(i, t - 1, s - 1)
        # 1-based t = 1+T1..T and s = t-T1..t-1
        for t in range(1 + T1, T + 1):
            for s in range(t - T1, t):
                Ou += S(i, t - 1, s - 1)
    NT = N * T
    Vu, Vv, Ou, Ov = Vu / NT, Vv / NT, Ou / NT, Ov / NT
    Ou = 0.5 * (Ou + Ou.T)
    w, Q = np.linalg.eigh(Ou)
    Ou = (Q * np.maximum(w, 0)) @ Q.T
    Su = np.linalg.inv(Vu) @ Ou @ np.linalg.inv(Vu)
    Sv = np.linalg.inv(Vv) @ Ov @ np.linalg.inv(Vv)
    Xi = np.zeros((N, T))
    for i in range(N):
        for t in range(T):
            for ce in result.combos.values():
                v = ce.v_hat[j][t]
                Xi[i, t] += 0.5 * v @ Su @ v / T
                hit = np.flatnonzero(ce.units == i)
                if hit.size:
                    u = ce.u_hat[j][hit[0]]
                    Xi[i, t] += 0.5 * u @ Sv @ u / len(ce.units)
    return dict(V_u=Vu, V_v=Vv, Omega_u=Ou, Omega_v=Ov, Sigma_u=Su, Sigma_v=Sv, Xi=Xi)


@pytest.mark.parametrize("T1", [1, 2, 3])
def test_naive_loop_equivalence(rng, T1):
    import warnings

    for _ in range(3):
        res = synthetic_result(rng)
        eps = rng.normal(size=(5, 6))
        spec = va.KernelSpec(float(rng.uniform(0.3, 1.5)), T1)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            got = va.variance_set(res, eps, spec, 1)
        ref = naive(res, eps, spec, 1)
        for name, want in ref.items():
            np.testing.assert_allclose(getattr(got, name), want, rtol=1e-10, atol=1e-12,
                                       err_msg=name)


def test_hand_evaluated_constant_case(rng):
    res = synthetic_result(rng, K=1, tau=0.5, const=True)
    spec = va.KernelSpec(0.7, 1)
    vs = va.variance_set(res, np.zeros((5, 6)), spec, 1)
    assert vs.V_u[0, 0] == pytest.approx(stats.norm.pdf(0) / 0.7)
    # lag terms vanish because tau - K(0) = 0
    assert vs.Omega_u[0, 0] == pytest.approx(0.25)


def test_xi_first_term_scales_with_one_over_t(rng):
    def xi(T):
        res = synthetic_result(rng, K=1, tau=0.5, const=True, T=T)
        return va.variance_set(res, np.zeros((5, T)), va.KernelSpec(1.0, 1), 1)

    a, b = xi(6), xi(12)
    first = 0.5 * 6 * a.Sigma_u[0, 0] / 6  # six combos, unit factors
    assert a.Sigma_u[0, 0] == pytest.approx(b.Sigma_u[0, 0])
    np.testing.assert_allclose(a.Xi[:, 0] - b.Xi[:, 0], first / 2)


def test_omega_v_psd(rng):
    for _ in range(10):
        res = synthetic_result(rng)
        vs = va.variance_set(res, rng.normal(size=(5, 6)), va.KernelSpec(1.0, 1), 1)
        assert np.linalg.eigvalsh(vs.Omega_v).min() >= -1e-10
        np.testing.assert_allclose(vs.V_u, vs.V_u.T)


def test_kernel_eval_examples():
    spec1 = va.KernelSpec(1.0, 1)
    k, K = va.kernel_eval(0.0, spec1)
    assert k == pytest.approx(0.3989422804014327) and K == 0.5
    assert va.kernel_eval(40.0, spec1)[1] == pytest.approx(0.0, abs=1e-300)
    assert va.kernel_eval(-40.0, spec1)[1] == 1.0
    k2 = va.kernel_eval(2.0, va.KernelSpec(2.0, 1))[0]
    assert k2 / va.kernel_eval(1.0, spec1)[0] == pytest.approx(0.5)


def test_kernel_spec_validation():
    with pytest.raises(InvalidConfig):
        va.KernelSpec(0.0, 1)
    with pytest.raises(InvalidConfig):
        va.KernelSpec(1.0, 0)
    with pytest.raises(InvalidConfig):
        va.KernelSpec(1.0, 1, family="epanechnikov")
    eps = np.random.default_rng(0).normal(size=(20, 16))
    spec = va.KernelSpec.from_residuals(eps)
    assert spec.T1 == math.ceil(16 ** 0.25)
    assert spec.h == pytest.approx(1.06 * eps.std() * 16 ** -0.2)


def test_residuals(rng):
    Y = rng.normal(size=(4, 5))
    X = [rng.normal(size=(4, 5))]
    th = [rng.normal(size=(4, 5)), rng.normal(size=(4, 5))]
    R = va.residuals(Y, X, th)
    np.testing.assert_array_equal(R, (Y - th[0]) - X[0] * th[1])
    np.testing.assert_array_equal(va.residuals(Y, X, [0 * th[0], 0 * th[1]]), Y)
    with pytest.raises(ShapeMismatch):
        va.residuals(Y, X, th[:1])


def test_singular_v_reported(rng):
    res = synthetic_result(rng)
    for ce in res.combos.values():
        ce.v_hat[1][:, 1] = ce.v_hat[1][:, 0]  # collinear factors
    with pytest.raises(SingularVhat) as info:
        va.variance_set(res, rng.normal(size=(5, 6)), va.KernelSpec(1.0, 1), 1)
    assert info.value.cond > 1e11


def test_lag_must_be_below_t(rng):
    res = synthetic_result(rng)
    with pytest.raises(InvalidConfig):
        va.variance_set(res, rng.normal(size=(5, 6)), va.KernelSpec(1.0, 6), 1)
