import math

import numpy as np
import pytest
from scipy.integrate import quad

from conftest import models
from ouriesz import NearDiagonal, QuadratureBudgetExceeded, SupportOverlap
from ouriesz.riesz import (
    CutoffEta,
    RieszKernelConfig,
    apply_riesz,
    cutoff_gradient,
    eval_cutoff,
    kernel_route_study,
    riesz_kernel,
    riesz_kernel_batch,
    riesz_kernel_parts,
)
from ouriesz.semigroup import Poly, TestFunction


def scalar_oracle(order, x, u):
    """``R_order(x, u)`` of the scalar standard model from the closed-form kernel.

    ``K_t = sqrt(Q_inf/Q_t) exp(u^2 - (u - e^{-t} x)^2 / (2 Q_t))`` and its
    x-derivatives via Hermite-type factors; integrated in ``tau = log t`` by scipy.
    """

    def integrand(tau):
        t = math.exp(tau)
        qt = -math.expm1(-2 * t) / 2
        m = math.exp(-t)
        z = u - m * x
        logk = 0.5 * math.log(0.5 / qt) + u * u - z * z / (2 * qt)
        p = m * z / qt
        d = -m * m / qt
        poly = {1: p, 2: p * p + d, 3: p ** 3 + 3 * p * d}[order]
        return math.exp(logk + order / 2 * tau) * poly / math.gamma(order / 2)

    val, err = quad(integrand, -40.0, 6.0, epsabs=0.0, epsrel=1e-13, limit=2000, points=[-3.0, 0.0])
    return val


# --- kernel values ------------------------------------------------------------------

def test_first_order_scalar_oracle(scalar):
    ref = scalar_oracle(1, 1.0, 2.0)
    assert ref == pytest.approx(6.716431622071942, rel=1e-10)
    assert riesz_kernel(scalar, [1], [1.0], [2.0]).value() == pytest.approx(ref, rel=1e-6)


@pytest.mark.parametrize("order,x,u", [(1, -0.5, 0.7), (2, 1.0, 2.0), (2, 0.3, -1.1), (3, 0.5, 1.7)])
def test_scalar_oracle_other_points(scalar, order, x, u):
    ref = scalar_oracle(order, x, u)
    assert riesz_kernel(scalar, [order], [x], [u]).value() == pytest.approx(ref, rel=1e-7)


def test_first_order_odd_in_u_at_origin(scalar):
    for u in (0.3, 1.0, 2.5):
        a = riesz_kernel(scalar, [1], [0.0], [u]).value()
        b = riesz_kernel(scalar, [1], [0.0], [-u]).value()
        assert a + b == pytest.approx(0.0, abs=1e-8 * abs(a))


def test_second_order_stable_under_tolerance(scalar):
    a = riesz_kernel(scalar, [2], [1.0], [2.0]).value()
    b = riesz_kernel(scalar, [2], [1.0], [2.0], RieszKernelConfig(rel_tol=5e-9)).value()
    assert b == pytest.approx(a, rel=1e-8)


def test_parts_add_up():
    rng = np.random.default_rng(0)
    for m in models(4, n_max=2, seed=31):
        X = rng.normal(size=(25, m.n))
        U = rng.normal(size=(25, m.n))
        alpha = [1] + [0] * (m.n - 1)
        (ws, wl), (s0, l0), (s1, l1) = riesz_kernel_batch(m, alpha, X, U)
        whole = ws * np.exp(wl)
        parts = s0 * np.exp(l0) + s1 * np.exp(l1)
        np.testing.assert_allclose(parts, whole, rtol=1e-10, atol=1e-300)
    small, large = riesz_kernel_parts(models(1, seed=31)[0], [1], [0.2], [1.4])
    assert (small + large).value() == pytest.approx(
        riesz_kernel(models(1, seed=31)[0], [1], [0.2], [1.4]).value(), rel=1e-10)


def test_split_time_moves_mass_only(scalar):
    a = riesz_kernel_parts(scalar, [2], [0.4], [1.0], RieszKernelConfig(split_time=1.0))
    b = riesz_kernel_parts(scalar, [2], [0.4], [1.0], RieszKernelConfig(split_time=0.3))
    assert (a[0] + a[1]).value() == pytest.approx((b[0] + b[1]).value(), rel=1e-8)
    assert a[0].value() != pytest.approx(b[0].value(), rel=1e-3)


def test_batch_matches_single_points():
    m = models(2, n_max=2, seed=5)[1]
    rng = np.random.default_rng(3)
    X, U = rng.normal(size=(2, 6, 2))
    (s, l), _, _ = riesz_kernel_batch(m, [1, 1], X, U)
    for k in range(6):
        single = riesz_kernel(m, [1, 1], X[k], U[k])
        assert single.sign == s[k]
        assert single.logmag == pytest.approx(l[k], abs=1e-8)


def test_large_drift_log_form(scalar):
    v = riesz_kernel(scalar, [3], [-9.0], [-8.0])
    assert v.sign != 0 and math.isfinite(v.logmag) and v.logmag > 60


def test_guards(scalar):
    with pytest.raises(NearDiagonal):
        riesz_kernel(scalar, [1], [1.0], [1.0 + 1e-10])
    with pytest.raises(ValueError):
        riesz_kernel(scalar, [1, 0], [1.0], [2.0])
    with pytest.raises(ValueError):
        RieszKernelConfig(rel_tol=0.1)
    with pytest.raises(ValueError):
        RieszKernelConfig(split_time=0.0)
    cfg = RieszKernelConfig().refined(2)
    assert cfg.panel_width == 0.25 and cfg.scan_step == 0.05


# --- cutoff -----------------------------------------------------------------------

def test_cutoff_examples():
    eta = CutoffEta(A=2.0)
    x = np.array([0.5, -1.0])
    nx = np.linalg.norm(x)
    direction = np.array([0.6, 0.8])
    assert eval_cutoff(eta, None, x, x) == 1.0
    assert eval_cutoff(eta, None, x, x + 3 * eta.A / (1 + nx) * direction) == 0.0
    mid = eval_cutoff(eta, None, x, x + 1.5 * eta.A / (1 + nx) * direction)
    assert 0.0 < mid < 1.0
    assert eval_cutoff(eta, None, x, x + 0.999 * eta.A / (1 + nx) * direction) == 1.0
    with pytest.raises(ValueError):
        CutoffEta(A=0.5)


def test_cutoff_gradient_matches_differences_and_bound():
    rng = np.random.default_rng(4)
    for A in (1.0, 4.0):
        eta = CutoffEta(A)
        worst = 0.0
        for _ in range(300):
            x = rng.normal(scale=2.0, size=2)
            d = rng.uniform(1.0, 2.0) * A / (1 + np.linalg.norm(x))
            th = rng.uniform(0, 2 * math.pi)
            u = x + d * np.array([math.cos(th), math.sin(th)])
            gx, gu = cutoff_gradient(eta, x, u)
            h = 1e-6 * d
            for j in range(2):
                e = np.eye(2)[j] * h
                fdx = (eval_cutoff(eta, None, x + e, u) - eval_cutoff(eta, None, x - e, u)) / (2 * h)
                fdu = (eval_cutoff(eta, None, x, u + e) - eval_cutoff(eta, None, x, u - e)) / (2 * h)
                assert fdx == pytest.approx(gx[j], abs=1e-5 * (1 + abs(gx[j])))
                assert fdu == pytest.approx(gu[j], abs=1e-5 * (1 + abs(gu[j])))
            worst = max(worst, (np.linalg.norm(gx) + np.linalg.norm(gu)) * d)
        assert worst <= eta.C_eta


# --- operators ----------------------------------------------------------------------

def test_spectral_identities(scalar):
    f1 = TestFunction.polynomial(Poly(1, {(1,): 1.0}))
    f2 = TestFunction.polynomial(Poly(1, {(2,): 1.0, (0,): -0.5}))
    for x in (-2.0, 0.0, 0.7, 3.0):
        assert apply_riesz(scalar, [1], f1, [x]).value == pytest.approx(1.0, abs=1e-10)
        assert apply_riesz(scalar, [2], f2, [x]).value == pytest.approx(1.0, abs=1e-10)
        assert apply_riesz(scalar, [1], TestFunction.polynomial(Poly.constant(1, 5.0)), [x]).value == 0.0


def test_support_overlap_and_budget(scalar, std2):
    bump = TestFunction.callable(lambda X: np.exp(-1 / np.maximum(1 - X[:, 0] ** 2, 1e-300)) * (np.abs(X[:, 0]) < 1),
                                 1, support=([-1.0], [1.0]))
    with pytest.raises(SupportOverlap):
        apply_riesz(scalar, [1], bump, [0.5])
    with pytest.raises(SupportOverlap):
        apply_riesz(scalar, [1], TestFunction.callable(lambda X: X[:, 0], 1), [0.5])
    with pytest.raises(SupportOverlap):
        apply_riesz(scalar, [1], TestFunction.polynomial(Poly(1, {(1,): 1.0, (2,): 1.0})), [0.5])
    box = TestFunction.callable(lambda X: np.ones(len(X)), 2, support=([0.0, 0.0], [1.0, 1.0]))
    with pytest.raises(QuadratureBudgetExceeded):
        apply_riesz(std2, [1, 0], box, [3.0, 3.0], max_nodes=100)


def test_kernel_route_against_direct_quadrature(scalar):
    # separated supports: the kernel route is a plain gamma_inf integral
    f = TestFunction.callable(lambda X: np.cos(X[:, 0]) ** 2, 1, support=([1.0], [2.0]))
    x = -0.5
    got = apply_riesz(scalar, [1], f, [x], order=8, panels=4).kernel
    ref, _ = quad(lambda u: scalar_oracle(1, x, u) * math.cos(u) ** 2 * math.exp(-u * u) / math.sqrt(math.pi),
                  1.0, 2.0, epsabs=1e-12, epsrel=1e-10)
    assert got == pytest.approx(ref, rel=1e-7)


def test_kernel_route_study_converges(scalar):
    f = TestFunction.polynomial(Poly(1, {(1,): 1.0}))
    rows = kernel_route_study(scalar, f, 0.3)
    errs = [r["abs_error"] for r in rows]
    assert all(r["spectral"] == pytest.approx(1.0) for r in rows)
    assert all(a > b for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 0.05
    with pytest.raises(ValueError):
        kernel_route_study(models(2, seed=1)[1], f, 0.3)
