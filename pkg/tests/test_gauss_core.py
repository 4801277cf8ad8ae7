import math

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad, quad_vec

from conftest import models
from ouriesz import (
    LyapunovSolveFailed,
    NotHurwitz,
    NotPositiveDefinite,
    NotSymmetric,
    QuadratureDivergence,
    RootBracketFailure,
    Tolerances,
    ZeroVector,
    build_model,
    random_model,
)
from ouriesz.gauss_core import (
    CovCache,
    Region,
    classify_region,
    cov_stack,
    covariance_qt,
    ellipse_param,
    flow_dt,
    flow_dt_batch,
    flow_dt_forms,
    from_polar,
    log_gaussian_density,
    polar_volume_element,
    polar_weight,
    q_norm,
    quad_form_r,
    to_polar,
)

E = math.e


# --- model construction -----------------------------------------------------

def test_scalar_stationary_covariance():
    m = build_model([[1.0]], [[-1.0]])
    assert m.Qinf[0, 0] == pytest.approx(0.5, abs=1e-15)
    assert m.n == 1


def test_decoupled_stationary_covariance(std2):
    np.testing.assert_allclose(std2.Qinf, 0.5 * np.eye(2), atol=1e-15)


def test_jordan_block_matches_integral_oracle():
    Q, B = np.eye(2), np.array([[-1.0, 1.0], [0.0, -1.0]])
    m = build_model(Q, B)
    oracle, _ = quad_vec(lambda s: sla.expm(s * B) @ Q @ sla.expm(s * B.T), 0.0, 50.0, epsabs=1e-13, epsrel=1e-13)
    np.testing.assert_allclose(m.Qinf, oracle, atol=1e-8)


def test_model_invariants_random():
    for m in models(50, n_max=4):
        assert m.lyapunov_residual() <= 1e-10
        np.testing.assert_allclose(m.Qinf_sqrt @ m.Qinf_sqrt.T, m.Qinf, rtol=1e-12, atol=1e-12 * np.abs(m.Qinf).max())
        assert np.all(np.linalg.eigvalsh(m.Qinf) > 0)
        assert m.Qinf_logdet == pytest.approx(np.linalg.slogdet(m.Qinf)[1], abs=1e-12)


@pytest.mark.parametrize("Q,B,err", [
    ([[1.0, 0.2], [0.0, 1.0]], -np.eye(2), NotSymmetric),
    ([[1.0, 0.0], [0.0, -1.0]], -np.eye(2), NotPositiveDefinite),
    ([[1.0, 0.0], [0.0, 0.0]], -np.eye(2), NotPositiveDefinite),
    (np.eye(2), [[-1.0, 0.0], [0.0, 0.5]], NotHurwitz),
    (np.eye(2), [[0.0, 1.0], [-1.0, 0.0]], NotHurwitz),
])
def test_build_model_rejects(Q, B, err):
    with pytest.raises(err):
        build_model(Q, B)


def test_model_errors_are_value_errors():
    with pytest.raises(ValueError):
        build_model(np.eye(2), np.eye(2))
    with pytest.raises(ValueError):
        build_model(np.eye(2), -np.eye(3))
    with pytest.raises(ValueError):
        build_model([[np.nan]], [[-1.0]])


def test_lyapunov_failure_is_reported():
    # an absurdly tight residual tolerance forces the post-solve check to fail
    with pytest.raises(LyapunovSolveFailed):
        build_model(np.eye(3) + 0.3, -np.diag([1e-3, 1.0, 1e3]) + np.triu(np.full((3, 3), 0.7), 1),
                    Tolerances(lyapunov_rel=1e-30))


# --- Q_t ----------------------------------------------------------------------

def test_scalar_qt_closed_forms(scalar):
    assert covariance_qt(scalar, 1.0).Qt[0, 0] == pytest.approx((1 - math.exp(-2)) / 2, rel=1e-14)
    assert covariance_qt(scalar, 0.01).Qt[0, 0] == pytest.approx((1 - math.exp(-0.02)) / 2, rel=1e-13)
    assert covariance_qt(scalar, 0.01).Qt[0, 0] == pytest.approx(0.00990066, abs=5e-9)
    assert abs(covariance_qt(scalar, 50.0).Qt[0, 0] - 0.5) <= 1e-8


def test_qt_matches_quadrature_oracle():
    for m in models(6, n_max=3, seed=7):
        for t in (1e-3, 0.3, 1.0, 2.5, 8.0):
            oracle, _ = quad_vec(lambda s: sla.expm(s * m.B) @ m.Q @ sla.expm(s * m.B.T), 0.0, t,
                                 epsabs=1e-15, epsrel=1e-13)
            np.testing.assert_allclose(covariance_qt(m, t).Qt, oracle, rtol=1e-10,
                                       atol=1e-12 * np.abs(oracle).max())


def test_cov_at_time_invariants():
    for m in models(10, n_max=3, seed=11):
        prev = None
        for t in np.geomspace(1e-4, 30, 25):
            c = covariance_qt(m, t)
            assert np.all(np.linalg.eigvalsh(c.Qt) > 0)
            # positive semidefinite up to roundoff; it decays like e^{-2rt} at large t
            assert np.linalg.eigvalsh(c.Dt_diff_inv).min() >= -1e-12 * np.abs(c.Qt_inv).max()
            np.testing.assert_allclose(c.Dt_diff_inv, c.Qt_inv - m.Qinf_inv,
                                       atol=1e-9 * np.abs(c.Qt_inv).max())
            if prev is not None:  # Q_t increases in the Loewner order
                assert np.linalg.eigvalsh(c.Qt - prev).min() >= -1e-12
            prev = c.Qt


def test_cov_stack_keys_consistent(scalar):
    st_ = cov_stack(scalar, [0.5, 2.0])
    for i, t in enumerate((0.5, 2.0)):
        D_minus = flow_dt(scalar, -t)
        np.testing.assert_allclose(st_["D_minus"][i], D_minus, rtol=1e-14)
        np.testing.assert_allclose(st_["D_minus_shift"][i], D_minus - np.eye(1), rtol=1e-13)
        np.testing.assert_allclose(st_["Delta"][i], -st_["etB"][i].T @ st_["Qt_inv"][i] @ st_["etB"][i], rtol=1e-14)


def test_flow_shift_has_no_cancellation():
    m = random_model(np.random.default_rng(4), 3)
    t = 1e-9
    shift = cov_stack(m, [t])["D_minus_shift"][0]
    # first-order expansion: D_{-t} - I = t Q_inf B^T Q_inf^{-1} + O(t^2)
    lead = t * m.Qinf @ m.B.T @ m.Qinf_inv
    np.testing.assert_allclose(shift, lead, rtol=1e-8)


def test_cov_rejects_bad_times(scalar):
    for t in (0.0, -1.0, np.inf, np.nan):
        with pytest.raises(ValueError):
            covariance_qt(scalar, t)


def test_cov_cache_reuses_rows():
    m = random_model(np.random.default_rng(1), 2)
    c = CovCache(m)
    a = c.stack([0.1, 1.0, 3.0])
    b = c.stack([3.0, 0.1, 7.0, 1.0])
    assert len(c) == 4
    np.testing.assert_array_equal(a["G"][[2, 0, 1]], b["G"][[0, 1, 3]])
    direct = cov_stack(m, [7.0])
    np.testing.assert_array_equal(b["Qt"][2], direct["Qt"][0])
    assert c.get(1.0).Qt_logdet == a["Qt_logdet"][1]


# --- the flow D_t -----------------------------------------------------------------

def test_scalar_flow(scalar):
    assert flow_dt(scalar, 1.0)[0, 0] == pytest.approx(E, rel=1e-15)


def test_flow_identity_and_group_law():
    rng = np.random.default_rng(3)
    for m in models(20, n_max=4, seed=5):
        np.testing.assert_allclose(flow_dt(m, 0.0), np.eye(m.n), atol=1e-15)
        s, t = rng.uniform(-2, 2, 2)
        np.testing.assert_allclose(flow_dt(m, s) @ flow_dt(m, t), flow_dt(m, s + t), rtol=1e-10,
                                   atol=1e-10 * np.abs(flow_dt(m, s + t)).max())


def test_flow_three_expressions_agree():
    for m in models(50, n_max=4, seed=8):
        for t in (1e-3, 0.1, 1.0, 5.0):
            a, b, c = flow_dt_forms(m, t)
            scale = np.abs(a).max()
            np.testing.assert_allclose(b, a, atol=1e-9 * scale)
            np.testing.assert_allclose(c, a, atol=1e-9 * scale)


def test_flow_limit(scalar):
    with pytest.raises(QuadratureDivergence):
        flow_dt(scalar, 101.0)
    with pytest.raises(QuadratureDivergence):
        flow_dt_batch(scalar, [1.0, -150.0])


# --- quadratic form, densities ---------------------------------------------------

def test_quadratic_form_examples(scalar, std2):
    assert quad_form_r(scalar, [1.0]) == pytest.approx(1.0)
    assert quad_form_r(std2, [0.0, 0.0]) == 0.0
    assert quad_form_r(std2, [1.0, 1.0]) == pytest.approx(2.0)
    assert q_norm(std2, [1.0, 1.0]) ** 2 / 2 == pytest.approx(2.0)


def test_density_examples(scalar):
    assert log_gaussian_density(scalar, np.inf, [0.0]) == pytest.approx(-0.5 * math.log(math.pi), abs=1e-12)
    assert log_gaussian_density(scalar, np.inf, [0.0]) == pytest.approx(-0.57236494, abs=1e-8)
    q1 = (1 - math.exp(-2)) / 2
    val = log_gaussian_density(scalar, 1.0, [0.0])
    assert val == pytest.approx(-0.5 * math.log(2 * math.pi * q1), abs=1e-13)
    assert val == pytest.approx(-0.4996582, abs=1e-7)


@pytest.mark.parametrize("t", [0.05, 1.0, np.inf])
def test_density_normalised(scalar, t):
    total, _ = quad(lambda x: math.exp(log_gaussian_density(scalar, t, [x])), -np.inf, np.inf, epsabs=1e-13)
    assert total == pytest.approx(1.0, abs=1e-10)


def test_density_normalised_2d():
    m = random_model(np.random.default_rng(9), 2)
    g = np.linspace(-8, 8, 801) * math.sqrt(np.abs(m.Qinf).max())
    X, Y = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([X, Y], axis=-1)
    dens = np.exp(log_gaussian_density(m, np.inf, pts))
    h = g[1] - g[0]
    assert dens.sum() * h * h == pytest.approx(1.0, abs=1e-8)
    assert np.unravel_index(dens.argmax(), dens.shape) == (400, 400)


# --- polar coordinates -----------------------------------------------------------

def test_polar_scalar_example(scalar):
    p = to_polar(scalar, np.array([2.0]), 1.0)
    assert p.xtilde[0] == pytest.approx(1.0, rel=1e-12)
    assert p.s == pytest.approx(math.log(2.0), rel=1e-12)
    p0 = to_polar(scalar, np.array([1.0]), 1.0)
    assert p0.s == 0.0 and p0.xtilde[0] == 1.0
    assert polar_volume_element(scalar, p0) == pytest.approx(1.0, rel=1e-14)


def test_polar_round_trip_random():
    rng = np.random.default_rng(21)
    for m in models(10, n_max=3, seed=13):
        for _ in range(10):
            x = rng.standard_normal(m.n) * rng.uniform(0.1, 5)
            beta = rng.uniform(0.2, 3.0)
            p = to_polar(m, x, beta)
            assert quad_form_r(m, p.xtilde) == pytest.approx(beta, rel=1e-10)
            np.testing.assert_allclose(from_polar(m, p), x, rtol=1e-9, atol=1e-9 * np.linalg.norm(x))
            assert p.weight > 0


def test_polar_weight_scaling():
    m = random_model(np.random.default_rng(2), 3)
    xt = to_polar(m, np.ones(3), 1.0).xtilde
    w0 = polar_weight(m, 0.0, xt)
    for s in (-1.0, 0.5, 2.0):
        assert polar_weight(m, s, xt) == pytest.approx(w0 * math.exp(-s * np.trace(m.B)), rel=1e-13)


def test_polar_errors(scalar):
    with pytest.raises(ZeroVector):
        to_polar(scalar, np.zeros(1), 1.0)
    with pytest.raises(RootBracketFailure) as info:
        to_polar(scalar, np.array([1e-300]), 1e10)
    assert info.value.bracket is not None


def test_polar_measure_matches_cartesian(std2):
    # int e^{-2R(x)} dx in polar (s, ellipse angle) against a Cartesian grid
    f = lambda X: np.exp(-2.0 * quad_form_r(std2, X))
    g = np.linspace(-4, 4, 801)
    X, Y = np.meshgrid(g, g, indexing="ij")
    cart = f(np.stack([X, Y], axis=-1)).sum() * (g[1] - g[0]) ** 2
    s_nodes, s_w = np.polynomial.legendre.leggauss(80)
    s_nodes, s_w = 6.0 * s_nodes - 2.0, 6.0 * s_w          # s in [-8, 4]
    theta = np.linspace(0, 2 * np.pi, 256, endpoint=False)
    pts, speed = ellipse_param(std2, 1.0, theta)
    total = 0.0
    for s, ws in zip(s_nodes, s_w):
        Xs = pts @ flow_dt(std2, s).T
        total += ws * np.sum(f(Xs) * polar_weight(std2, s, pts) * speed) * (2 * np.pi / 256)
    assert cart == pytest.approx(np.pi / 2, rel=1e-10)
    assert total == pytest.approx(cart, rel=1e-4)


# --- regions ------------------------------------------------------------------------

def test_region_examples(std2):
    assert classify_region(std2, [3.0, 0.0], [3.0, 0.0], 0.1) is Region.LOCAL
    assert classify_region(std2, [0.0, 0.0], [2.0, 0.0], 1.0) is Region.GLOBAL
    assert classify_region(std2, [3.0, 0.0], [3.0, 0.2], 1.0) is Region.LOCAL
    # boundary counts as local
    assert classify_region(std2, [3.0, 0.0], [3.0, 0.25], 1.0) is Region.LOCAL
    with pytest.raises(ValueError):
        classify_region(std2, [0.0, 0.0], [1.0, 0.0], 0.0)


# --- properties ---------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 4),
       s=st.floats(-3, 3), t=st.floats(-3, 3))
def test_property_group_law(seed, n, s, t):
    m = random_model(np.random.default_rng(seed), n)
    lhs = flow_dt(m, s) @ flow_dt(m, t)
    rhs = flow_dt(m, s + t)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9 * max(1.0, np.abs(rhs).max()))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 3),
       t=st.floats(1e-5, 60, allow_nan=False))
def test_property_qt_between_zero_and_qinf(seed, n, t):
    m = random_model(np.random.default_rng(seed), n)
    c = covariance_qt(m, t)
    assert np.linalg.eigvalsh(c.Qt).min() > 0
    assert np.linalg.eigvalsh(m.Qinf - c.Qt).min() >= -1e-12 * np.abs(m.Qinf).max()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 3),
       scale=st.floats(0.05, 8), beta=st.floats(0.1, 5))
def test_property_polar_round_trip(seed, n, scale, beta):
    rng = np.random.default_rng(seed)
    m = random_model(rng, n)
    x = scale * rng.standard_normal(n)
    p = to_polar(m, x, beta)
    np.testing.assert_allclose(from_polar(m, p), x, rtol=1e-9, atol=1e-9 * np.linalg.norm(x))
