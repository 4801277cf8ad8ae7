"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The verdict lines are repeated in the "acceptance criteria" section of the
pytest terminal summary.
"""
import filecmp
import json
import math

import numpy as np
import pytest

from conftest import models
from ouriesz import random_model, standard_model
from ouriesz.cli import main
from ouriesz.gauss_core import covariance_qt, flow_dt, flow_dt_forms
from ouriesz.harness.counterexample import counterexample_run
from ouriesz.harness.estimates import Sampler, catalog_ids, estimate_probe
from ouriesz.harness.weaktype import PolarGrid, weak_type_profile
from ouriesz.mehler import delta_matrix, eval_dalpha_log, expand_dalpha, log_mehler, p_vector
from ouriesz.riesz import RieszKernelConfig, apply_riesz
from ouriesz.semigroup import (
    Poly,
    QuadSettings,
    TestFunction,
    apply_semigroup,
    eigenfunction_specs,
    mean_under_gamma_inf,
    riesz_potential_on_eigenfunction,
    semigroup_poly,
)

pytestmark = pytest.mark.acceptance


def random_poly(rng, n, degree, terms=8):
    coeffs = {}
    for _ in range(terms):
        k = [0] * n
        for j in rng.integers(0, n, size=rng.integers(0, degree + 1)):
            k[j] += 1
        coeffs[tuple(k)] = coeffs.get(tuple(k), 0.0) + rng.normal()
    return Poly(n, coeffs)


# 1 -----------------------------------------------------------------------------------

def test_criterion_01_model_algebra(criterion):
    rng = np.random.default_rng(101)
    res = forms = group = 0.0
    for m in models(50, n_max=4, seed=101):
        res = max(res, m.lyapunov_residual())
        for t in (1e-3, 0.1, 1.0, 5.0):
            a, b, c = flow_dt_forms(m, t)
            scale = np.abs(a).max()
            forms = max(forms, np.abs(b - a).max() / scale, np.abs(c - a).max() / scale)
        s, t = rng.uniform(-2, 2, 2)
        lhs, rhs = flow_dt(m, s) @ flow_dt(m, t), flow_dt(m, s + t)
        group = max(group, np.abs(lhs - rhs).max() / np.abs(rhs).max())
    ok = res <= 1e-10 and forms <= 1e-9 and group <= 1e-10
    criterion(1, ok, f"lyapunov residual {res:.1e}, D_t forms {forms:.1e}, group law {group:.1e}")
    assert ok


# 2 -----------------------------------------------------------------------------------

def test_criterion_02_scalar_closed_forms(criterion):
    m = standard_model(1)
    e2 = math.exp(-2)
    errs = [
        abs(m.Qinf[0, 0] - 0.5),
        abs(covariance_qt(m, 1.0).Qt[0, 0] - (1 - e2) / 2) / ((1 - e2) / 2),
        abs(flow_dt(m, 1.0)[0, 0] - math.e) / math.e,
        abs(delta_matrix(m, 1.0)[0, 0] + 2 * e2 / (1 - e2)) / (2 * e2 / (1 - e2)),
    ]
    ok = max(errs) <= 1e-12
    criterion(2, ok, "max relative error %.1e over Q_inf, Q_1, D_1, Delta(1)" % max(errs))
    assert ok


# 3 -----------------------------------------------------------------------------------

def _fd_ratio(m, t, x, u, alpha, j, h):
    """Central difference in ``x_j`` of ``D^{alpha - e_j} K_t / K_t(x)`` and the
    analytic ``D^alpha K_t / K_t(x)``, with the absolute ledger sum as scale."""
    ref = log_mehler(m, t, x, u).logmag
    lower = list(alpha)
    lower[j] -= 1
    e = np.zeros(m.n)
    e[j] = h
    if sum(lower) == 0:
        g = lambda y: math.exp(log_mehler(m, t, y, u).logmag - ref)
    else:
        led = expand_dalpha(lower)
        g = lambda y: eval_dalpha_log(m, led, t, y, u).scaled(-ref).value()
    fd = (g(x + e) - g(x - e)) / (2 * h)
    led = expand_dalpha(alpha)
    exact = eval_dalpha_log(m, led, t, x, u).scaled(-ref).value()
    P, D = p_vector(m, t, x, u), delta_matrix(m, t)
    scale = sum(abs(term.coeff) * np.prod(np.abs(P[list(term.p_indices)]))
                * np.prod([abs(D[a, b]) for a, b in term.delta_pairs]) for term in led.terms)
    return fd, exact, scale


def test_criterion_03_ledger_vs_finite_differences(criterion):
    rng = np.random.default_rng(303)
    pool = models(20, n_max=2, seed=303)
    alphas = {1: [(1,), (2,), (3,)], 2: [(1, 0), (0, 1), (2, 0), (1, 1), (0, 2), (3, 0), (2, 1), (1, 2), (0, 3)]}
    worst = 0.0
    for k in range(1000):
        m = pool[k % len(pool)]
        alpha = alphas[m.n][rng.integers(len(alphas[m.n]))]
        t = rng.uniform(0.05, 5.0)
        x, u = rng.normal(scale=1.5, size=(2, m.n))
        j = int(np.flatnonzero(alpha)[rng.integers(np.count_nonzero(alpha))])
        fd, exact, scale = _fd_ratio(m, t, x, u, alpha, j, 1e-5 * (1 + np.linalg.norm(x)))
        worst = max(worst, abs(fd - exact) / scale)
    ok = worst <= 1e-5
    criterion(3, ok, f"max relative error {worst:.1e} over 1000 points, |alpha| <= 3, n <= 2")
    assert ok


# 4 -----------------------------------------------------------------------------------

def test_criterion_04_semigroup_laws(criterion):
    rng = np.random.default_rng(404)
    inv = ck = 0.0
    for m in models(9, n_max=3, seed=404):
        p = random_poly(rng, m.n, 4)
        f = TestFunction.polynomial(p)
        mean = mean_under_gamma_inf(m, f)
        for t in (0.1, 1.0, 5.0):
            # gamma_inf-mean of H_t f by Gauss-Hermite quadrature over gamma_inf
            h = TestFunction.callable(lambda X, t=t: semigroup_poly(m, t, p)(X), m.n)
            inv = max(inv, abs(mean_under_gamma_inf(m, h) - mean) / (1 + abs(mean)))
        for s in (0.2, 1.0):
            for t in (0.2, 1.0):
                x = rng.normal(size=m.n)
                inner = TestFunction.polynomial(semigroup_poly(m, t, p))
                lhs = apply_semigroup(m, s, inner, x).value
                rhs = apply_semigroup(m, s + t, f, x).value
                ck = max(ck, abs(lhs - rhs) / (1 + abs(rhs)))
    ok = inv <= 1e-6 and ck <= 1e-6
    criterion(4, ok, f"invariance {inv:.1e}, Chapman-Kolmogorov {ck:.1e} (degree <= 4, n <= 3)")
    assert ok


# 5 -----------------------------------------------------------------------------------

def test_criterion_05_potential_on_eigenfunctions(criterion):
    rng = np.random.default_rng(505)
    # f_v is linear, so 4 Gauss-Hermite nodes per axis integrate H_t f_v exactly
    quad = QuadSettings(gh_order=4)
    worst, count, seed = 0.0, 0, 0
    while count < 20:
        m = random_model(np.random.default_rng([505, seed]), 1 + seed % 3)
        seed += 1
        specs = eigenfunction_specs(m)
        if not specs:
            continue
        count += 1
        spec = specs[0]
        x = rng.normal(size=m.n)
        fx = spec.function()(x)
        for a in (0.5, 1.0, 1.5):
            got = riesz_potential_on_eigenfunction(m, spec, a, x, quad)
            expect = (-spec.lambda_b) ** (-a) * fx
            worst = max(worst, abs(got - expect) / abs(expect))
    ok = worst <= 1e-8
    criterion(5, ok, f"max relative error {worst:.1e} over 20 models, a in {{1/2, 1, 3/2}}")
    assert ok


# 6 -----------------------------------------------------------------------------------

def test_criterion_06_spectral_identities(criterion):
    m = standard_model(1)
    f1 = TestFunction.polynomial(Poly(1, {(1,): 1.0}))
    f2 = TestFunction.polynomial(Poly(1, {(2,): 1.0, (0,): -0.5}))
    err = 0.0
    for x in np.linspace(-4, 4, 17):
        err = max(err, abs(apply_riesz(m, [1], f1, [x]).spectral - 1.0),
                  abs(apply_riesz(m, [2], f2, [x]).spectral - 1.0))
    ok = err <= 1e-10
    criterion(6, ok, f"R_1 x = 1 and R_11 (x^2 - 1/2) = 1 to {err:.1e}")
    assert ok


# 7 -----------------------------------------------------------------------------------

def test_criterion_07_estimate_catalog(criterion):
    ss = np.random.SeedSequence(707)
    failures, fitted, n_checks = [], [], 0
    for k, child in enumerate(ss.spawn(5)):
        m = random_model(np.random.default_rng(child), 1 + k % 3)
        for A in (1.0, 4.0):
            for eid in catalog_ids():
                rep = estimate_probe(m, eid, Sampler(A=A), n_samples=1000, seed=k)
                n_checks += 1
                fitted.append((rep.fitted_lower, rep.fitted_upper))
                if rep.violations or not (math.isfinite(rep.fitted_lower) and math.isfinite(rep.fitted_upper)):
                    failures.append((k, A, eid, rep.violations))
    ok = not failures
    criterion(7, ok, f"{n_checks} probes (5 models, A in {{1, 4}}, 1000 samples), failures: {failures[:5]}")
    assert ok


# 8 -----------------------------------------------------------------------------------

def test_criterion_08_weak_type_dichotomy(criterion):
    m = standard_model(1)
    bands = {1: (-0.3, 0.3), 2: (-0.3, 0.3), 3: (0.7, 1.3)}
    slopes = {}
    for order in (1, 2, 3):
        prof = weak_type_profile(m, [order], range(4, 13), integration=PolarGrid())
        slopes[order] = prof.fit_slope
    ok = all(lo <= slopes[k] <= hi for k, (lo, hi) in bands.items())
    detail = ", ".join(f"alpha={k}: slope {slopes[k]:.4f} in [{lo}, {hi}]" for k, (lo, hi) in bands.items())
    criterion(8, ok, detail)
    assert ok


# 9 -----------------------------------------------------------------------------------

def test_criterion_09_counterexample_internals(criterion):
    m = standard_model(1)
    cfg = RieszKernelConfig()
    base = counterexample_run(m, [3], cfg=cfg)
    fine = counterexample_run(m, [3], cfg=cfg.refined(2))
    var = max(abs(b / a - 1) for a, b in zip(base.floors, fine.floors))
    lo, hi = base.box_band
    ok = base.positive and var < 0.2 and lo > 0 and hi / lo <= 4.0
    criterion(9, ok, f"floor change under 2x time density {var:.1e}; box band [{lo:.4f}, {hi:.4f}]")
    assert ok


# 10 ----------------------------------------------------------------------------------

def test_criterion_10_cli_determinism(criterion, tmp_path):
    poly = tmp_path / "p.json"
    poly.write_text(json.dumps({"n": 1, "terms": [[[1], 1.0]]}))
    poly2 = tmp_path / "p2.json"
    poly2.write_text(json.dumps({"n": 2, "terms": [[[2, 0], 1.0], [[0, 1], -0.5]]}))
    campaigns = {
        "verify": ["verify", "--model", "random:2:5", "--suite", "kernel.small_time.upper", "--samples", "300",
                   "--seed", "3"],
        "weaktype": ["weaktype", "--alpha", "2", "--etas", "4,6", "--mode", "mc", "--points", "20000", "--seed", "3"],
        "counterexample": ["counterexample", "--alpha", "3", "--etas", "6,8", "--seed", "3"],
    }
    files = {"verify": "estimates.csv", "weaktype": "weaktype.csv", "counterexample": "counterexample.csv"}
    evaluators = {
        "kernel-eval": ["kernel-eval", "--model", "random:2:1", "--t", "0.7", "--x", "0.3,1", "--u=-1,2",
                        "--alpha", "1,2"],
        "semigroup-eval": ["semigroup-eval", "--model", "random:2:1", "--t", "0.5", "--x=1,-1", "--poly", str(poly2)],
        "riesz-kernel": ["riesz-kernel", "--alpha", "1", "--x", "1", "--u", "2"],
        "riesz-apply": ["riesz-apply", "--alpha", "1", "--poly", str(poly), "--x-grid", "0;1.5"],
    }
    same = {}
    for name, argv in campaigns.items():
        outs = []
        for run in (1, 2):
            d = tmp_path / f"{name}{run}"
            main(argv + ["--out", str(d), "--quiet"])
            outs.append(d / files[name])
        same[name] = filecmp.cmp(outs[0], outs[1], shallow=False) and outs[0].read_bytes() != b""
        same[name + "/manifest"] = filecmp.cmp(outs[0].parent / "manifest.json", outs[1].parent / "manifest.json",
                                               shallow=False)
    for name, argv in evaluators.items():
        outs = []
        for run in (1, 2):
            path = tmp_path / f"{name}{run}.csv"
            assert main(argv + ["--out", str(path)]) == 0
            outs.append(path)
        same[name] = filecmp.cmp(outs[0], outs[1], shallow=False)
    ok = all(same.values())
    criterion(10, ok, "byte-identical reruns: " + ", ".join(k for k, v in same.items() if v)
              + ("" if ok else "; differing: " + ", ".join(k for k, v in same.items() if not v)))
    assert ok
