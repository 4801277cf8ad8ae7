"""Sampled two-sided and one-sided estimates with fitted constants.

Every catalog entry turns an inequality ``lhs <~ rhs`` (or a two-sided
``lhs ~ rhs``) into a ratio ``lhs / rhs`` evaluated on a random cloud.  The
probe reports the smallest and largest ratio seen; a sample counts as a
violation when its ratio is not finite, or is not positive for two-sided
entries, or exceeds the tolerance for exact identities.

Exponential rates that the inequalities leave unspecified (``e^{cs}``,
``exp(-c|v|^2/t)``) are fixed per model before sampling, from the spectrum of
``B`` or from a scan of ``Q_t`` over a time grid, so the fitted numbers are
pure multiplicative constants.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla

from ..errors import DegenerateSample, UnknownEstimate
from ..gauss_core import CovCache, OUModel, cov_stack, flow_dt_batch, quad_form_r
from ..mehler import log_kernel_batch, p_batch
from ..quadrature import adaptive_log_integral, scan_support
from ..riesz import CutoffEta, RieszKernelConfig, cutoff_gradient, eval_cutoff, riesz_kernel_batch

__all__ = [
    "Sampler",
    "Estimate",
    "EstimateReport",
    "CATALOG",
    "catalog_ids",
    "estimate_probe",
    "model_rates",
    "cz_approach_sequence",
]

LARGE_T_MAX = 100.0


@dataclass(frozen=True)
class Sampler:
    """Sampling domain overrides.

    ``scale_range`` multiplies every draw from ``gamma_inf`` by a log-uniform
    factor so that both small and large ``|x|`` are visited.  ``t_range``
    replaces the entry's own time range when given.  ``A`` is the local-region
    parameter used by the cutoff and Calderon-Zygmund entries.
    """

    t_range: tuple[float, float] | None = None
    scale_range: tuple[float, float] = (0.3, 3.0)
    A: float = 1.0
    near_range: tuple[float, float] = (1e-4, 1.0)


@dataclass
class EstimateReport:
    estimate_id: str
    n_samples: int
    fitted_lower: float
    fitted_upper: float
    violations: int
    worst_ratio_points: list = field(default_factory=list)
    statement: str = ""

    @property
    def passed(self) -> bool:
        return self.violations == 0


@dataclass(frozen=True)
class Estimate:
    """One catalog entry: ``evaluate(ctx, rng, n)`` returns a dict with ``ratio``
    and the sample coordinates (``x``, ``u``, ``t`` as available)."""

    estimate_id: str
    statement: str
    kind: str  # "upper", "equiv" or "identity"
    evaluate: Callable
    domain: str = ""
    identity_tol: float = 1e-6


# ---------------------------------------------------------------------------
# per-model constants and sampling helpers
# ---------------------------------------------------------------------------

def model_rates(model: OUModel) -> tuple[float, float]:
    """Smallest and largest decay rate ``-Re(lambda)`` over the spectrum of ``B``."""
    r = -np.linalg.eigvals(model.B).real
    return float(r.min()), float(r.max())


@dataclass
class _Context:
    model: OUModel
    sampler: Sampler
    cache: CovCache
    cfg: RieszKernelConfig
    _consts: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.model.n

    def const(self, name):
        if not self._consts:
            self._consts.update(_fit_rates(self.model))
        return self._consts[name]


def _fit_rates(model: OUModel) -> dict:
    r_min, r_max = model_rates(model)
    out = {"c": 0.5 * r_min, "C": r_max + 0.5 * r_min, "decay": r_min}
    ts = np.logspace(-6, 0, 121)
    st = cov_stack(model, ts)
    ev = np.linalg.eigvalsh(ts[:, None, None] * st["Dt_diff_inv"])
    out["kernel_c"] = 0.45 * float(ev[:, 0].min())
    out["kernel_C"] = 0.55 * float(ev[:, -1].max())
    tl = np.logspace(0, 2, 81)
    st = cov_stack(model, tl)
    L = model.Qinf_sqrt
    ev = np.linalg.eigvalsh(L.T[None] @ st["G"] @ L[None])
    out["kernel_C_large"] = 0.55 * float(ev[:, -1].max())
    return out


def _log_uniform(rng, size, lo, hi):
    return np.exp(rng.uniform(math.log(lo), math.log(hi), size))


def _gamma_draw(ctx, rng, N):
    z = rng.standard_normal((N, ctx.n))
    rho = _log_uniform(rng, N, *ctx.sampler.scale_range)
    return (z @ ctx.model.Qinf_sqrt.T) * rho[:, None]


def _sphere(rng, N, n):
    v = rng.standard_normal((N, n))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _times(ctx, rng, N, default):
    lo, hi = ctx.sampler.t_range or default
    return _log_uniform(rng, N, lo, hi)


def _norm(v):
    return np.linalg.norm(v, axis=-1)


def _require_nonzero(X):
    if np.any(_norm(X) == 0):
        raise DegenerateSample("x = 0 is not allowed for this estimate")


def _apply(M, X):
    """Row-wise ``M_p x_p`` for stacked matrices ``M`` (N, n, n)."""
    return np.einsum("pij,pj->pi", M, X)


def _near_pairs(ctx, rng, N, local=False):
    """Pairs with ``|u - x|`` spread over many scales; inside ``L_{2A}`` when ``local``."""
    X = _gamma_draw(ctx, rng, N)
    lo, hi = ctx.sampler.near_range
    frac = _log_uniform(rng, N, lo, hi)
    if local:
        d = frac * 2.0 * ctx.sampler.A / (1.0 + _norm(X))
    else:
        d = frac
    U = X + d[:, None] * _sphere(rng, N, ctx.n)
    return X, U


def _mixed_pairs(ctx, rng, N):
    """Half near-diagonal pairs, half independent draws from ``gamma_inf``."""
    k = N // 2
    X1, U1 = _near_pairs(ctx, rng, k)
    X2 = _gamma_draw(ctx, rng, N - k)
    U2 = _gamma_draw(ctx, rng, N - k)
    return np.vstack([X1, X2]), np.vstack([U1, U2])


# time integrals of sign/log integrands over tau = log t ---------------------

def _tau_integral(func, lo, hi, npts, rel_tol=1e-5):
    left, right, _ = scan_support(func, lo, hi, npts, step=0.1, margin=40.0)
    if right <= left:
        return np.zeros(npts), np.full(npts, -np.inf)
    res = adaptive_log_integral(func, left, right, npts, rel_tol=rel_tol, panel_width=0.5, order=10)
    return res.sign, res.logmag


def _small_tau_lo(X, U):
    d = max(float(_norm(X - U).min()), 1e-12)
    return min(-30.0, 2.0 * math.log(d) - 12.0)


def _dt_apply(model, ts, X):
    """``D_t x_p`` for every time and point, shape (nt, npts, n)."""
    D = flow_dt_batch(model, ts)
    return np.einsum("tij,pj->tpi", D, X)


# ---------------------------------------------------------------------------
# flow bounds
# ---------------------------------------------------------------------------

def _family(model, name, s):
    """Stacked ``F(s)`` for the three flows that obey exponential two-sided bounds."""
    s = np.atleast_1d(s)
    if name == "flow":
        return flow_dt_batch(model, s)
    if name == "exp_minus_sB":
        return sla.expm(-s[:, None, None] * model.B)
    return sla.expm(-s[:, None, None] * model.B.T)


def _flow_entry(name, direction, side):
    sign = 1.0 if direction == "growth" else -1.0

    def ev(ctx, rng, N):
        X = _gamma_draw(ctx, rng, N)
        _require_nonzero(X)
        s = _times(ctx, rng, N, (1e-3, 8.0))
        Fx = _norm(_apply(_family(ctx.model, name, sign * s), X))
        nx = _norm(X)
        c, C = ctx.const("c"), ctx.const("C")
        if direction == "growth":
            lower_env, upper_env = np.exp(c * s), np.exp(C * s)
        else:
            lower_env, upper_env = np.exp(-C * s), np.exp(-c * s)
        if side == "lower":
            ratio = lower_env * nx / Fx
        else:
            ratio = Fx / (upper_env * nx)
        return {"ratio": ratio, "x": X, "t": s}

    label = {"flow": "D", "exp_minus_sB": "e^{-.B}", "exp_minus_sBT": "e^{-.B^T}"}[name]
    arg = "s" if direction == "growth" else "-s"
    if side == "lower":
        stmt = (f"e^{{cs}}|x| <~ |{label}_{{{arg}}} x|" if direction == "growth"
                else f"e^{{-Cs}}|x| <~ |{label}_{{{arg}}} x|")
    else:
        stmt = (f"|{label}_{{{arg}}} x| <~ e^{{Cs}}|x|" if direction == "growth"
                else f"|{label}_{{{arg}}} x| <~ e^{{-cs}}|x|")
    return Estimate(f"{name}.{direction}.{side}", stmt + ", s > 0", "upper", ev,
                    domain="x ~ gamma_inf (scaled), s log-uniform on [1e-3, 8]")


# ---------------------------------------------------------------------------
# covariance scalings
# ---------------------------------------------------------------------------

def _cov_entry(which):
    def ev(ctx, rng, N):
        t = _times(ctx, rng, N, (1e-4, 50.0))
        st = ctx.cache.stack(t)
        m = np.minimum(1.0, t)
        n = ctx.n
        if which == "det":
            ratio = np.exp(st["Qt_logdet"] - n * np.log(m))
        elif which == "inv_norm":
            ratio = np.linalg.norm(st["Qt_inv"], 2, axis=(1, 2)) * m
        elif which == "gap":
            ratio = np.linalg.norm(st["Dt_diff_inv"], 2, axis=(1, 2)) * t * np.exp(ctx.const("decay") * t)
        else:
            # (Q_t^{-1} - Q_inf^{-1})^{-1} = Q_inf e^{-tB^T} Q_inf^{-1} e^{-tB} Q_t, free of cancellation
            model = ctx.model
            einv = sla.expm(-t[:, None, None] * model.B)
            inv = model.Qinf[None] @ np.swapaxes(einv, 1, 2) @ model.Qinf_inv[None] @ einv @ st["Qt"]
            ratio = np.sqrt(np.linalg.norm(inv, 2, axis=(1, 2))) / (np.sqrt(t) * np.exp(ctx.const("C") * t))
        return {"ratio": ratio, "t": t}

    stmts = {
        "det": ("covariance.det_scaling", "det Q_t ~ min(1,t)^n", "equiv"),
        "inv_norm": ("covariance.inverse_norm_scaling", "||Q_t^{-1}|| ~ min(1,t)^{-1}", "equiv"),
        "gap": ("covariance.inverse_gap_decay", "||Q_t^{-1} - Q_inf^{-1}|| <~ t^{-1} e^{-ct}", "upper"),
        "gap_sqrt": ("covariance.inverse_gap_root_growth",
                     "||(Q_t^{-1} - Q_inf^{-1})^{-1/2}|| <~ t^{1/2} e^{Ct}", "upper"),
    }
    eid, stmt, kind = stmts[which]
    return Estimate(eid, stmt, kind, ev, domain="t log-uniform on [1e-4, 50]")


# ---------------------------------------------------------------------------
# flow derivative and displacement estimates
# ---------------------------------------------------------------------------

def _velocity(model, s, X):
    """``d/ds D_s x = -Q_inf e^{-sB^T} B^T Q_inf^{-1} x`` row-wise."""
    E = sla.expm(-s[:, None, None] * model.B.T)
    M = model.Qinf[None] @ E @ (model.B.T @ model.Qinf_inv)[None]
    return -_apply(M, X)


def _ev_velocity_identity(ctx, rng, N):
    X = _gamma_draw(ctx, rng, N)
    s = rng.uniform(-3.0, 3.0, N)
    h = 1e-5
    fd = (_apply(flow_dt_batch(ctx.model, s + h), X) - _apply(flow_dt_batch(ctx.model, s - h), X)) / (2 * h)
    exact = _velocity(ctx.model, s, X)
    return {"ratio": _norm(fd - exact) / _norm(exact), "x": X, "t": s}


def _ev_r_speed(ctx, rng, N):
    X = _gamma_draw(ctx, rng, N)
    _require_nonzero(X)
    s = rng.uniform(-5.0, 5.0, N)
    Dx = _apply(flow_dt_batch(ctx.model, s), X)
    dR = np.einsum("pi,ij,pj->p", Dx, ctx.model.Qinf_inv, _velocity(ctx.model, s, X))
    return {"ratio": dR / _norm(Dx) ** 2, "x": X, "t": s}


def _ev_velocity_size(ctx, rng, N):
    X = _gamma_draw(ctx, rng, N)
    _require_nonzero(X)
    s = rng.uniform(-1.0, 1.0, N)
    return {"ratio": _norm(_velocity(ctx.model, s, X)) / _norm(X), "x": X, "t": s}


def _signed_small_times(ctx, rng, N):
    t = _times(ctx, rng, N, (1e-4, 1.0))
    return t * rng.choice([-1.0, 1.0], N)


def _ev_r_increment(ctx, rng, N):
    X = _gamma_draw(ctx, rng, N)
    _require_nonzero(X)
    t = _signed_small_times(ctx, rng, N)
    Dx = _apply(flow_dt_batch(ctx.model, t), X)
    num = np.abs(quad_form_r(ctx.model, Dx) - quad_form_r(ctx.model, X))
    return {"ratio": num / (np.abs(t) * _norm(X) ** 2), "x": X, "t": t}


def _ev_displacement(ctx, rng, N):
    X = _gamma_draw(ctx, rng, N)
    _require_nonzero(X)
    t = _signed_small_times(ctx, rng, N)
    Dx = _apply(flow_dt_batch(ctx.model, t), X)
    return {"ratio": _norm(X - Dx) / (np.abs(t) * _norm(X)), "x": X, "t": t}


def _ev_r_dominance(ctx, rng, N):
    X = _gamma_draw(ctx, rng, N)
    _require_nonzero(X)
    Y = _gamma_draw(ctx, rng, N)
    frac = rng.uniform(0.0, 1.0, N)
    # rescale y so that R(y) = frac * R(x) / 2 < R(x) / 2
    Rx, Ry = quad_form_r(ctx.model, X), quad_form_r(ctx.model, Y)
    Y = Y * np.sqrt(frac * Rx / (2.0 * Ry))[:, None]
    return {"ratio": quad_form_r(ctx.model, X - Y) / Rx, "x": X, "u": Y}


# ---------------------------------------------------------------------------
# Mehler kernel bounds
# ---------------------------------------------------------------------------

def _small_time_cloud(ctx, rng, N):
    X = _gamma_draw(ctx, rng, N)
    t = _times(ctx, rng, N, (1e-4, 1.0))
    Dx = _apply(flow_dt_batch(ctx.model, t), X)
    spread = _log_uniform(rng, N, 0.1, 5.0)
    U = Dx + np.sqrt(t)[:, None] * spread[:, None] * rng.standard_normal((N, ctx.n))
    return X, U, t, Dx


def _diag_log_kernel(ctx, t, X, U):
    """``log K_{t_p}(x_p, u_p)`` (one time per pair)."""
    st = ctx.cache.stack(t)
    w = _apply(st["D_minus_shift"], U) + (U - X)
    quad = np.einsum("pi,pij,pj->p", w, st["G"], w)
    return 0.5 * (ctx.model.Qinf_logdet - st["Qt_logdet"]) + quad_form_r(ctx.model, X) - 0.5 * quad, st


def _kernel_small_entry(side):
    def ev(ctx, rng, N):
        X, U, t, Dx = _small_time_cloud(ctx, rng, N)
        lk, _ = _diag_log_kernel(ctx, t, X, U)
        v2 = _norm(U - Dx) ** 2
        base = quad_form_r(ctx.model, X) - 0.5 * ctx.n * np.log(t)
        if side == "upper":
            ratio = np.exp(lk - base + ctx.const("kernel_c") * v2 / t)
        else:
            ratio = np.exp(base - ctx.const("kernel_C") * v2 / t - lk)
        return {"ratio": ratio, "x": X, "u": U, "t": t}

    stmt = ("K_t(x,u) <~ e^{R(x)} t^{-n/2} exp(-c|u - D_t x|^2/t), 0 < t <= 1" if side == "upper"
            else "e^{R(x)} t^{-n/2} exp(-C|u - D_t x|^2/t) <~ K_t(x,u), 0 < t <= 1")
    return Estimate(f"kernel.small_time.{side}", stmt, "upper", ev,
                    domain="x ~ gamma_inf, t log-uniform on [1e-4, 1], u = D_t x + sqrt(t) * spread * N(0, I)")


def _large_time_cloud(ctx, rng, N):
    """Half the pairs put ``D_{-t}u`` near ``x`` (times up to 5 so ``|u|`` stays
    representable to full relative accuracy), half draw ``u`` from ``gamma_inf``."""
    X = _gamma_draw(ctx, rng, N)
    k = N // 2
    t = np.concatenate([_times(ctx, rng, k, (1.0, 5.0)), _times(ctx, rng, N - k, (1.0, 30.0))])
    Z = X[:k] + _log_uniform(rng, k, 0.1, 5.0)[:, None] * rng.standard_normal((k, ctx.n))
    U = np.vstack([_apply(flow_dt_batch(ctx.model, t[:k]), Z), _gamma_draw(ctx, rng, N - k)])
    Z = _apply(ctx.cache.stack(t)["D_minus"], U)
    return X, U, t, Z


def _kernel_large_entry(side):
    def ev(ctx, rng, N):
        X, U, t, Z = _large_time_cloud(ctx, rng, N)
        lk, _ = _diag_log_kernel(ctx, t, X, U)
        qw = 2.0 * quad_form_r(ctx.model, Z - X)
        Rx = quad_form_r(ctx.model, X)
        if side == "upper":
            ratio = np.exp(lk - Rx + 0.5 * qw)
        else:
            ratio = np.exp(Rx - ctx.const("kernel_C_large") * qw - lk)
        return {"ratio": ratio, "x": X, "u": U, "t": t}

    stmt = ("K_t(x,u) <~ e^{R(x)} exp(-|D_{-t}u - x|_Q^2 / 2), t >= 1" if side == "upper"
            else "e^{R(x)} exp(-C|D_{-t}u - x|_Q^2) <~ K_t(x,u), t >= 1")
    return Estimate(f"kernel.large_time.{side}", stmt, "upper", ev,
                    domain="x ~ gamma_inf; half: t in [1, 5], D_{-t}u = x + spread * N(0, I); "
                           "half: t in [1, 30], u ~ gamma_inf")


def _ev_p_small(ctx, rng, N):
    X, U, t, Dx = _small_time_cloud(ctx, rng, N)
    st = ctx.cache.stack(t)
    w = _apply(st["D_minus_shift"], U) + (U - X)
    P = -_apply(st["Delta"], w) + (U + w - X) @ ctx.model.Qinf_inv
    rhs = _norm(X) + _norm(U - Dx) / t
    return {"ratio": np.max(np.abs(P), axis=1) / rhs, "x": X, "u": U, "t": t}


def _ev_p_large(ctx, rng, N):
    X, U, t, Z = _large_time_cloud(ctx, rng, N)
    st = ctx.cache.stack(t)
    w = Z - X
    P = -_apply(st["Delta"], w) + Z @ ctx.model.Qinf_inv
    rhs = np.exp(-ctx.const("decay") * t) * _norm(w) + _norm(Z)
    return {"ratio": np.max(np.abs(P), axis=1) / rhs, "x": X, "u": U, "t": t}


def _ev_delta(ctx, rng, N):
    t = _times(ctx, rng, N, (1e-4, 50.0))
    st = ctx.cache.stack(t)
    big = np.max(np.abs(st["Delta"]), axis=(1, 2))
    return {"ratio": big * np.minimum(1.0, t) * np.exp(ctx.const("decay") * t), "t": t}


# ---------------------------------------------------------------------------
# small-t parts of the Riesz kernels
# ---------------------------------------------------------------------------

def _random_alpha(rng, N, n, order):
    idx = rng.integers(0, n, size=(N, order))
    if order == 2:
        idx = np.sort(idx, axis=1)
    return idx


def _alpha_from(idx, n):
    a = [0] * n
    for i in idx:
        a[int(i)] += 1
    return tuple(a)


def _grouped_parts(ctx, idx, X, U):
    """Both time parts of ``R_alpha`` with a per-sample multiindex."""
    N = X.shape[0]
    out = np.zeros((2, 2, N))
    keys = [tuple(r) for r in idx]
    for key in sorted(set(keys)):
        sel = np.array([k == key for k in keys])
        alpha = _alpha_from(key, ctx.n)
        _, (s0, l0), (s1, l1) = riesz_kernel_batch(ctx.model, alpha, X[sel], U[sel], ctx.cfg, ctx.cache)
        out[0, 0, sel], out[0, 1, sel] = s0, l0
        out[1, 0, sel], out[1, 1, sel] = s1, l1
    return out


def _small_part_rhs(ctx, X, U, order):
    """``e^{R(x)} int_0^1 t^{-a} exp(-c|u - D_t x|^2/t) (|x|^k + t^{-k/2}) dt`` in log form."""
    n = ctx.n
    c = 0.5 * ctx.const("kernel_c")
    a = (n + 1) / 2.0 if order == 1 else n / 2.0
    lognx = np.log(_norm(X))
    model = ctx.model

    def func(taus):
        ts = np.exp(taus)
        Dx = _dt_apply(model, ts, X)
        v2 = np.sum((U[None] - Dx) ** 2, axis=-1)
        extra = np.logaddexp(order * lognx[None, :], -0.5 * order * taus[:, None])
        lg = (1.0 - a) * taus[:, None] - c * v2 / ts[:, None] + extra
        return np.ones_like(lg), lg

    s, l = _tau_integral(func, _small_tau_lo(X, U), 0.0, X.shape[0])
    return l + quad_form_r(model, X)


def _small_part_entry(order):
    def ev(ctx, rng, N):
        X, U = _mixed_pairs(ctx, rng, N)
        _require_nonzero(X)
        idx = _random_alpha(rng, N, ctx.n, order)
        parts = _grouped_parts(ctx, idx, X, U)
        lhs = np.where(parts[0, 0] != 0, parts[0, 1], -np.inf)
        ratio = np.exp(lhs - _small_part_rhs(ctx, X, U, order))
        return {"ratio": ratio, "x": X, "u": U}

    if order == 1:
        stmt = "|R_{j,0}(x,u)| <~ e^{R(x)} int_0^1 t^{-(n+1)/2} exp(-c|u-D_t x|^2/t)(|x| + t^{-1/2}) dt"
    else:
        stmt = "|R_{ij,0}(x,u)| <~ e^{R(x)} int_0^1 t^{-n/2} exp(-c|u-D_t x|^2/t)(|x|^2 + 1/t) dt"
    return Estimate(f"riesz.small_time_part.order{order}", stmt, "upper", ev,
                    domain="half near-diagonal pairs (|u-x| log-uniform), half independent gamma_inf pairs")


# ---------------------------------------------------------------------------
# large-t integrals
# ---------------------------------------------------------------------------

def _large_pairs(ctx, rng, N):
    X = _gamma_draw(ctx, rng, N)
    U = _gamma_draw(ctx, rng, N) * _log_uniform(rng, N, 1.0, 10.0)[:, None]
    return X, U


def _large_integral(ctx, X, U, integrand_log):
    """``int_1^T (...) dt`` via ``tau = log t``; ``integrand_log(st, X, U) -> (sign, log)``."""
    def func(taus):
        st = ctx.cache.stack(np.exp(taus))
        s, l = integrand_log(st, X, U)
        return s, l + taus[:, None]

    # |P_j| has kinks where P_j changes sign; a bound check needs only a few digits
    return _tau_integral(func, 0.0, math.log(LARGE_T_MAX), X.shape[0], rel_tol=1e-4)


def _log_norm_rows(V):
    with np.errstate(divide="ignore"):
        return np.log(np.linalg.norm(V, axis=-1))


def _flow_moment_entry(sigma):
    def ev(ctx, rng, N):
        X, U = _large_pairs(ctx, rng, N)
        model = ctx.model

        def integ(st, X, U):
            DU = np.einsum("tij,pj->tpi", st["D_minus"], U)
            w = DU - X[None]
            qw = np.einsum("tpi,ij,tpj->tp", w, model.Qinf_inv, w)
            lg = -0.25 * qw + sigma * _log_norm_rows(DU)
            return np.ones_like(lg), lg

        _, l = _large_integral(ctx, X, U, integ)
        ratio = np.exp(l) / (1.0 + _norm(X) ** (sigma - 1))
        return {"ratio": ratio, "x": X, "u": U}

    return Estimate(f"large_time.flow_moment.sigma{sigma}",
                    f"int_1^inf exp(-|D_{{-t}}u - x|_Q^2/4) |D_{{-t}}u|^{sigma} dt <~ 1 + |x|^{sigma - 1}",
                    "upper", ev, domain="x ~ gamma_inf, u ~ gamma_inf scaled by [1, 10]")


def _moment_entry(s1, s2):
    def ev(ctx, rng, N):
        X, U = _large_pairs(ctx, rng, N)
        model = ctx.model

        def integ(st, X, U):
            lk = log_kernel_batch(model, st, X, U)
            DU = np.einsum("tij,pj->tpi", st["D_minus"], U)
            lg = lk + s2 * _log_norm_rows(DU)
            if s1:
                lg = lg + s1 * _log_norm_rows(DU - X[None])
            return np.ones_like(lg), lg

        _, l = _large_integral(ctx, X, U, integ)
        rhs = quad_form_r(model, X) + np.log1p(_norm(X) ** (s2 - 1))
        return {"ratio": np.exp(l - rhs), "x": X, "u": U}

    return Estimate(f"large_time.kernel_moment.s{s1}_{s2}",
                    f"int_1^inf K_t |D_{{-t}}u - x|^{s1} |D_{{-t}}u|^{s2} dt <~ e^{{R(x)}} (1 + |x|^{s2 - 1})",
                    "upper", ev, domain="x ~ gamma_inf, u ~ gamma_inf scaled by [1, 10]")


_FACTOR_FORMS = {
    "p": (1, 0, lambda nx: 0.0 * nx, "|P_j|", "e^{R(x)}"),
    "pp": (2, 0, lambda nx: np.log1p(nx), "|P_i P_j|", "e^{R(x)} (1 + |x|)"),
    "ppp": (3, 0, lambda nx: np.log1p(nx ** 2), "|P_i P_j P_k|", "e^{R(x)} (1 + |x|^2)"),
    "delta": (0, 1, lambda nx: 0.0 * nx, "|Delta_jk|", "e^{R(x)}"),
    "p_delta": (1, 1, lambda nx: 0.0 * nx, "|P_i Delta_jk|", "e^{R(x)}"),
}


def _kernel_factor_entry(name):
    n_p, n_d, rhs_extra, lhs_s, rhs_s = _FACTOR_FORMS[name]

    def ev(ctx, rng, N):
        X, U = _large_pairs(ctx, rng, N)
        model = ctx.model
        n = ctx.n
        pidx = rng.integers(0, n, size=(N, n_p))
        didx = rng.integers(0, n, size=(N, 2 * n_d))

        def integ(st, X, U):
            lg = log_kernel_batch(model, st, X, U)
            if n_p:
                P = np.abs(p_batch(model, st, X, U))
                with np.errstate(divide="ignore"):
                    for k in range(n_p):
                        lg = lg + np.log(P[:, np.arange(N), pidx[:, k]])
            if n_d:
                D = np.abs(st["Delta"][:, didx[:, 0], didx[:, 1]])
                with np.errstate(divide="ignore"):
                    lg = lg + np.log(D)
            return np.ones_like(lg), lg

        _, l = _large_integral(ctx, X, U, integ)
        rhs = quad_form_r(model, X) + rhs_extra(_norm(X))
        return {"ratio": np.exp(l - rhs), "x": X, "u": U}

    return Estimate(f"large_time.kernel_factor.{name}", f"int_1^inf K_t {lhs_s} dt <~ {rhs_s}", "upper", ev,
                    domain="x ~ gamma_inf, u ~ gamma_inf scaled by [1, 10]; indices uniform")


def _large_part_entry(order):
    def ev(ctx, rng, N):
        X, U = _mixed_pairs(ctx, rng, N)
        idx = _random_alpha(rng, N, ctx.n, order)
        parts = _grouped_parts(ctx, idx, X, U)
        lhs = np.where(parts[1, 0] != 0, parts[1, 1], -np.inf)
        rhs = quad_form_r(ctx.model, X) + (np.log1p(_norm(X)) if order == 2 else 0.0)
        return {"ratio": np.exp(lhs - rhs), "x": X, "u": U}

    stmt = ("|R_{j,inf}(x,u)| <~ e^{R(x)}" if order == 1 else "|R_{ij,inf}(x,u)| <~ e^{R(x)} (1 + |x|)")
    return Estimate(f"riesz.large_time_part.order{order}", stmt, "upper", ev,
                    domain="half near-diagonal pairs, half independent gamma_inf pairs")


# ---------------------------------------------------------------------------
# local region: cutoff and Calderon-Zygmund estimates
# ---------------------------------------------------------------------------

_TRIVIAL_CASES = ((1.5, 0.0), (1.0, 1.0), (2.0, 0.0), (1.0, 2.0), (2.5, 1.0))
_TRIVIAL_DELTA = 0.25


def _trivial_entry(p, r):
    def ev(ctx, rng, N):
        X, U = _near_pairs(ctx, rng, N, local=True)
        _require_nonzero(X)
        model = ctx.model
        lognx = np.log(_norm(X))

        def func(taus):
            ts = np.exp(taus)
            v2 = np.sum((U[None] - _dt_apply(model, ts, X)) ** 2, axis=-1)
            lg = (1.0 - p) * taus[:, None] - _TRIVIAL_DELTA * v2 / ts[:, None] + r * lognx[None]
            return np.ones_like(lg), lg

        _, l = _tau_integral(func, _small_tau_lo(X, U), 0.0, N)
        d = _norm(U - X)
        return {"ratio": np.exp(l + (2 * p + r - 2) * np.log(d)), "x": X, "u": U}

    tag = f"p{p:g}_r{r:g}".replace(".", "_")
    return Estimate(f"local.time_integral.{tag}",
                    f"int_0^1 t^{{-{p:g}}} exp(-{_TRIVIAL_DELTA:g}|u-D_t x|^2/t) |x|^{r:g} dt "
                    f"<~ |u-x|^{{{-2 * p - r + 2:g}}} on L_2A",
                    "upper", ev, domain="(x,u) in L_{2A}, |u-x| log-uniform fraction of 2A/(1+|x|)")


def _ev_cutoff_gradient(ctx, rng, N):
    eta = CutoffEta(ctx.sampler.A)
    X = _gamma_draw(ctx, rng, N)
    frac = rng.uniform(0.0, 2.2, N)
    d = frac * eta.A / (1.0 + _norm(X))
    U = X + np.maximum(d, 1e-9)[:, None] * _sphere(rng, N, ctx.n)
    ratio = np.empty(N)
    for k in range(N):
        gx, gu = cutoff_gradient(eta, X[k], U[k])
        ratio[k] = (np.linalg.norm(gx) + np.linalg.norm(gu)) * np.linalg.norm(X[k] - U[k]) / eta.C_eta
    return {"ratio": ratio, "x": X, "u": U}


def _scaled_kernel_eta(ctx, alpha, X, U, ref, eta):
    """``R_alpha(x,u) eta(x,u) e^{-ref}`` as plain floats."""
    (s, l), _, _ = riesz_kernel_batch(ctx.model, alpha, X, U, ctx.cfg, ctx.cache)
    return s * np.exp(l - ref) * eval_cutoff(eta, ctx.model, X, U)


def _cz_values(ctx, alpha, X, U, which):
    """Size (``which='size'``) or numeric gradient norm of ``R_alpha eta e^{-R(x)}``."""
    eta = CutoffEta(ctx.sampler.A)
    ref = quad_form_r(ctx.model, X)
    if which == "size":
        return np.abs(_scaled_kernel_eta(ctx, alpha, X, U, ref, eta))
    n = ctx.n
    h = 1e-4 * _norm(U - X)
    Xs, Us = [], []
    for ell in range(n):
        e = np.zeros(n)
        e[ell] = 1.0
        for sgn in (1.0, -1.0):
            step = sgn * h[:, None] * e
            if which == "grad_x":
                Xs.append(X + step)
                Us.append(U)
            else:
                Xs.append(X)
                Us.append(U + step)
    vals = _scaled_kernel_eta(ctx, alpha, np.vstack(Xs), np.vstack(Us), np.tile(ref, 2 * n), eta)
    vals = vals.reshape(2 * n, -1)
    grad = (vals[0::2] - vals[1::2]) / (2.0 * h[None, :])
    return np.linalg.norm(grad, axis=0)


def _cz_entry(order, which):
    power = {"size": 0, "grad_x": 1, "grad_u": 1}[which]

    def ev(ctx, rng, N):
        X, U = _near_pairs(ctx, rng, N, local=True)
        idx = _random_alpha(rng, N, ctx.n, order)
        keys = [tuple(r) for r in idx]
        vals = np.empty(N)
        for key in sorted(set(keys)):
            sel = np.array([k == key for k in keys])
            vals[sel] = _cz_values(ctx, _alpha_from(key, ctx.n), X[sel], U[sel], which)
        d = _norm(U - X)
        return {"ratio": vals * d ** (ctx.n + power), "x": X, "u": U}

    kern = "R_j" if order == 1 else "R_ij"
    lhs = {"size": f"|{kern} eta|", "grad_x": f"|grad_x({kern} eta)|", "grad_u": f"|grad_u({kern} eta)|"}[which]
    rhs = "e^{R(x)} |u-x|^{-n}" if which == "size" else "e^{R(x)} |u-x|^{-(n+1)}"
    return Estimate(f"local.calderon_zygmund.order{order}.{which}", f"{lhs} <~ {rhs} on L_2A", "upper", ev,
                    domain="(x,u) in L_{2A}, |u-x| log-uniform fraction of 2A/(1+|x|); numeric gradients")


def cz_approach_sequence(model: OUModel, alpha, x, direction, radii=(1e-1, 1e-2, 1e-3, 1e-4),
                         which: str = "size", A: float = 1.0,
                         cfg: RieszKernelConfig | None = None) -> np.ndarray:
    """Calderon-Zygmund ratios along ``u = x + r * direction`` for shrinking ``r``.

    Bounded ratios with variation well under a factor 10 indicate the
    ``|u-x|^{-n}`` (size) or ``|u-x|^{-(n+1)}`` (gradient) scaling.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d = np.atleast_1d(np.asarray(direction, dtype=float))
    d = d / np.linalg.norm(d)
    radii = np.asarray(radii, dtype=float)
    X = np.tile(x, (len(radii), 1))
    U = X + radii[:, None] * d[None]
    ctx = _Context(model, Sampler(A=A), CovCache(model), cfg or RieszKernelConfig())
    vals = _cz_values(ctx, tuple(int(a) for a in alpha), X, U, which)
    power = 0 if which == "size" else 1
    return vals * radii ** (model.n + power)


# ---------------------------------------------------------------------------
# the catalog
# ---------------------------------------------------------------------------

def _build_catalog() -> dict[str, Estimate]:
    entries = []
    for fam in ("flow", "exp_minus_sB", "exp_minus_sBT"):
        for direction in ("growth", "decay"):
            for side in ("lower", "upper"):
                entries.append(_flow_entry(fam, direction, side))
    entries += [_cov_entry(w) for w in ("det", "inv_norm", "gap", "gap_sqrt")]
    entries += [
        Estimate("flow.velocity_identity", "d/ds D_s x = -Q_inf e^{-sB^T} B^T Q_inf^{-1} x", "identity",
                 _ev_velocity_identity, domain="x ~ gamma_inf, s uniform on [-3, 3]; central difference h=1e-5"),
        Estimate("flow.r_speed", "d/ds R(D_s x) ~ |D_s x|^2", "equiv", _ev_r_speed,
                 domain="x ~ gamma_inf, s uniform on [-5, 5]"),
        Estimate("flow.velocity_size", "|d/ds D_s x| ~ |x|, |s| <= 1", "equiv", _ev_velocity_size,
                 domain="x ~ gamma_inf, s uniform on [-1, 1]"),
        Estimate("flow.r_increment", "|R(D_t x) - R(x)| ~ |t| |x|^2, |t| <= 1", "equiv", _ev_r_increment,
                 domain="x ~ gamma_inf, |t| log-uniform on [1e-4, 1], random sign"),
        Estimate("flow.displacement", "|x - D_t x| ~ |t| |x|, |t| <= 1", "equiv", _ev_displacement,
                 domain="x ~ gamma_inf, |t| log-uniform on [1e-4, 1], random sign"),
        Estimate("quadratic.dominance", "R(x) > 2R(y) implies R(x - y) ~ R(x)", "equiv", _ev_r_dominance,
                 domain="x, y ~ gamma_inf, y rescaled to R(y) = U(0,1) R(x)/2"),
    ]
    entries += [_kernel_small_entry("upper"), _kernel_small_entry("lower"),
                _kernel_large_entry("upper"), _kernel_large_entry("lower")]
    entries += [
        Estimate("factor.p.small_time", "|P_j| <~ |x| + |u - D_t x|/t, 0 < t <= 1", "upper", _ev_p_small,
                 domain="small-time kernel cloud"),
        Estimate("factor.p.large_time", "|P_j| <~ e^{-ct}|D_{-t}u - x| + |D_{-t}u|, t >= 1", "upper",
                 _ev_p_large, domain="large-time kernel cloud"),
        Estimate("factor.delta", "|Delta_ij(t)| <~ min(1,t)^{-1} e^{-ct}", "upper", _ev_delta,
                 domain="t log-uniform on [1e-4, 50]"),
    ]
    entries += [_small_part_entry(1), _small_part_entry(2)]
    entries += [_flow_moment_entry(s) for s in (1, 2, 3)]
    entries += [_moment_entry(s1, s2) for s1 in (0, 1, 2, 3) for s2 in (1, 2, 3)]
    entries += [_kernel_factor_entry(k) for k in _FACTOR_FORMS]
    entries += [_large_part_entry(1), _large_part_entry(2)]
    entries += [_trivial_entry(p, r) for p, r in _TRIVIAL_CASES]
    entries.append(Estimate("local.cutoff_gradient", "(|grad_x eta| + |grad_u eta|) |x - u| <= C_eta", "upper",
                            _ev_cutoff_gradient, domain="|x-u| uniform on [0, 2.2 A/(1+|x|)]"))
    entries += [_cz_entry(o, w) for o in (1, 2) for w in ("size", "grad_x", "grad_u")]
    return {e.estimate_id: e for e in entries}


CATALOG: dict[str, Estimate] = _build_catalog()


def catalog_ids() -> list[str]:
    return list(CATALOG)


def _entry_seed(seed: int, estimate_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), zlib.crc32(estimate_id.encode())])


def _records(res, idx):
    out = []
    for k in idx:
        rec = {"index": int(k), "ratio": float(res["ratio"][k])}
        for key in ("x", "u", "t"):
            if key in res:
                v = np.asarray(res[key][k])
                rec[key] = v.tolist() if v.ndim else float(v)
        out.append(rec)
    return out


def estimate_probe(model: OUModel, estimate_id: str, sampler: Sampler | None = None, n_samples: int = 1000,
                   seed: int = 0, cfg: RieszKernelConfig | None = None, n_worst: int = 3) -> EstimateReport:
    """Evaluate one catalog entry on ``n_samples`` random samples.

    Deterministic in ``(model, estimate_id, sampler, n_samples, seed)``.
    """
    try:
        entry = CATALOG[estimate_id]
    except KeyError:
        raise UnknownEstimate(estimate_id) from None
    rng = np.random.default_rng(_entry_seed(seed, estimate_id))
    ctx = _Context(model, sampler or Sampler(), CovCache(model), cfg or RieszKernelConfig())
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        res = entry.evaluate(ctx, rng, int(n_samples))
    ratio = np.asarray(res["ratio"], dtype=float)
    finite = np.isfinite(ratio)
    bad = ~finite
    if entry.kind == "equiv":
        bad |= finite & (ratio <= 0)
    elif entry.kind == "identity":
        bad |= finite & (ratio > entry.identity_tol)
    good = ratio[finite]
    lower = float(good.min()) if good.size else math.nan
    upper = float(good.max()) if good.size else math.nan
    order = np.argsort(np.where(finite, ratio, np.inf))
    worst = list(order[-n_worst:][::-1]) + list(order[:n_worst])
    return EstimateReport(estimate_id, int(n_samples), lower, upper, int(bad.sum()),
                          _records(res, worst), entry.statement)
