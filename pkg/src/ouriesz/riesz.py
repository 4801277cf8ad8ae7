"""Riesz-transform kernels of any order, the local cutoff, and Riesz operators.

The off-diagonal kernel of ``R^(alpha) = D^alpha (-L)^{-|alpha|/2} P_0^perp`` is

    R_alpha(x, u) = 1/Gamma(|alpha|/2) * int_0^inf t^{(|alpha|-2)/2} D^alpha_x K_t(x, u) dt.

After ``t = e^tau`` the integrand is ``e^{tau |alpha|/2} D^alpha K`` which is
Gaussian-small as ``tau -> -inf`` (for ``x != u``) and double-exponentially
small as ``tau -> +inf``; both tails are trimmed 40 nats below the peak and
the rest is handled by :func:`~ouriesz.quadrature.adaptive_log_integral`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .errors import NearDiagonal, QuadratureBudgetExceeded, SpectralRouteUnavailable, SupportOverlap
from .gauss_core import CovCache, OUModel, quad_form_r
from .mehler import (
    DerivTermLedger,
    LogKernelValue,
    expand_dalpha,
    ledger_log_batch,
    log_kernel_batch,
    p_batch,
    signed_logsumexp,
)
from .quadrature import _eval_chunked, adaptive_log_integral, gauss_legendre
from .semigroup import TestFunction, spectral_power

__all__ = [
    "RieszKernelConfig",
    "CutoffEta",
    "RieszValue",
    "riesz_kernel",
    "riesz_kernel_parts",
    "riesz_kernel_batch",
    "time_integral_batch",
    "eval_cutoff",
    "cutoff_gradient",
    "apply_riesz",
    "kernel_route_study",
]


@dataclass(frozen=True)
class RieszKernelConfig:
    split_time: float = 1.0
    rel_tol: float = 1e-8
    tail_cutoff: float = 10.0
    near_diagonal_guard: float = 1e-8
    gauss_order: int = 10
    panel_width: float = 0.5
    scan_step: float = 0.1
    scan_margin: float = 40.0

    def __post_init__(self):
        if not self.split_time > 0:
            raise ValueError("split_time must be > 0")
        if not 0 < self.rel_tol <= 1e-2:
            raise ValueError("rel_tol must lie in (0, 1e-2]")

    def refined(self, factor: int = 2) -> "RieszKernelConfig":
        """Same configuration with ``factor`` times denser time quadrature."""
        return RieszKernelConfig(
            split_time=self.split_time, rel_tol=self.rel_tol, tail_cutoff=self.tail_cutoff,
            near_diagonal_guard=self.near_diagonal_guard, gauss_order=self.gauss_order,
            panel_width=self.panel_width / factor, scan_step=self.scan_step / factor,
            scan_margin=self.scan_margin)


# ---------------------------------------------------------------------------
# time integrals
# ---------------------------------------------------------------------------

def _integrand(model, ledger, X, U, cache, log_power, log_norm):
    """tau -> e^{(power+1) tau} * D^alpha K_{e^tau}(x_p, u_p) / norm, sign/log."""

    def func(taus):
        taus = np.asarray(taus, dtype=float)
        st = cache.stack(np.exp(taus))
        lk = log_kernel_batch(model, st, X, U)
        if ledger is None:
            s = np.ones_like(lk)
            lp = np.zeros_like(lk)
        else:
            P = p_batch(model, st, X, U)
            s, lp = ledger_log_batch(ledger, P, st["Delta"])
        return s, lk + lp + log_power * taus[:, None] - log_norm

    return func


def _aligned(v, step, up):
    k = math.ceil(v / step - 1e-9) if up else math.floor(v / step + 1e-9)
    return k * step


def time_integral_batch(model: OUModel, ledger: DerivTermLedger | None, X, U, *, power: float,
                        cfg: RieszKernelConfig | None = None, cache: CovCache | None = None,
                        log_norm: float = 0.0, split: bool = True):
    """``int_0^inf t^power D^alpha K_t(x_p, u_p) dt / e^{log_norm}`` for each pair.

    Returns ``[(sign, logmag)]`` for the ``(0, split_time]`` and
    ``[split_time, inf)`` parts (or a single entry with ``split=False``).
    """
    cfg = cfg or RieszKernelConfig()
    cache = cache or CovCache(model)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    X, U = np.broadcast_arrays(X, U)
    npts = X.shape[0]
    dist = np.linalg.norm(X - U, axis=1)
    if np.any(dist < cfg.near_diagonal_guard):
        raise NearDiagonal(f"|x - u| = {dist.min():.3e} is below the guard {cfg.near_diagonal_guard:g}")
    func = _integrand(model, ledger, X, U, cache, power + 1.0, log_norm)

    step = cfg.scan_step
    lo = _aligned(min(-30.0, 2.0 * math.log(dist.min()) - 12.0), step, up=False)
    hi = cfg.tail_cutoff
    grid = np.arange(round(lo / step), round(hi / step) + 1) * step
    gs, gl = _eval_chunked(func, grid, npts)
    gl = np.where(gs != 0, gl, -np.inf)

    split_tau = math.log(cfg.split_time)
    pieces = [(lo, split_tau), (split_tau, hi)] if split else [(lo, hi)]
    out = []
    for a, b in pieces:
        inside = (grid >= a - 1e-12) & (grid <= b + 1e-12)
        sub = gl[inside]
        g = grid[inside]
        peak = np.max(sub, axis=0)
        live_rows = np.where(np.any(sub >= (peak - cfg.scan_margin)[None, :], axis=1))[0]
        if len(live_rows) == 0:
            out.append((np.zeros(npts), np.full(npts, -np.inf)))
            continue
        left = max(a, g[max(live_rows[0] - 1, 0)])
        right = min(b, g[min(live_rows[-1] + 1, len(g) - 1)])
        left = max(a, _aligned(left, cfg.panel_width, up=False))
        right = min(b, _aligned(right, cfg.panel_width, up=True))
        if right <= left:
            out.append((np.zeros(npts), np.full(npts, -np.inf)))
            continue
        res = adaptive_log_integral(func, left, right, npts, rel_tol=cfg.rel_tol,
                                    panel_width=cfg.panel_width, order=cfg.gauss_order)
        out.append((res.sign, res.logmag))
    return out


def _alpha_tuple(alpha, n):
    alpha = tuple(int(a) for a in np.atleast_1d(alpha))
    if len(alpha) != n:
        raise ValueError(f"multiindex {alpha} does not match dimension {n}")
    return alpha


def riesz_kernel_batch(model: OUModel, alpha, X, U, cfg: RieszKernelConfig | None = None,
                       cache: CovCache | None = None):
    """Whole kernel and both parts for many pairs.

    Returns ``(whole, small_t_part, large_t_part)``, each a ``(sign, logmag)`` pair of arrays.
    """
    alpha = _alpha_tuple(alpha, model.n)
    ledger = expand_dalpha(alpha, model.n)
    order = sum(alpha)
    (s0, l0), (s1, l1) = time_integral_batch(
        model, ledger, X, U, power=(order - 2) / 2.0, cfg=cfg, cache=cache,
        log_norm=float(gammaln(order / 2.0)))
    whole = signed_logsumexp(np.stack([s0, s1]), np.stack([l0, l1]), axis=0)
    return whole, (s0, l0), (s1, l1)


def riesz_kernel_parts(model: OUModel, alpha, x, u, cfg: RieszKernelConfig | None = None,
                       cache: CovCache | None = None) -> tuple[LogKernelValue, LogKernelValue]:
    """The ``(0, split]`` and ``[split, inf)`` pieces of ``R_alpha(x, u)``."""
    _, (s0, l0), (s1, l1) = riesz_kernel_batch(model, alpha, np.atleast_1d(x)[None], np.atleast_1d(u)[None],
                                               cfg, cache)
    return _lkv(s0[0], l0[0]), _lkv(s1[0], l1[0])


def riesz_kernel(model: OUModel, alpha, x, u, cfg: RieszKernelConfig | None = None,
                 cache: CovCache | None = None) -> LogKernelValue:
    (s, l), _, _ = riesz_kernel_batch(model, alpha, np.atleast_1d(x)[None], np.atleast_1d(u)[None], cfg, cache)
    return _lkv(s[0], l[0])


def _lkv(s, l):
    return LogKernelValue(int(s), float(l)) if s != 0 else LogKernelValue.zero()


# ---------------------------------------------------------------------------
# local / global cutoff
# ---------------------------------------------------------------------------

def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s ** 3 * (10.0 - 15.0 * s + 6.0 * s * s)


def _smoothstep_prime(s):
    s = np.clip(s, 0.0, 1.0)
    return 30.0 * s * s * (1.0 - s) ** 2


@dataclass(frozen=True)
class CutoffEta:
    """C^2 bump in ``r = |x - u| (1 + |x|) / A``: 1 for ``r <= 1``, 0 for ``r >= 2``.

    The profile is ``1 - S(r - 1)`` with the quintic smoothstep ``S``; since
    ``max S' = 15/8`` one gets ``|grad_x eta| + |grad_u eta| <= C_eta / |x - u|``
    with ``C_eta = 7.5 (1 + A)``.
    """

    A: float = 1.0

    def __post_init__(self):
        if not self.A >= 1:
            raise ValueError("A must be >= 1")

    @property
    def C_eta(self) -> float:
        return 7.5 * (1.0 + self.A)


def _cutoff_r(eta, x, u):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    d = np.linalg.norm(x - u, axis=-1)
    return d * (1.0 + np.linalg.norm(x, axis=-1)) / eta.A


def eval_cutoff(eta: CutoffEta, model: OUModel | None, x, u):
    """``eta(x, u)``; broadcasts over leading axes."""
    r = _cutoff_r(eta, x, u)
    out = 1.0 - _smoothstep(r - 1.0)
    return float(out) if np.ndim(out) == 0 else out


def cutoff_gradient(eta: CutoffEta, x, u) -> tuple[np.ndarray, np.ndarray]:
    """Analytic ``(grad_x eta, grad_u eta)`` at a single pair with ``x != u``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    diff = x - u
    d = np.linalg.norm(diff)
    nx = np.linalg.norm(x)
    r = d * (1.0 + nx) / eta.A
    dh = -_smoothstep_prime(r - 1.0)
    unit = diff / d
    xhat = x / nx if nx > 0 else np.zeros_like(x)
    grad_r_x = ((1.0 + nx) * unit + d * xhat) / eta.A
    grad_r_u = -(1.0 + nx) * unit / eta.A
    return dh * grad_r_x, dh * grad_r_u


# ---------------------------------------------------------------------------
# Riesz operators on test functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RieszValue:
    """Kernel-route and spectral-route values (either may be ``None``)."""

    kernel: float | None = None
    spectral: float | None = None

    @property
    def value(self) -> float:
        return self.spectral if self.spectral is not None else self.kernel


def _support_nodes(support, order, panels):
    lo, hi = (np.atleast_1d(np.asarray(b, dtype=float)) for b in support)
    axes, wts = [], []
    for a, b in zip(lo, hi):
        edges = np.linspace(a, b, panels + 1)
        xs, ws = zip(*(gauss_legendre(order, edges[i], edges[i + 1]) for i in range(panels)))
        axes.append(np.concatenate(xs))
        wts.append(np.concatenate(ws))
    grids = np.meshgrid(*axes, indexing="ij")
    wgrid = np.meshgrid(*wts, indexing="ij")
    U = np.stack([g.ravel() for g in grids], axis=1)
    W = np.prod(np.stack([g.ravel() for g in wgrid], axis=1), axis=1)
    return U, W, lo, hi


def _log_gamma_inf_density(model, U):
    return -quad_form_r(model, U) - 0.5 * (model.n * math.log(2 * math.pi) + model.Qinf_logdet)


def _kernel_integral(model, alpha, f_vals, U, W, x, cfg):
    keep = (f_vals != 0) & (W > 0)
    U, W, f_vals = U[keep], W[keep], f_vals[keep]
    (ks, kl), _, _ = riesz_kernel_batch(model, alpha, np.atleast_2d(x), U, cfg)
    signs = ks * np.sign(f_vals)
    logs = kl + np.log(np.abs(f_vals)) + np.log(W) + _log_gamma_inf_density(model, U)
    s, l = signed_logsumexp(signs, logs, axis=0)
    return float(s * math.exp(l)) if s != 0 else 0.0


def apply_riesz(model: OUModel, alpha, f: TestFunction, x, cfg: RieszKernelConfig | None = None,
                max_nodes: int = 200_000, order: int = 8, panels: int = 16) -> RieszValue:
    """``R^(alpha) f(x)``.

    Kernel route: ``int R_alpha(x, u) f(u) dgamma_inf(u)`` by tensor Gauss-Legendre
    over ``f.support``, valid only for ``x`` outside that box.  Spectral route:
    ``D^alpha (-L)^{-|alpha|/2} P_0^perp f`` for eigen-polynomials.
    """
    alpha = _alpha_tuple(alpha, model.n)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    spectral = None
    if f.poly is not None:
        try:
            q = spectral_power(model, f.poly, sum(alpha) / 2.0)
            spectral = q.diff_multi(alpha)(x) if q.coeffs else 0.0
        except SpectralRouteUnavailable:
            spectral = None
    kernel = None
    if f.support is not None:
        lo, hi = (np.atleast_1d(np.asarray(b, dtype=float)) for b in f.support)
        inside = np.all(x >= lo) and np.all(x <= hi)
        if not inside:
            if (order * panels) ** model.n > max_nodes:
                raise QuadratureBudgetExceeded(f"{(order * panels) ** model.n} nodes exceed {max_nodes}")
            U, W, _, _ = _support_nodes(f.support, order, panels)
            kernel = _kernel_integral(model, alpha, np.atleast_1d(f(U)), U, W, x, cfg)
        elif spectral is None:
            raise SupportOverlap("x lies in the support box of f and no spectral route is available")
    elif spectral is None:
        raise SupportOverlap("f has no declared support and is not an eigen-polynomial")
    return RieszValue(kernel=kernel, spectral=spectral)


def kernel_route_study(model: OUModel, f: TestFunction, x: float, holes=(0.4, 0.2, 0.1, 0.05, 0.025),
                       outer: float = 8.0, cfg: RieszKernelConfig | None = None, order: int = 12,
                       panels: int = 24) -> list[dict]:
    """Compare the kernel route on ``f`` with a shrinking symmetric hole around ``x``
    against the spectral value of ``R_1 f(x)`` (``n = 1``).

    The integration runs over ``eps < |u - x| < outer`` with geometrically
    graded panels next to the hole.  Returns one row per hole radius.
    """
    if model.n != 1:
        raise ValueError("kernel_route_study is one-dimensional")
    x = float(x)
    spec = apply_riesz(model, (1,), f, [x]).spectral
    rows = []
    for eps in holes:
        us, ws = [], []
        for sgn in (-1.0, 1.0):
            edges = np.geomspace(eps, outer, panels + 1)
            for i in range(panels):
                nodes, w = gauss_legendre(order, edges[i], edges[i + 1])
                us.append(x + sgn * nodes)
                ws.append(w)
        U = np.concatenate(us)[:, None]
        W = np.concatenate(ws)
        val = _kernel_integral(model, (1,), np.atleast_1d(f(U)), U, W, [x], cfg)
        rows.append({"hole": eps, "kernel": val, "spectral": spec, "abs_error": abs(val - spec)})
    return rows
