"""Weak-type (1,1) profile of ``x -> R_alpha(x, u0)`` for the drifting Dirac datum.

For each ``eta`` the datum is ``delta_{u0}`` normalised in ``L^1(gamma_inf)``,
so ``R^(alpha) f = R_alpha(., u0)`` and the quasinorm is

    sup_lambda  lambda * gamma_inf{ x : |R_alpha(x, u0)| > lambda }.

The sup is taken over every sampled value of ``|R_alpha|`` (exact for the
discrete measure); the sup over a geometric ``lambda`` grid is kept as a
diagnostic.  The kernel is unbounded near ``u0``, so a grid anchored at the
largest sampled value would depend on how close the nodes come to ``u0``.

Level-set measures come from a deterministic polar grid (``n <= 2``) or from
Monte Carlo stratified in ``R(x)`` (any ``n``).  Both restrict to the shell
of ``R`` values spanned by ``x0 = D_{-t0} u0`` and ``u0``, widened by
``shell`` on each side; the kernel carries ``e^{R(x)}`` and ``gamma_inf``
carries ``e^{-R(x)}``, so the shell is where ``lambda * measure`` lives.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaincc, gammainccinv

from ..errors import GridBudgetExceeded, QuadratureNonconvergence
from ..gauss_core import CovCache, OUModel, flow_dt_batch, polar_weight, quad_form_r, to_polar
from ..riesz import RieszKernelConfig, _alpha_tuple, riesz_kernel_batch
from .counterexample import drift_points, find_t0

__all__ = [
    "LambdaGrid",
    "PolarGrid",
    "MonteCarlo",
    "WeakTypeProfile",
    "weak_type_profile",
    "level_set_quasinorm",
]


@dataclass(frozen=True)
class LambdaGrid:
    """Geometric ``lambda`` grid of ``n_points`` on ``[span * vmax, vmax]``."""

    n_points: int = 64
    span: float = 1e-6


@dataclass(frozen=True)
class PolarGrid:
    """Tensor grid in ``(s, xt)`` with geometric grading towards ``u0``.

    ``n_s`` uniform ``s`` cells cover the shell; ``graded`` geometric cells on
    each side of ``u0`` shrink to ``inner`` (in ``s``, and for ``n = 2`` also in
    the ellipse angle).  ``n_theta`` uniform angle cells are used for ``n = 2``.
    """

    n_s: int = 4000
    graded: int = 320
    inner: float = 1e-8
    n_theta: int = 192
    shell: float = 6.0
    r_floor: float = 1e-4
    budget: int = 1_500_000


@dataclass(frozen=True)
class MonteCarlo:
    """Stratified sampling of ``gamma_inf``: ``R(x)`` stratified, direction uniform.

    Under ``gamma_inf`` the variable ``R(x)`` is Gamma(n/2, 1) and the whitened
    direction is uniform, so each stratum is drawn exactly by inverting the
    incomplete gamma function.  Super-level sets holding fewer than
    ``min_count`` samples are ignored when taking the sup over ``lambda``.
    """

    n_points: int = 1_000_000
    strata: int = 48
    shell: float = 6.0
    min_count: int = 10
    chunk: int = 20_000


@dataclass
class WeakTypeProfile:
    alpha: tuple
    eta_grid: list
    quasinorm: list
    fit_slope: float
    x0_norm: list = field(default_factory=list)
    quasinorm_grid: list = field(default_factory=list)
    truncation: list = field(default_factory=list)
    t0: float = float("nan")
    mode: str = "polar"
    n_nodes: list = field(default_factory=list)
    loosened: list = field(default_factory=list)
    unconverged: list = field(default_factory=list)


def level_set_quasinorm(logv: np.ndarray, logw: np.ndarray, lam: LambdaGrid | None = None,
                        counts_floor: int = 0) -> tuple[float, float]:
    """``sup_lambda lambda * sum(w[v > lambda])`` from log values and log weights.

    Returns ``(grid_sup, exact_sup)``: the first over the geometric ``lambda``
    grid, the second over every distinct value (the sup is approached just
    below a sample value).  ``counts_floor`` drops super-level sets holding
    fewer samples.
    """
    lam = lam or LambdaGrid()
    order = np.argsort(-logv, kind="stable")
    lv = logv[order]
    cum = np.logaddexp.accumulate(logw[order])
    start = max(counts_floor - 1, 0)
    exact = float(np.exp(np.max(lv[start:] + cum[start:])))
    vmax = lv[0]
    grid = vmax + np.linspace(math.log(lam.span), 0.0, lam.n_points)
    # number of samples with v > lambda
    counts = np.searchsorted(-lv, -grid, side="left")
    ok = counts > max(counts_floor - 1, 0)
    vals = np.where(ok, grid + cum[np.maximum(counts - 1, 0)], -np.inf)
    return float(np.exp(np.max(vals))), exact


def _shell(model, x0, u0, width, floor):
    r = [float(quad_form_r(model, x0)), float(quad_form_r(model, u0))]
    return max(min(r) - width, floor), max(r) + width


def _s_bounds(model, xts, r_lo, r_hi):
    """For each unit-ellipse direction find ``s`` with ``R(D_s xt)`` equal to ``r_lo`` and ``r_hi``."""
    out = []
    for target in (r_lo, r_hi):
        lo = np.full(len(xts), -60.0)
        hi = np.full(len(xts), 60.0)
        for _ in range(70):
            mid = 0.5 * (lo + hi)
            val = quad_form_r(model, np.einsum("pij,pj->pi", flow_dt_batch(model, mid), xts))
            up = val > target
            hi = np.where(up, mid, hi)
            lo = np.where(up, lo, mid)
        out.append(0.5 * (lo + hi))
    return out


def _graded_edges(a, b, center, n_uniform, graded, inner):
    """Uniform edges on ``[a, b]`` merged with a geometric ladder around ``center``
    (cells ``center +- inner`` ... ``+- h``) and a hole ``|e - center| < inner``."""
    edges = np.linspace(a, b, n_uniform + 1)
    if center is None or not a < center < b:
        return edges, None
    h = (b - a) / n_uniform
    ladder = np.geomspace(inner, h, graded)
    edges = np.concatenate([edges, center - ladder, center + ladder])
    edges = np.unique(edges[(edges >= a) & (edges <= b)])
    hole = (center - inner, center + inner)
    return edges, hole


def _cells(edges, hole):
    mids = 0.5 * (edges[1:] + edges[:-1])
    widths = np.diff(edges)
    if hole is not None:
        keep = (mids < hole[0]) | (mids > hole[1])
        mids, widths = mids[keep], widths[keep]
    return mids, widths


def _polar_nodes(model, u0, x0, grid: PolarGrid):
    """Nodes ``X`` and log ``gamma_inf`` weights of the polar tensor grid."""
    n = model.n
    r_lo, r_hi = _shell(model, x0, u0, grid.shell, grid.r_floor)
    # polar coordinates of u0 on the unit ellipse R = 1
    pu = to_polar(model, u0, 1.0)
    s_u = pu.s
    L = model.Qinf_sqrt
    lognorm = -0.5 * (n * math.log(2 * math.pi) + model.Qinf_logdet)
    if n == 1:
        xts = np.array([[math.sqrt(2.0 * model.Qinf[0, 0])], [-math.sqrt(2.0 * model.Qinf[0, 0])]])
        dirw = np.ones(2)
        on_u = [bool(np.sign(xts[0, 0]) == np.sign(u0[0])), bool(np.sign(xts[1, 0]) == np.sign(u0[0]))]
    elif n == 2:
        circ_u = np.linalg.solve(L, pu.xtilde) / math.sqrt(2.0)
        th_u = math.atan2(circ_u[1], circ_u[0])
        th_edges, th_hole = _graded_edges(th_u - math.pi, th_u + math.pi, th_u, grid.n_theta, grid.graded,
                                          grid.inner)
        th, dth = _cells(th_edges, None)
        circ = np.stack([np.cos(th), np.sin(th)], axis=1)
        xts = math.sqrt(2.0) * circ @ L.T
        speed = math.sqrt(2.0) * np.linalg.norm(np.stack([-np.sin(th), np.cos(th)], axis=1) @ L.T, axis=1)
        dirw = speed * dth
        on_u = list(np.abs(th - th_u) < grid.inner * 1e3)
    else:
        raise ValueError("the polar grid supports n <= 2")
    s_lo, s_hi = _s_bounds(model, xts, r_lo, r_hi)
    a, b = float(s_lo.min()), float(s_hi.max())
    s_edges_u, hole_u = _graded_edges(a, b, s_u, grid.n_s, grid.graded, grid.inner)
    s_edges, _ = _graded_edges(a, b, None, grid.n_s, 0, grid.inner)
    n_total = 0
    blocks = []
    for k in range(len(xts)):
        use_graded = n == 1 and on_u[k] or n == 2
        edges, hole = (s_edges_u, hole_u if (n == 1 and on_u[k]) else None) if use_graded else (s_edges, None)
        s, ds = _cells(edges, hole)
        blocks.append((k, s, ds))
        n_total += len(s)
    if n_total > grid.budget:
        raise GridBudgetExceeded(f"polar grid needs {n_total} nodes, budget {grid.budget}")
    Xs, logws = [], []
    for k, s, ds in blocks:
        X = np.einsum("sij,j->si", flow_dt_batch(model, s), xts[k])
        lw = (lognorm - quad_form_r(model, X) + np.log(polar_weight(model, s, np.broadcast_to(xts[k], (len(s), n))))
              + np.log(ds) + math.log(dirw[k]))
        Xs.append(X)
        logws.append(lw)
    X = np.vstack(Xs)
    logw = np.concatenate(logws)
    # drop nodes sitting on the diagonal guard (n = 2: the u0 ray crosses the hole)
    far = np.linalg.norm(X - u0[None], axis=1) > 10 * grid.inner * max(1.0, float(np.linalg.norm(u0)))
    return X[far], logw[far], (r_lo, r_hi)


def _mc_nodes(model, u0, x0, mc: MonteCarlo, rng):
    n = model.n
    r_lo, r_hi = _shell(model, x0, u0, mc.shell, 0.0)
    edges = np.linspace(r_lo, r_hi, mc.strata + 1)
    per = max(mc.n_points // mc.strata, 1)
    a = n / 2.0
    q = gammaincc(a, edges)              # upper tail at each edge
    Xs, logws = [], []
    for j in range(mc.strata):
        qa, qb = q[j], q[j + 1]
        mass = qa - qb
        if not mass > 0:
            continue
        uq = qb + (qa - qb) * rng.uniform(0, 1, per)
        Rv = gammainccinv(a, uq)
        d = rng.standard_normal((per, n))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        X = (np.sqrt(2.0 * Rv)[:, None] * d) @ model.Qinf_sqrt.T
        Xs.append(X)
        logws.append(np.full(per, math.log(mass / per)))
    return np.vstack(Xs), np.concatenate(logws), (r_lo, r_hi)


def _kernel_batch_robust(model, alpha, X, u0, cfg, cache, stats):
    """Batch evaluation; a batch that fails to converge is bisected, and a
    single failing node is retried at a 100x looser tolerance (near a sign
    change of the kernel the relative target is out of reach)."""
    try:
        (s, l), _, _ = riesz_kernel_batch(model, alpha, X, u0[None], cfg, cache)
        return np.where(s != 0, l, -np.inf)
    except QuadratureNonconvergence:
        if len(X) > 1:
            h = len(X) // 2
            return np.concatenate([_kernel_batch_robust(model, alpha, X[:h], u0, cfg, cache, stats),
                                   _kernel_batch_robust(model, alpha, X[h:], u0, cfg, cache, stats)])
    loose = replace(cfg, rel_tol=cfg.rel_tol * 100)
    stats["loosened"] += 1
    try:
        (s, l), _, _ = riesz_kernel_batch(model, alpha, X, u0[None], loose, cache)
        return np.where(s != 0, l, -np.inf)
    except QuadratureNonconvergence:
        stats["unconverged"] += 1
        return np.full(1, np.nan)


def _kernel_abs_log(model, alpha, X, u0, cfg, cache, chunk=128, bucket_width=0.25):
    """``log |R_alpha(x, u0)|`` over many ``x``, plus failure counts.

    Nodes are batched by ``log |x - u0|`` (buckets of width ``bucket_width`` in ``log |x - u0|``) so a
    batch shares the time window where its integrands peak; otherwise the
    adaptive panels of the batch are the union of very different windows.
    """
    d = np.linalg.norm(X - u0[None], axis=1)
    bucket = np.floor(np.log(d) / bucket_width).astype(int)
    out = np.empty(len(X))
    stats = {"loosened": 0, "unconverged": 0}
    for b in np.unique(bucket):
        members = np.where(bucket == b)[0]
        for i in range(0, len(members), chunk):
            idx = members[i:i + chunk]
            out[idx] = _kernel_batch_robust(model, alpha, X[idx], u0, cfg, cache, stats)
    return out, stats


def weak_type_profile(model: OUModel, alpha, eta_grid=tuple(range(4, 13)), lambda_grid: LambdaGrid | None = None,
                      integration: PolarGrid | MonteCarlo | None = None, seed: int = 0,
                      cfg: RieszKernelConfig | None = None, t0: float | None = None) -> WeakTypeProfile:
    """Quasinorm of ``R_alpha(., u0)`` along ``eta`` and its log-log slope against ``|x0|``."""
    alpha = _alpha_tuple(alpha, model.n)
    if sum(alpha) < 1:
        raise ValueError("|alpha| must be >= 1")
    etas = [float(e) for e in eta_grid]
    if any(b <= a for a, b in zip(etas, etas[1:])):
        raise ValueError("eta_grid must be strictly increasing")
    integration = integration or (PolarGrid() if model.n <= 2 else MonteCarlo())
    lam = lambda_grid or LambdaGrid()
    cfg = cfg or RieszKernelConfig()
    t0 = find_t0(model) if t0 is None else float(t0)
    cache = CovCache(model)
    mode = "polar" if isinstance(integration, PolarGrid) else "mc"
    prof = WeakTypeProfile(alpha, etas, [], math.nan, t0=t0, mode=mode)
    for k, eta in enumerate(etas):
        u0, x0 = drift_points(model, eta, t0)
        if mode == "polar":
            X, logw, shell = _polar_nodes(model, u0, x0, integration)
            floor = 0
        else:
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), k]))
            X, logw, shell = _mc_nodes(model, u0, x0, integration, rng)
            floor = integration.min_count
        logv, stats = _kernel_abs_log(model, alpha, X, u0, cfg, cache)
        bad = np.isnan(logv)
        logv, logw = logv[~bad], logw[~bad]
        prof.loosened.append(stats["loosened"])
        prof.unconverged.append(stats["unconverged"])
        q, qx = level_set_quasinorm(logv, logw, lam, floor)
        prof.quasinorm.append(qx)
        prof.quasinorm_grid.append(q)
        prof.x0_norm.append(float(np.linalg.norm(x0)))
        prof.truncation.append(math.exp(-integration.shell))
        prof.n_nodes.append(int(len(X)))
    if len(etas) >= 2:
        prof.fit_slope = float(np.polyfit(np.log(prof.x0_norm), np.log(prof.quasinorm), 1)[0])
    return prof
