"""Adaptive composite Gauss-Legendre integration in sign/log arithmetic.

Integrands are evaluated for a batch of ``npts`` independent problems at once
(one row of nodes serves every problem), which is what makes Riesz-kernel
evaluation over thousands of points affordable: the per-time matrices are
computed once per node and shared.

``func(nodes) -> (sign, logmag)`` with both arrays shaped ``(len(nodes), npts)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss

from .errors import QuadratureNonconvergence
from .mehler import signed_logsumexp

_LOG_ROUNDOFF = math.log(64 * np.finfo(float).eps)

__all__ = ["LogQuadResult", "adaptive_log_integral", "scan_support", "gauss_legendre"]


def gauss_legendre(order: int, a: float, b: float):
    x, w = leggauss(order)
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w


@dataclass
class LogQuadResult:
    sign: np.ndarray
    logmag: np.ndarray
    n_panels: int
    n_evals: int
    converged: bool


def _eval_chunked(func, nodes, npts, max_cells=2_000_000):
    chunk = max(1, max_cells // max(npts, 1))
    signs, logs = [], []
    for i in range(0, len(nodes), chunk):
        s, l = func(nodes[i:i + chunk])
        signs.append(np.asarray(s, dtype=float))
        logs.append(np.asarray(l, dtype=float))
    return np.concatenate(signs, axis=0), np.concatenate(logs, axis=0)


def _panel_estimates(func, panels, order, npts):
    """GL estimate of each panel, in sign/log form, shape (npanels, npts)."""
    x, w = leggauss(order)
    lefts = np.array([p[0] for p in panels])
    rights = np.array([p[1] for p in panels])
    half = 0.5 * (rights - lefts)
    nodes = (lefts[:, None] + half[:, None] * (x[None, :] + 1.0)).ravel()
    wts = (half[:, None] * w[None, :]).ravel()
    s, l = _eval_chunked(func, nodes, npts)
    l = l + np.log(wts)[:, None]
    s = s.reshape(len(panels), order, npts)
    l = l.reshape(len(panels), order, npts)
    return signed_logsumexp(s, l, axis=1)


def adaptive_log_integral(func, a: float, b: float, npts: int, *, rel_tol: float = 1e-8,
                          panel_width: float = 0.5, order: int = 10, max_rounds: int = 40,
                          floor_rel: float = 1e-13, min_width: float = 1e-10, max_panels: int = 20000,
                          raise_on_failure: bool = True) -> LogQuadResult:
    """Integrate ``func`` over ``[a, b]`` for ``npts`` problems simultaneously.

    Each panel is accepted once its Gauss estimate and the sum of the estimates
    on its two halves differ by at most ``rel_tol * scale * width/(b-a)`` for
    every problem, where ``scale`` is the running ``|integral|`` floored at
    ``floor_rel * integral of |f|`` (so exact cancellation cannot stall it).
    """
    if not b > a:
        raise ValueError("need b > a")
    m = max(1, int(math.ceil((b - a) / panel_width)))
    edges = np.linspace(a, b, m + 1)
    pending = [(edges[i], edges[i + 1]) for i in range(m)]
    pend_s, pend_l = _panel_estimates(func, pending, order, npts)
    n_evals = len(pending) * order
    done_s, done_l = [], []
    done_abs = []
    converged = True
    total_len = b - a
    for _ in range(max_rounds):
        if not pending:
            break
        halves = []
        for l, r in pending:
            mid = 0.5 * (l + r)
            halves += [(l, mid), (mid, r)]
        hs, hl = _panel_estimates(func, halves, order, npts)
        n_evals += len(halves) * order
        hs = hs.reshape(len(pending), 2, npts)
        hl = hl.reshape(len(pending), 2, npts)
        fine_s, fine_l = signed_logsumexp(hs, hl, axis=1)
        # |fine - coarse| per panel and point
        diff_s, diff_l = signed_logsumexp(np.stack([fine_s, -pend_s]), np.stack([fine_l, pend_l]), axis=0)
        # running totals over accepted + refined panels
        all_s = np.concatenate([np.array(done_s).reshape(-1, npts), fine_s])
        all_l = np.concatenate([np.array(done_l).reshape(-1, npts), fine_l])
        tot_s, tot_l = signed_logsumexp(all_s, all_l, axis=0)
        abs_all = np.concatenate([np.array(done_abs).reshape(-1, npts),
                                  np.logaddexp(hl[:, 0], hl[:, 1])])
        abs_tot = np.logaddexp.reduce(abs_all, axis=0)
        scale = np.maximum(tot_l, abs_tot + math.log(floor_rel))
        widths = np.array([r - l for l, r in pending])
        allow = math.log(rel_tol) + scale[None, :] + np.log(widths / total_len)[:, None]
        panel_abs = np.logaddexp(hl[:, 0], hl[:, 1])
        ok = (diff_s == 0) | (diff_l <= allow) | (diff_l <= panel_abs + _LOG_ROUNDOFF)
        ok_panel = np.all(ok, axis=1) | (widths < min_width)
        if np.any(~np.all(ok, axis=1) & (widths < min_width)):
            converged = False
        new_pending, ns, nl = [], [], []
        for k, (l, r) in enumerate(pending):
            if ok_panel[k]:
                done_s.append(fine_s[k])
                done_l.append(fine_l[k])
                done_abs.append(np.logaddexp(hl[k, 0], hl[k, 1]))
            else:
                mid = 0.5 * (l + r)
                new_pending += [(l, mid), (mid, r)]
                ns += [hs[k, 0], hs[k, 1]]
                nl += [hl[k, 0], hl[k, 1]]
        pending = new_pending
        if len(pending) + len(done_s) > max_panels:
            break
        if pending:
            pend_s = np.array(ns)
            pend_l = np.array(nl)
    if pending:
        converged = False
        done_s += list(pend_s)
        done_l += list(pend_l)
        done_abs += list(pend_l)
    tot_s, tot_l = signed_logsumexp(np.array(done_s), np.array(done_l), axis=0)
    if not converged and raise_on_failure:
        raise QuadratureNonconvergence(
            f"adaptive quadrature on [{a:g}, {b:g}] did not reach rel_tol={rel_tol:g}",
            estimates=(tot_s, tot_l))
    return LogQuadResult(tot_s, tot_l, len(done_s), n_evals, converged)


def scan_support(func, lo: float, hi: float, npts: int, step: float = 0.1, margin: float = 40.0):
    """Locate where ``|func|`` is within ``margin`` nats of its peak.

    Returns ``(left, right, peak_logmag)``; ``left``/``right`` are common to
    all problems (the union of their supports), widened by one grid step.
    """
    grid = np.arange(lo, hi + 0.5 * step, step)
    grid[-1] = min(grid[-1], hi)
    s, l = _eval_chunked(func, grid, npts)
    l = np.where(s != 0, l, -np.inf)
    peak = np.max(l, axis=0)
    live = l >= (peak - margin)[None, :]
    rows = np.where(np.any(live, axis=1))[0]
    if len(rows) == 0:
        return lo, hi, peak
    left = grid[max(rows[0] - 1, 0)]
    right = grid[min(rows[-1] + 1, len(grid) - 1)]
    if right <= left:
        right = min(hi, left + step)
    return float(left), float(right), peak
