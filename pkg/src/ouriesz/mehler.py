"""Mehler kernel, its log-derivative factors, and the symbolic x-derivative ledger.

With ``w = D_{-t} u - x`` the kernel is evaluated as::

    log K_t(x, u) = (logdet Q_inf - logdet Q_t)/2 + R(x) - <G_t w, w>/2,
    G_t = D_t^T (Q_t^{-1} - Q_inf^{-1}) D_t = Q_inf^{-1} - Delta(t),

which never forms the growing matrix ``D_t``.  Derivatives obey

    d_j K = K P_j,     d_i P_j = Delta_ij(t)  (independent of x),

so ``D^alpha K_t = K_t * sum(coeff * prod P * prod Delta)``; the sum is the
ledger built by :func:`expand_dalpha`.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyMultiindex
from .gauss_core import CovAtTime, OUModel, covariance_qt, flow_dt, quad_form_r

__all__ = [
    "LogKernelValue",
    "DerivTerm",
    "DerivTermLedger",
    "expand_dalpha",
    "differentiate_ledger",
    "split_p_factors",
    "log_mehler",
    "p_vector",
    "p_vector_forms",
    "u_factor",
    "delta_matrix",
    "eval_dalpha_log",
    "log_kernel_batch",
    "p_batch",
    "ledger_log_batch",
    "signed_logsumexp",
]


# ---------------------------------------------------------------------------
# sign / log-magnitude numbers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LogKernelValue:
    """A real number stored as ``sign * exp(logmag)``."""

    sign: int
    logmag: float

    def __post_init__(self):
        if self.sign not in (-1, 0, 1):
            raise ValueError("sign must be -1, 0 or +1")
        if self.sign == 0 and self.logmag != -math.inf:
            object.__setattr__(self, "logmag", -math.inf)

    @classmethod
    def from_float(cls, v: float) -> "LogKernelValue":
        if v == 0:
            return cls(0, -math.inf)
        return cls(1 if v > 0 else -1, math.log(abs(v)))

    @classmethod
    def zero(cls) -> "LogKernelValue":
        return cls(0, -math.inf)

    def value(self) -> float:
        """Linear value; overflows to ``+-inf`` beyond double range."""
        if self.sign == 0:
            return 0.0
        try:
            return self.sign * math.exp(self.logmag)
        except OverflowError:
            return self.sign * math.inf

    def __mul__(self, other):
        if not isinstance(other, LogKernelValue):
            other = LogKernelValue.from_float(float(other))
        if self.sign == 0 or other.sign == 0:
            return LogKernelValue.zero()
        return LogKernelValue(self.sign * other.sign, self.logmag + other.logmag)

    __rmul__ = __mul__

    def __neg__(self):
        return LogKernelValue(-self.sign, self.logmag)

    def __add__(self, other):
        if not isinstance(other, LogKernelValue):
            other = LogKernelValue.from_float(float(other))
        s, l = signed_logsumexp(np.array([self.sign, other.sign]), np.array([self.logmag, other.logmag]))
        return LogKernelValue(int(s), float(l))

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-other)

    def scaled(self, log_factor: float) -> "LogKernelValue":
        """Multiply by ``exp(log_factor)``."""
        if self.sign == 0:
            return self
        return LogKernelValue(self.sign, self.logmag + log_factor)


def signed_logsumexp(signs, logmags, axis=0):
    """Sum of ``signs * exp(logmags)`` along ``axis`` in sign/log form."""
    signs = np.asarray(signs, dtype=float)
    logmags = np.asarray(logmags, dtype=float)
    live = signs != 0
    lm = np.where(live, logmags, -np.inf)
    ref = np.max(lm, axis=axis, keepdims=True)
    ref = np.where(np.isfinite(ref), ref, 0.0)
    with np.errstate(under="ignore"):
        tot = np.sum(np.where(live, signs * np.exp(lm - ref), 0.0), axis=axis)
    ref = np.squeeze(ref, axis=axis)
    with np.errstate(divide="ignore"):
        out_log = np.where(tot != 0, ref + np.log(np.abs(tot)), -np.inf)
    return np.sign(tot), out_log


# ---------------------------------------------------------------------------
# the derivative ledger
# ---------------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class DerivTerm:
    """``coeff * prod_{i in p_indices} P_i * prod_{(i,j) in delta_pairs} Delta_ij``."""

    p_indices: tuple[int, ...]
    delta_pairs: tuple[tuple[int, int], ...]
    coeff: int

    @property
    def order(self) -> int:
        return len(self.p_indices) + 2 * len(self.delta_pairs)


@dataclass(frozen=True)
class DerivTermLedger:
    alpha: tuple[int, ...]
    terms: tuple[DerivTerm, ...]

    @property
    def order(self) -> int:
        return sum(self.alpha)

    def as_counter(self) -> Counter:
        return Counter({(t.p_indices, t.delta_pairs): t.coeff for t in self.terms})

    def __str__(self):
        parts = []
        for t in self.terms:
            fac = [f"P{i + 1}" for i in t.p_indices] + [f"D{i + 1}{j + 1}" for i, j in t.delta_pairs]
            parts.append(f"{t.coeff}*" + "*".join(fac))
        return " + ".join(parts)


def _normalise(table: Counter, alpha) -> DerivTermLedger:
    terms = tuple(sorted(DerivTerm(p, d, c) for (p, d), c in table.items() if c != 0))
    return DerivTermLedger(tuple(int(a) for a in alpha), terms)


def differentiate_ledger(ledger: DerivTermLedger, ell: int) -> DerivTermLedger:
    """Apply ``d/dx_ell`` to ``K * (ledger polynomial)``.

    The derivative of ``K`` contributes a new factor ``P_ell``; the derivative
    of each ``P_k`` gives ``Delta_{k,ell}``; ``Delta`` does not depend on x.
    """
    out: Counter = Counter()
    for term in ledger.terms:
        p = term.p_indices
        out[(tuple(sorted(p + (ell,))), term.delta_pairs)] += term.coeff
        for k in range(len(p)):
            rest = p[:k] + p[k + 1:]
            pair = tuple(sorted((p[k], ell)))
            out[(rest, tuple(sorted(term.delta_pairs + (pair,))))] += term.coeff
    alpha = list(ledger.alpha)
    alpha[ell] += 1
    return _normalise(out, alpha)


def expand_dalpha(alpha: Sequence[int], n: int | None = None, order: Iterable[int] | None = None) -> DerivTermLedger:
    """Ledger of ``D^alpha K_t / K_t``.

    ``order`` optionally fixes the sequence of coordinate derivatives; the
    result does not depend on it (mixed partials commute), which the tests use
    as a structural check.
    """
    alpha = tuple(int(a) for a in alpha)
    if n is not None and len(alpha) != n:
        raise ValueError(f"multiindex {alpha} has length {len(alpha)}, expected {n}")
    if any(a < 0 for a in alpha):
        raise ValueError("multiindex entries must be >= 0")
    if sum(alpha) == 0:
        raise EmptyMultiindex("|alpha| must be >= 1")
    if order is None:
        order = [j for j, a in enumerate(alpha) for _ in range(a)]
    order = list(order)
    if sorted(order) != sorted(j for j, a in enumerate(alpha) for _ in range(a)):
        raise ValueError("derivative order does not match alpha")
    ledger = DerivTermLedger(tuple(0 for _ in alpha), (DerivTerm((), (), 1),))
    for ell in order:
        ledger = differentiate_ledger(ledger, ell)
    return ledger


def split_p_factors(ledger: DerivTermLedger) -> list[tuple[tuple[int, ...], tuple[int, ...], tuple, int]]:
    """Expand each ``P_j = a_j + b_j`` with ``a_j = <Q_inf^{-1} x, e_j>``.

    Returns ``(a_indices, b_indices, delta_pairs, coeff)`` tuples, merged.
    """
    out: Counter = Counter()
    for term in ledger.terms:
        m = len(term.p_indices)
        for mask in range(1 << m):
            a = tuple(sorted(term.p_indices[k] for k in range(m) if mask >> k & 1))
            b = tuple(sorted(term.p_indices[k] for k in range(m) if not mask >> k & 1))
            out[(a, b, term.delta_pairs)] += term.coeff
    return sorted((a, b, d, c) for (a, b, d), c in out.items() if c != 0)


# ---------------------------------------------------------------------------
# batched evaluation (times on axis 0, points on axis 1)
# ---------------------------------------------------------------------------

def _w_batch(stack, X, U):
    # D_{-t} u - x with shape (nt, npts, n)
    shift = np.einsum("tij,pj->tpi", stack["D_minus_shift"], U)
    return U[None] + shift, shift + (U - X)[None]


def log_kernel_batch(model: OUModel, stack: dict, X, U) -> np.ndarray:
    """``log K_t(x_p, u_p)`` for every time in ``stack`` and every pair ``p``."""
    X = np.atleast_2d(X)
    U = np.atleast_2d(U)
    _, w = _w_batch(stack, X, U)
    quad = np.einsum("tpi,tij,tpj->tp", w, stack["G"], w)
    head = 0.5 * (model.Qinf_logdet - stack["Qt_logdet"])
    return head[:, None] + quad_form_r(model, X)[None, :] - 0.5 * quad


def p_batch(model: OUModel, stack: dict, X, U) -> np.ndarray:
    """``P(t, x_p, u_p)`` as ``-Delta w + Q_inf^{-1} D_{-t} u`` (bounded for large t)."""
    X = np.atleast_2d(X)
    U = np.atleast_2d(U)
    DU, w = _w_batch(stack, X, U)
    return -np.einsum("tij,tpj->tpi", stack["Delta"], w) + DU @ model.Qinf_inv


def ledger_log_batch(ledger: DerivTermLedger, P: np.ndarray, Delta: np.ndarray):
    """Sign/log value of the ledger polynomial.

    ``P`` has shape ``(nt, npts, n)``, ``Delta`` ``(nt, n, n)``.
    """
    nt, npts = P.shape[:2]
    with np.errstate(divide="ignore"):
        logP = np.log(np.abs(P))
        logD = np.log(np.abs(Delta))
    sgnP = np.sign(P)
    sgnD = np.sign(Delta)
    signs = np.empty((len(ledger.terms), nt, npts))
    logs = np.empty_like(signs)
    for k, term in enumerate(ledger.terms):
        s = np.full((nt, npts), float(np.sign(term.coeff)))
        lm = np.full((nt, npts), math.log(abs(term.coeff)))
        for i in term.p_indices:
            s *= sgnP[:, :, i]
            lm += logP[:, :, i]
        for i, j in term.delta_pairs:
            s *= sgnD[:, i, j][:, None]
            lm += logD[:, i, j][:, None]
        signs[k] = s
        logs[k] = lm
    return signed_logsumexp(signs, logs, axis=0)


# ---------------------------------------------------------------------------
# scalar-point API
# ---------------------------------------------------------------------------

def _cov(model, t, cov):
    return cov if cov is not None else covariance_qt(model, t)


def _single_stack(c: CovAtTime) -> dict:
    return {k: np.asarray(getattr(c, k))[None, ...] for k in
            ("Qt", "Qt_inv", "Qt_logdet", "etB", "Delta", "G", "D_minus", "D_minus_shift", "QtinvEtB")}


def log_mehler(model: OUModel, t: float, x, u, cov: CovAtTime | None = None) -> LogKernelValue:
    """``K_t(x, u)`` in sign/log form (the sign is always +1)."""
    c = _cov(model, t, cov)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    lk = log_kernel_batch(model, _single_stack(c), x[None], u[None])[0, 0]
    return LogKernelValue(1, float(lk))


def p_vector(model: OUModel, t: float, x, u, cov: CovAtTime | None = None) -> np.ndarray:
    """``(P_1, ..., P_n)`` so that ``grad_x K_t = K_t P``."""
    c = _cov(model, t, cov)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return p_batch(model, _single_stack(c), x[None], u[None])[0, 0]


def p_vector_forms(model: OUModel, t: float, x, u) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Three algebraically equal expressions of ``P``.

    ``Q_inf^{-1} x + (Q_t^{-1} e^{tB})^T (u - D_t x)``, then the form through
    ``D_{-t} u``, then ``e^{tB^T} Q_t^{-1} (u - e^{tB} x)``.
    """
    c = covariance_qt(model, t)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    direct = model.Qinf_inv @ x + c.QtinvEtB.T @ (u - flow_dt(model, t) @ x)
    w = c.D_minus_shift @ u + (u - x)
    via_pullback = -c.Delta @ w + model.Qinf_inv @ (c.D_minus @ u)
    via_etb = c.QtinvEtB.T @ (u - c.etB @ x)
    return direct, via_pullback, via_etb


def u_factor(model: OUModel, t: float, x, u, cov: CovAtTime | None = None) -> np.ndarray:
    """``grad_u K_t / K_t = -Q_t^{-1} e^{tB} (D_{-t} u - x)``."""
    c = _cov(model, t, cov)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return -c.QtinvEtB @ (c.D_minus_shift @ u + (u - x))


def delta_matrix(model: OUModel, t: float, cov: CovAtTime | None = None) -> np.ndarray:
    """``Delta(t) = -e^{tB^T} Q_t^{-1} e^{tB}``: symmetric, negative definite."""
    return np.array(_cov(model, t, cov).Delta)


def eval_dalpha_log(model: OUModel, ledger: DerivTermLedger, t: float, x, u,
                    cov: CovAtTime | None = None) -> LogKernelValue:
    """``D^alpha_x K_t(x, u)`` in sign/log form."""
    c = _cov(model, t, cov)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    st = _single_stack(c)
    lk = log_kernel_batch(model, st, x[None], u[None])
    P = p_batch(model, st, x[None], u[None])
    s, lp = ledger_log_batch(ledger, P, st["Delta"])
    if s[0, 0] == 0:
        return LogKernelValue.zero()
    return LogKernelValue(int(s[0, 0]), float(lk[0, 0] + lp[0, 0]))
