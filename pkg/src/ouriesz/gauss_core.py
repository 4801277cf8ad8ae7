"""Model construction and the matrix-valued objects of a general Gaussian OU setting.

An Ornstein-Uhlenbeck model is the pair ``(Q, B)`` with ``Q`` symmetric
positive definite (covariance) and ``B`` Hurwitz (drift).  Everything else
is derived from it::

    Q_t      = int_0^t e^{sB} Q e^{sB^T} ds           (0 < t <= inf)
    D_t      = Q_inf e^{-tB^T} Q_inf^{-1}              (t real)
    R(x)     = <Q_inf^{-1} x, x> / 2,   |x|_Q = sqrt(2 R(x))

Polar coordinates write ``x = D_s xt`` with ``xt`` on the ellipsoid
``{R = beta}``; Lebesgue measure becomes ``weight(s, xt) ds dS(xt)``.
"""
from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import brentq

from .errors import (
    LyapunovSolveFailed,
    NotHurwitz,
    NotPositiveDefinite,
    NotSymmetric,
    QuadratureDivergence,
    RootBracketFailure,
    ZeroVector,
)

__all__ = [
    "Tolerances",
    "OUModel",
    "CovAtTime",
    "CovCache",
    "PolarPoint",
    "Region",
    "build_model",
    "standard_model",
    "random_model",
    "covariance_qt",
    "cov_stack",
    "flow_dt",
    "flow_dt_batch",
    "flow_dt_forms",
    "quad_form_r",
    "q_norm",
    "log_gaussian_density",
    "to_polar",
    "from_polar",
    "polar_volume_element",
    "polar_weight",
    "ellipse_param",
    "classify_region",
]

# |t| above this is refused by flow_dt (e^{-tB^T} would overflow for fast drifts)
MAX_FLOW_TIME = 100.0
# Q_t switches from the block-exponential to Q_inf - e^{tB} Q_inf e^{tB^T} above this
VAN_LOAN_SWITCH = 1.0


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _sym(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


@dataclass(frozen=True)
class Tolerances:
    """Acceptance thresholds used by :func:`build_model`.

    ``pd_rel`` is relative to ``||Q||``; ``hurwitz`` is absolute on the real
    parts of the eigenvalues of ``B``.
    """

    pd_rel: float = 1e-10
    hurwitz: float = 1e-8
    symmetry_rel: float = 1e-12
    lyapunov_rel: float = 1e-10


@dataclass(frozen=True, eq=False)
class OUModel:
    Q: np.ndarray
    B: np.ndarray
    Qinf: np.ndarray
    Qinf_inv: np.ndarray
    Qinf_logdet: float
    Qinf_sqrt: np.ndarray
    tol: Tolerances = field(default_factory=Tolerances)

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def trace_B(self) -> float:
        return float(np.trace(self.B))

    def lyapunov_residual(self) -> float:
        """Relative residual ``||B Qinf + Qinf B^T + Q|| / ||Q||``."""
        res = self.B @ self.Qinf + self.Qinf @ self.B.T + self.Q
        return float(np.linalg.norm(res, 2) / np.linalg.norm(self.Q, 2))

    def to_dict(self) -> dict:
        return {"n": self.n, "Q": self.Q.tolist(), "B": self.B.tolist()}


def build_model(Q, B, tol: Tolerances | None = None) -> OUModel:
    """Validate ``(Q, B)`` and solve ``B X + X B^T = -Q`` for the stationary covariance.

    Raises
    ------
    NotSymmetric, NotPositiveDefinite
        ``Q`` is not symmetric positive definite.
    NotHurwitz
        Some eigenvalue of ``B`` has real part ``>= -tol.hurwitz``.
    LyapunovSolveFailed
        The Lyapunov residual exceeds ``tol.lyapunov_rel``.
    """
    tol = tol or Tolerances()
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or Q.shape != B.shape:
        raise ValueError(f"Q and B must be square of equal size, got {Q.shape} and {B.shape}")
    if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(B))):
        raise ValueError("Q and B must have finite entries")

    qnorm = np.linalg.norm(Q, 2)
    if np.linalg.norm(Q - Q.T, 2) > tol.symmetry_rel * max(qnorm, 1e-300):
        raise NotSymmetric("Q is not symmetric")
    Q = _sym(Q)
    qmin = np.linalg.eigvalsh(Q)[0]
    if qmin <= tol.pd_rel * qnorm:
        raise NotPositiveDefinite(f"Q is not positive definite (min eigenvalue {qmin:.3e})")

    re_max = np.linalg.eigvals(B).real.max()
    if re_max >= -tol.hurwitz:
        raise NotHurwitz(f"B is not Hurwitz (max real part {re_max:.3e})")

    try:
        Qinf = _sym(sla.solve_continuous_lyapunov(B, -Q))
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise LyapunovSolveFailed(str(exc)) from exc
    resid = np.linalg.norm(B @ Qinf + Qinf @ B.T + Q, 2) / qnorm
    if not np.isfinite(resid) or resid > tol.lyapunov_rel:
        raise LyapunovSolveFailed(f"Lyapunov residual {resid:.3e} exceeds {tol.lyapunov_rel:.1e}")
    try:
        L = np.linalg.cholesky(Qinf)
    except np.linalg.LinAlgError as exc:
        raise LyapunovSolveFailed("stationary covariance is not positive definite") from exc
    Qinf_inv = _sym(sla.cho_solve((L, True), np.eye(Q.shape[0])))
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return OUModel(
        Q=_frozen(Q),
        B=_frozen(B),
        Qinf=_frozen(Qinf),
        Qinf_inv=_frozen(Qinf_inv),
        Qinf_logdet=logdet,
        Qinf_sqrt=_frozen(L),
        tol=tol,
    )


def standard_model(n: int = 1) -> OUModel:
    """``Q = I``, ``B = -I``: the classical Ornstein-Uhlenbeck operator."""
    return build_model(np.eye(n), -np.eye(n))


def random_model(rng: np.random.Generator, n: int, rate_range=(0.3, 2.0),
                 nonnormality: float = 0.5, real_spectrum: bool = False) -> OUModel:
    """Draw a well-conditioned random model.

    ``B = -(S diag(rates) S^{-1})`` with a random near-identity ``S`` (real
    spectrum) or ``B = -diag(rates) + skew`` perturbations (general case).
    """
    A = rng.standard_normal((n, n))
    Q = A @ A.T / n + 0.5 * np.eye(n)
    rates = rng.uniform(*rate_range, size=n)
    if real_spectrum:
        S = np.eye(n) + nonnormality * rng.standard_normal((n, n)) / np.sqrt(n)
        while abs(np.linalg.det(S)) < 0.2:
            S = np.eye(n) + nonnormality * rng.standard_normal((n, n)) / np.sqrt(n)
        B = -S @ np.diag(rates) @ np.linalg.inv(S)
    else:
        K = rng.standard_normal((n, n))
        B = -np.diag(rates) + nonnormality * np.triu(K, 1) + 0.5 * nonnormality * (K - K.T) * np.tri(n, k=-1)
        # pull the spectrum back inside the left half plane if the perturbation pushed it out
        re_max = np.linalg.eigvals(B).real.max()
        if re_max > -rate_range[0]:
            B = B - (re_max + rate_range[0]) * np.eye(n)
    return build_model(Q, B)


# ---------------------------------------------------------------------------
# Q_t and friends
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CovAtTime:
    """Everything that depends on ``t`` alone.

    ``Dt_diff_inv = Q_t^{-1} - Q_inf^{-1}`` is assembled as
    ``Q_t^{-1} (e^{tB} Q_inf e^{tB^T}) Q_inf^{-1}`` so it keeps full relative
    accuracy when it is exponentially small.
    """

    t: float
    Qt: np.ndarray
    Qt_inv: np.ndarray
    Dt_diff_inv: np.ndarray
    Qt_logdet: float
    etB: np.ndarray
    Delta: np.ndarray
    G: np.ndarray
    D_minus: np.ndarray
    D_minus_shift: np.ndarray
    QtinvEtB: np.ndarray


def _van_loan_small(model: OUModel, ts):
    """``(e^{tB}, Q_t, D_{-t} - I)`` for small ``t`` from one block exponential.

    ``expm(t [[-B, Q, 0], [0, B^T, I], [0, 0, 0]])`` holds ``e^{-tB}``-weighted
    ``int_0^t e^{-sB} Q e^{sB^T} ds`` in block (0, 1), ``e^{tB^T}`` in block
    (1, 1) and ``t phi_1(tB^T)`` in block (1, 2), with ``e^A - I = A phi_1(A)``.
    """
    n = model.n
    M = np.zeros((3 * n, 3 * n))
    M[:n, :n] = -model.B
    M[:n, n:2 * n] = model.Q
    M[n:2 * n, n:2 * n] = model.B.T
    M[n:2 * n, 2 * n:] = np.eye(n)
    E = sla.expm(ts[:, None, None] * M)
    etBT = E[:, n:2 * n, n:2 * n]
    Qt = etBT.swapaxes(-1, -2) @ E[:, :n, n:2 * n]
    em1 = model.B.T @ E[:, n:2 * n, 2 * n:]
    return etBT.swapaxes(-1, -2), Qt, em1


def cov_stack(model: OUModel, ts) -> dict:
    """Vectorised Q_t data for an array of times, each entry stacked on axis 0.

    Keys: ``Qt, Qt_inv, Dt_diff_inv, Qt_logdet, etB, Delta, G, D_minus, QtinvEtB``.
    ``G = Q_inf^{-1} - Delta = D_t^T (Q_t^{-1}-Q_inf^{-1}) D_t`` and
    ``D_minus = D_{-t}``; both stay bounded as ``t -> inf``.  ``D_minus_shift``
    is ``D_{-t} - I`` formed without cancellation for small ``t`` (through
    ``e^{A} - I = A phi_1(A)``), so ``D_{-t}u - x = (D_{-t} - I)u + (u - x)``
    stays accurate when ``u`` is close to ``x``.
    """
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    if np.any(~np.isfinite(ts)) or np.any(ts <= 0):
        raise ValueError("times must be finite and > 0")
    n = model.n
    B, Qinf, Qinf_inv = model.B, model.Qinf, model.Qinf_inv
    small = ts <= VAN_LOAN_SWITCH
    etB = np.empty((len(ts), n, n))
    Qt = np.empty_like(etB)
    em1 = np.empty_like(etB)
    with np.errstate(over="ignore", invalid="ignore"):
        if np.any(small):
            etB[small], Qt[small], em1[small] = _van_loan_small(model, ts[small])
        if np.any(~small):
            etB[~small] = sla.expm(ts[~small, None, None] * B)
            Qt[~small] = Qinf - etB[~small] @ Qinf @ np.swapaxes(etB[~small], -1, -2)
            em1[~small] = np.swapaxes(etB[~small], -1, -2) - np.eye(n)
        diff = etB @ Qinf @ np.swapaxes(etB, -1, -2)
    Qt = _sym(Qt)
    if not np.all(np.isfinite(Qt)) or not np.all(np.isfinite(etB)):
        raise QuadratureDivergence("matrix exponential overflowed while forming Q_t")
    try:
        L = np.linalg.cholesky(Qt)
    except np.linalg.LinAlgError as exc:
        raise QuadratureDivergence("Q_t lost positive definiteness") from exc
    eye = np.broadcast_to(np.eye(n), Qt.shape)
    Linv = np.linalg.solve(L, eye)
    Qt_inv = _sym(np.swapaxes(Linv, -1, -2) @ Linv)
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    QtinvEtB = Qt_inv @ etB
    shift = Qinf @ em1 @ Qinf_inv
    Delta = _sym(-np.swapaxes(etB, -1, -2) @ QtinvEtB)
    return {
        "t": ts,
        "Qt": Qt,
        "Qt_inv": Qt_inv,
        "Dt_diff_inv": _sym(Qt_inv @ diff @ Qinf_inv),
        "Qt_logdet": logdet,
        "etB": etB,
        "Delta": Delta,
        "G": _sym(Qinf_inv - Delta),
        "D_minus": np.eye(n) + shift,
        "D_minus_shift": shift,
        "QtinvEtB": QtinvEtB,
    }


def covariance_qt(model: OUModel, t: float) -> CovAtTime:
    """Q_t and the derived matrices at a single time ``t > 0``."""
    t = float(t)
    if not np.isfinite(t) or t <= 0:
        raise ValueError(f"t must be finite and > 0, got {t}")
    st = cov_stack(model, [t])
    return CovAtTime(
        t=t,
        Qt=_frozen(st["Qt"][0]),
        Qt_inv=_frozen(st["Qt_inv"][0]),
        Dt_diff_inv=_frozen(st["Dt_diff_inv"][0]),
        Qt_logdet=float(st["Qt_logdet"][0]),
        etB=_frozen(st["etB"][0]),
        Delta=_frozen(st["Delta"][0]),
        G=_frozen(st["G"][0]),
        D_minus=_frozen(st["D_minus"][0]),
        D_minus_shift=_frozen(st["D_minus_shift"][0]),
        QtinvEtB=_frozen(st["QtinvEtB"][0]),
    )


_STACK_KEYS = ("Qt", "Qt_inv", "Dt_diff_inv", "Qt_logdet", "etB", "Delta", "G", "D_minus", "D_minus_shift", "QtinvEtB")


class CovCache:
    """Per-run memo of the :func:`cov_stack` data keyed by the exact float ``t``.

    Rows live in per-key arrays grown by doubling, so a stack lookup is a
    single fancy-index.  Safe to share between threads: all access is guarded.
    """

    def __init__(self, model: OUModel):
        self.model = model
        self._index: dict[float, int] = {}
        self._cols: dict[str, np.ndarray] = {}
        self._size = 0
        self._lock = threading.Lock()

    def __len__(self):
        return self._size

    def _append(self, st: dict, ts) -> None:
        m = len(ts)
        if not self._cols:
            self._cols = {k: np.empty((max(2 * m, 64),) + np.shape(st[k])[1:]) for k in _STACK_KEYS}
        cap = len(self._cols["Qt"])
        if self._size + m > cap:
            new_cap = max(2 * cap, self._size + m)
            for k, v in self._cols.items():
                grown = np.empty((new_cap,) + v.shape[1:])
                grown[:self._size] = v[:self._size]
                self._cols[k] = grown
        for k in _STACK_KEYS:
            self._cols[k][self._size:self._size + m] = st[k]
        for i, t in enumerate(ts):
            self._index[t] = self._size + i
        self._size += m

    def stack(self, ts) -> dict:
        """Like :func:`cov_stack` but reusing and filling the memo table."""
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        keys = ts.tolist()
        with self._lock:
            missing = sorted({t for t in keys if t not in self._index})
        if missing:
            st = cov_stack(self.model, missing)
            with self._lock:
                fresh = [i for i, t in enumerate(missing) if t not in self._index]
                if fresh:
                    self._append({k: st[k][fresh] for k in _STACK_KEYS}, [missing[i] for i in fresh])
        with self._lock:
            rows = np.fromiter((self._index[t] for t in keys), dtype=np.intp, count=len(keys))
            out = {"t": ts}
            for k in _STACK_KEYS:
                out[k] = self._cols[k][rows]
        return out

    def get(self, t: float) -> CovAtTime:
        st = self.stack([float(t)])
        return CovAtTime(t=float(t), **{k: (float(st[k][0]) if k == "Qt_logdet" else _frozen(st[k][0]))
                                        for k in _STACK_KEYS})


# ---------------------------------------------------------------------------
# the flow D_t
# ---------------------------------------------------------------------------

def flow_dt(model: OUModel, t: float) -> np.ndarray:
    """``D_t = Q_inf e^{-tB^T} Q_inf^{-1}``; a one-parameter group in ``t``."""
    t = float(t)
    if not np.isfinite(t) or abs(t) > MAX_FLOW_TIME:
        raise QuadratureDivergence(f"|t| = {abs(t):g} exceeds the flow limit {MAX_FLOW_TIME:g}")
    return model.Qinf @ sla.expm(-t * model.B.T) @ model.Qinf_inv


def flow_dt_batch(model: OUModel, ts) -> np.ndarray:
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    if np.any(~np.isfinite(ts)) or np.any(np.abs(ts) > MAX_FLOW_TIME):
        raise QuadratureDivergence(f"flow times must satisfy |t| <= {MAX_FLOW_TIME:g}")
    return model.Qinf @ sla.expm(-ts[:, None, None] * model.B.T) @ model.Qinf_inv


def flow_dt_forms(model: OUModel, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The three expressions of ``D_t`` for ``t > 0``.

    Returns ``(definition, via Q_t^{-1}-Q_inf^{-1}, via e^{tB} + Q_t e^{-tB^T} Q_inf^{-1})``.
    """
    cov = covariance_qt(model, t)
    d_def = flow_dt(model, t)
    d_diff = np.linalg.solve(cov.Dt_diff_inv, cov.Qt_inv @ cov.etB)
    d_sum = cov.etB + cov.Qt @ sla.expm(-t * model.B.T) @ model.Qinf_inv
    return d_def, d_diff, d_sum


# ---------------------------------------------------------------------------
# quadratic form, norm, densities
# ---------------------------------------------------------------------------

def quad_form_r(model: OUModel, x) -> np.ndarray | float:
    """``R(x) = <Q_inf^{-1} x, x>/2``; ``x`` may carry leading batch axes."""
    x = np.asarray(x, dtype=float)
    r = 0.5 * np.einsum("...i,ij,...j->...", x, model.Qinf_inv, x)
    return float(r) if r.ndim == 0 else r


def q_norm(model: OUModel, x):
    return np.sqrt(2.0 * np.asarray(quad_form_r(model, x)))


def log_gaussian_density(model: OUModel, t: float, x) -> np.ndarray | float:
    """Log-density of ``gamma_t`` (centred, covariance ``Q_t``); ``t = inf`` allowed."""
    x = np.asarray(x, dtype=float)
    n = model.n
    if np.isinf(t) and t > 0:
        quad = 2.0 * quad_form_r(model, x)
        logdet = model.Qinf_logdet
    else:
        cov = covariance_qt(model, t)
        quad = np.einsum("...i,ij,...j->...", x, cov.Qt_inv, x)
        logdet = cov.Qt_logdet
    out = -0.5 * (n * np.log(2 * np.pi) + logdet + quad)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# polar coordinates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PolarPoint:
    s: float
    xtilde: np.ndarray
    beta: float
    weight: float


def polar_weight(model: OUModel, s, xtilde) -> np.ndarray | float:
    """Volume factor ``e^{-s tr B} |Q^{1/2} Q_inf^{-1} xt|^2 / (2 |Q_inf^{-1} xt|)``.

    Broadcasts over leading axes of ``s`` and ``xtilde``.
    """
    s = np.asarray(s, dtype=float)
    v = np.asarray(xtilde, dtype=float) @ model.Qinf_inv
    num = np.einsum("...i,ij,...j->...", v, model.Q, v)
    w = np.exp(-s * model.trace_B) * num / (2.0 * np.linalg.norm(v, axis=-1))
    return float(w) if np.ndim(w) == 0 else w


def polar_volume_element(model: OUModel, p: PolarPoint) -> float:
    return float(polar_weight(model, p.s, p.xtilde))


def from_polar(model: OUModel, p: PolarPoint) -> np.ndarray:
    return flow_dt(model, p.s) @ p.xtilde


def to_polar(model: OUModel, x, beta: float) -> PolarPoint:
    """Solve ``x = D_s xt`` with ``R(xt) = beta``.

    ``s -> R(D_{-s} x)`` is strictly decreasing, so the root is bracketed by
    doubling away from ``s = 0`` and then located by Brent's method.
    """
    x = np.asarray(x, dtype=float)
    if not beta > 0:
        raise ValueError("beta must be > 0")
    if not np.any(x):
        raise ZeroVector("x = 0 has no polar representation")

    def g(s):
        return quad_form_r(model, flow_dt(model, -s) @ x) - beta

    g0 = g(0.0)
    tol = 1e-12 * max(1.0, beta)
    if abs(g0) <= tol:
        return PolarPoint(0.0, x.copy(), float(beta), polar_weight(model, 0.0, x))
    step = 1.0 if g0 > 0 else -1.0
    a, b = 0.0, step
    while g(b) * g0 > 0:
        a, b = b, 2.0 * b
        if abs(b) > MAX_FLOW_TIME:
            raise RootBracketFailure(
                f"no sign change of R(D_-s x) - beta within |s| <= {MAX_FLOW_TIME:g}",
                bracket=(a, b / 2.0))
    lo, hi = min(a, b), max(a, b)
    s = brentq(g, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    xt = flow_dt(model, -s) @ x
    # rescale onto the ellipsoid; the correction is at rounding level
    xt = xt * np.sqrt(beta / quad_form_r(model, xt))
    return PolarPoint(float(s), xt, float(beta), polar_weight(model, s, xt))


def ellipse_param(model: OUModel, beta: float, theta):
    """Points of ``E_beta`` (n = 2) at angles ``theta`` and the arc-length density.

    Returns ``(points, dS/dtheta)``.
    """
    if model.n != 2:
        raise ValueError("ellipse_param needs n = 2")
    theta = np.asarray(theta, dtype=float)
    circ = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    dcirc = np.stack([-np.sin(theta), np.cos(theta)], axis=-1)
    scale = np.sqrt(2.0 * beta)
    pts = scale * circ @ model.Qinf_sqrt.T
    speed = scale * np.linalg.norm(dcirc @ model.Qinf_sqrt.T, axis=-1)
    return pts, speed


# ---------------------------------------------------------------------------
# local / global regions
# ---------------------------------------------------------------------------

class Region(enum.Enum):
    LOCAL = "Local"
    GLOBAL = "Global"


def classify_region(model: OUModel | None, x, u, A: float) -> Region:
    """``Local`` iff ``|x - u| <= A / (1 + |x|)`` (boundary counts as local)."""
    if not A > 0:
        raise ValueError("A must be > 0")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return Region.LOCAL if np.linalg.norm(x - u) <= A / (1.0 + np.linalg.norm(x)) else Region.GLOBAL
