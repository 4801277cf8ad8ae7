"""The OU semigroup on test functions, its generator, and Riesz potentials.

``H_t f(x) = int f(e^{tB} x - y) dgamma_t(y)`` is computed by tensor
Gauss-Hermite quadrature after factoring ``Q_t = S S^T``.  Polynomials also
have an exact route: Gaussian moments from Isserlis' recursion, so
``H_t`` maps a polynomial to a polynomial of the same degree.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Mapping

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.special import gammaln

from .errors import ComplexEigenvalueUnsupported, QuadratureBudgetExceeded, SpectralRouteUnavailable
from .gauss_core import OUModel, covariance_qt
from .quadrature import adaptive_log_integral

__all__ = [
    "Poly",
    "TestFunction",
    "QuadSettings",
    "SemigroupValue",
    "EigenfunctionSpec",
    "gaussian_moments",
    "gaussian_expectation",
    "semigroup_poly",
    "generator_poly",
    "apply_semigroup",
    "generator_apply",
    "project_p0perp",
    "mean_under_gamma_inf",
    "eigenfunction_specs",
    "riesz_potential_on_eigenfunction",
    "spectral_power",
]


# ---------------------------------------------------------------------------
# multivariate polynomials
# ---------------------------------------------------------------------------

class Poly:
    """Sparse real polynomial in ``n`` variables: ``{exponent tuple: coefficient}``."""

    __slots__ = ("n", "coeffs")

    def __init__(self, n: int, coeffs: Mapping[tuple, float] | None = None):
        self.n = int(n)
        self.coeffs: dict[tuple, float] = {}
        for k, c in (coeffs or {}).items():
            k = tuple(int(e) for e in k)
            if len(k) != self.n:
                raise ValueError(f"exponent {k} has wrong length for n={n}")
            if c != 0:
                self.coeffs[k] = self.coeffs.get(k, 0.0) + float(c)

    @classmethod
    def constant(cls, n, c):
        return cls(n, {(0,) * n: c})

    @classmethod
    def linear(cls, v):
        v = np.asarray(v, dtype=float)
        n = len(v)
        return cls(n, {tuple(int(i == j) for i in range(n)): v[j] for j in range(n)})

    @classmethod
    def from_terms(cls, n, terms):
        """``terms``: iterable of ``(exponent, coeff)``."""
        out = cls(n)
        for k, c in terms:
            out = out + cls(n, {tuple(k): c})
        return out

    @property
    def degree(self) -> int:
        return max((sum(k) for k in self.coeffs), default=0)

    def copy(self):
        return Poly(self.n, dict(self.coeffs))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        batch = x.ndim > 1
        x = np.atleast_2d(x)
        out = np.zeros(x.shape[0])
        for k, c in self.coeffs.items():
            out += c * np.prod(x ** np.asarray(k), axis=1)
        return out if batch else float(out[0])

    def _binop(self, other, sign):
        if not isinstance(other, Poly):
            other = Poly.constant(self.n, float(other))
        out = dict(self.coeffs)
        for k, c in other.coeffs.items():
            out[k] = out.get(k, 0.0) + sign * c
        return Poly(self.n, {k: c for k, c in out.items() if c != 0})

    def __add__(self, other):
        return self._binop(other, 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binop(other, -1.0)

    def __rsub__(self, other):
        return (-self) + other

    def __neg__(self):
        return Poly(self.n, {k: -c for k, c in self.coeffs.items()})

    def __mul__(self, other):
        if not isinstance(other, Poly):
            return Poly(self.n, {k: c * float(other) for k, c in self.coeffs.items()})
        out: dict[tuple, float] = {}
        for k1, c1 in self.coeffs.items():
            for k2, c2 in other.coeffs.items():
                k = tuple(a + b for a, b in zip(k1, k2))
                out[k] = out.get(k, 0.0) + c1 * c2
        return Poly(self.n, out)

    __rmul__ = __mul__

    def __pow__(self, m: int):
        out = Poly.constant(self.n, 1.0)
        for _ in range(m):
            out = out * self
        return out

    def diff(self, j: int) -> "Poly":
        out = {}
        for k, c in self.coeffs.items():
            if k[j]:
                kk = list(k)
                kk[j] -= 1
                out[tuple(kk)] = c * k[j]
        return Poly(self.n, out)

    def diff_multi(self, alpha) -> "Poly":
        p = self
        for j, a in enumerate(alpha):
            for _ in range(int(a)):
                p = p.diff(j)
        return p

    def linear_substitute(self, M) -> "Poly":
        """``x -> p(M x)``."""
        M = np.asarray(M, dtype=float)
        rows = [Poly.linear(M[i]) for i in range(self.n)]
        out = Poly(M.shape[1])
        for k, c in self.coeffs.items():
            term = Poly.constant(M.shape[1], c)
            for i, e in enumerate(k):
                if e:
                    term = term * rows[i] ** e
            out = out + term
        return out

    def coeff_norm(self) -> float:
        return math.sqrt(sum(c * c for c in self.coeffs.values()))

    def allclose(self, other, tol=1e-10) -> bool:
        return (self - other).coeff_norm() <= tol * max(1.0, self.coeff_norm(), other.coeff_norm())

    def __repr__(self):
        body = " + ".join(f"{c:.6g}*x^{k}" for k, c in sorted(self.coeffs.items()))
        return f"Poly(n={self.n}, {body or '0'})"


def gaussian_moments(Sigma, max_degree: int) -> dict[tuple, float]:
    """``E[Y^k]`` for ``Y ~ N(0, Sigma)`` and every ``|k| <= max_degree``.

    Isserlis recursion: ``E[Y_i Y^m] = sum_j Sigma_ij m_j E[Y^{m - e_j}]``.
    """
    Sigma = np.asarray(Sigma, dtype=float)
    n = Sigma.shape[0]
    mom = {(0,) * n: 1.0}
    for d in range(1, max_degree + 1):
        for k in _exponents_of_degree(n, d):
            i = next(j for j in range(n) if k[j])
            m = list(k)
            m[i] -= 1
            val = 0.0
            for j in range(n):
                if m[j]:
                    mm = list(m)
                    mm[j] -= 1
                    val += Sigma[i, j] * m[j] * mom[tuple(mm)]
            mom[k] = val
    return mom


@lru_cache(maxsize=None)
def _exponents_of_degree(n, d):
    out = []
    for c in itertools.combinations_with_replacement(range(n), d):
        k = [0] * n
        for j in c:
            k[j] += 1
        out.append(tuple(k))
    return tuple(out)


def gaussian_expectation(p: Poly, Sigma) -> Poly:
    """``m -> E[p(m + Y)]`` with ``Y ~ N(0, Sigma)``, as a polynomial in ``m``."""
    mom = gaussian_moments(Sigma, p.degree)
    out: dict[tuple, float] = {}
    for k, c in p.coeffs.items():
        for l in itertools.product(*(range(e + 1) for e in k)):
            ml = mom[tuple(l)]
            if ml == 0.0:
                continue
            binom = math.prod(math.comb(e, li) for e, li in zip(k, l))
            key = tuple(e - li for e, li in zip(k, l))
            out[key] = out.get(key, 0.0) + c * binom * ml
    return Poly(p.n, out)


def semigroup_poly(model: OUModel, t: float, p: Poly) -> Poly:
    """Exact ``H_t p`` (``gamma_t`` is symmetric, so the sign of ``y`` is irrelevant)."""
    cov = covariance_qt(model, t)
    return gaussian_expectation(p, cov.Qt).linear_substitute(cov.etB)


def generator_poly(model: OUModel, p: Poly) -> Poly:
    """``L p = tr(Q Hess p)/2 + <B x, grad p>``."""
    n = model.n
    out = Poly(n)
    for i in range(n):
        for j in range(n):
            if model.Q[i, j]:
                out = out + p.diff(i).diff(j) * (0.5 * model.Q[i, j])
    for j in range(n):
        out = out + p.diff(j) * Poly.linear(model.B[j])
    return out


# ---------------------------------------------------------------------------
# test functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadSettings:
    gh_order: int = 20
    max_nodes: int = 1_000_000
    rel_tol: float = 1e-10
    tau_min: float = -30.0
    tau_max: float = 10.0


@dataclass(eq=False)
class TestFunction:
    """Either a :class:`Poly` or a vectorised callable ``f(X) -> values``.

    ``support`` is an optional box ``(lo, hi)`` containing ``supp f``.
    """

    __test__ = False  # not a pytest class

    poly: Poly | None = None
    func: Callable | None = None
    n: int = 1
    smoothness: int = 2
    support: tuple | None = None
    _means: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if (self.poly is None) == (self.func is None):
            raise ValueError("give exactly one of poly / func")
        if self.poly is not None:
            self.n = self.poly.n
            self.smoothness = 10 ** 6

    @classmethod
    def polynomial(cls, p: Poly) -> "TestFunction":
        return cls(poly=p)

    @classmethod
    def callable(cls, f, n, smoothness=2, support=None) -> "TestFunction":
        return cls(func=f, n=n, smoothness=smoothness, support=support)

    @property
    def kind(self) -> str:
        return "Polynomial" if self.poly is not None else "Callable"

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        if self.poly is not None:
            return self.poly(X)
        batch = X.ndim > 1
        vals = np.asarray(self.func(np.atleast_2d(X)), dtype=float)
        return vals if batch else float(vals[0])

    def mean(self, model: OUModel, quad: QuadSettings | None = None) -> float:
        key = id(model)
        if key not in self._means:
            self._means[key] = mean_under_gamma_inf(model, self, quad)
        return self._means[key]


@dataclass(frozen=True)
class SemigroupValue:
    value: float
    exact: float | None = None


def _gh_nodes(n, order, max_nodes):
    if order ** n > max_nodes:
        raise QuadratureBudgetExceeded(f"{order}^{n} Gauss-Hermite nodes exceed the budget {max_nodes}")
    return _gh_table(n, order)


@lru_cache(maxsize=32)
def _gh_table(n, order):
    z, w = hermgauss(order)
    z = z * math.sqrt(2.0)
    w = w / math.sqrt(math.pi)
    Z = np.array(list(itertools.product(z, repeat=n)))
    W = np.prod(np.array(list(itertools.product(w, repeat=n))), axis=1)
    Z.flags.writeable = False
    W.flags.writeable = False
    return Z, W


def _gaussian_quad(f, S, mean, quad):
    """``E f(mean - S z)`` for standard normal ``z``; ``mean`` may be (m, n)."""
    n = S.shape[0]
    Z, W = _gh_nodes(n, quad.gh_order, quad.max_nodes)
    Y = Z @ S.T
    mean = np.atleast_2d(mean)
    out = np.empty(mean.shape[0])
    for i, m in enumerate(mean):
        out[i] = np.dot(W, f(m[None, :] - Y))
    return out


def mean_under_gamma_inf(model: OUModel, f: TestFunction, quad: QuadSettings | None = None) -> float:
    if f.poly is not None:
        return gaussian_expectation(f.poly, model.Qinf)(np.zeros(model.n))
    quad = quad or QuadSettings()
    return float(_gaussian_quad(f, model.Qinf_sqrt, np.zeros(model.n), quad)[0])


def apply_semigroup(model: OUModel, t: float, f: TestFunction, x, quad: QuadSettings | None = None) -> SemigroupValue:
    """``H_t f(x)`` by Gauss-Hermite quadrature; polynomials also get the exact value."""
    quad = quad or QuadSettings()
    x = np.atleast_1d(np.asarray(x, dtype=float))
    cov = covariance_qt(model, t)
    S = np.linalg.cholesky(cov.Qt)
    val = float(_gaussian_quad(f, S, cov.etB @ x, quad)[0])
    exact = None
    if f.poly is not None:
        exact = semigroup_poly(model, t, f.poly)(x)
    return SemigroupValue(val, exact)


def generator_apply(model: OUModel, f: TestFunction, x, h: float | None = None) -> float:
    """``L f(x)``: exact for polynomials, central differences otherwise."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if f.poly is not None:
        return generator_poly(model, f.poly)(x)
    n = model.n
    h = h or 1e-4 * (1.0 + np.linalg.norm(x))
    E = np.eye(n) * h
    f0 = f(x)
    grad = np.array([(f(x + E[j]) - f(x - E[j])) / (2 * h) for j in range(n)])
    hess = np.empty((n, n))
    for i in range(n):
        hess[i, i] = (f(x + E[i]) - 2 * f0 + f(x - E[i])) / h ** 2
        for j in range(i + 1, n):
            hess[i, j] = hess[j, i] = (f(x + E[i] + E[j]) - f(x + E[i] - E[j])
                                       - f(x - E[i] + E[j]) + f(x - E[i] - E[j])) / (4 * h * h)
    return float(0.5 * np.sum(model.Q * hess) + (model.B @ x) @ grad)


def project_p0perp(model: OUModel, f: TestFunction, quad: QuadSettings | None = None) -> TestFunction:
    """Remove the ``gamma_inf``-mean."""
    m = f.mean(model, quad)
    if f.poly is not None:
        return TestFunction.polynomial(f.poly - m)
    g = f.func
    return TestFunction.callable(lambda X: g(X) - m, f.n, f.smoothness, None)


# ---------------------------------------------------------------------------
# eigenfunctions and Riesz potentials
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EigenfunctionSpec:
    """``f_v(x) = <v, x>`` with ``B^T v = lambda_b v``; then ``-L f_v = -lambda_b f_v``."""

    v: np.ndarray
    lambda_b: float

    def function(self) -> TestFunction:
        return TestFunction.polynomial(Poly.linear(self.v))

    def check(self, model: OUModel, tol: float = 1e-10) -> None:
        v = np.asarray(self.v, dtype=float)
        if np.iscomplexobj(self.v) or isinstance(self.lambda_b, complex):
            raise ComplexEigenvalueUnsupported("only real eigenvalues are supported")
        if not self.lambda_b < 0:
            raise ValueError("eigenvalue must be negative")
        if np.linalg.norm(model.B.T @ v - self.lambda_b * v) > tol * np.linalg.norm(v) * max(1.0, np.linalg.norm(model.B)):
            raise ValueError("v is not an eigenvector of B^T")


def eigenfunction_specs(model: OUModel, imag_tol: float = 1e-12) -> list[EigenfunctionSpec]:
    """Real eigenpairs of ``B^T`` (complex pairs are skipped)."""
    lam, V = np.linalg.eig(model.B.T)
    out = []
    for k in range(len(lam)):
        if abs(lam[k].imag) > imag_tol * max(1.0, abs(lam[k])):
            continue
        v = V[:, k].real
        v = v / np.linalg.norm(v)
        out.append(EigenfunctionSpec(v, float(lam[k].real)))
    return out


def riesz_potential_on_eigenfunction(model: OUModel, spec: EigenfunctionSpec, a: float, x,
                                     quad: QuadSettings | None = None) -> float:
    """``(1/Gamma(a)) int_0^inf t^{a-1} H_t f_v(x) dt`` by quadrature in ``tau = log t``.

    ``H_t f_v`` is evaluated by Gauss-Hermite quadrature at every node.  The
    piece ``(0, e^{tau_min})`` is added analytically as
    ``H_{t_min} f_v(x) t_min^a / a`` (``H_t f -> f`` as ``t -> 0``).
    """
    if isinstance(spec.lambda_b, complex) or np.iscomplexobj(spec.v):
        raise ComplexEigenvalueUnsupported("complex eigenvalues of B are not supported")
    if not a > 0:
        raise ValueError("a must be > 0")
    quad = quad or QuadSettings()
    spec.check(model)
    f = spec.function()
    x = np.atleast_1d(np.asarray(x, dtype=float))
    log_gamma = float(gammaln(a))

    def func(taus):
        vals = np.array([apply_semigroup(model, math.exp(tau), f, x, quad).value for tau in taus])
        with np.errstate(divide="ignore"):
            logs = np.log(np.abs(vals)) + a * np.asarray(taus) - log_gamma
        return np.sign(vals)[:, None], logs[:, None]

    res = adaptive_log_integral(func, quad.tau_min, quad.tau_max, 1, rel_tol=quad.rel_tol,
                                panel_width=1.0, order=10)
    body = float(res.sign[0] * math.exp(res.logmag[0])) if res.sign[0] != 0 else 0.0
    t_min = math.exp(quad.tau_min)
    head = apply_semigroup(model, t_min, f, x, quad).value * t_min ** a / (a * math.exp(log_gamma))
    return body + head


def spectral_power(model: OUModel, p: Poly, a: float, tol: float = 1e-9) -> Poly:
    """``(-L)^{-a} P_0^perp p`` for an eigen-polynomial ``p``.

    Raises :class:`SpectralRouteUnavailable` unless ``P_0^perp p`` satisfies
    ``-L q = mu q`` with real ``mu > 0``.
    """
    q = p - gaussian_expectation(p, model.Qinf)(np.zeros(model.n))
    if q.coeff_norm() == 0:
        return Poly(model.n)
    Lq = generator_poly(model, q)
    keys = sorted(set(q.coeffs) | set(Lq.coeffs))
    qv = np.array([q.coeffs.get(k, 0.0) for k in keys])
    lv = np.array([Lq.coeffs.get(k, 0.0) for k in keys])
    mu = -float(qv @ lv / (qv @ qv))
    if not mu > 0 or np.linalg.norm(lv + mu * qv) > tol * max(1.0, np.linalg.norm(lv)):
        raise SpectralRouteUnavailable("P_0^perp f is not an eigenfunction of L")
    return q * mu ** (-a)
