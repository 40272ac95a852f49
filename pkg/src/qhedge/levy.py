"""Lévy measures used as jump drivers.

Two parametric families are provided (CGMY and normal inverse Gaussian) plus a
wrapper for user supplied densities.  Every measure exposes

* ``density(y)``: the Lévy density, vectorised, undefined at ``y == 0``;
* ``interval_integral(lo, hi, power)``: integrals of ``y**power * nu(dy)``;
* ``tail_error_integral(cutoff, tau)``: the truncation error weight;
* ``compensator_drift()`` and ``cumulant(u)`` for drift bookkeeping.

The parametric families also carry a numeric ``kind``/``params`` pair so that
the numba kernels in :mod:`qhedge._kernels` can evaluate the density without
calling back into Python.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numba import njit
from numpy.polynomial import chebyshev as _cheb
from scipy import integrate, special

__all__ = [
    "DomainError",
    "UnsupportedMeasure",
    "LevyMeasure",
    "CGMY",
    "NIG",
    "CustomMeasure",
    "bessel_k1",
    "density",
    "interval_integral",
    "tail_error_integral",
    "compensator_drift",
]

KIND_CGMY = 0
KIND_NIG = 1


class DomainError(ValueError):
    """Raised when a measure is evaluated where it is not defined."""


class UnsupportedMeasure(NotImplementedError):
    """Raised when an operation needs a closed form the measure lacks."""


# ---------------------------------------------------------------------------
# Modified Bessel function of the second kind, order one.
#
# x <= 2 uses the ascending series, x > 2 a Chebyshev expansion of
# sqrt(x) * exp(x) * K1(x) in the variable 4/x - 1.  The expansion
# coefficients are fitted once at import against scipy's k1e.
# ---------------------------------------------------------------------------

_EULER = 0.57721566490153286061


def _fit_k1_large(deg: int = 24) -> np.ndarray:
    def target(v):
        v = np.asarray(v, dtype=float)
        out = np.full(v.shape, math.sqrt(math.pi / 2.0))
        inner = v > -1.0 + 1e-15
        x = 4.0 / (v[inner] + 1.0)
        out[inner] = special.k1e(x) * np.sqrt(x)
        return out

    return _cheb.chebinterpolate(target, deg)


_K1_CHEB = _fit_k1_large()


@njit(cache=True)
def _k1_scalar(x):
    if x <= 2.0:
        q = 0.25 * x * x
        term = 1.0  # (x^2/4)^k / (k! (k+1)!)
        psi_sum = 1.0 - 2.0 * _EULER  # psi(1) + psi(2)
        s_i = 0.0
        s_k = 0.0
        for k in range(40):
            s_i += term
            s_k += psi_sum * term
            term *= q / ((k + 1.0) * (k + 2.0))
            psi_sum += 1.0 / (k + 1.0) + 1.0 / (k + 2.0)
            if term < 1e-18 * s_i:
                break
        i1 = 0.5 * x * s_i
        return 1.0 / x + math.log(0.5 * x) * i1 - 0.25 * x * s_k
    v = 4.0 / x - 1.0
    c = _K1_CHEB
    b1 = 0.0
    b2 = 0.0
    for k in range(c.shape[0] - 1, 0, -1):
        tmp = 2.0 * v * b1 - b2 + c[k]
        b2 = b1
        b1 = tmp
    val = v * b1 - b2 + c[0]
    return val * math.exp(-x) / math.sqrt(x)


@njit(cache=True)
def _k1_array(x):
    out = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        out[i] = _k1_scalar(x[i])
    return out


def bessel_k1(x):
    """Modified Bessel function ``K_1`` for positive arguments.

    Relative accuracy is about 1e-14 over ``(0, 700]``.
    """
    arr = np.asarray(x, dtype=float)
    if np.any(arr <= 0):
        raise DomainError("K1 is only evaluated for positive arguments")
    flat = _k1_array(np.ascontiguousarray(arr.ravel()))
    return flat.reshape(arr.shape) if arr.ndim else float(flat[0])


@njit(cache=True)
def nu_scalar(kind, params, y):
    """Lévy density for a parametric kind, usable from compiled code."""
    if kind == KIND_CGMY:
        c, g, m, yy = params[0], params[1], params[2], params[3]
        if y > 0.0:
            return c * math.exp(-m * y - (1.0 + yy) * math.log(y))
        ay = -y
        return c * math.exp(-g * ay - (1.0 + yy) * math.log(ay))
    a, b, d = params[0], params[1], params[2]
    ay = abs(y)
    return a * d / (math.pi * ay) * _k1_scalar(a * ay) * math.exp(b * y)


@njit(cache=True)
def _nu_array(kind, params, y):
    out = np.empty(y.shape[0])
    for i in range(y.shape[0]):
        out[i] = nu_scalar(kind, params, y[i])
    return out


# ---------------------------------------------------------------------------
# Numerical helpers
# ---------------------------------------------------------------------------


def _upper_gamma(s: float, x: float) -> float:
    """Upper incomplete gamma function for any real ``s`` and ``x > 0``."""
    if s > 0:
        return float(special.gammaincc(s, x) * special.gamma(s))
    if s == 0:
        return float(special.exp1(x))
    # Downward recurrence: Gamma(s, x) = (Gamma(s+1, x) - x^s e^{-x}) / s
    return (_upper_gamma(s + 1.0, x) - x**s * math.exp(-x)) / s


def trapezoid5(f: Callable, lo: float, hi: float, cells: int = 1) -> float:
    """Composite 5-point trapezoid rule with ``cells`` equal cells."""
    x = np.linspace(lo, hi, 4 * cells + 1)
    y = f(x)
    h = (hi - lo) / (4 * cells)
    return float(h * (y.sum() - 0.5 * (y[0] + y[-1])))


def refine_trapezoid(f: Callable, lo: float, hi: float, rtol: float = 1e-10,
                     max_level: int = 20) -> float:
    """5-point trapezoid with dyadic cell refinement.

    Successive trapezoid estimates are combined by Richardson extrapolation
    and refinement stops once two extrapolated estimates agree to ``rtol``.
    """
    rows: list[list[float]] = []
    for level in range(max_level):
        row = [trapezoid5(f, lo, hi, 2**level)]
        for k, prev in enumerate(rows[-1] if rows else []):
            fac = 4.0 ** (k + 1)
            row.append((fac * row[k] - prev) / (fac - 1.0))
        if rows:
            best, last = row[-1], rows[-1][-1]
            if abs(best - last) <= rtol * max(abs(best), 1e-300):
                return best
        rows.append(row)
    return rows[-1][-1]


def _jacobi_near_zero(g: Callable, width: float, beta: float, rtol: float = 1e-12) -> float:
    """Integrate ``|y|**beta * g(y)`` over ``[0, width]`` (``width`` may be negative).

    ``g`` must be smooth; Gauss-Jacobi rules of increasing order are used
    until two orders agree.
    """
    prev = None
    for n in (8, 16, 32, 64, 128):
        x, w = special.roots_jacobi(n, 0.0, beta)
        y = width * 0.5 * (1.0 + x)
        val = float(np.sum(w * g(y))) * (abs(width) * 0.5) ** (1.0 + beta)
        if prev is not None and abs(val - prev) <= rtol * abs(val):
            return val
        prev = val
    return prev


# ---------------------------------------------------------------------------
# Measures
# ---------------------------------------------------------------------------


class LevyMeasure:
    """Common interface of the Lévy measures."""

    kind: int = -1
    blumenthal_getoor: float = 1.0

    @property
    def params(self) -> np.ndarray:
        raise UnsupportedMeasure("measure has no compiled representation")

    @property
    def compiled(self) -> bool:
        return self.kind >= 0

    @property
    def outside_theory(self) -> bool:
        """True when the Blumenthal-Getoor index is not in ``(1, 2)``."""
        return not (1.0 < self.blumenthal_getoor < 2.0)

    # subclasses implement _density on nonzero float arrays
    def _density(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def density(self, y):
        """Lévy density at ``y``; raises :class:`DomainError` at zero."""
        arr = np.asarray(y, dtype=float)
        if np.any(arr == 0.0):
            raise DomainError("the Lévy density is undefined at y = 0")
        out = self._density(np.atleast_1d(arr).ravel()).reshape(arr.shape)
        return out if arr.ndim else float(out)

    def _side_closed_form(self, a, b, power, negative):
        return None

    def interval_integral(self, lo: float, hi: float, power: int = 0,
                          signed: bool = True) -> float:
        """Integral of ``y**power`` (``|y|**power`` if not signed) against nu over ``[lo, hi]``."""
        if not lo < hi:
            raise DomainError("interval must satisfy lo < hi")
        if power not in (0, 1, 2):
            raise DomainError("power must be 0, 1 or 2")
        if lo < 0.0 < hi or lo == 0.0 or hi == 0.0:
            if power < 2:
                raise DomainError("power < 2 is not integrable across the origin")
            total = 0.0
            if lo < 0.0:
                total += self._piece(lo, 0.0, power, signed)
            if hi > 0.0:
                total += self._piece(0.0, hi, power, signed)
            return total
        return self._piece(lo, hi, power, signed)

    def _piece(self, lo, hi, power, signed):
        negative = hi <= 0.0
        sign = (-1.0) ** power if (negative and signed) else 1.0
        a, b = (-hi, -lo) if negative else (lo, hi)
        closed = self._side_closed_form(a, b, power, negative)
        if closed is not None:
            return sign * closed
        dens = self.density
        if a == 0.0:
            # |y|^2 nu(y) ~ |y|^(1-alpha) near zero: product Gauss-Jacobi rule
            beta = 1.0 - self.blumenthal_getoor
            side = -1.0 if negative else 1.0

            def g(u):
                return np.abs(u) ** (2.0 - beta) * dens(u)

            val = _jacobi_near_zero(g, side * b, beta)
            return sign * val

        def f(u):
            yy = -u if negative else u
            return u**power * dens(yy)

        return sign * refine_trapezoid(f, a, b)

    def tail_error_integral(self, cutoff: float, tau: Callable) -> float:
        """Integral of ``(1 + |y| + tau + tau**2)`` over ``|y| >= cutoff``.

        Returns ``math.inf`` when the integrand is not integrable.
        """
        if cutoff <= 0:
            raise DomainError("cutoff must be positive")

        def f(y):
            dens = self.density(y)
            with np.errstate(over="ignore", invalid="ignore"):
                t = np.asarray(tau(y), dtype=float)
                out = (1.0 + np.abs(y) + t + t * t) * dens
            # an underflowed density kills the integrand
            return np.where(dens == 0.0, 0.0, out)

        total = 0.0
        for side in (1.0, -1.0):
            probe = side * cutoff * np.geomspace(1.0, 1e4 / cutoff, 400)
            with np.errstate(over="ignore", invalid="ignore"):
                g = np.abs(f(probe) * probe)
            if not np.all(np.isfinite(g)):
                return math.inf
            gmax = g.max()
            if gmax == 0.0:
                continue
            tiny = np.nonzero(g < 1e-20 * gmax)[0]
            if tiny.size == 0 or np.any(g[tiny[0]:] >= 1e-20 * gmax):
                return math.inf
            end = abs(probe[tiny[0]])
            lo, hi = (cutoff, end) if side > 0 else (-end, -cutoff)
            val, _ = integrate.quad(lambda y: float(f(np.array([y]))[0]), lo, hi,
                                    epsabs=0.0, epsrel=1e-12, limit=400)
            total += val
        return total

    def compensator_drift(self) -> float:
        raise UnsupportedMeasure("no closed-form compensator drift for this measure")

    def cumulant(self, u):
        """``int (exp(u y) - 1 - u y) nu(dy)``."""
        raise UnsupportedMeasure("no closed-form cumulant for this measure")


@dataclass(frozen=True)
class CGMY(LevyMeasure):
    """CGMY (tempered stable) measure.

    :param C: overall activity
    :param G: exponential damping of negative jumps
    :param M: exponential damping of positive jumps
    :param Y: fine structure index, must lie in ``(0, 2)``
    """

    C: float
    G: float
    M: float
    Y: float
    kind: int = field(default=KIND_CGMY, init=False, repr=False)

    def __post_init__(self):
        if not (self.C > 0 and self.G > 0 and self.M > 0 and 0 < self.Y < 2):
            raise DomainError("CGMY needs C, G, M > 0 and 0 < Y < 2")

    @property
    def blumenthal_getoor(self) -> float:
        return float(self.Y)

    @property
    def params(self) -> np.ndarray:
        return np.array([self.C, self.G, self.M, self.Y], dtype=float)

    def _density(self, y):
        return _nu_array(KIND_CGMY, self.params, np.ascontiguousarray(y, dtype=float))

    def _side_closed_form(self, a, b, power, negative):
        lam = self.G if negative else self.M
        s = power - self.Y
        scale = self.C * lam ** (-s)
        if a == 0.0:
            # s > 0 holds since only power 2 reaches the origin
            return scale * float(special.gamma(s) * special.gammainc(s, lam * b))
        hi_part = _upper_gamma(s, lam * a)
        lo_part = _upper_gamma(s, lam * b)
        diff = hi_part - lo_part
        if abs(diff) < 1e-6 * abs(hi_part):
            return None  # cancellation; use quadrature instead
        return scale * diff

    def compensator_drift(self) -> float:
        """``C Gamma(1-Y) (M^(Y-1) - G^(Y-1))``, the drift absorbed by compensation."""
        if self.Y == 1.0:
            raise UnsupportedMeasure("Y = 1 has no finite compensator drift")
        return float(self.C * special.gamma(1.0 - self.Y)
                     * (self.M ** (self.Y - 1.0) - self.G ** (self.Y - 1.0)))

    def cumulant(self, u):
        u = np.asarray(u, dtype=float)
        if np.any(u >= self.M) or np.any(u <= -self.G):
            raise DomainError("cumulant needs -G < u < M")
        if self.Y == 1.0:
            raise UnsupportedMeasure("Y = 1 is not supported")
        Y, M, G = self.Y, self.M, self.G
        h = self.C * special.gamma(-Y) * ((M - u) ** Y - M**Y + (G + u) ** Y - G**Y)
        return h - u * self.compensator_drift()


@dataclass(frozen=True)
class NIG(LevyMeasure):
    """Normal inverse Gaussian measure with ``|beta| < alpha`` and ``delta > 0``."""

    alpha: float
    beta: float
    delta: float
    kind: int = field(default=KIND_NIG, init=False, repr=False)

    def __post_init__(self):
        if not (self.alpha > 0 and abs(self.beta) < self.alpha and self.delta > 0):
            raise DomainError("NIG needs alpha > |beta| and delta > 0")

    blumenthal_getoor = 1.0

    @property
    def params(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.delta], dtype=float)

    def _density(self, y):
        return _nu_array(KIND_NIG, self.params, np.ascontiguousarray(y, dtype=float))

    def compensator_drift(self) -> float:
        """``beta delta / sqrt(alpha^2 - beta^2)``."""
        a, b, d = self.alpha, self.beta, self.delta
        return b * d / math.sqrt(a * a - b * b)

    def cumulant(self, u):
        u = np.asarray(u, dtype=float)
        a, b, d = self.alpha, self.beta, self.delta
        if np.any(np.abs(b + u) >= a):
            raise DomainError("cumulant needs |beta + u| < alpha")
        h = d * (math.sqrt(a * a - b * b) - np.sqrt(a * a - (b + u) ** 2))
        return h - u * self.compensator_drift()


@dataclass(frozen=True)
class CustomMeasure(LevyMeasure):
    """Wrapper around a user supplied density callable.

    ``density_fn`` must accept a float array without zeros.  The index
    ``blumenthal_getoor`` is used for the singular quadrature near zero.
    """

    density_fn: Callable
    index: float = 1.5

    @property
    def blumenthal_getoor(self) -> float:
        return float(self.index)

    def _density(self, y):
        return np.asarray(self.density_fn(y), dtype=float)


# Functional aliases -------------------------------------------------------


def density(measure: LevyMeasure, y):
    return measure.density(y)


def interval_integral(measure: LevyMeasure, lo: float, hi: float, power: int = 0,
                      signed: bool = True) -> float:
    return measure.interval_integral(lo, hi, power, signed)


def tail_error_integral(measure: LevyMeasure, cutoff: float, tau: Callable) -> float:
    return measure.tail_error_integral(cutoff, tau)


def compensator_drift(measure: LevyMeasure) -> float:
    return measure.compensator_drift()
