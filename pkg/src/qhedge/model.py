"""Jump-driven dynamics for the log of an electricity swap price.

The log swap price ``Z`` evolves as a pure-jump process whose jump sizes
``gamma(t, z, y)`` are a state and time dependent transform of the jumps ``y``
of a Lévy driver.  Two concrete models are provided:

``SyntheticModel``
    ``gamma(t, z, y) = y`` with a constant drift; used for convergence and
    consistency studies where everything is known in closed form.

``ElectricityModel``
    A swap delivering over ``[T, T + d]`` whose forwards follow a
    one-factor exponential Lévy model with mean reversion ``c``.  With
    ``Phi(A) = log((1/d) int psi(s) exp(exp(-c s) A) ds)`` one has
    ``Z_t = Phi(A_t)`` and
    ``gamma(t, z, y) = Phi(Phi^{-1}(z) + y exp(c t)) - z``.

Both models expose a *lattice interface* used by the fast stencil builder:
jump sizes can be written as ``y = s(t) * (Psi_t(z + w) - Psi_t(z))`` where
``w`` is the jump of ``Z``.  ``time_factor`` returns ``s(t)`` and
``base_inverse`` returns ``Psi_t`` and its derivative.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate

from . import _kernels
from .levy import LevyMeasure

__all__ = [
    "RangeError",
    "ForwardCurve",
    "JumpModel",
    "SyntheticModel",
    "ElectricityModel",
    "synthetic_model",
]


class RangeError(ValueError):
    """Raised when an inverse is requested outside the achievable range."""


@dataclass(frozen=True)
class ForwardCurve:
    """Piecewise-constant forward curve over the delivery period.

    ``pieces`` holds ``(start, end, price)`` triples that must tile the
    delivery period without gaps.
    """

    pieces: tuple

    def __post_init__(self):
        if not self.pieces:
            raise ValueError("forward curve needs at least one piece")
        for (s0, e0, p0), (s1, _, _) in zip(self.pieces, self.pieces[1:]):
            if abs(e0 - s1) > 1e-12:
                raise ValueError("forward curve pieces must be contiguous")
        for s0, e0, p0 in self.pieces:
            if not (e0 > s0 and p0 > 0):
                raise ValueError("pieces need positive length and price")

    @classmethod
    def from_daily(cls, prices: Sequence[float], start: float, step: float = 1.0):
        pieces = tuple((start + k * step, start + (k + 1) * step, float(p))
                       for k, p in enumerate(prices))
        return cls(pieces)

    @classmethod
    def from_csv(cls, path) -> "ForwardCurve":
        """Read ``start,end,price`` rows (a header line is allowed)."""
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.reader(fh):
                if not rec or rec[0].strip().startswith("#"):
                    continue
                try:
                    rows.append(tuple(float(v) for v in rec[:3]))
                except ValueError:
                    continue
        return cls(tuple(rows))

    @property
    def delivery_start(self) -> float:
        return self.pieces[0][0]

    @property
    def delivery_end(self) -> float:
        return self.pieces[-1][1]

    @property
    def duration(self) -> float:
        return self.delivery_end - self.delivery_start

    @property
    def average_price(self) -> float:
        return sum((e - s) * p for s, e, p in self.pieces) / self.duration

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        out = np.full(s.shape, np.nan)
        for s0, e0, p0 in self.pieces:
            out = np.where((s >= s0) & (s <= e0) & np.isnan(out), p0, out)
        return out


def weekly_curve() -> ForwardCurve:
    """Seven daily prices delivered over days 7 to 14."""
    return ForwardCurve.from_daily([80, 90, 70, 90, 80, 70, 60], start=7.0)


class JumpModel:
    """Base class for the jump models.

    Subclasses provide ``gamma``, ``gamma_y``, ``drift_base`` and the lattice
    interface.  The generic ``gamma_inverse`` solves ``gamma = w`` by bracket
    expansion and bisection; subclasses may override it with closed forms.
    """

    measure: LevyMeasure
    horizon: float
    time_dependent_lattice: bool = False

    # --- coefficients ---------------------------------------------------
    def gamma(self, t, z, y):
        raise NotImplementedError

    def gamma_y(self, t, z, y):
        raise NotImplementedError

    def gamma_inverse(self, t, z, w, dz: float = 1e-2):
        """Jump size ``y`` with ``gamma(t, z, y) = w`` by safeguarded root finding."""
        w = np.atleast_1d(np.asarray(w, dtype=float))
        out = np.zeros_like(w)
        for k, target in enumerate(w):
            if target == 0.0:
                continue
            step = math.copysign(dz, target)
            lo, hi = 0.0, step
            for _ in range(200):
                if (self.gamma(t, z, hi) - target) * math.copysign(1.0, target) >= 0:
                    break
                lo, hi = hi, 2.0 * hi
            else:
                raise RangeError("jump size not bracketed after 200 expansions")
            a, b = sorted((lo, hi))
            for _ in range(200):
                mid = 0.5 * (a + b)
                if self.gamma(t, z, mid) < target:
                    a = mid
                else:
                    b = mid
                if b - a <= 1e-12 * max(1.0, abs(mid)):
                    break
            y = 0.5 * (a + b)
            g = float(self.gamma_y(t, z, y))
            if g > 0:
                y -= (float(self.gamma(t, z, y)) - target) / g
            out[k] = y
        return out if out.size > 1 else float(out[0])

    def drift_base(self, t, z, psi, dpsi):
        raise NotImplementedError

    def tau(self, y):
        y = np.asarray(y, dtype=float)
        return np.maximum(np.abs(y), np.abs(np.expm1(y)))

    # --- lattice interface ---------------------------------------------
    def time_factor(self, t: float) -> float:
        return 1.0

    def base_inverse(self, t, x, guess=None):
        raise NotImplementedError

    # --- quadrature-based reference quantities -------------------------
    def _jump_integral(self, fn) -> float:
        total = 0.0
        for lo, hi in ((-np.inf, -1.0), (-1.0, 0.0), (0.0, 1.0), (1.0, np.inf)):
            val, _ = integrate.quad(fn, lo, hi, epsabs=1e-15, epsrel=1e-11, limit=400)
            total += val
        return total

    def gamma_excess(self, t, z, y):
        """``gamma(t, z, y) - gamma_y(t, z, 0) * y``."""
        return self.gamma(t, z, y) - self.gamma_y(t, z, 0.0) * np.asarray(y, dtype=float)

    def mu(self, t: float, z: float) -> float:
        """Drift of ``Z`` with the full compensator integral done by quadrature."""
        psi, dpsi = self.base_inverse(t, np.array([z]))
        nu = self.measure.density

        def f(y):
            dens = float(nu(y))
            if dens == 0.0:
                return 0.0
            return float(self.gamma_excess(t, z, y)) * dens

        return float(self.drift_base(t, np.array([z]), psi, dpsi)[0]) + self._jump_integral(f)

    def mu_tilde(self, t: float, z: float) -> float:
        """Drift of ``exp(Z)/exp(Z-)``: ``mu + int (exp(gamma) - 1 - gamma) nu``."""
        nu = self.measure.density

        def f(y):
            dens = float(nu(y))
            if dens == 0.0:
                return 0.0
            g = float(self.gamma(t, z, y))
            return (math.expm1(min(g, 700.0)) - g) * dens

        return self.mu(t, z) + self._jump_integral(f)


@dataclass
class SyntheticModel(JumpModel):
    """``gamma(t, z, y) = y`` with constant drift ``mu0``."""

    measure: LevyMeasure
    mu0: float = 0.0
    horizon: float = 1.0

    def gamma(self, t, z, y):
        return np.asarray(y, dtype=float) * 1.0

    def gamma_y(self, t, z, y):
        return np.ones_like(np.asarray(y, dtype=float))

    def gamma_inverse(self, t, z, w, dz: float = 1e-2):
        return np.asarray(w, dtype=float) * 1.0

    def gamma_excess(self, t, z, y):
        return np.zeros_like(np.asarray(y, dtype=float))

    def base_inverse(self, t, x, guess=None):
        x = np.asarray(x, dtype=float)
        return x.copy(), np.ones_like(x)

    def drift_base(self, t, z, psi, dpsi):
        return np.full(np.shape(psi), float(self.mu0))


def synthetic_model(mu0: float, measure: LevyMeasure, horizon: float = 1.0) -> SyntheticModel:
    return SyntheticModel(measure=measure, mu0=mu0, horizon=horizon)


def _gl(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return x, w


@dataclass
class ElectricityModel(JumpModel):
    """Log swap price of a delivery period under a mean-reverting Lévy factor.

    :param curve: forward curve ``psi`` over the delivery period
    :param c: mean reversion speed
    :param zeta: drift of the Lévy driver (including the compensator shift)
    :param measure: Lévy measure of the driver
    :param martingale: when true, the forwards are compensated so that the
        swap price is a martingale; the curve becomes time dependent
    :param nodes_per_piece: Gauss-Legendre nodes per curve piece
    """

    curve: ForwardCurve
    c: float
    zeta: float
    measure: LevyMeasure
    martingale: bool = False
    nodes_per_piece: int = 16
    horizon: float = field(init=False)

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("mean reversion c must be positive")
        self.horizon = self.curve.delivery_start
        x, w = _gl(self.nodes_per_piece)
        nodes, logw = [], []
        d = self.curve.duration
        for s0, e0, p0 in self.curve.pieces:
            half = 0.5 * (e0 - s0)
            nodes.append(s0 + half * (x + 1.0))
            logw.append(np.log(w * half * p0 / d))
        self._s = np.concatenate(nodes)
        self._logw = np.concatenate(logw)
        self._l = np.exp(-self.c * self._s)
        self._lmin = float(self._l.min())
        self._lmax = float(self._l.max())
        self._mcache: dict = {}
        self.time_dependent_lattice = bool(self.martingale)
        if self.martingale:
            # the driver must have exponential moments at exp(-c (s - t))
            self._kappa(np.array([self._lmax * math.exp(self.c * self.horizon)]))

    # ------------------------------------------------------------------
    @property
    def s_nodes(self) -> np.ndarray:
        return self._s

    def _kappa(self, u):
        """Laplace exponent of the driver: ``zeta u + int (e^{uy} - 1 - u y) nu``."""
        return self.zeta * u + self.measure.cumulant(u)

    def martingale_drift(self, t: float, s) -> np.ndarray:
        """``M(t, s) = -int_0^t kappa(exp(-c (s - r))) dr``.

        Adding ``M`` to the log forward makes every forward, and therefore
        the swap, a martingale.  Zero at ``t = 0``.
        """
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if t == 0.0:
            return np.zeros_like(s)
        x, w = _gl(32)
        r = 0.5 * t * (x + 1.0)
        u = np.exp(-self.c * (s[:, None] - r[None, :]))
        vals = self._kappa(u.ravel()).reshape(u.shape)
        return -0.5 * t * vals @ w

    def _log_weights(self, t: float) -> np.ndarray:
        if not self.martingale or t == 0.0:
            return self._logw
        key = float(t)
        cached = self._mcache.get(key)
        if cached is None:
            cached = self._logw + self.martingale_drift(t, self._s)
            if len(self._mcache) > 4:
                self._mcache.clear()
            self._mcache[key] = cached
        return cached

    def _moments(self, A, t: float, order: int = 2):
        """``Phi_t(A)`` and its first ``order`` derivatives, vectorised over ``A``."""
        A = np.asarray(A, dtype=float)
        flat = A.ravel()
        lw = self._log_weights(t)
        l = self._l
        out = [np.empty_like(flat) for _ in range(order + 1)]
        chunk = 16384
        for i0 in range(0, flat.size, chunk):
            a = flat[i0:i0 + chunk]
            x = lw[None, :] + l[None, :] * a[:, None]
            m = x.max(axis=1)
            e = np.exp(x - m[:, None])
            tot = e.sum(axis=1)
            out[0][i0:i0 + chunk] = m + np.log(tot)
            if order >= 1:
                p = e / tot[:, None]
                m1 = p @ l
                out[1][i0:i0 + chunk] = m1
                if order >= 2:
                    out[2][i0:i0 + chunk] = p @ (l * l) - m1 * m1
        return [o.reshape(A.shape) for o in out]

    def phi(self, A, t: float = 0.0):
        """``Phi_t(A)``; equals ``Phi(A)`` at ``t = 0`` or without compensation."""
        return self._moments(A, t, 0)[0]

    def phi_prime(self, A, t: float = 0.0):
        return self._moments(A, t, 1)[1]

    def phi_second(self, A, t: float = 0.0):
        return self._moments(A, t, 2)[2]

    def phi_time_derivative(self, A, t: float):
        """``d/dt Phi_t(A)``; zero unless the curve is compensated."""
        A = np.asarray(A, dtype=float)
        if not self.martingale:
            return np.zeros_like(A)
        lw = self._log_weights(t)
        x = lw[None, :] + self._l[None, :] * A.ravel()[:, None]
        p = np.exp(x - x.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        dm = -self._kappa(self._l * math.exp(self.c * t))
        return (p @ dm).reshape(A.shape)

    def phi_inverse(self, z, t: float = 0.0, guess=None, tol: float = 1e-14):
        """Solve ``Phi_t(A) = z`` by Newton iteration inside a guaranteed bracket.

        ``Phi_t`` is increasing with slope between ``min l`` and ``max l``
        where ``l(s) = exp(-c s)``, which gives an explicit bracket around the
        root.  Newton steps leaving the bracket are replaced by bisection.
        """
        z = np.asarray(z, dtype=float)
        A, _ = self._inverse_with_slope(z, t, guess, tol)
        return A if z.ndim else float(A)

    def _inverse_with_slope(self, z, t, guess=None, tol: float = 1e-14):
        flat = np.asarray(z, dtype=float).ravel()
        if not np.all(np.isfinite(flat)):
            raise RangeError("phi_inverse needs finite arguments")
        z0, d0 = (float(v[0]) for v in self._moments(np.array([0.0]), t, 1)[:2])
        dz = flat - z0
        lo = np.minimum(dz / self._lmin, dz / self._lmax)
        hi = np.maximum(dz / self._lmin, dz / self._lmax)
        if guess is None:
            A = dz / d0
        else:
            A = np.clip(np.asarray(guess, dtype=float).ravel(), lo, hi)
        # widen the bracket by a hair so that roots on its edge stay inside
        pad = 1e-12 * (1.0 + np.abs(hi - lo))
        slope = np.empty_like(A)
        failed = _kernels.phi_newton(self._log_weights(t), self._l, flat, A, lo - pad, hi + pad,
                                     tol, slope)
        if failed:
            raise RangeError(f"phi_inverse did not converge at {failed} points")
        shape = np.shape(z)
        return A.reshape(shape), slope.reshape(shape)

    # ------------------------------------------------------------------
    def gamma(self, t, z, y):
        # differencing Phi at the root (not at z) makes gamma(t, z, 0) exactly zero
        A = self.phi_inverse(np.asarray(z, dtype=float), t)
        return self.phi(A + np.asarray(y, dtype=float) * math.exp(self.c * t), t) - self.phi(A, t)

    def gamma_y(self, t, z, y):
        A = self.phi_inverse(np.asarray(z, dtype=float), t)
        return math.exp(self.c * t) * self.phi_prime(A + np.asarray(y, dtype=float)
                                                      * math.exp(self.c * t), t)

    def gamma_excess(self, t, z, y):
        # log(sum p_q exp((l_q - m1) h)) with tilted weights p at Phi_t^{-1}(z);
        # written with log1p/expm1 so small jumps keep full relative accuracy
        A = float(self.phi_inverse(np.array([float(z)]), t)[0])
        x = self._log_weights(t) + self._l * A
        p = np.exp(x - x.max())
        p /= p.sum()
        dl = self._l - p @ self._l
        h = np.atleast_1d(np.asarray(y, dtype=float)) * math.exp(self.c * t)
        out = np.log1p(np.expm1(np.outer(h, dl)) @ p)
        return out if np.ndim(y) else float(out[0])

    def gamma_inverse(self, t, z, w, dz: float = 1e-2):
        A0 = self.phi_inverse(np.asarray(z, dtype=float), t)
        A1 = self.phi_inverse(np.asarray(z, dtype=float) + np.asarray(w, dtype=float), t)
        return math.exp(-self.c * t) * (A1 - A0)

    def coefficients(self, t: float, z: float, y):
        """Jump size ``gamma`` and quadrature drift ``mu`` at ``(t, z)``."""
        return self.gamma(t, z, y), self.mu(t, z)

    def tau(self, y):
        y = np.asarray(y, dtype=float)
        return math.exp(self.c * self.curve.duration) * np.maximum(np.abs(y), np.abs(np.expm1(y)))

    # lattice interface ---------------------------------------------------
    def time_factor(self, t: float) -> float:
        return math.exp(-self.c * t)

    def base_inverse(self, t, x, guess=None):
        A, slope = self._inverse_with_slope(x, t, guess)
        return A, 1.0 / slope

    def drift_base(self, t, z, psi, dpsi):
        out = self.zeta * math.exp(self.c * t) / np.asarray(dpsi, dtype=float)
        if self.martingale:
            out = out + self.phi_time_derivative(psi, t)
        return out

    def phi_derivative_bounds(self):
        """Bounds ``exp(-c (T + d)) <= Phi' <= exp(-c T)``."""
        return (math.exp(-self.c * self.curve.delivery_end),
                math.exp(-self.c * self.curve.delivery_start))
