"""Backward dynamic programming for the quadratic hedging coefficients.

The value of hedging a payoff ``f`` from wealth ``x`` is
``v(t, z, x) = a x^2 + b x + c``.  On the chain built in :mod:`qhedge.disc`
one step of the recursion reads, with ``e_l = exp(l dz) - 1`` and stencil
sums ``S_k(v) = sum_l p_l e_l^k v_{j+l}``,

* ``pi* = clip(-S_1(a) / S_2(a), -pi_bar, pi_bar)``,
* ``a = S_0(a) + 2 pi* S_1(a) + pi*^2 S_2(a)``,
* ``b = S_0(b) + pi* S_1(b)``,
* ``c = S_0(c) - S_1(b)^2 / (4 S_2(a))``.

The explicit scheme uses these sums with the full chain probabilities; the
IMEX scheme treats the local up/down weights implicitly (one tridiagonal
solve per level) and the jump sums explicitly.  The hedge at a node is
``theta = exp(-z) (pi* x + phi_b)`` with ``phi_b = -S_1(b) / (2 S_2(a))``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy.linalg import solve_banded

from . import _kernels
from .disc import LevelStencils, SpaceTimeGrid, StencilBuilder, cfl_bound
from .model import JumpModel

log = logging.getLogger(__name__)

__all__ = [
    "CFLViolation",
    "DegenerateNode",
    "SolveConfig",
    "SolveResult",
    "KernelSource",
    "ModelKernels",
    "FixedKernels",
    "solve",
    "solve_a",
    "solve_b",
    "solve_c",
    "optimal_pi",
    "price",
    "hedge_ratio",
    "call_payoff",
    "put_payoff",
]


class CFLViolation(RuntimeError):
    """The time step makes some transition probability negative."""


class DegenerateNode(RuntimeError):
    """A stencil sum that must be positive is not (negative ``a`` inputs)."""


def call_payoff(strike: float) -> Callable:
    def f(z):
        return np.maximum(np.exp(z) - strike, 0.0)
    f.label = f"call K={strike:.6g}"
    return f


def put_payoff(strike: float) -> Callable:
    def f(z):
        return np.maximum(strike - np.exp(z), 0.0)
    f.label = f"put K={strike:.6g}"
    return f


def zero_payoff(z):
    return np.zeros_like(np.asarray(z, dtype=float))


@dataclass
class SolveConfig:
    """Scheme choice, control bound, payoff and boundary data.

    ``boundary_a`` and ``boundary_b`` are functions of ``(t, z)`` used
    outside ``(-N, N)``; by default ``1`` and ``-2 f(z)``.
    """

    scheme: str = "imex"
    pi_bar: float = 1e6
    payoff: Callable = zero_payoff
    boundary_a: Callable | None = None
    boundary_b: Callable | None = None
    payoff_smoothing: float | None = None
    max_clamp_fraction: float = 1e-3

    def __post_init__(self):
        if self.scheme not in ("explicit", "imex"):
            raise ValueError("scheme must be 'explicit' or 'imex'")
        if not self.pi_bar > 0:
            raise ValueError("pi_bar must be positive")

    def terminal(self, z):
        f = np.asarray(self.payoff(z), dtype=float)
        if self.payoff_smoothing:
            f = _mollify(self.payoff, z, self.payoff_smoothing)
        return f

    def qa(self, t, z):
        if self.boundary_a is None:
            return np.ones_like(z)
        return np.asarray(self.boundary_a(t, z), dtype=float) * np.ones_like(z)

    def qb(self, t, z):
        if self.boundary_b is None:
            return -2.0 * self.terminal(z)
        return np.asarray(self.boundary_b(t, z), dtype=float) * np.ones_like(z)

    def qc(self, t, z):
        return self.terminal(z) ** 2


def _mollify(f, z, width):
    """Average of ``f`` against a smooth bump of half width ``width``."""
    x, w = np.polynomial.legendre.leggauss(16)
    bump = (1.0 - x * x) ** 2
    bump = bump * w / np.sum(bump * w)
    vals = np.asarray(f(z[..., None] + width * x), dtype=float)
    return vals @ bump


class KernelSource(Protocol):
    """Anything that yields the chain rates of each level."""

    grid: SpaceTimeGrid

    def level(self, n: int) -> LevelStencils: ...


class ModelKernels:
    """Levels of a jump model on a grid via :class:`StencilBuilder`."""

    def __init__(self, model: JumpModel, grid: SpaceTimeGrid, **kw):
        self.model = model
        self.grid = grid
        self.builder = StencilBuilder(model, grid, **kw)

    def level(self, n: int) -> LevelStencils:
        return self.builder.level(n * self.grid.dt)


class FixedKernels:
    """Hand-set transition probabilities, identical or per level.

    ``probs`` has shape ``(2N - 1, 2I + 1)`` or ``(NT, 2N - 1, 2I + 1)``
    with the stay probability in the centre column.
    """

    def __init__(self, probs, grid: SpaceTimeGrid):
        self.grid = grid
        probs = np.asarray(probs, dtype=float)
        self._probs = probs if probs.ndim == 3 else np.broadcast_to(probs, (grid.NT,) + probs.shape)

    def level(self, n: int) -> LevelStencils:
        g = self.grid
        st = LevelStencils.from_probabilities(self._probs[n], g.dt, t=n * g.dt, dz=g.dz)
        st.z = g.interior_z
        return st


def _as_source(model_or_source, grid, **kw):
    if isinstance(model_or_source, JumpModel):
        return ModelKernels(model_or_source, grid, **kw)
    return model_or_source


def optimal_pi(Q_hat, G_hat, pi_bar: float):
    """Minimiser of ``pi^2 G + 2 pi Q`` over ``[-pi_bar, pi_bar]``."""
    G = np.asarray(G_hat, dtype=float)
    if np.any(G <= 0):
        raise DegenerateNode("G_hat must be positive")
    out = np.clip(-np.asarray(Q_hat, dtype=float) / G, -pi_bar, pi_bar)
    return out if out.ndim else float(out)


@dataclass
class SolveResult:
    """Surfaces on the full grid (boundary columns hold boundary data).

    ``a``, ``b``, ``c``, ``x_star`` have shape ``(NT + 1, 2N + 1)``;
    ``pi_star`` and ``phi_b`` (the payoff part of the hedge amount) have
    shape ``(NT, 2N + 1)`` and apply over ``[t_n, t_{n+1})``.
    """

    grid: SpaceTimeGrid
    a: np.ndarray
    b: np.ndarray | None
    c: np.ndarray | None
    pi_star: np.ndarray
    phi_b: np.ndarray | None
    diagnostics: dict = field(default_factory=dict)

    @property
    def z(self) -> np.ndarray:
        return self.grid.z

    @property
    def x_star(self) -> np.ndarray | None:
        if self.b is None:
            return None
        return price(self.a, self.b)

    def at(self, name: str, n: int = 0, j: int = 0) -> float:
        """Surface value at level ``n`` and node ``j`` (``j = 0`` is the centre)."""
        return float(getattr(self, name)[n, j + self.grid.N])

    def export_csv(self, path, levels=None) -> None:
        g = self.grid
        xs = self.x_star
        levels = range(g.NT + 1) if levels is None else levels
        with open(path, "w") as fh:
            fh.write("level,node,z,a,b,c,pi_star,x_star\n")
            for n in levels:
                for k in range(2 * g.N + 1):
                    pi = self.pi_star[n, k] if n < g.NT else math.nan
                    b = self.b[n, k] if self.b is not None else math.nan
                    c = self.c[n, k] if self.c is not None else math.nan
                    x = xs[n, k] if xs is not None else math.nan
                    vals = (g.z[k], self.a[n, k], b, c, pi, x)
                    fh.write(f"{n},{k - g.N}," + ",".join(repr(float(v)) for v in vals) + "\n")

    def save(self, path) -> None:
        arrays = {k: v for k, v in (("a", self.a), ("b", self.b), ("c", self.c),
                                    ("pi_star", self.pi_star), ("phi_b", self.phi_b))
                  if v is not None}
        g = self.grid
        meta = json.dumps({"grid": [g.N, g.NT, g.dz, g.dt, g.I, g.kappa, g.center],
                           "diagnostics": _jsonable(self.diagnostics)})
        np.savez_compressed(path, meta=np.array(meta), **arrays)

    @classmethod
    def load(cls, path) -> "SolveResult":
        data = np.load(path, allow_pickle=False)
        meta = json.loads(str(data["meta"]))
        N, NT, dz, dt, I, kappa, center = meta["grid"]
        grid = SpaceTimeGrid(N=int(N), NT=int(NT), dz=dz, dt=dt, I=int(I), kappa=int(kappa),
                             center=center)
        get = lambda k: data[k] if k in data.files else None  # noqa: E731
        return cls(grid=grid, a=data["a"], b=get("b"), c=get("c"), pi_star=data["pi_star"],
                   phi_b=get("phi_b"), diagnostics=meta["diagnostics"])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def price(a, b):
    """Quadratic hedging price ``x* = -b / (2 a)``."""
    a = np.asarray(a, dtype=float)
    if np.any(a <= 0):
        raise DegenerateNode("price needs a > 0")
    return -np.asarray(b, dtype=float) / (2.0 * a)


def hedge_ratio(result: SolveResult, n: int, j: int, x: float) -> float:
    """Units of the asset held over ``[t_n, t_{n+1})`` at node ``j`` with wealth ``x``."""
    g = result.grid
    if not (-g.N < j < g.N) or not (0 <= n < g.NT):
        raise IndexError("hedge ratio needs an interior node and a level below NT")
    k = j + g.N
    phi_b = result.phi_b[n, k] if result.phi_b is not None else 0.0
    return math.exp(-g.z[k]) * (result.pi_star[n, k] * x + phi_b)


def _pad(grid: SpaceTimeGrid, interior, boundary):
    """Padded vector: ``interior`` on ``(-N, N)``, ``boundary`` elsewhere."""
    out = boundary.copy()
    out[grid.I + 1:grid.I + 2 * grid.N] = interior
    return out


def _tridiag_solve(dt, chi, ups, rhs, lower_bc, upper_bc):
    """Solve ``(1 + dt (chi + ups)) x_j - dt chi x_{j+1} - dt ups x_{j-1} = rhs_j``.

    ``rhs`` may hold several right-hand sides as rows; boundary values
    ``lower_bc``/``upper_bc`` (one per row) enter the first and last rows.
    """
    n = chi.size
    ab = np.empty((3, n))
    ab[0, 1:] = -dt * chi[:-1]
    ab[0, 0] = 0.0
    ab[1] = 1.0 + dt * (chi + ups)
    ab[2, :-1] = -dt * ups[1:]
    ab[2, -1] = 0.0
    r = np.array(rhs, dtype=float, copy=True)
    r[:, 0] += dt * ups[0] * lower_bc
    r[:, -1] += dt * chi[-1] * upper_bc
    return solve_banded((1, 1), ab, r.T, check_finite=False).T


def solve(model_or_source, grid: SpaceTimeGrid, config: SolveConfig, what: str = "abc",
          pi_star=None, a_surface=None, check_cfl: bool = True, progress=None,
          **builder_kw) -> SolveResult:
    """Backward sweep for ``a`` and, if requested, ``b`` and ``c``.

    ``what`` is a subset of ``"abc"``.  Without ``"a"`` the caller supplies
    ``pi_star`` (for ``b``) and, for ``c``, ``a_surface``; an absent
    ``pi_star`` with ``"a"`` not requested means ``pi* = 0`` is not assumed
    and a :class:`ValueError` is raised.  A given ``a_surface`` also yields
    the payoff part of the hedge (``phi_b``) when ``b`` is solved, which is
    how the martingale strategy with ``a = 1`` is obtained.
    """
    src = _as_source(model_or_source, grid, **builder_kw)
    g = grid
    want_a, want_b, want_c = ("a" in what), ("b" in what), ("c" in what)
    if not want_a and want_b and pi_star is None:
        raise ValueError("solving b alone needs a pi_star surface")
    if want_c and not want_a and (a_surface is None or pi_star is None):
        raise ValueError("solving c alone needs a and pi_star surfaces")
    if check_cfl and isinstance(src, ModelKernels):
        rep = cfl_bound(src.builder, n_times=3)
        if not rep.ok(g.dt, config.scheme):
            lim = rep.max_dt if config.scheme == "explicit" else rep.max_dt_imex
            raise CFLViolation(
                f"dt={g.dt:.6g} exceeds the {config.scheme} limit {lim:.6g} "
                f"(binding node z={rep.binding_node:.6g}, t={rep.binding_time:.6g})")

    N, I, NT, dt = g.N, g.I, g.NT, g.dt
    zfull = g.z
    zpad = g.padded_z
    inner = slice(1, 2 * N)  # interior columns of the full grid
    e1 = np.expm1(g.dz * np.arange(-I, I + 1))
    e2 = e1 * e1

    A = np.empty((NT + 1, 2 * N + 1)) if want_a else np.asarray(a_surface, dtype=float)
    B = np.empty((NT + 1, 2 * N + 1)) if want_b else None
    Cs = np.empty((NT + 1, 2 * N + 1)) if want_c else None
    PI = np.empty((NT, 2 * N + 1)) if want_a else np.asarray(pi_star, dtype=float)
    PHI = np.empty((NT, 2 * N + 1)) if want_b else None

    T = g.T
    if want_a:
        A[NT] = config.qa(T, zfull)
        A[NT, inner] = 1.0
    f_term = config.terminal(zfull)
    if want_b:
        B[NT] = config.qb(T, zfull)
        B[NT, inner] = -2.0 * f_term[inner]
    if want_c:
        Cs[NT] = config.qc(T, zfull)
        Cs[NT, inner] = f_term[inner] ** 2

    clamps = 0
    min_stay = math.inf
    central_frac = []
    rows = []
    if want_a or want_c or a_surface is not None:
        rows.append("a")
    if want_b or want_c:
        rows.append("b")
    if want_c:
        rows.append("c")
    n_f = len(rows)
    out0 = np.empty((n_f, 2 * N - 1))
    out1 = np.empty_like(out0)
    out2 = np.empty_like(out0)

    for n in range(NT - 1, -1, -1):
        t = n * dt
        st = src.level(n)
        if config.scheme == "explicit":
            stay = 1.0 - dt * st.total_rate
            min_stay = min(min_stay, float(stay.min()))
            if check_cfl and stay.min() < -1e-12:
                raise CFLViolation(f"negative stay probability {stay.min():.3g} at level {n}")
        else:
            jr = dt * st.jump_rate
            min_stay = min(min_stay, float(1.0 - jr.max()))
            if check_cfl and jr.max() > 1.0 + 1e-12:
                raise CFLViolation(f"jump rates exceed 1/dt at level {n}")
        central_frac.append(float(np.mean(st.central)))

        # boundary data at t_{n+1} feeds the stencil sums, at t_n the new level
        qa, qa_now = config.qa(t + dt, zpad), config.qa(t, zpad)
        qb, qb_now = config.qb(t + dt, zpad), config.qb(t, zpad)
        qc, qc_now = config.qc(t + dt, zpad), config.qc(t, zpad)
        vals = np.empty((n_f, zpad.size))
        for r, name in enumerate(rows):
            if name == "a":
                vals[r] = _pad(g, A[n + 1, inner], qa)
            elif name == "b":
                vals[r] = _pad(g, B[n + 1, inner], qb)
            else:
                vals[r] = _pad(g, Cs[n + 1, inner], qc)
        _kernels.stencil_sums(st.omega, st.chi, st.ups, vals, e1, e2, I, N, out0, out1, out2)
        ia = rows.index("a") if "a" in rows else None
        ib = rows.index("b") if "b" in rows else None
        ic = rows.index("c") if "c" in rows else None

        if ia is not None:
            G = out2[ia]
            if np.any(G <= 0):
                raise DegenerateNode(f"non-positive G at level {n}")
        if want_a:
            pi = np.clip(-out1[ia] / G, -config.pi_bar, config.pi_bar)
        else:
            pi = PI[n, inner]

        # right-hand sides: value + dt * (explicit jump part + control terms)
        rhs = []
        if want_a:
            ctrl_a = 2.0 * pi * out1[ia] + pi * pi * G
            rhs.append(("a", A[n + 1, inner], ctrl_a, out0[ia], vals[ia]))
        if want_b:
            ctrl_b = pi * out1[ib]
            rhs.append(("b", B[n + 1, inner], ctrl_b, out0[ib], vals[ib]))
        if want_c:
            src_c = -0.25 * out1[ib] ** 2 / G
            rhs.append(("c", Cs[n + 1, inner], src_c, out0[ic], vals[ic]))

        if config.scheme == "explicit":
            for name, prev, ctrl, jump, v in rhs:
                vp = v[I + 2:I + 2 * N + 1]
                vm = v[I:I + 2 * N - 1]
                local = st.chi * (vp - prev) + st.ups * (vm - prev)
                new = prev + dt * (jump + local + ctrl)
                _store(name, n, new, A, B, Cs, inner)
        else:
            R = np.stack([prev + dt * (jump + ctrl) for _, prev, ctrl, jump, _ in rhs])
            now = {"a": qa_now, "b": qb_now, "c": qc_now}
            lower = np.array([now[name][I] for name, *_ in rhs])
            upper = np.array([now[name][I + 2 * N] for name, *_ in rhs])
            sol = _tridiag_solve(dt, st.chi, st.ups, R, lower, upper)
            for k, (name, *_rest) in enumerate(rhs):
                new = sol[k]
                if name == "a":
                    neg = new < 0.0
                    if neg.any():
                        clamps += int(neg.sum())
                        new = np.where(neg, 0.0, new)
                _store(name, n, new, A, B, Cs, inner)

        # boundary columns hold boundary data
        if want_a:
            A[n, 0], A[n, -1] = qa_now[I], qa_now[I + 2 * N]
            PI[n, inner] = pi
            PI[n, 0] = PI[n, -1] = 0.0
        if want_b:
            B[n, 0], B[n, -1] = qb_now[I], qb_now[I + 2 * N]
            if ia is not None:
                PHI[n, inner] = -0.5 * out1[ib] / G
                PHI[n, 0] = PHI[n, -1] = 0.0
        if want_c:
            Cs[n, 0], Cs[n, -1] = qc_now[I], qc_now[I + 2 * N]
        if progress is not None:
            progress(NT - n, NT)

    total_nodes = NT * (2 * N - 1)
    if clamps > config.max_clamp_fraction * total_nodes:
        raise DegenerateNode(f"{clamps} negative-a clamps exceed the allowed fraction")
    diag = {
        "scheme": config.scheme,
        "clamped_nodes": clamps,
        "min_stay_probability": min_stay,
        "central_fraction": float(np.mean(central_frac)) if central_frac else math.nan,
        "boundary_influence_atm": boundary_influence(g, 0.0, getattr(src, "model", None)),
    }
    return SolveResult(grid=g, a=A, b=B, c=Cs, pi_star=PI,
                       phi_b=PHI if (want_b and ia is not None) else None, diagnostics=diag)


def _store(name, n, new, A, B, Cs, inner):
    if name == "a":
        A[n, inner] = new
    elif name == "b":
        B[n, inner] = new
    else:
        Cs[n, inner] = new


def boundary_influence(grid: SpaceTimeGrid, offset: float, model=None, mu_bar: float = 0.0) -> float:
    """First error-budget term ``(1 + |z|) / ((N - I) dz - mu_bar T)``.

    ``offset`` is the distance of the node from the grid centre.
    """
    denom = (grid.N - grid.I) * grid.dz - mu_bar * grid.T
    if denom <= 0:
        return math.inf
    return (1.0 + abs(offset)) / denom


def solve_a(model_or_source, grid: SpaceTimeGrid, config: SolveConfig, **kw):
    """``a`` surface and the optimal control ``pi*``."""
    res = solve(model_or_source, grid, config, what="a", **kw)
    return res.a, res.pi_star


def solve_b(model_or_source, grid: SpaceTimeGrid, config: SolveConfig, pi_star, **kw):
    """``b`` surface for a given control surface."""
    if pi_star is None:
        raise ValueError("solve_b needs the pi_star surface from solve_a")
    res = solve(model_or_source, grid, config, what="b", pi_star=pi_star, **kw)
    return res.b


def solve_c(model_or_source, grid: SpaceTimeGrid, config: SolveConfig, a, b, pi_star=None, **kw):
    """``c`` surface; recomputes the stencil sums of ``a`` and ``b``."""
    if pi_star is None:
        raise ValueError("solve_c needs the pi_star surface")
    res = solve(model_or_source, grid, config, what="bc", pi_star=pi_star, a_surface=a, **kw)
    return res.c


def config_hash(obj) -> str:
    """Stable short hash of a JSON-serialisable description."""
    blob = json.dumps(_jsonable(obj), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
