"""Markov-chain discretisation of the jump generator.

For a node ``z`` and time ``t`` the real line of driver jumps is split into

* a small-jump zone ``|gamma| <= (kappa + 1/2) dz`` replaced by a local
  diffusion with variance rate ``D = int gamma^2 nu``;
* jump cells ``(i - 1/2) dz < gamma <= (i + 1/2) dz`` for
  ``kappa < |i| <= I`` carrying a rate ``omega_i``.  Cells whose driver jump
  stays below one in absolute value use the ``gamma^2`` weighted rate
  ``int gamma^2 nu / (i dz)^2``, the others the plain mass ``int nu``;
* far jumps beyond ``(I + 1/2) dz`` which are dropped.

The local part is discretised with the weights ``chi`` (up) and ``upsilon``
(down), central when both are non-negative and upwind otherwise.  Together
they define a chain jumping by ``l dz`` with probability ``rate_l * dt``.

Cell integrals are computed in the variable ``w = gamma`` with Gauss-Legendre
rules per cell; the small-jump integrals use Gauss-Jacobi rules that absorb
the ``|w|^(1 - alpha)`` singularity at the origin.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import _kernels
from .model import JumpModel

__all__ = [
    "SpaceTimeGrid",
    "NodeStencil",
    "LevelStencils",
    "StencilBuilder",
    "IntegrationPoints",
    "CFLReport",
    "integration_points",
    "build_stencil",
    "cfl_bound",
    "generator_apply",
    "apriori_dt_bound",
]


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Uniform grid ``z_j = center + j dz`` (``|j| <= N``), ``t_n = n dt``.

    ``I`` is the jump stencil half width and ``kappa`` the small-jump cutoff,
    both in nodes.
    """

    N: int
    NT: int
    dz: float
    dt: float
    I: int
    kappa: int = 1
    center: float = 0.0

    def __post_init__(self):
        if self.N < 2 or self.NT < 1 or self.dz <= 0 or self.dt <= 0:
            raise ValueError("grid needs N >= 2, NT >= 1 and positive steps")
        if not (0 <= self.kappa < self.I < self.N):
            raise ValueError("grid needs 0 <= kappa < I < N")

    @classmethod
    def from_domain(cls, N: int, NT: int, horizon: float, half_width: float = 10.0,
                    jump_width: float = 2.0, kappa: int = 1, center: float = 0.0,
                    I: int | None = None) -> "SpaceTimeGrid":
        """Grid on ``center +/- half_width`` with jumps truncated at ``jump_width``."""
        dz = half_width / N
        if I is None:
            I = int(round(jump_width / dz))
        return cls(N=N, NT=NT, dz=dz, dt=horizon / NT, I=I, kappa=kappa, center=center)

    @property
    def T(self) -> float:
        return self.NT * self.dt

    @property
    def z(self) -> np.ndarray:
        """All ``2N + 1`` nodes, boundary included."""
        return self.center + self.dz * np.arange(-self.N, self.N + 1)

    @property
    def interior_z(self) -> np.ndarray:
        return self.center + self.dz * np.arange(-self.N + 1, self.N)

    @property
    def padded_z(self) -> np.ndarray:
        """Nodes extended by ``I`` on each side, where boundary data lives."""
        n = self.N + self.I
        return self.center + self.dz * np.arange(-n, n + 1)

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.NT + 1)

    @property
    def n_interior(self) -> int:
        return 2 * self.N - 1

    def node_of(self, z: float) -> int:
        """Index ``j`` of the node nearest to ``z``."""
        return int(round((z - self.center) / self.dz))

    def with_steps(self, N: int | None = None, NT: int | None = None) -> "SpaceTimeGrid":
        """Same domain and jump width with a different resolution."""
        N = self.N if N is None else N
        NT = self.NT if NT is None else NT
        half = self.N * self.dz
        return SpaceTimeGrid.from_domain(N, NT, self.T, half_width=half,
                                         jump_width=self.I * self.dz,
                                         kappa=self.kappa, center=self.center)


def _cell_rule(n: int):
    return np.polynomial.legendre.leggauss(n)


def _core_rule(n: int, alpha: float, width: float):
    """Nodes ``u`` in (0, 1) and weights for ``int_0^width F(w) dw``.

    The Gauss-Jacobi weight ``(1 + x)^(1 - alpha)`` captures the behaviour of
    ``w^2 nu`` near the origin, so ``F`` divided by it is smooth.
    """
    beta = 1.0 - alpha
    x, wj = special.roots_jacobi(n, 0.0, beta)
    u = 0.5 * (1.0 + x)
    fac = 0.5 * width * wj / (1.0 + x) ** beta
    return u, fac


@dataclass
class NodeStencil:
    """Stencil of one node: rates for offsets ``-I .. I`` and local weights."""

    t: float
    z: float
    dz: float
    omega: np.ndarray
    chi: float
    upsilon: float
    D: float
    mu: float
    mu_hat: float
    central: bool
    dt: float | None = None

    @property
    def I(self) -> int:
        return (self.omega.size - 1) // 2

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(-self.I, self.I + 1)

    @property
    def rates(self) -> np.ndarray:
        r = self.omega.copy()
        r[self.I + 1] += self.chi
        r[self.I - 1] += self.upsilon
        return r

    @property
    def probabilities(self) -> np.ndarray:
        """Transition probabilities by offset, the stay probability at offset 0."""
        if self.dt is None:
            raise ValueError("probabilities need a time step")
        p = self.rates * self.dt
        p[self.I] = 1.0 - p.sum()
        return p

    @property
    def stay_probability(self) -> float:
        return float(self.probabilities[self.I])


def local_weights(D, mu_hat, dz):
    """Central weights when both are non-negative, upwind weights otherwise."""
    D = np.asarray(D, dtype=float)
    mu_hat = np.asarray(mu_hat, dtype=float)
    base = D / (2.0 * dz * dz)
    ups = base - mu_hat / (2.0 * dz)
    chi = base + mu_hat / (2.0 * dz)
    central = (ups >= 0.0) & (chi >= 0.0)
    ups = np.where(central, ups, base + np.maximum(0.0, -mu_hat / dz))
    chi = np.where(central, chi, base + np.maximum(0.0, mu_hat / dz))
    return chi, ups, central


@dataclass
class LevelStencils:
    """Stencils of all interior nodes at one time level."""

    t: float
    dz: float
    kappa: int
    omega: np.ndarray  # (2N - 1, 2I + 1), zero for |l| <= kappa
    chi: np.ndarray
    ups: np.ndarray
    D: np.ndarray
    mu: np.ndarray
    mu_hat: np.ndarray
    central: np.ndarray
    z: np.ndarray = field(repr=False, default=None)

    @property
    def I(self) -> int:
        return (self.omega.shape[1] - 1) // 2

    @property
    def jump_rate(self) -> np.ndarray:
        return self.omega.sum(axis=1)

    @property
    def total_rate(self) -> np.ndarray:
        return self.jump_rate + self.chi + self.ups

    def max_dt_explicit(self) -> float:
        return 1.0 / float(self.total_rate.max())

    def max_dt_imex(self) -> float:
        return 1.0 / float(self.jump_rate.max())

    def probabilities(self, dt: float) -> np.ndarray:
        p = self.omega * dt
        I = self.I
        p[:, I + 1] += self.chi * dt
        p[:, I - 1] += self.ups * dt
        p[:, I] = 1.0 - p.sum(axis=1)
        return p

    def node(self, jj: int, dt: float | None = None) -> NodeStencil:
        return NodeStencil(t=self.t, z=float(self.z[jj]) if self.z is not None else math.nan,
                           dz=self.dz, omega=self.omega[jj].copy(), chi=float(self.chi[jj]),
                           upsilon=float(self.ups[jj]), D=float(self.D[jj]),
                           mu=float(self.mu[jj]), mu_hat=float(self.mu_hat[jj]),
                           central=bool(self.central[jj]), dt=dt)

    def apply(self, padded_values) -> np.ndarray:
        """Discrete generator applied to a vector over the padded grid."""
        v = np.ascontiguousarray(padded_values, dtype=float)
        return _kernels.stencil_apply(self.omega, self.chi, self.ups, v, self.I)

    @classmethod
    def from_probabilities(cls, probs: np.ndarray, dt: float, t: float = 0.0,
                           dz: float = 1.0) -> "LevelStencils":
        """Level built from hand-set probabilities (stay at the centre column)."""
        probs = np.asarray(probs, dtype=float)
        I = (probs.shape[1] - 1) // 2
        omega = probs / dt
        omega[:, I] = 0.0
        n = probs.shape[0]
        zeros = np.zeros(n)
        return cls(t=t, dz=dz, kappa=0, omega=omega, chi=zeros.copy(), ups=zeros.copy(),
                   D=zeros.copy(), mu=zeros.copy(), mu_hat=zeros.copy(),
                   central=np.ones(n, dtype=bool), z=np.arange(n, dtype=float))


class StencilBuilder:
    """Per-level stencils for all interior nodes of a grid.

    For models with the lattice interface and a compiled Lévy measure the
    inverse transform is evaluated once on a fixed lattice and every level
    costs one pass of a compiled kernel.  Other models fall back to
    :func:`build_stencil` node by node.
    """

    def __init__(self, model: JumpModel, grid: SpaceTimeGrid, cell_nodes: int = 5,
                 core_nodes: int = 8):
        self.model = model
        self.grid = grid
        self.cell_x, self.cell_w = _cell_rule(cell_nodes)
        width = (grid.kappa + 0.5) * grid.dz
        self.core_u, self.core_fac = _core_rule(core_nodes, model.measure.blumenthal_getoor, width)
        self.fast = model.measure.compiled and hasattr(model, "base_inverse")
        try:
            model.base_inverse(0.0, np.array([grid.center]))
        except NotImplementedError:
            self.fast = False
        self._lattice = None
        self._lattice_t = None
        self.offsets_dz = grid.dz * np.arange(-grid.I, grid.I + 1)

    # lattice ------------------------------------------------------------
    def _lattice_points(self):
        g = self.grid
        half = g.N - 1 + g.I
        x_int = g.center + g.dz * np.arange(-half, half + 1)
        x_cell = x_int[:, None] + 0.5 * g.dz * self.cell_x[None, :]
        width = (g.kappa + 0.5) * g.dz
        zi = g.interior_z
        x_core = np.stack([zi[:, None] + width * self.core_u[None, :],
                           zi[:, None] - width * self.core_u[None, :]], axis=1)
        return x_int, x_cell, x_core

    def _compute_lattice(self, t: float):
        x_int, x_cell, x_core = self._lattice_points()
        flat = np.concatenate([x_int, x_cell.ravel(), x_core.ravel()])
        guess = None
        if self._lattice is not None:
            guess = self._lattice["flat_psi"]
        psi, dpsi = self.model.base_inverse(t, flat, guess=guess)
        n0, n1 = x_int.size, x_cell.size
        lat = {
            "flat_psi": psi,
            "psi_int": np.ascontiguousarray(psi[:n0]),
            "dpsi_int": np.ascontiguousarray(dpsi[:n0]),
            "psi_cell": np.ascontiguousarray(psi[n0:n0 + n1].reshape(x_cell.shape)),
            "dpsi_cell": np.ascontiguousarray(dpsi[n0:n0 + n1].reshape(x_cell.shape)),
            "psi_core": np.ascontiguousarray(psi[n0 + n1:].reshape(x_core.shape)),
            "dpsi_core": np.ascontiguousarray(dpsi[n0 + n1:].reshape(x_core.shape)),
        }
        self._lattice = lat
        self._lattice_t = t
        return lat

    def _lattice_at(self, t: float):
        if self._lattice is None:
            return self._compute_lattice(t)
        if self.model.time_dependent_lattice and self._lattice_t != t:
            return self._compute_lattice(t)
        return self._lattice

    # levels -------------------------------------------------------------
    def level(self, t: float) -> LevelStencils:
        g = self.grid
        if not self.fast:
            return self._level_generic(t)
        lat = self._lattice_at(t)
        n = g.n_interior
        omega = np.zeros((n, 2 * g.I + 1))
        D = np.zeros(n)
        comp = np.zeros(n)
        s = self.model.time_factor(t)
        m = self.model.measure
        _kernels.level_weights(s, m.kind, m.params, g.kappa, g.I, g.dz,
                               lat["psi_int"], lat["dpsi_int"], lat["psi_cell"], lat["dpsi_cell"],
                               lat["psi_core"], lat["dpsi_core"], g.I,
                               self.cell_x, self.cell_w, self.core_u, self.core_fac,
                               omega, D, comp)
        nodes = slice(g.I, g.I + n)
        zi = g.interior_z
        mu = self.model.drift_base(t, zi, lat["psi_int"][nodes], lat["dpsi_int"][nodes]) + comp
        return self._finish(t, omega, D, mu, zi)

    def _finish(self, t, omega, D, mu, zi):
        g = self.grid
        mu_hat = mu - omega @ self.offsets_dz
        chi, ups, central = local_weights(D, mu_hat, g.dz)
        return LevelStencils(t=t, dz=g.dz, kappa=g.kappa, omega=omega, chi=chi, ups=ups,
                             D=D, mu=mu, mu_hat=mu_hat, central=central, z=zi)

    def _level_generic(self, t):
        g = self.grid
        zi = g.interior_z
        rows = [build_stencil(self.model, t, float(z), g, cell_nodes=self.cell_x.size,
                              core_nodes=self.core_u.size) for z in zi]
        omega = np.stack([r.omega for r in rows])
        D = np.array([r.D for r in rows])
        mu = np.array([r.mu for r in rows])
        return self._finish(t, omega, D, mu, zi)

    def levels(self):
        """Iterate over ``(n, LevelStencils)`` for ``n = 0 .. NT - 1``."""
        for n in range(self.grid.NT):
            yield n, self.level(n * self.grid.dt)


@dataclass
class IntegrationPoints:
    """Driver jumps mapped to the cell centres and edges of one node."""

    points: np.ndarray  # y_i, i = -I .. I
    edges: np.ndarray   # y_{i-1/2}, i = -I .. I + 1


def integration_points(model: JumpModel, t: float, z: float, grid: SpaceTimeGrid) -> IntegrationPoints:
    """Driver jumps ``y`` with ``gamma(t, z, y) = i dz`` and at the half points."""
    I = grid.I
    pts = model.gamma_inverse(t, z, grid.dz * np.arange(-I, I + 1))
    edges = model.gamma_inverse(t, z, grid.dz * (np.arange(-I, I + 2) - 0.5))
    return IntegrationPoints(points=np.asarray(pts, dtype=float),
                             edges=np.asarray(edges, dtype=float))


def build_stencil(model: JumpModel, t: float, z: float, grid: SpaceTimeGrid,
                  dt: float | None = None, cell_nodes: int = 5,
                  core_nodes: int = 8) -> NodeStencil:
    """Stencil of a single node, evaluated through the model's public methods."""
    I, kappa, dz = grid.I, grid.kappa, grid.dz
    dens = model.measure.density
    cx, cw = _cell_rule(cell_nodes)
    width = (kappa + 0.5) * dz
    cu, cfac = _core_rule(core_nodes, model.measure.blumenthal_getoor, width)
    g0 = float(model.gamma_y(t, z, 0.0))

    def pieces(w):
        y = np.asarray(model.gamma_inverse(t, z, w), dtype=float)
        dy = 1.0 / np.asarray(model.gamma_y(t, z, y), dtype=float)
        return y, dy

    y_pts = np.asarray(model.gamma_inverse(t, z, dz * np.arange(1, I + 1)), dtype=float)
    y_neg = np.asarray(model.gamma_inverse(t, z, -dz * np.arange(1, I + 1)), dtype=float)
    # same slack as the compiled kernel for points sitting on |y| = 1
    far_pos, far_neg = y_pts >= 1.0 - 1e-9, y_neg <= -1.0 + 1e-9
    zeta_pos = int(np.argmax(far_pos)) + 1 if far_pos.any() else I + 1
    zeta_neg = int(np.argmax(far_neg)) + 1 if far_neg.any() else I + 1

    idx = np.concatenate([np.arange(-I, -kappa), np.arange(kappa + 1, I + 1)])
    w = (idx[:, None] + 0.5 * cx[None, :]) * dz
    y, dy = pieces(w.ravel())
    f = (dens(y) * dy).reshape(w.shape) * (0.5 * dz * cw[None, :])
    mass = f.sum(axis=1)
    mom2 = (w * w * f).sum(axis=1)
    comp = float(((w - (y * g0).reshape(w.shape)) * f).sum())
    omega = np.zeros(2 * I + 1)
    ai = np.abs(idx)
    zeta = np.where(idx > 0, zeta_pos, zeta_neg)
    omega[idx + I] = np.where(ai <= zeta, mom2 / (idx * dz) ** 2, mass)

    wc = np.concatenate([width * cu, -width * cu])
    yc, dyc = pieces(wc)
    fc = dens(yc) * dyc * np.concatenate([cfac, cfac])
    D = float((wc * wc * fc).sum())
    comp += float(((wc - yc * g0) * fc).sum())

    psi, dpsi = model.base_inverse(t, np.array([z]))
    mu = float(model.drift_base(t, np.array([z]), psi, dpsi)[0]) + comp
    mu_hat = mu - float(omega @ (dz * np.arange(-I, I + 1)))
    chi, ups, central = local_weights(D, mu_hat, dz)
    return NodeStencil(t=t, z=z, dz=dz, omega=omega, chi=float(chi), upsilon=float(ups), D=D,
                       mu=mu, mu_hat=mu_hat, central=bool(central), dt=dt)


def generator_apply(stencil: NodeStencil, values, j: int | None = None) -> float:
    """Discrete generator of one node applied to ``values``.

    ``values`` is either an array over offsets ``-I .. I`` (centre at index
    ``I``), a callable of ``z``, or, when ``j`` is given, a vector over the
    padded grid indexed by ``j + N + I``.
    """
    I = stencil.I
    if callable(values):
        v = np.asarray(values(stencil.z + stencil.dz * np.arange(-I, I + 1)), dtype=float)
    else:
        arr = np.asarray(values, dtype=float)
        if j is None:
            v = arr
        else:
            half = (arr.size - 1) // 2
            p = j + half
            v = arr[p - I:p + I + 1]
    v0 = v[I]
    out = stencil.chi * (v[I + 1] - v0) + stencil.upsilon * (v[I - 1] - v0)
    return float(out + stencil.omega @ (v - v0))


@dataclass
class CFLReport:
    """Time-step limits of the chain.

    ``max_dt`` keeps every stay probability non-negative; ``max_dt_sufficient``
    is the more conservative rate-sum form with ``(|i| + 1) omega_i`` and the
    drift bound; ``max_dt_imex`` only involves the jump rates.
    """

    max_dt: float
    binding_node: float
    binding_time: float
    max_dt_sufficient: float
    max_dt_imex: float
    apriori: float | None
    mu_bar: float

    def ok(self, dt: float, scheme: str = "explicit") -> bool:
        limit = self.max_dt if scheme == "explicit" else self.max_dt_imex
        return dt <= limit * (1.0 + 1e-12)


def cfl_bound(builder: StencilBuilder, n_times: int = 5) -> CFLReport:
    """CFL limits over a sample of time levels (first, last and in between)."""
    g = builder.grid
    levels = np.unique(np.linspace(0, g.NT - 1, min(n_times, g.NT)).round().astype(int))
    best = (math.inf, math.nan, math.nan)
    suff, imex, mu_bar = math.inf, math.inf, 0.0
    abs_off = np.abs(np.arange(-g.I, g.I + 1)) + 1.0
    for n in levels:
        st = builder.level(n * g.dt)
        tot = st.total_rate
        k = int(np.argmax(tot))
        if 1.0 / tot[k] < best[0]:
            best = (1.0 / tot[k], float(st.z[k]), float(st.t))
        mu_bar = max(mu_bar, float(np.abs(st.mu).max()))
        imex = min(imex, st.max_dt_imex())
        s = st.D / g.dz**2 + st.omega @ abs_off
        suff = min(suff, 1.0 / float(s.max() + mu_bar / g.dz))
    apriori = apriori_dt_bound(builder.model, g, mu_bar)
    return CFLReport(max_dt=best[0], binding_node=best[1], binding_time=best[2],
                     max_dt_sufficient=suff, max_dt_imex=imex, apriori=apriori, mu_bar=mu_bar)


def apriori_dt_bound(model: JumpModel, grid: SpaceTimeGrid, mu_bar: float) -> float | None:
    """Analytic time-step bound ``dz^alpha / (C1 + C2 dz^(alpha - 1))``.

    Uses ``gamma_y`` bounds ``m1 <= gamma_y <= 1`` (so ``m2 = 0``, ``y0 = 1``)
    and ``M_g = sup |y|^(1+alpha) nu(y)``.  Returns ``None`` outside
    ``1 < alpha < 2``.
    """
    m = model.measure
    alpha = m.blumenthal_getoor
    if not (1.0 < alpha < 2.0):
        return None
    bounds = getattr(model, "phi_derivative_bounds", None)
    m1 = 1.0
    if bounds is not None:
        lo, _ = bounds()
        m1 = lo
    y = np.concatenate([-np.geomspace(1e-8, 50, 2000), np.geomspace(1e-8, 50, 2000)])
    Mg = float(np.max(np.abs(y) ** (1 + alpha) * m.density(y)))
    k = grid.kappa
    ratio = (k + 2.0) ** 2 / (k + 1.0) ** 2
    C1 = (2 * Mg / (2 - alpha)) * ((k + 0.5) / m1) ** (2 - alpha) \
        + 2 * ratio * (k + 0.5) * Mg / (alpha - 1) * (k + 0.5) ** (-alpha)
    tail = m.interval_integral(1.0, 60.0, 1, signed=False) + m.interval_integral(-60.0, -1.0, 1, signed=False)
    C2 = mu_bar + 2 * ratio * tail
    dz = grid.dz
    return dz**alpha / (C1 + C2 * dz ** (alpha - 1))


def dump_stencils(builder: StencilBuilder, levels, path) -> None:
    """Write per-node stencils of the given levels to CSV (a path or a text stream)."""
    g = builder.grid
    head = ["node", "level", "z", "D", "mu_hat", "chi", "upsilon"] + \
        [f"omega_{l}" for l in range(-g.I, g.I + 1)]
    own = not hasattr(path, "write")
    fh = open(path, "w", newline="") if own else path
    try:
        wr = csv.writer(fh)
        wr.writerow(head)
        for n in levels:
            st = builder.level(n * g.dt)
            for jj in range(g.n_interior):
                wr.writerow([jj - g.N + 1, n, repr(float(st.z[jj])), repr(float(st.D[jj])),
                             repr(float(st.mu_hat[jj])), repr(float(st.chi[jj])),
                             repr(float(st.ups[jj]))] + [repr(float(x)) for x in st.omega[jj]])
    finally:
        if own:
            fh.close()
