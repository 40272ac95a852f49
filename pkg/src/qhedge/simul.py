"""Monte-Carlo paths of the approximating chain and hedging backtests.

Paths live on the grid nodes.  Each rebalancing interval ``[t_n, t_{n+1})``
uses the stencil of level ``n``; when the explicit probabilities of that
stencil are not all non-negative at the rebalancing step (IMEX grids) the
interval is split into ``m`` equal sub-steps with the same rates, the
smallest ``m`` that makes the chain well defined.

Along a path the hedge holds ``theta = exp(-z) (pi* X + phi_b)`` units of
the futures, so wealth moves by ``X <- X + (pi* X + phi_b) (exp(dZ) - 1)``.
The true strategy uses the surfaces solved in the historical model, the
martingale strategy the payoff part solved in the drift compensated model
with ``a = 1`` and ``pi* = 0``.  Both strategies are replayed on the same
path batch so their difference is estimated with common random numbers.

Random numbers come from :class:`numpy.random.SeedSequence` children, one
PCG64 stream per batch of paths, so results depend only on the seed and the
batch size.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from .disc import LevelStencils, SpaceTimeGrid
from .solve import SolveConfig, SolveResult, _as_source, solve

log = logging.getLogger(__name__)

__all__ = [
    "PathBatch",
    "Policy",
    "BacktestReport",
    "StrategyComparison",
    "ExclusionError",
    "simulate_paths",
    "substeps_for",
    "replay",
    "backtest",
    "compare_strategies",
    "martingale_surfaces",
    "mc_value_check",
]

BATCH = 4096


class ExclusionError(RuntimeError):
    """Too many paths left the grid to trust the backtest."""


@dataclass
class PathBatch:
    """Node indices ``j`` at every rebalancing date.

    ``exit_step[k]`` is the first step after which path ``k`` sits outside
    ``(-N, N)`` (``-1`` if it never leaves); the node is frozen from then on.
    """

    grid: SpaceTimeGrid
    nodes: np.ndarray
    exit_step: np.ndarray
    substeps: np.ndarray
    seed: int

    @property
    def n_paths(self) -> int:
        return self.nodes.shape[0]

    @property
    def exited(self) -> np.ndarray:
        return self.exit_step >= 0

    def z(self) -> np.ndarray:
        return self.grid.center + self.grid.dz * self.nodes

    def exit_fraction_by_step(self) -> np.ndarray:
        """Fraction of paths that have left the grid by each step."""
        steps = np.arange(self.grid.NT + 1)
        ex = self.exit_step[self.exited]
        return np.searchsorted(np.sort(ex), steps, side="right") / self.n_paths


def substeps_for(level: LevelStencils, dt: float) -> int:
    """Smallest number of equal sub-steps giving non-negative stay probabilities."""
    rate = float(level.total_rate.max())
    if rate * dt <= 1.0:
        return 1
    return int(math.ceil(rate * dt * (1.0 + 1e-12)))


def simulate_paths(source, grid: SpaceTimeGrid, n_paths: int, seed: int, start: int = 0,
                   batch: int = BATCH, **builder_kw) -> PathBatch:
    """Trajectories of the chain started at node ``start``, stopped on exit."""
    src = _as_source(source, grid, **builder_kw)
    g = grid
    n_batches = max(1, math.ceil(n_paths / batch))
    children = np.random.SeedSequence(seed).spawn(n_batches)
    rngs = [np.random.Generator(np.random.PCG64(c)) for c in children]
    bounds = [(k * batch, min(n_paths, (k + 1) * batch)) for k in range(n_batches)]

    nodes = np.empty((n_paths, g.NT + 1), dtype=np.int32)
    nodes[:, 0] = start
    pos = np.full(n_paths, start, dtype=np.int64)
    alive = np.ones(n_paths, dtype=np.bool_)
    exit_step = np.full(n_paths, -1, dtype=np.int64)
    subs = np.empty(g.NT, dtype=np.int64)
    for n in range(g.NT):
        st = src.level(n)
        m = substeps_for(st, g.dt)
        subs[n] = m
        cum = _kernels.cumulative_table(st.omega, st.chi, st.ups, g.dt / m, st.I)
        for rng, (lo, hi) in zip(rngs, bounds):
            p, a = pos[lo:hi], alive[lo:hi]
            for _ in range(m):
                u = rng.random(hi - lo)
                _kernels.sample_steps(cum, p, a, u, st.I, g.N)
        newly = (~alive) & (exit_step < 0)
        exit_step[newly] = n + 1
        nodes[:, n + 1] = pos
    return PathBatch(grid=g, nodes=nodes, exit_step=exit_step, substeps=subs, seed=seed)


@dataclass
class Policy:
    """Amount invested ``pi X + phi_b`` per level (``NT x (2N + 1)`` arrays)."""

    pi: np.ndarray
    phi_b: np.ndarray

    @classmethod
    def from_result(cls, result: SolveResult) -> "Policy":
        phi = result.phi_b if result.phi_b is not None else np.zeros_like(result.pi_star)
        return cls(pi=result.pi_star, phi_b=phi)

    def scaled(self, factor: float) -> "Policy":
        return Policy(pi=self.pi * factor, phi_b=self.phi_b)


def replay(paths: PathBatch, policy: Policy, payoff, x0: float, on_exit: str = "exclude"):
    """Terminal hedging error ``f(Z_T) - X_T`` along every path.

    ``on_exit="exclude"`` returns NaN for paths that left the grid;
    ``"stop"`` freezes wealth at the exit and settles the payoff there, which
    is the stopped-chain semantics of the backward recursion.
    """
    g = paths.grid
    X = np.full(paths.n_paths, float(x0))
    live = np.ones(paths.n_paths, dtype=bool)
    for n in range(g.NT):
        j0 = paths.nodes[:, n]
        live &= np.abs(j0) < g.N
        if not live.any():
            break
        k = j0[live] + g.N
        dz = (paths.nodes[live, n + 1] - j0[live]) * g.dz
        amount = policy.pi[n, k] * X[live] + policy.phi_b[n, k]
        X[live] += amount * np.expm1(dz)
    zT = g.center + g.dz * paths.nodes[:, -1]
    pnl = np.asarray(payoff(zT), dtype=float) - X
    if on_exit == "exclude":
        pnl[paths.exited] = np.nan
    elif on_exit != "stop":
        raise ValueError("on_exit must be 'exclude' or 'stop'")
    return pnl


@dataclass
class BacktestReport:
    """Hedged P&L statistics of one strategy (EUR, days)."""

    n_paths: int
    rebalancing_steps: int
    strategy_label: str
    price_used: float
    pnl_mean: float
    pnl_variance: float
    efficiency: float
    confidence_halfwidth: float
    excluded_fraction: float
    variance_reduction_pct: float | None = None
    efficiency_reduction_pct: float | None = None
    path_source: str = "approximating Markov chain"
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _efficiency_stats(pnl):
    """Standard deviation and its 95% half width by the delta method."""
    n = pnl.size
    dev = pnl - pnl.mean()
    var = float(np.mean(dev * dev)) * n / max(n - 1, 1)
    sd = math.sqrt(var)
    m4 = float(np.mean(dev ** 4))
    var_of_var = max(m4 - var * var, 0.0) / n
    half = 1.96 * math.sqrt(var_of_var) / (2.0 * sd) if sd > 0 else 0.0
    return float(pnl.mean()), var, sd, half


def _report(pnl_all, label, x0, paths: PathBatch, max_excluded) -> tuple[BacktestReport, np.ndarray]:
    keep = ~np.isnan(pnl_all)
    excluded = 1.0 - keep.mean()
    if excluded > max_excluded:
        raise ExclusionError(f"{excluded:.2%} of paths left the grid (limit {max_excluded:.2%})")
    pnl = pnl_all[keep]
    mean, var, sd, half = _efficiency_stats(pnl)
    rep = BacktestReport(n_paths=int(keep.sum()), rebalancing_steps=paths.grid.NT,
                         strategy_label=label, price_used=float(x0), pnl_mean=mean,
                         pnl_variance=var, efficiency=sd, confidence_halfwidth=half,
                         excluded_fraction=float(excluded), seed=paths.seed,
                         extra={"max_substeps": int(paths.substeps.max())})
    return rep, pnl


def martingale_surfaces(mart_model_or_source, grid: SpaceTimeGrid, config: SolveConfig,
                        **kw) -> SolveResult:
    """``b`` and the hedge of the drift compensated model with ``a = 1``, ``pi* = 0``."""
    g = grid
    ones = np.ones((g.NT + 1, 2 * g.N + 1))
    zeros = np.zeros((g.NT, 2 * g.N + 1))
    res = solve(mart_model_or_source, g, config, what="b", pi_star=zeros, a_surface=ones, **kw)
    res.a = ones
    return res


def backtest(paths: PathBatch, result: SolveResult, payoff, strategy: str = "True",
             max_excluded: float = 0.01) -> BacktestReport:
    """Replay one strategy on a path batch and summarise the hedged P&L.

    For ``"True"`` the surfaces come from the historical model; for
    ``"Martingale"`` from :func:`martingale_surfaces`.  The start wealth is
    the strategy's own price ``x*`` at the start node.
    """
    if strategy not in ("True", "Martingale"):
        raise ValueError("strategy must be 'True' or 'Martingale'")
    j0 = int(paths.nodes[0, 0])
    x0 = result.at("x_star", 0, j0) if result.b is not None else 0.0
    policy = Policy.from_result(result)
    if strategy == "Martingale":
        policy = Policy(pi=np.zeros_like(policy.pi), phi_b=policy.phi_b)
    pnl = replay(paths, policy, payoff, x0, on_exit="exclude")
    rep, _ = _report(pnl, strategy, x0, paths, max_excluded)
    return rep


@dataclass
class StrategyComparison:
    """Paired comparison of the two strategies on common paths."""

    true: BacktestReport
    martingale: BacktestReport
    efficiency_ratio: float
    ratio_ci: tuple[float, float]
    variance_reduction_pct: float
    efficiency_reduction_pct: float

    @property
    def significant(self) -> bool:
        """True strategy has the smaller standard deviation at 95% confidence."""
        return self.ratio_ci[1] < 1.0

    def to_dict(self) -> dict:
        return {"true": self.true.to_dict(), "martingale": self.martingale.to_dict(),
                "efficiency_ratio": self.efficiency_ratio, "ratio_ci": list(self.ratio_ci),
                "variance_reduction_pct": self.variance_reduction_pct,
                "efficiency_reduction_pct": self.efficiency_reduction_pct,
                "significant": self.significant}


def compare_strategies(paths: PathBatch, true_result: SolveResult, mart_result: SolveResult,
                       payoff, max_excluded: float = 0.01) -> StrategyComparison:
    """Both strategies on the same paths with a paired confidence interval.

    ``variance_reduction_pct`` is ``(eff_true^2 / eff_mart^2 - 1) 100`` and
    ``efficiency_reduction_pct`` the same ratio of standard deviations,
    ``(eff_true / eff_mart - 1) 100``.
    """
    j0 = int(paths.nodes[0, 0])
    x_true = true_result.at("x_star", 0, j0)
    x_mart = mart_result.at("x_star", 0, j0)
    pol_t = Policy.from_result(true_result)
    pol_m = Policy(pi=np.zeros_like(mart_result.pi_star), phi_b=mart_result.phi_b)
    pnl_t = replay(paths, pol_t, payoff, x_true)
    pnl_m = replay(paths, pol_m, payoff, x_mart)
    rep_t, _ = _report(pnl_t, "True", x_true, paths, max_excluded)
    rep_m, _ = _report(pnl_m, "Martingale", x_mart, paths, max_excluded)
    keep = ~np.isnan(pnl_t)
    dt_ = pnl_t[keep] - pnl_t[keep].mean()
    dm_ = pnl_m[keep] - pnl_m[keep].mean()
    qt, qm = dt_ * dt_, dm_ * dm_
    vt, vm = qt.mean(), qm.mean()
    n = qt.size
    # delta method for log(sd_t / sd_m) = (log vt - log vm) / 2 with paired moments
    cov = np.cov(np.vstack([qt, qm]))
    var_log = 0.25 * (cov[0, 0] / vt ** 2 + cov[1, 1] / vm ** 2 - 2 * cov[0, 1] / (vt * vm)) / n
    ratio = math.sqrt(vt / vm)
    half = 1.96 * math.sqrt(max(var_log, 0.0))
    ci = (ratio * math.exp(-half), ratio * math.exp(half))
    vr = (vt / vm - 1.0) * 100.0
    er = (ratio - 1.0) * 100.0
    for rep in (rep_t, rep_m):
        rep.variance_reduction_pct = vr
        rep.efficiency_reduction_pct = er
    return StrategyComparison(true=rep_t, martingale=rep_m, efficiency_ratio=ratio,
                              ratio_ci=ci, variance_reduction_pct=vr, efficiency_reduction_pct=er)


def mc_value_check(source, grid: SpaceTimeGrid, payoff, policy: Policy, n_paths: int,
                   seed: int, x0: float, start: int = 0, paths: PathBatch | None = None,
                   **builder_kw):
    """Monte-Carlo estimate of ``E[(f(Z_T) - X_T)^2]`` and its standard error.

    Paths leaving the grid settle at the exit node, matching the stopped
    chain of the backward recursion with the default boundary data.
    """
    if paths is None:
        paths = simulate_paths(source, grid, n_paths, seed, start=start, **builder_kw)
    err = replay(paths, policy, payoff, x0, on_exit="stop")
    sq = err * err
    return float(sq.mean()), float(sq.std(ddof=1) / math.sqrt(sq.size))
