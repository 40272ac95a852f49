"""Figures written next to the CSV/JSON artifacts of the command line.

All functions take already computed results, draw with the non-interactive
Agg backend and return the path of the PNG file they wrote.
"""
from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_surfaces", "plot_convergence", "plot_pnl", "plot_stencil"]

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "lines.linewidth": 1.2,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.dpi": 120,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return str(path)


def plot_surfaces(result, path, window: float = 1.5):
    """``a``, ``x*`` and ``pi*`` at ``t = 0`` against the futures price."""
    g = result.grid
    F = np.exp(g.z)
    keep = np.abs(g.z - g.center) <= window
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(10, 3))
        axes[0].plot(F[keep], result.a[0, keep])
        axes[0].set_ylabel("a(0, z)")
        if result.b is not None:
            axes[1].plot(F[keep], result.x_star[0, keep], label="x*")
            axes[1].plot(F[keep], result.x_star[-1, keep], "--", label="payoff")
            axes[1].legend()
        axes[1].set_ylabel("price [EUR]")
        axes[2].plot(F[keep], result.pi_star[0, keep])
        axes[2].set_ylabel("pi*(0, z)")
        for ax in axes:
            ax.set_xlabel("futures price [EUR]")
        return _save(fig, path)


def plot_convergence(table, path):
    """Absolute errors of ``a`` and ``b`` against resolution on log axes."""
    rows = [r for r in table.rows if r.feasible and r.resolution != table.reference]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        res = np.array([r.resolution for r in rows], dtype=float)
        for name, marker in (("a", "o"), ("b", "s")):
            err = np.array([abs(getattr(r, f"err_{name}")) for r in rows])
            ok = err > 0
            if ok.any():
                ax.loglog(res[ok], err[ok], marker=marker, label=f"|error of {name}|")
        ax.set_xlabel("N" if table.axis == "space" else "NT")
        ax.set_ylabel("error vs reference")
        ax.set_title(f"{table.axis} convergence (reference {table.reference})")
        ax.legend()
        return _save(fig, path)


def plot_pnl(pnl_by_label: dict, path, bins: int = 80):
    """Histograms of terminal hedging errors for each strategy."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        finite = [v[np.isfinite(v)] for v in pnl_by_label.values()]
        lo = min(np.percentile(v, 0.5) for v in finite)
        hi = max(np.percentile(v, 99.5) for v in finite)
        edges = np.linspace(lo, hi, bins + 1)
        for (label, _), v in zip(pnl_by_label.items(), finite):
            sd = float(np.std(v, ddof=1)) if v.size > 1 else math.nan
            ax.hist(v, bins=edges, histtype="step", density=True, label=f"{label} (sd {sd:.3g})")
        ax.set_xlabel("terminal P&L [EUR]")
        ax.set_ylabel("density")
        ax.legend()
        return _save(fig, path)


def plot_stencil(level, path, nodes=None):
    """Jump rates of a few nodes of one level against the offset."""
    I = level.I
    offsets = np.arange(-I, I + 1)
    n = level.omega.shape[0]
    nodes = [n // 2, n // 4, 3 * n // 4] if nodes is None else nodes
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for jj in nodes:
            r = level.omega[jj].copy()
            r[I + 1] += level.chi[jj]
            r[I - 1] += level.ups[jj]
            pos = r > 0
            ax.semilogy(offsets[pos], r[pos], ".", ms=3, label=f"z={level.z[jj]:.3f}")
        ax.set_xlabel("offset l")
        ax.set_ylabel("rate [1/day]")
        ax.legend()
        return _save(fig, path)
