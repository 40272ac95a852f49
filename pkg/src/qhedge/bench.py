"""Convergence studies in space and time.

A sweep solves the same problem at several resolutions, reads ``a`` and
``b`` at a probe node (the grid centre, which sits at the money for the
electricity model) and compares every run with the finest one.  Pairwise
orders follow ``k = log(e_prev / e_cur) / log(r_cur / r_prev)``, which for
halving steps is ``log2(e_{N/2} / e_N)``.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .disc import SpaceTimeGrid
from .solve import CFLViolation, DegenerateNode, SolveConfig, solve

log = logging.getLogger(__name__)

__all__ = ["OrderFit", "SweepRow", "ConvergenceTable", "order_fit", "run_sweep"]


@dataclass
class OrderFit:
    """Pairwise orders and the least-squares slope of ``log|e|`` on ``log r``."""

    pairwise: list
    slope_order: float
    oscillating: bool = False
    note: str = ""


def order_fit(errors) -> OrderFit:
    """Convergence orders from ``(resolution, error)`` pairs.

    Pairs with a zero error are skipped.  Errors whose signs alternate are
    flagged and their orders suppressed (NaN), since a ratio of algebraic
    errors of different sign is not an order.
    """
    pts = [(float(r), float(e)) for r, e in errors]
    if len(pts) < 2:
        raise ValueError("order_fit needs at least two rows")
    pts.sort()
    nz = [(r, e) for r, e in pts if e != 0.0 and math.isfinite(e)]
    signs = {math.copysign(1.0, e) for _, e in nz}
    oscillating = len(signs) > 1
    pairwise = []
    for (r0, e0), (r1, e1) in zip(pts[:-1], pts[1:]):
        if e0 == 0.0 or e1 == 0.0 or r0 == r1 or not (math.isfinite(e0) and math.isfinite(e1)):
            pairwise.append(math.nan)
        elif oscillating:
            pairwise.append(math.nan)
        else:
            pairwise.append(math.log(abs(e0) / abs(e1)) / math.log(r1 / r0))
    usable = [(r, e) for r, e in nz]
    res = sorted({r for r, _ in usable})
    if oscillating or len(res) < 2:
        slope = math.nan
        note = "sign-oscillating errors" if oscillating else "fewer than two distinct usable rows"
    else:
        x = np.log([r for r, _ in usable])
        y = np.log([abs(e) for _, e in usable])
        slope = -float(np.polyfit(x, y, 1)[0])
        note = ""
    return OrderFit(pairwise=pairwise, slope_order=slope, oscillating=oscillating, note=note)


@dataclass
class SweepRow:
    resolution: int
    N: int
    NT: int
    a: float = math.nan
    b: float = math.nan
    err_a: float = math.nan
    err_b: float = math.nan
    k_a: float = math.nan
    k_b: float = math.nan
    feasible: bool = True
    seconds: float = math.nan
    note: str = ""


@dataclass
class ConvergenceTable:
    """Probe-node values, errors against the finest run and orders."""

    axis: str
    reference: int
    rows: list
    fit_a: OrderFit | None = None
    fit_b: OrderFit | None = None
    meta: dict = field(default_factory=dict)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["axis", "resolution", "N", "NT", "a", "b", "err_a", "err_b", "k_a", "k_b",
                    "feasible", "seconds", "note"])
        for r in self.rows:
            nums = [repr(float(v)) for v in (r.a, r.b, r.err_a, r.err_b, r.k_a, r.k_b)]
            w.writerow([self.axis, r.resolution, r.N, r.NT, *nums, r.feasible,
                        f"{r.seconds:.3f}", r.note])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def to_text(self) -> str:
        head = "N" if self.axis == "space" else "NT"
        lines = [f"{self.axis} convergence, reference {head}={self.reference}",
                 f"{head:>6} {'a':>12} {'err_a':>11} {'k_a':>6} {'b':>12} {'err_b':>11} {'k_b':>6}"]
        for r in self.rows:
            if not r.feasible:
                lines.append(f"{r.resolution:>6}  infeasible ({r.note})")
                continue
            lines.append(f"{r.resolution:>6} {r.a:12.6f} {_fmt(r.err_a):>11} {_fmt(r.k_a, 2):>6} "
                         f"{r.b:12.5f} {_fmt(r.err_b):>11} {_fmt(r.k_b, 2):>6}")
        for name, fit in (("a", self.fit_a), ("b", self.fit_b)):
            if fit is not None:
                extra = f" ({fit.note})" if fit.note else ""
                lines.append(f"least-squares order of {name}: {_fmt(fit.slope_order, 3)}{extra}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"axis": self.axis, "reference": self.reference,
                "rows": [asdict(r) for r in self.rows],
                "fit_a": asdict(self.fit_a) if self.fit_a else None,
                "fit_b": asdict(self.fit_b) if self.fit_b else None, "meta": self.meta}


def _fmt(x, digits=4):
    if x is None or not math.isfinite(x):
        return "-"
    return f"{x:.{digits}g}" if digits > 3 else f"{x:.{digits}f}"


def _probe(model, grid: SpaceTimeGrid, config: SolveConfig):
    t0 = time.perf_counter()
    res = solve(model, grid, config, what="ab")
    return res.at("a"), res.at("b"), time.perf_counter() - t0


def _run_one(args):
    model, grid, config = args
    try:
        return _probe(model, grid, config), ""
    except (CFLViolation, DegenerateNode) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def run_sweep(model, config: SolveConfig, base_grid: SpaceTimeGrid, axis: str, resolutions,
              reference: int | None = None, workers: int = 1) -> ConvergenceTable:
    """Solve at every resolution and tabulate errors against the finest run.

    ``axis="space"`` varies ``N`` with ``NT`` pinned, ``axis="time"``
    varies ``NT`` with ``N`` pinned.  ``reference`` adds a finer run used
    only as the reference (its row reports zero error).  Infeasible
    resolutions are kept as marked rows.
    """
    if axis not in ("space", "time"):
        raise ValueError("axis must be 'space' or 'time'")
    res = sorted(int(r) for r in resolutions)
    if reference is not None and reference not in res:
        res.append(int(reference))
    res = sorted(res)
    if len(res) < 2:
        raise ValueError("a sweep needs at least two resolutions")

    def grid_for(r):
        return base_grid.with_steps(N=r) if axis == "space" else base_grid.with_steps(NT=r)

    jobs = [(model, grid_for(r), config) for r in res]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(_run_one, jobs))
    else:
        outs = [_run_one(j) for j in jobs]

    rows = []
    for r, (g_job, (out, note)) in zip(res, zip([j[1] for j in jobs], outs)):
        row = SweepRow(resolution=r, N=g_job.N, NT=g_job.NT)
        if out is None:
            row.feasible = False
            row.note = note
            log.warning("resolution %d infeasible: %s", r, note)
        else:
            row.a, row.b, row.seconds = out
            log.info("resolution %d: a=%.8g b=%.8g (%.1fs)", r, row.a, row.b, row.seconds)
        rows.append(row)

    feasible = [row for row in rows if row.feasible]
    ref = feasible[-1] if feasible else rows[-1]
    for row in feasible:
        row.err_a = row.a - ref.a
        row.err_b = row.b - ref.b
    # errors of the reference are zero by convention and excluded from fits
    fitted = [row for row in feasible if row is not ref]
    fit_a = fit_b = None
    if len(fitted) >= 2:
        fit_a = order_fit([(row.resolution, row.err_a) for row in fitted])
        fit_b = order_fit([(row.resolution, row.err_b) for row in fitted])
        for k, row in enumerate(fitted[1:]):
            row.k_a = fit_a.pairwise[k]
            row.k_b = fit_b.pairwise[k]
    g = base_grid
    meta = {"pinned": {"NT": g.NT} if axis == "space" else {"N": g.N},
            "half_width": g.N * g.dz, "jump_width": g.I * g.dz, "kappa": g.kappa,
            "horizon": g.T, "scheme": config.scheme, "probe_z": g.center}
    return ConvergenceTable(axis=axis, reference=ref.resolution, rows=rows, fit_a=fit_a,
                            fit_b=fit_b, meta=meta)
