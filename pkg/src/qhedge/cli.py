"""Command line front end.

Commands::

    qhedge validate      --config run.toml
    qhedge solve         --config run.toml --out DIR
    qhedge price         --config run.toml [--t DAYS] [--F EUR | --z LOGPRICE]
    qhedge backtest      --config run.toml --out DIR [--seed U64] [--pnl-csv]
    qhedge sweep         --config run.toml --out DIR
    qhedge dump-stencil  --config run.toml --out DIR [--levels 0,400]

Every artifact carries the resolved configuration and its hash; a
``manifest.json`` in the output directory lists the SHA-256 of every file.
Prices are in EUR and times in days.

Exit codes: 0 success, 2 usage, 3 validation failure, 4 CFL failure,
5 numerical degeneracy (non-positive ``G``, excessive clamping or too many
paths leaving the grid).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .disc import StencilBuilder, cfl_bound, dump_stencils
from .simul import ExclusionError
from .solve import CFLViolation, DegenerateNode, SolveResult, boundary_influence, solve

log = logging.getLogger("qhedge")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_CFL = 4
EXIT_DEGENERATE = 5

UNITS = "prices in EUR, times in days"


# ---------------------------------------------------------------------------
# validation

@dataclass
class Check:
    name: str
    status: str  # pass | fail | out-of-theory
    detail: str
    hard: bool = False


@dataclass
class ValidationReport:
    checks: list = field(default_factory=list)

    @property
    def hard_failures(self) -> list:
        return [c for c in self.checks if c.status == "fail" and c.hard]

    @property
    def cfl_failed(self) -> bool:
        return any(c.name == "cfl" and c.status == "fail" for c in self.checks)

    @property
    def ok(self) -> bool:
        return not self.hard_failures

    def to_dict(self) -> dict:
        return {"ok": self.ok, "checks": [c.__dict__ for c in self.checks]}

    def to_text(self) -> str:
        return "\n".join(f"[{c.status:>13}] {c.name}: {c.detail}" for c in self.checks)


def _tail_fourth_moment(measure, tau, cutoff=1.0):
    """``int_{|y|>cutoff} tau^4 nu``; infinite when the exponential tails lose."""
    from scipy import integrate

    def f(y):
        d = measure.density(y)
        return 0.0 if d == 0.0 else float(tau(y)) ** 4 * d

    total = 0.0
    for lo, hi in ((cutoff, 50.0), (-50.0, -cutoff)):
        val, _ = integrate.quad(f, lo, hi, limit=200)
        total += val
    # growth test: the integrand must decay at the far ends
    for y in (40.0, -40.0):
        if f(y) > f(y / 2.0) and f(y) > 1e-300:
            return math.inf
    return total


def validate(cfg: RunConfig, samples: int = 9) -> ValidationReport:
    """Sampled checks of the model assumptions and of the grid."""
    rep = ValidationReport()
    model = cfg.model()
    grid = cfg.grid()
    measure = model.measure
    ts = np.linspace(0.0, grid.T, 3)
    zs = grid.center + np.linspace(-0.8, 0.8, samples) * grid.N * grid.dz
    ys = np.concatenate([-np.logspace(1, -4, 40), np.logspace(-4, 1, 40)])

    # gamma strictly increasing in y
    worst = math.inf
    for t in ts:
        for z in zs:
            g = np.asarray(model.gamma(float(t), float(z), ys), dtype=float)
            worst = min(worst, float(np.min(np.diff(g))))
    rep.checks.append(Check("gamma-monotone", "pass" if worst > 0 else "fail",
                            f"min increment {worst:.3g} on sampled (t, z, y)"))

    # bounds on Phi'
    if hasattr(model, "phi_derivative_bounds"):
        lo, hi = model.phi_derivative_bounds()
        A = np.linspace(-40.0, 40.0, 401)
        d = model.phi_prime(A)
        ok = bool(np.all(d >= lo * (1 - 1e-12)) and np.all(d <= hi * (1 + 1e-12)))
        rep.checks.append(Check("phi-prime-bounds", "pass" if ok else "fail",
                                f"{d.min():.6g}..{d.max():.6g} within [{lo:.6g}, {hi:.6g}]"))

    # index in (1, 2) and fourth moment of tau
    alpha = measure.blumenthal_getoor
    if not 1.0 < alpha < 2.0:
        rep.checks.append(Check("levy-index", "out-of-theory",
                                f"Blumenthal-Getoor index {alpha:g} outside (1, 2)"))
    else:
        rep.checks.append(Check("levy-index", "pass", f"index {alpha:g}"))
    m4 = _tail_fourth_moment(measure, model.tau)
    if math.isfinite(m4):
        rep.checks.append(Check("tau-L4", "pass", f"int_(|y|>1) tau^4 nu = {m4:.4g}"))
    else:
        rep.checks.append(Check("tau-L4", "out-of-theory",
                                "tau^4 is not integrable against the far tail of nu"))

    # CFL margin
    builder = StencilBuilder(model, grid)
    cfl = cfl_bound(builder, n_times=3)
    scheme = cfg.data["solve"]["scheme"]
    limit = cfl.max_dt if scheme == "explicit" else cfl.max_dt_imex
    margin = limit / grid.dt
    status = "pass" if cfl.ok(grid.dt, scheme) else "fail"
    extra = ""
    if scheme == "imex" and not cfl.ok(grid.dt, "explicit"):
        extra = f"; the explicit limit {cfl.max_dt:.4g} would fail, backtests sub-step"
    rep.checks.append(Check("cfl", status,
                            f"{scheme} limit {limit:.4g} vs dt {grid.dt:.4g} (margin {margin:.3g}), "
                            f"binding node z={cfl.binding_node:.6g} at t={cfl.binding_time:.4g}{extra}",
                            hard=True))
    mu_bar = cfl.mu_bar
    if cfl.apriori is not None:
        rep.checks.append(Check("cfl-apriori", "pass",
                                f"a-priori explicit step bound {cfl.apriori:.4g}"))

    # domain margin N dz > I dz + mu_bar T
    lhs = grid.N * grid.dz
    rhs = grid.I * grid.dz + mu_bar * grid.T
    rep.checks.append(Check("domain-margin", "pass" if lhs > rhs else "fail",
                            f"N dz = {lhs:.4g} vs I dz + mu_bar T = {rhs:.4g}", hard=True))
    return rep


# ---------------------------------------------------------------------------
# artifacts

class Artifacts:
    """Writes files into the output directory and records their hashes."""

    def __init__(self, out: Path, cfg: RunConfig, fmt: str):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.fmt = fmt
        self.files: dict = {}

    @property
    def want_csv(self) -> bool:
        return self.fmt in ("csv", "both")

    @property
    def want_json(self) -> bool:
        return self.fmt in ("json", "both")

    def header(self) -> dict:
        return {"config": self.cfg.resolved(), "config_hash": self.cfg.hash, "units": UNITS,
                "version": __version__}

    def _record(self, path: Path):
        self.files[path.name] = hashlib.sha256(path.read_bytes()).hexdigest()
        log.info("wrote %s", path)

    def json(self, name: str, payload: dict):
        body = _clean(payload)
        blob = json.dumps(body, sort_keys=True, default=str).encode()
        doc = dict(self.header(), content_sha256=hashlib.sha256(blob).hexdigest(), **body)
        path = self.out / name
        path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))
        self._record(path)
        return path

    def raw_csv(self, name: str, body: str):
        """Write an already formatted CSV body below the identity header."""
        path = self.out / name
        digest = hashlib.sha256(body.encode()).hexdigest()
        with open(path, "w", newline="") as fh:
            fh.write(f"# config_hash={self.cfg.hash} content_sha256={digest} units={UNITS}\n")
            fh.write(f"# config={json.dumps(self.cfg.resolved(), sort_keys=True, default=str)}\n")
            fh.write(body)
        self._record(path)
        return path

    def csv(self, name: str, header: list, rows):
        return self.raw_csv(name, io_rows(header, rows))

    def text(self, name: str, text: str):
        path = self.out / name
        path.write_text(f"# config_hash={self.cfg.hash} units={UNITS}\n{text}\n")
        self._record(path)
        return path

    def figure(self, path):
        self._record(Path(path))

    def finish(self):
        path = self.out / "manifest.json"
        path.write_text(json.dumps(dict(self.header(), files=self.files), indent=2,
                                   sort_keys=True, default=str))


def io_rows(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


# ---------------------------------------------------------------------------
# commands

def _solve_cached(cfg: RunConfig, out: Path, martingale: bool = False) -> SolveResult:
    """Surfaces of the configured problem, reusing the binary cache by hash."""
    from .simul import martingale_surfaces

    tag = "mart" if martingale else "true"
    cache = out / "cache" / f"{cfg.hash}-{tag}.npz"
    if cache.exists():
        log.info("reusing %s", cache)
        return SolveResult.load(cache)
    grid = cfg.grid()
    sc = cfg.solve_config()
    if martingale:
        res = martingale_surfaces(cfg.model(martingale=True), grid, sc)
    else:
        res = solve(cfg.model(), grid, sc, what="abc")
    cache.parent.mkdir(parents=True, exist_ok=True)
    res.save(cache)
    return res


def _surface_rows(res: SolveResult, levels):
    g = res.grid
    xs = res.x_star
    for n in levels:
        for k in range(2 * g.N + 1):
            pi = res.pi_star[n, k] if n < g.NT else math.nan
            c = res.c[n, k] if res.c is not None else math.nan
            yield [n, k - g.N, float(g.z[k]), float(res.a[n, k]), float(res.b[n, k]), float(c),
                   float(pi), float(xs[n, k])]


def _levels_arg(text, NT):
    if text in (None, ""):
        return sorted({0, NT // 2, NT})
    if text == "all":
        return list(range(NT + 1))
    return [int(v) for v in text.split(",")]


def _atm_summary(res: SolveResult) -> dict:
    g = res.grid
    out = {"a": res.at("a"), "pi_star": res.at("pi_star")}
    if res.b is not None:
        out.update(b=res.at("b"), abs_b=abs(res.at("b")), x_star=res.at("x_star"))
    if res.c is not None:
        a, b, c = out["a"], out["b"], res.at("c")
        # c - b^2 / 4a cancels two numbers of the size of E[f^2]; only the explicit
        # scheme, which is the exact expectation of one chain, keeps it accurate
        out.update(c=c, variance_at_price=c - b * b / (4 * a),
                   variance_at_price_exact_chain=res.diagnostics.get("scheme") == "explicit")
    out["z"] = g.center
    out["F"] = math.exp(g.center)
    return out


def cmd_validate(cfg, args, art):
    rep = validate(cfg)
    print(rep.to_text())
    if art is not None:
        art.json("validation.json", rep.to_dict())
    if not rep.ok:
        return EXIT_CFL if rep.cfl_failed else EXIT_VALIDATION
    return EXIT_OK


def _guard(cfg):
    rep = validate(cfg)
    for c in rep.checks:
        if c.status != "pass":
            log.warning("%s: %s (%s)", c.name, c.status, c.detail)
    if not rep.ok:
        code = EXIT_CFL if rep.cfl_failed else EXIT_VALIDATION
        for c in rep.hard_failures:
            log.error("%s: %s", c.name, c.detail)
        raise SystemExit(code)


def cmd_solve(cfg, args, art):
    from .plotting import plot_surfaces

    _guard(cfg)
    res = _solve_cached(cfg, art.out)
    g = res.grid
    levels = _levels_arg(args.levels, g.NT)
    if art.want_csv:
        art.csv("surfaces.csv", ["level", "node", "z", "a", "b", "c", "pi_star", "x_star"],
                _surface_rows(res, levels))
    summary = {"atm": _atm_summary(res), "diagnostics": res.diagnostics,
               "grid": {"N": g.N, "NT": g.NT, "dz": g.dz, "dt": g.dt, "I": g.I,
                        "kappa": g.kappa, "center": g.center},
               "strike_eur": cfg.data["solve"].get("strike")}
    if art.want_json:
        art.json("solve.json", summary)
    art.figure(plot_surfaces(res, art.out / "surfaces.png"))
    atm = summary["atm"]
    print(f"ATM a={atm['a']:.8g} b={atm.get('b', math.nan):.8g} x*={atm.get('x_star', math.nan):.6g} EUR")
    return EXIT_OK


def cmd_price(cfg, args, art):
    _guard(cfg)
    res = _solve_cached(cfg, art.out)
    g = res.grid
    n = int(round(args.t / g.dt)) if args.t else 0
    if args.F is not None:
        z = math.log(args.F)
    elif args.z is not None:
        z = args.z
    else:
        z = g.center
    j = g.node_of(z)
    if not -g.N < j < g.N:
        print("requested point lies outside the grid", file=sys.stderr)
        return EXIT_VALIDATION
    infl = boundary_influence(g, j * g.dz)
    vals = {"t": n * g.dt, "z": float(g.z[j + g.N]), "F": math.exp(g.z[j + g.N]),
            "a": res.at("a", n, j), "b": res.at("b", n, j), "x_star": res.at("x_star", n, j),
            "boundary_influence": infl}
    print(" ".join(f"{k}={v:.8g}" for k, v in vals.items()))
    if art.want_json:
        art.json("price.json", vals)
    if art.want_csv:
        art.csv("price.csv", list(vals), [list(vals.values())])
    return EXIT_OK


def cmd_backtest(cfg, args, art):
    from .plotting import plot_pnl
    from .simul import Policy, compare_strategies, replay, simulate_paths

    _guard(cfg)
    sim = cfg.data["simul"]
    true_res = _solve_cached(cfg, art.out)
    mart_res = _solve_cached(cfg, art.out, martingale=True)
    grid = cfg.grid()
    paths = simulate_paths(cfg.model(), grid, int(sim["n_paths"]), cfg.seed,
                           batch=int(sim["batch"]))
    payoff = cfg.solve_config().terminal
    cmp = compare_strategies(paths, true_res, mart_res, payoff)
    d = cmp.to_dict()
    d["path_source"] = "approximating Markov chain (not an exact Levy sampler)"
    d["strike_eur"] = cfg.data["solve"].get("strike")
    if art.want_json:
        art.json("backtest.json", d)
    if art.want_csv:
        fields = ["strategy_label", "n_paths", "rebalancing_steps", "price_used", "pnl_mean",
                  "pnl_variance", "efficiency", "confidence_halfwidth", "excluded_fraction",
                  "variance_reduction_pct", "efficiency_reduction_pct"]
        rows = [[getattr(r, f) for f in fields] for r in (cmp.true, cmp.martingale)]
        art.csv("backtest.csv", fields, rows)
    pnl_t = replay(paths, Policy.from_result(true_res), payoff, cmp.true.price_used)
    pol_m = Policy(pi=np.zeros_like(mart_res.pi_star), phi_b=mart_res.phi_b)
    pnl_m = replay(paths, pol_m, payoff, cmp.martingale.price_used)
    if args.pnl_csv:
        art.csv("pnl.csv", ["path", "pnl_true", "pnl_martingale"],
                ([k, float(a), float(b)] for k, (a, b) in enumerate(zip(pnl_t, pnl_m))))
    art.figure(plot_pnl({"true": pnl_t, "martingale": pnl_m}, art.out / "pnl.png"))
    print(f"efficiency true={cmp.true.efficiency:.5g} martingale={cmp.martingale.efficiency:.5g} "
          f"variance reduction={cmp.variance_reduction_pct:.2f}% "
          f"(sd ratio {cmp.efficiency_reduction_pct:.2f}%, 95% CI of ratio "
          f"{cmp.ratio_ci[0]:.4f}..{cmp.ratio_ci[1]:.4f})")
    return EXIT_OK


def cmd_sweep(cfg, args, art):
    from .bench import run_sweep
    from .plotting import plot_convergence

    _guard(cfg)
    sw = cfg.data["sweep"]
    table = run_sweep(cfg.model(), cfg.solve_config(), cfg.grid(), sw["axis"],
                      sw["resolutions"], reference=sw.get("reference"),
                      workers=max(1, cfg.threads))
    text = table.to_text()
    print(text)
    art.text("sweep.txt", text)
    if art.want_csv:
        art.raw_csv("sweep.csv", table.to_csv())
    if art.want_json:
        art.json("sweep.json", table.to_dict())
    art.figure(plot_convergence(table, art.out / "sweep.png"))
    return EXIT_OK


def cmd_dump_stencil(cfg, args, art):
    from .plotting import plot_stencil

    grid = cfg.grid()
    builder = StencilBuilder(cfg.model(), grid)
    levels = _levels_arg(args.levels, grid.NT - 1) if args.levels else [0]
    buf = io.StringIO()
    dump_stencils(builder, levels, buf)
    art.raw_csv("stencil.csv", buf.getvalue())
    art.figure(plot_stencil(builder.level(levels[0] * grid.dt), art.out / "stencil.png"))
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "solve": cmd_solve,
    "price": cmd_price,
    "backtest": cmd_backtest,
    "sweep": cmd_sweep,
    "dump-stencil": cmd_dump_stencil,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run configuration (TOML)")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--threads", type=int, default=None, help="worker count")
    common.add_argument("--seed", type=int, default=None, help="override simul.seed")
    common.add_argument("--format", choices=("csv", "json", "both"), default=None,
                        help="artifact formats")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="qhedge", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"qhedge {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("validate", parents=[common], help="check assumptions, CFL and domain")
    s = sub.add_parser("solve", parents=[common], help="solve a, b, c and write surfaces")
    s.add_argument("--levels", default=None, help="levels to export: list, or 'all'")
    pr = sub.add_parser("price", parents=[common], help="print x* at a point")
    pr.add_argument("--t", type=float, default=0.0, help="time in days")
    pr.add_argument("--F", type=float, default=None, help="futures price in EUR")
    pr.add_argument("--z", type=float, default=None, help="log futures price")
    b = sub.add_parser("backtest", parents=[common], help="true vs martingale hedge")
    b.add_argument("--pnl-csv", action="store_true", help="dump per-path P&L")
    sub.add_parser("sweep", parents=[common], help="convergence table")
    d = sub.add_parser("dump-stencil", parents=[common], help="stencil debug CSV")
    d.add_argument("--levels", default=None, help="comma separated level indices")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
    except (OSError, ConfigError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.threads:
        cfg.data.setdefault("runtime", {})["threads"] = int(args.threads)
    fmt = args.format or cfg.data["output"].get("formats", "both")
    out = Path(args.out or cfg.data["output"]["directory"])
    art = Artifacts(out, cfg, fmt)
    try:
        code = COMMANDS[args.command](cfg, args, art)
    except SystemExit as exc:
        code = int(exc.code)
    except CFLViolation as exc:
        print(f"CFL failure: {exc}", file=sys.stderr)
        code = EXIT_CFL
    except DegenerateNode as exc:
        print(f"numerical degeneracy: {exc}", file=sys.stderr)
        code = EXIT_DEGENERATE
    except ExclusionError as exc:
        print(f"numerical degeneracy: {exc}", file=sys.stderr)
        code = EXIT_DEGENERATE
    art.finish()
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
