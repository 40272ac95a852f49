"""Run configuration files.

A run is fully described by one TOML file with the tables ``model``,
``grid``, ``solve``, ``simul``, ``sweep`` and ``output``.  Only the output
directory and the worker count may be overridden from the environment
(``QHEDGE_OUT`` and ``QHEDGE_THREADS``).  Times are in days and prices in
EUR.

Example::

    [model]
    kind = "electricity"
    measure = "cgmy"
    C = 0.01
    G = 1.1
    M = 1.1
    Y = 1.9
    trend = 0.01
    c = 0.1
    curve = "weekly"        # or a CSV path with s_start,s_end,price

    [grid]
    N = 800
    NT = 800
    half_width = 10.0
    jump_width = 2.0
    kappa = 1

    [solve]
    scheme = "imex"
    payoff = "call"
    moneyness = 1.0
"""
from __future__ import annotations

import copy
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import levy
from .disc import SpaceTimeGrid
from .model import ElectricityModel, ForwardCurve, synthetic_model, weekly_curve
from .solve import SolveConfig, call_payoff, config_hash, put_payoff, zero_payoff

__all__ = ["ConfigError", "RunConfig", "load_config", "DEFAULTS"]


class ConfigError(ValueError):
    """The configuration is incomplete or contradictory."""


DEFAULTS = {
    "model": {"kind": "electricity", "measure": "cgmy", "curve": "weekly", "c": 0.1,
              "trend": 0.01, "martingale": False, "mu0": 0.0, "horizon": 1.0},
    "grid": {"half_width": 10.0, "jump_width": 2.0, "kappa": 1},
    "solve": {"scheme": "imex", "pi_bar": 1e6, "payoff": "call", "moneyness": 1.0,
              "smoothing": 0.0},
    "simul": {"n_paths": 10000, "seed": 12345, "batch": 4096},
    "sweep": {"axis": "space", "resolutions": [100, 200, 400, 800], "reference": None},
    "output": {"directory": "qhedge-out", "formats": "both"},
}

_MEASURE_KEYS = {"cgmy": ("C", "G", "M", "Y"), "nig": ("alpha", "beta", "delta")}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _pair(g: dict, count: str, step: str, length: float, what: str):
    """Resolve a step count and step size; both may be given if consistent."""
    if count in g:
        n = int(g[count])
        h = length / n
        if step in g and abs(float(g[step]) - h) > 1e-12 * h:
            raise ConfigError(f"grid.{count} and grid.{step} disagree; give only one")
        return n, h
    n = length / float(g[step])
    if abs(n - round(n)) > 1e-9:
        raise ConfigError(f"grid.{step} must divide {what}")
    return int(round(n)), float(g[step])


@dataclass
class RunConfig:
    """Resolved configuration plus the objects it describes."""

    data: dict
    source: str | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    # construction ---------------------------------------------------------
    @classmethod
    def from_dict(cls, raw: dict, source: str | None = None, env: dict | None = None) -> "RunConfig":
        data = _merge(DEFAULTS, raw)
        env = os.environ if env is None else env
        if env.get("QHEDGE_OUT"):
            data["output"]["directory"] = env["QHEDGE_OUT"]
        if env.get("QHEDGE_THREADS"):
            data.setdefault("runtime", {})["threads"] = int(env["QHEDGE_THREADS"])
        cfg = cls(data=data, source=source)
        cfg._resolve()
        return cfg

    def _resolve(self) -> None:
        m, g, s = self.data["model"], self.data["grid"], self.data["solve"]
        if m["kind"] not in ("electricity", "synthetic"):
            raise ConfigError("model.kind must be 'electricity' or 'synthetic'")
        keys = _MEASURE_KEYS.get(m["measure"])
        if keys is None:
            raise ConfigError("model.measure must be 'cgmy' or 'nig'")
        missing = [k for k in keys if k not in m]
        if missing:
            raise ConfigError(f"model is missing measure parameters {missing}")
        if "N" not in g and "dz" not in g:
            raise ConfigError("give one of grid.N and grid.dz")
        if "NT" not in g and "dt" not in g:
            raise ConfigError("give one of grid.NT and grid.dt")
        if s["payoff"] not in ("call", "put", "zero"):
            raise ConfigError("solve.payoff must be call, put or zero")
        if s["scheme"] not in ("explicit", "imex"):
            raise ConfigError("solve.scheme must be explicit or imex")
        T = self.horizon
        half = float(g["half_width"])
        g["N"], g["dz"] = _pair(g, "N", "dz", half, "grid.half_width")
        g["NT"], g["dt"] = _pair(g, "NT", "dt", T, "the horizon")
        if "I" not in g:
            g["I"] = int(round(float(g["jump_width"]) / g["dz"]))
        g["center"] = self.center
        if s["payoff"] != "zero" and "strike" not in s:
            s["strike"] = float(s["moneyness"]) * self.forward_price
        s["strike_resolved_eur"] = s.get("strike")
        m["zeta"] = self.zeta
        m["outside_theory"] = self.measure.outside_theory

    # derived objects ----------------------------------------------------------
    @property
    def measure(self) -> levy.LevyMeasure:
        m = self.data["model"]
        if m["measure"] == "cgmy":
            return levy.CGMY(float(m["C"]), float(m["G"]), float(m["M"]), float(m["Y"]))
        return levy.NIG(float(m["alpha"]), float(m["beta"]), float(m["delta"]))

    @property
    def curve(self) -> ForwardCurve:
        path = self.data["model"]["curve"]
        if path == "weekly":
            return weekly_curve()
        p = Path(path)
        if not p.is_absolute() and self.source:
            p = Path(self.source).parent / p
        return ForwardCurve.from_csv(p)

    @property
    def zeta(self) -> float:
        """Drift of the driver: trend plus the compensator constant."""
        return float(self.data["model"]["trend"]) + self.measure.compensator_drift()

    @property
    def horizon(self) -> float:
        m = self.data["model"]
        if m["kind"] == "electricity":
            return float(m.get("T", self.curve.delivery_start))
        return float(m["horizon"])

    @property
    def center(self) -> float:
        if self.data["model"]["kind"] == "electricity":
            return float(self.model().phi(0.0))
        return 0.0

    @property
    def forward_price(self) -> float:
        return math.exp(self.center)

    def model(self, martingale: bool | None = None):
        m = self.data["model"]
        mart = bool(m["martingale"]) if martingale is None else martingale
        key = ("model", mart)
        if key not in self._cache:
            if m["kind"] == "electricity":
                self._cache[key] = ElectricityModel(self.curve, float(m["c"]), self.zeta,
                                                    self.measure, martingale=mart)
            else:
                mu0 = float(m["mu0"])
                if mart:
                    # compensated drift: exp of the additive process is a martingale
                    mu0 = -float(self.measure.cumulant(1.0))
                self._cache[key] = synthetic_model(mu0, self.measure, horizon=self.horizon)
        return self._cache[key]

    def grid(self) -> SpaceTimeGrid:
        g = self.data["grid"]
        return SpaceTimeGrid(N=int(g["N"]), NT=int(g["NT"]), dz=float(g["dz"]), dt=float(g["dt"]),
                             I=int(g["I"]), kappa=int(g["kappa"]), center=float(g["center"]))

    def payoff(self):
        s = self.data["solve"]
        if s["payoff"] == "call":
            return call_payoff(float(s["strike"]))
        if s["payoff"] == "put":
            return put_payoff(float(s["strike"]))
        return zero_payoff

    def solve_config(self) -> SolveConfig:
        s = self.data["solve"]
        smooth = float(s.get("smoothing") or 0.0)
        return SolveConfig(scheme=s["scheme"], pi_bar=float(s["pi_bar"]), payoff=self.payoff(),
                           payoff_smoothing=smooth * self.data["grid"]["dz"] if smooth else None)

    @property
    def threads(self) -> int:
        return int(self.data.get("runtime", {}).get("threads", os.cpu_count() or 1))

    @property
    def seed(self) -> int:
        return int(self.data["simul"]["seed"])

    def with_seed(self, seed: int) -> "RunConfig":
        data = copy.deepcopy(self.data)
        data["simul"]["seed"] = int(seed)
        return RunConfig(data=data, source=self.source)

    # identity -------------------------------------------------------------
    def resolved(self) -> dict:
        """Everything that determines the numbers, without output locations."""
        d = copy.deepcopy(self.data)
        d.pop("output", None)
        d.pop("runtime", None)
        return d

    @property
    def hash(self) -> str:
        return config_hash(self.resolved())

    def to_json(self) -> str:
        return json.dumps(self.resolved(), sort_keys=True, indent=2, default=str)


def load_config(path, overrides: dict | None = None, env: dict | None = None) -> RunConfig:
    """Parse a TOML file into a :class:`RunConfig`."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    if overrides:
        raw = _merge(raw, overrides)
    return RunConfig.from_dict(raw, source=str(path), env=env)
