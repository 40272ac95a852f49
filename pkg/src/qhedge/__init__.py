"""Quadratic hedging of options on electricity futures driven by Lévy jumps.

The package builds Markov-chain approximations of pure-jump models
(:mod:`qhedge.disc`), solves the backward recursions for the coefficients of
the quadratic value function (:mod:`qhedge.solve`), and checks the hedges
by Monte Carlo on the chain (:mod:`qhedge.simul`).
"""
__version__ = "0.1.0"

from .levy import CGMY, NIG, CustomMeasure, LevyMeasure  # noqa: E402
from .model import ElectricityModel, ForwardCurve, synthetic_model, weekly_curve  # noqa: E402
from .disc import SpaceTimeGrid, StencilBuilder  # noqa: E402
from .solve import SolveConfig, SolveResult  # noqa: E402

__all__ = [
    "CGMY",
    "NIG",
    "CustomMeasure",
    "LevyMeasure",
    "ElectricityModel",
    "ForwardCurve",
    "synthetic_model",
    "weekly_curve",
    "SpaceTimeGrid",
    "StencilBuilder",
    "SolveConfig",
    "SolveResult",
]
