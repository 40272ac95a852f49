"""Shared fixtures: measures, models and small grids used across the suite."""
import numpy as np
import pytest
from hypothesis import settings

from qhedge import levy
from qhedge.disc import SpaceTimeGrid
from qhedge.model import ElectricityModel, synthetic_model, weekly_curve

# numba compiles kernels on first use, which would trip per-example deadlines
settings.register_profile("qhedge", deadline=None, max_examples=100)
settings.load_profile("qhedge")

CGMY_19 = dict(C=0.01, G=1.1, M=1.1, Y=1.9)
NIG_PARAMS = dict(alpha=6.23, beta=0.06, delta=0.1027)
TREND = 0.01


@pytest.fixture(scope="session")
def cgmy():
    return levy.CGMY(**CGMY_19)


@pytest.fixture(scope="session")
def nig():
    return levy.NIG(**NIG_PARAMS)


@pytest.fixture(scope="session")
def curve():
    return weekly_curve()


def electricity(measure, c=0.1, martingale=False):
    zeta = TREND + measure.compensator_drift()
    return ElectricityModel(weekly_curve(), c, zeta, measure, martingale=martingale)


@pytest.fixture(scope="session")
def elec(cgmy):
    return electricity(cgmy)


@pytest.fixture(scope="session")
def elec_nig(nig):
    return electricity(nig, c=0.19)


@pytest.fixture(scope="session")
def synth(cgmy):
    return synthetic_model(0.0, cgmy, horizon=1.0)


def coarse_grid(model, N=100, NT=200, jump_width=2.0):
    center = float(model.phi(0.0)) if hasattr(model, "phi") else 0.0
    return SpaceTimeGrid.from_domain(N, NT, model.horizon, half_width=10.0,
                                     jump_width=jump_width, center=center)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# acceptance summary ----------------------------------------------------------------------

ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    """Store and print the one-line outcome of an acceptance criterion."""
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
