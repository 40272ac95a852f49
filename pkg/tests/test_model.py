"""Forward curve, electricity model, martingale compensation and synthetic model."""
import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from qhedge import levy
from qhedge.disc import StencilBuilder
from qhedge.model import ElectricityModel, ForwardCurve, RangeError, synthetic_model, weekly_curve

from conftest import coarse_grid, electricity

PRICES = [80, 90, 70, 90, 80, 70, 60]
T, D, C = 7.0, 7.0, 0.1


def _phi_oracle(A, c=C):
    """log of the curve average of price * exp(exp(-c s) A) by mpmath quadrature."""
    mp.mp.dps = 30
    tot = mp.mpf(0)
    for k, p in enumerate(PRICES):
        s0 = T + k
        tot += p * mp.quad(lambda s: mp.e ** (mp.e ** (-c * s) * A), [s0, s0 + 1])
    return float(mp.log(tot / D))


# forward curve ---------------------------------------------------------------------

def test_weekly_curve_average(curve):
    assert curve.average_price == pytest.approx(540 / 7, rel=1e-15)
    assert curve.delivery_start == T and curve.duration == D


def test_curve_rejects_gaps_and_bad_prices():
    with pytest.raises(ValueError):
        ForwardCurve(((0.0, 1.0, 50.0), (1.5, 2.0, 50.0)))
    with pytest.raises(ValueError):
        ForwardCurve(((0.0, 1.0, -1.0),))
    with pytest.raises(ValueError):
        ForwardCurve(())


def test_curve_csv_round_trip(tmp_path, curve):
    p = tmp_path / "curve.csv"
    p.write_text("s_start,s_end,price\n" + "".join(f"{s},{e},{v}\n" for s, e, v in curve.pieces))
    assert ForwardCurve.from_csv(p) == curve


@given(st.lists(st.floats(1.0, 500.0), min_size=1, max_size=12))
def test_curve_average_is_weighted_mean(prices):
    cur = ForwardCurve.from_daily(prices, start=3.0, step=0.5)
    assert cur.average_price == pytest.approx(float(np.mean(prices)), rel=1e-12)
    val, _ = integrate.quad(lambda s: float(cur(s)), cur.delivery_start, cur.delivery_end,
                            points=[p[0] for p in cur.pieces], limit=200)
    assert val / cur.duration == pytest.approx(cur.average_price, rel=1e-8)


# Phi ----------------------------------------------------------------------------------

def test_phi_at_zero(elec):
    assert float(elec.phi(0.0)) == pytest.approx(math.log(540 / 7), abs=1e-13)
    assert float(elec.phi(0.0)) == pytest.approx(4.3456, abs=1e-4)


@pytest.mark.parametrize("A", [-40.0, -3.0, 0.7, 12.0, 60.0])
def test_phi_matches_high_precision_quadrature(elec, A):
    assert float(elec.phi(A)) == pytest.approx(_phi_oracle(A), rel=1e-12)


def test_phi_derivatives_by_finite_differences(elec):
    A = np.linspace(-30, 30, 13)
    h = 1e-5
    fd1 = (elec.phi(A + h) - elec.phi(A - h)) / (2 * h)
    fd2 = (elec.phi_prime(A + h) - elec.phi_prime(A - h)) / (2 * h)
    assert np.allclose(elec.phi_prime(A), fd1, rtol=1e-8, atol=1e-12)
    assert np.allclose(elec.phi_second(A), fd2, rtol=1e-6, atol=1e-12)


def test_phi_derivative_bounds(elec, rng):
    A = rng.uniform(-200, 200, 2000)
    lo, hi = elec.phi_derivative_bounds()
    assert lo == pytest.approx(math.exp(-C * (T + D))) and hi == pytest.approx(math.exp(-C * T))
    d1 = elec.phi_prime(A)
    assert np.all(d1 >= lo * (1 - 1e-12)) and np.all(d1 <= hi * (1 + 1e-12))
    d2 = np.abs(elec.phi_second(A))
    assert np.all(d2 <= math.exp(-2 * C * T) - math.exp(-2 * C * (T + D)))


def test_phi_third_derivative_bounded(elec, rng):
    A = rng.uniform(-100, 100, 500)
    h = 1e-3
    d3 = (elec.phi_second(A + h) - elec.phi_second(A - h)) / (2 * h)
    # the third cumulant of l(s) under any weights is bounded by (max l - min l)^3
    cap = (math.exp(-C * T) - math.exp(-C * (T + D))) ** 3
    assert np.all(np.abs(d3) <= cap)


def test_phi_strictly_increasing(elec):
    A = np.linspace(-300, 300, 20001)
    assert np.all(np.diff(elec.phi(A)) > 0)


def test_phi_inverse_examples(elec):
    assert elec.phi_inverse(float(elec.phi(1.3))) == pytest.approx(1.3, abs=1e-9)
    assert elec.phi_inverse(float(elec.phi(0.0))) == pytest.approx(0.0, abs=1e-9)


def test_phi_inverse_round_trip_many(elec, rng):
    z = float(elec.phi(0.0)) + rng.uniform(-12, 12, 1000)
    A = elec.phi_inverse(z)
    assert np.max(np.abs(elec.phi(A) - z)) <= 1e-10
    A2 = rng.uniform(-150, 150, 1000)
    assert np.allclose(elec.phi_inverse(elec.phi(A2)), A2, rtol=1e-9, atol=1e-9)


def test_phi_inverse_rejects_non_finite(elec):
    with pytest.raises(RangeError):
        elec.phi_inverse(np.array([np.nan]))


# gamma ----------------------------------------------------------------------------------

@given(t=st.floats(0.0, 7.0), dz=st.floats(-8.0, 8.0), y=st.floats(-6.0, 6.0))
def test_gamma_bounds_and_round_trip(t, dz, y):
    m = electricity(levy.CGMY(0.01, 1.1, 1.1, 1.9))
    z = float(m.phi(0.0)) + dz
    g = float(m.gamma(t, z, y))
    lo_f, hi_f = m.phi_derivative_bounds()
    scale = math.exp(C * t)
    lo, hi = sorted((y * scale * lo_f, y * scale * hi_f))
    assert lo - 1e-12 <= g <= hi + 1e-12
    assert abs(g) <= abs(y) + 1e-12
    assert m.gamma(t, z, 0.0) == 0.0
    assert float(m.gamma_inverse(t, z, g)) == pytest.approx(y, abs=1e-9)


def test_gamma_strictly_increasing(elec):
    ys = np.linspace(-10, 10, 4001)
    for t in (0.0, 3.0, 7.0):
        for z in (3.0, 4.3, 6.0):
            assert np.all(np.diff(elec.gamma(t, z, ys)) > 0)


def test_gamma_excess_consistent(elec):
    ys = np.array([-2.0, -1e-4, 1e-6, 0.3, 1.5])
    t, z = 2.0, 4.5
    ref = elec.gamma(t, z, ys) - elec.gamma_y(t, z, 0.0) * ys
    assert np.allclose(elec.gamma_excess(t, z, ys), ref, rtol=1e-7, atol=1e-14)


def test_flat_curve_small_c_is_additive():
    cur = ForwardCurve.from_daily([50.0] * 7, start=7.0)
    m = ElectricityModel(cur, 1e-9, 0.0, levy.CGMY(0.01, 1.1, 1.1, 1.9))
    for y in (-1.0, 0.2, 2.0):
        assert float(m.gamma(1.0, math.log(50.0) + 0.3, y)) == pytest.approx(y, rel=1e-7)


def test_tau_dominates(elec):
    y = np.linspace(-5, 5, 101)
    assert np.all(elec.tau(y) >= np.abs(np.expm1(y)))


def test_mu_quadrature_matches_stencil_drift(elec):
    g = coarse_grid(elec, N=400, NT=100)
    st_ = StencilBuilder(elec, g).level(0.0)
    k = g.N - 1  # interior index of the centre node
    assert st_.mu[k] == pytest.approx(elec.mu(0.0, g.center), rel=1e-3)


# martingale compensation ---------------------------------------------------------------------

def test_martingale_drift_zero_at_origin(cgmy):
    m = electricity(cgmy, martingale=True)
    assert np.all(m.martingale_drift(0.0, m.s_nodes) == 0.0)


def test_martingale_drift_symmetric_reduces_to_gamma_term(cgmy):
    m = ElectricityModel(weekly_curve(), C, 0.0, cgmy, martingale=True)
    Cc, G, M, Y = 0.01, 1.1, 1.1, 1.9
    t, s = 4.0, 9.5

    def integrand(r):
        u = math.exp(-C * (s - r))
        return Cc * math.gamma(-Y) * ((M - u) ** Y - M**Y + (G + u) ** Y - G**Y)

    ref = -integrate.quad(integrand, 0.0, t, epsrel=1e-12)[0]
    assert float(m.martingale_drift(t, s)[0]) == pytest.approx(ref, rel=1e-10)


@pytest.mark.parametrize("which", ["cgmy", "nig"])
def test_martingale_chain_expectation_flat(which, cgmy, nig):
    meas, c = (cgmy, 0.1) if which == "cgmy" else (nig, 0.19)
    drifts = {}
    for mart in (False, True):
        m = electricity(meas, c=c, martingale=mart)
        g = coarse_grid(m, N=200, NT=100)
        b = StencilBuilder(m, g)
        k = np.abs(g.interior_z - g.center) < 1.0
        worst = 0.0
        for t in (0.0, 3.5, 6.9):
            gen = b.level(t).apply(np.exp(g.padded_z)) / np.exp(g.interior_z)
            worst = max(worst, float(np.abs(gen[k]).max()))
        drifts[mart] = worst
    # the compensated chain drift of F is a small multiple of the scheme error
    assert drifts[True] < 1e-2 * drifts[False]


def test_martingale_residual_comes_from_truncated_jumps(cgmy):
    m = electricity(cgmy, martingale=True)
    res = []
    for width in (2.0, 4.0):
        g = coarse_grid(m, N=200, NT=100, jump_width=width)
        gen = StencilBuilder(m, g).level(6.9).apply(np.exp(g.padded_z)) / np.exp(g.interior_z)
        res.append(float(np.abs(gen[np.abs(g.interior_z - g.center) < 1.0]).max()))
    assert res[1] < 0.5 * res[0]


# synthetic model -----------------------------------------------------------------------

def test_synthetic_identity(cgmy):
    m = synthetic_model(0.3, cgmy)
    y = np.linspace(-2, 2, 9)
    assert np.array_equal(m.gamma(0.0, 0.1, y), y)
    assert np.all(m.gamma_y(0.0, 0.1, y) == 1.0)
    assert np.array_equal(m.gamma_inverse(0.0, 0.1, y), y)
    assert m.mu(0.0, 0.0) == pytest.approx(0.3)
    assert np.allclose(m.tau(y), np.maximum(np.abs(y), np.abs(np.expm1(y))))


def test_synthetic_martingale_fixture(cgmy):
    f = lambda y: (math.expm1(y) - y) * float(cgmy.density(y))  # noqa: E731
    comp = sum(integrate.quad(f, lo, hi, epsrel=1e-12, limit=400)[0]
               for lo, hi in ((-80, -1), (-1, 0), (0, 1), (1, 80)))
    m = synthetic_model(-comp, cgmy)
    assert abs(m.mu_tilde(0.0, 0.0)) < 1e-10
    assert comp == pytest.approx(float(cgmy.cumulant(1.0)), rel=1e-9)
