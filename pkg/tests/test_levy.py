"""Lévy measures: densities, interval integrals, tails and compensators."""
import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, special

from qhedge import levy
from qhedge.levy import CGMY, NIG, CustomMeasure, DomainError, UnsupportedMeasure

from conftest import CGMY_19, NIG_PARAMS

mp.mp.dps = 40


def _quad(f, lo, hi):
    val, _ = integrate.quad(f, lo, hi, epsabs=0.0, epsrel=1e-13, limit=500)
    return val


# densities -----------------------------------------------------------------

def test_cgmy_density_at_one_matches_high_precision(cgmy):
    expected = float(mp.mpf("0.01") * mp.e ** mp.mpf("-1.1"))
    assert cgmy.density(1.0) == pytest.approx(expected, rel=1e-14)
    assert expected == pytest.approx(3.3287e-3, rel=1e-4)


def test_cgmy_density_closed_form_both_sides(cgmy):
    C, G, M, Y = (CGMY_19[k] for k in "CGMY")
    for y in (0.01, 0.3, 2.5):
        assert cgmy.density(y) == pytest.approx(C * math.exp(-M * y) * y ** (-1 - Y), rel=1e-13)
        assert cgmy.density(-y) == pytest.approx(C * math.exp(-G * y) * y ** (-1 - Y), rel=1e-13)


def test_density_at_zero_raises(cgmy, nig):
    for m in (cgmy, nig):
        with pytest.raises(DomainError):
            m.density(0.0)
        with pytest.raises(DomainError):
            levy.density(m, np.array([0.1, 0.0]))


def test_nig_small_jump_limit(nig):
    y = 1e-7
    assert y * y * nig.density(y) == pytest.approx(NIG_PARAMS["delta"] / math.pi, rel=1e-5)
    assert NIG_PARAMS["delta"] / math.pi == pytest.approx(0.032688, rel=1e-4)


def test_nig_density_matches_bessel_formula(nig):
    a, b, d = NIG_PARAMS["alpha"], NIG_PARAMS["beta"], NIG_PARAMS["delta"]
    for y in (-3.0, -0.2, 0.004, 0.7, 5.0):
        ref = d * a / math.pi * math.exp(b * y) * special.k1(a * abs(y)) / abs(y)
        assert nig.density(y) == pytest.approx(ref, rel=1e-12)


@given(st.floats(1e-6, 500.0))
def test_bessel_k1_accuracy(x):
    ref = special.k1(x)
    if ref == 0.0:
        assert levy.bessel_k1(x) == pytest.approx(0.0, abs=1e-300)
    else:
        assert levy.bessel_k1(x) == pytest.approx(ref, rel=1e-12)


@settings(max_examples=1000, deadline=None)
@given(y=st.floats(1e-6, 30.0), C=st.floats(0.001, 1.0), G=st.floats(0.2, 10.0),
       Y=st.floats(0.1, 1.99))
def test_cgmy_positive_and_symmetric(y, C, G, Y):
    m = CGMY(C, G, G, Y)
    dp, dn = m.density(y), m.density(-y)
    assert dp >= 0.0 and dp == dn
    if y < 5:
        assert dp > 0.0


@given(y=st.floats(1e-8, 1e-3))
def test_small_jump_variance_density_bounded(y):
    for m in (CGMY(**CGMY_19), NIG(**NIG_PARAMS)):
        assert math.isfinite(y * y * m.density(y))
    nig = NIG(**NIG_PARAMS)
    assert y * y * nig.density(y) <= 1.01 * NIG_PARAMS["delta"] / math.pi


def test_invalid_parameters_rejected():
    with pytest.raises(DomainError):
        CGMY(0.01, 1.1, 1.1, 2.0)
    with pytest.raises(DomainError):
        CGMY(-1.0, 1.1, 1.1, 1.5)
    with pytest.raises(DomainError):
        NIG(1.0, 1.0, 0.1)


# interval integrals -----------------------------------------------------------

def test_interval_integral_matches_adaptive_quadrature(cgmy):
    ref = _quad(lambda y: cgmy.density(y), 0.5, 1.0)
    assert cgmy.interval_integral(0.5, 1.0, 0) == pytest.approx(ref, rel=1e-10)


@pytest.mark.parametrize("power", [0, 1, 2])
@pytest.mark.parametrize("lo,hi", [(-2.0, -0.3), (0.01, 0.05), (1.0, 7.0)])
def test_interval_integral_against_quadrature_nig(nig, power, lo, hi):
    ref = _quad(lambda y: y**power * nig.density(y), lo, hi)
    assert nig.interval_integral(lo, hi, power) == pytest.approx(ref, rel=1e-10)


def test_unsigned_power_one(cgmy):
    ref = _quad(lambda y: abs(y) * cgmy.density(y), -1.0, -0.2)
    assert cgmy.interval_integral(-1.0, -0.2, 1, signed=False) == pytest.approx(ref, rel=1e-10)
    assert cgmy.interval_integral(-1.0, -0.2, 1) == pytest.approx(-ref, rel=1e-10)


def test_symmetric_first_moment_cancels(cgmy):
    total = cgmy.interval_integral(-0.8, -0.1, 1) + cgmy.interval_integral(0.1, 0.8, 1)
    assert abs(total) < 1e-15


def test_nig_variance_near_zero(nig):
    eps = 1e-3
    val = nig.interval_integral(-eps, eps, 2)
    assert val == pytest.approx(2 * eps * NIG_PARAMS["delta"] / math.pi, rel=0.01)
    assert 2 * eps * NIG_PARAMS["delta"] / math.pi == pytest.approx(6.538e-5, rel=1e-3)


def test_power_two_across_origin_matches_closed_form(cgmy):
    C, G, M, Y = (CGMY_19[k] for k in "CGMY")
    b = 0.3
    side = C * M ** (Y - 2) * special.gamma(2 - Y) * special.gammainc(2 - Y, M * b)
    assert cgmy.interval_integral(-b, b, 2) == pytest.approx(2 * side, rel=1e-12)


def test_interval_errors(cgmy):
    with pytest.raises(DomainError):
        cgmy.interval_integral(-0.1, 0.1, 1)
    with pytest.raises(DomainError):
        cgmy.interval_integral(0.2, 0.1, 0)
    with pytest.raises(DomainError):
        cgmy.interval_integral(0.1, 0.2, 3)


@settings(max_examples=60, deadline=None)
@given(lo=st.floats(0.01, 1.0), width=st.floats(0.05, 3.0), cut=st.floats(0.1, 0.9),
       power=st.sampled_from([0, 1, 2]), neg=st.booleans(), which=st.sampled_from(["cgmy", "nig"]))
def test_interval_integral_additive(lo, width, cut, power, neg, which):
    m = CGMY(**CGMY_19) if which == "cgmy" else NIG(**NIG_PARAMS)
    hi = lo + width
    mid = lo + cut * width
    if neg:
        lo, mid, hi = -hi, -mid, -lo
        mid_parts = (m.interval_integral(lo, mid, power), m.interval_integral(mid, hi, power))
    else:
        mid_parts = (m.interval_integral(lo, mid, power), m.interval_integral(mid, hi, power))
    whole = m.interval_integral(lo, hi, power)
    assert sum(mid_parts) == pytest.approx(whole, rel=1e-10, abs=1e-300)


@pytest.mark.parametrize("Y", [1.2, 1.5, 1.9])
def test_small_jump_variance_scaling(Y):
    m = CGMY(0.01, 1.1, 1.1, Y)
    for eps in (1e-3, 5e-4):
        ratio = m.interval_integral(-eps, eps, 2) / m.interval_integral(-eps / 2, eps / 2, 2)
        assert ratio == pytest.approx(2 ** (2 - Y), rel=0.05)


def test_custom_measure_quadrature():
    cg = CGMY(**CGMY_19)
    cm = CustomMeasure(density_fn=cg.density, index=1.9)
    assert not cm.compiled
    for lo, hi, p in ((0.3, 1.2, 0), (-2.0, -0.5, 1), (-0.1, 0.2, 2)):
        assert cm.interval_integral(lo, hi, p) == pytest.approx(cg.interval_integral(lo, hi, p),
                                                                rel=1e-9)
    with pytest.raises(UnsupportedMeasure):
        cm.compensator_drift()


# tails ------------------------------------------------------------------------

def _tau(y):
    return math.exp(0.1 * 7) * np.maximum(np.abs(y), np.abs(np.expm1(y)))


def test_tail_vanishes_far_out(cgmy):
    val = cgmy.tail_error_integral(50.0, lambda y: np.abs(y))
    assert 0.0 <= val < 1e-12


def test_tail_matches_quadrature_when_integrable():
    m = CGMY(0.01, 1.1, 3.5, 1.2)
    val = m.tail_error_integral(2.0, _tau)

    def f(y):
        t = _tau(y)
        return (1 + abs(y) + t + t * t) * m.density(y)

    # both sides have decayed below 1e-25 relative by |y| = 60
    ref = sum(_quad(f, lo, hi) for lo, hi in ((2.0, 10.0), (10.0, 60.0), (-60.0, -10.0),
                                               (-10.0, -2.0)))
    assert val == pytest.approx(ref, rel=1e-8)


def test_tail_divergent_reports_infinity():
    # tau^2 grows like exp(2y) while the density decays like exp(-1.1 y)
    m = CGMY(0.01, 1.1, 1.1, 1.2)
    assert m.tail_error_integral(2.0, _tau) == math.inf
    f = lambda y: _tau(y) ** 2 * m.density(y)  # noqa: E731
    partial = [_quad(f, 2.0, R) for R in (20.0, 40.0, 80.0)]
    assert partial[0] < partial[1] < partial[2] and partial[2] > 1e10


def test_nig_tail_finite_positive(nig):
    val = nig.tail_error_integral(2.0, _tau)
    assert math.isfinite(val) and val > 0.0

    def f(y):
        t = _tau(y)
        return (1 + abs(y) + t + t * t) * nig.density(y)

    ref = _quad(f, 2.0, 60.0) + _quad(f, -60.0, -2.0)
    assert val == pytest.approx(ref, rel=1e-8)


# compensators -------------------------------------------------------------------

def test_cgmy_symmetric_compensator_zero(cgmy):
    assert cgmy.compensator_drift() == 0.0


def test_cgmy_compensator_closed_form():
    m = CGMY(0.01, 1.4, 2.3, 1.5)
    ref = float(mp.mpf("0.01") * mp.gamma(-0.5) * (mp.mpf("2.3") ** 0.5 - mp.mpf("1.4") ** 0.5))
    assert levy.compensator_drift(m) == pytest.approx(ref, rel=1e-13)


def test_nig_compensator_high_precision(nig):
    a, b, d = (mp.mpf(str(NIG_PARAMS[k])) for k in ("alpha", "beta", "delta"))
    ref = float(b * d / mp.sqrt(a * a - b * b))
    assert nig.compensator_drift() == pytest.approx(ref, rel=1e-14)
    assert ref == pytest.approx(9.8913e-4, rel=1e-4)


def test_nig_zero_skew_compensator():
    assert NIG(6.23, 0.0, 0.1027).compensator_drift() == 0.0


@pytest.mark.parametrize("u", [-0.9, -0.3, 0.5, 1.0])
def test_cumulant_against_quadrature(u):
    for m in (CGMY(0.01, 1.1, 1.4, 1.5), NIG(**NIG_PARAMS)):
        f = lambda y: (math.expm1(u * y) - u * y) * m.density(y)  # noqa: E731
        ref = sum(_quad(f, lo, hi) for lo, hi in ((-80, -1), (-1, 0), (0, 1), (1, 80)))
        assert float(m.cumulant(u)) == pytest.approx(ref, rel=1e-8)


def test_blumenthal_getoor_flags(cgmy, nig):
    assert not cgmy.outside_theory
    assert nig.outside_theory
    assert CGMY(0.01, 1.1, 1.1, 0.8).outside_theory


def test_trapezoid_refinement_exact_for_cubic():
    f = lambda y: y**3 - y  # noqa: E731
    assert levy.refine_trapezoid(f, 0.0, 2.0) == pytest.approx(2.0, rel=1e-10)
