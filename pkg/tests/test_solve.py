"""Backward recursions for a, b, c, the control, prices and hedge ratios."""
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qhedge import levy
from qhedge.disc import SpaceTimeGrid
from qhedge.solve import (CFLViolation, DegenerateNode, FixedKernels, SolveConfig, SolveResult,
                          call_payoff, hedge_ratio, optimal_pi, price, put_payoff, solve, solve_a,
                          solve_b, solve_c, zero_payoff)

from conftest import coarse_grid, electricity


# toy chains ------------------------------------------------------------------------------

def toy_chain(seed, N=3, I=2, NT=3, dz=0.3):
    """Random hand-set probabilities on ``2N - 1`` interior nodes."""
    g = SpaceTimeGrid(N=N, NT=NT, dz=dz, dt=1.0, I=I, kappa=0)
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.05, 1.0, (NT, 2 * N - 1, 2 * I + 1))
    p /= p.sum(axis=2, keepdims=True)
    return g, FixedKernels(p, g), p


def _brute_a(g, p, pi_bar, step=1e-6):
    """Exhaustive minimisation over a control grid, node by node and level by level."""
    I, N = g.I, g.N
    e = np.expm1(g.dz * np.arange(-I, I + 1))
    a = np.ones(2 * (N + I) + 1)
    grid = np.arange(-pi_bar, pi_bar + step / 2, step)
    for n in range(g.NT - 1, -1, -1):
        new = a.copy()
        for jj in range(2 * N - 1):
            pos = jj + 1 + I
            nb = a[pos - I:pos + I + 1]
            G = np.sum(p[n, jj] * nb * e * e)
            Q = np.sum(p[n, jj] * nb * e)
            A0 = np.sum(p[n, jj] * nb)
            new[pos] = np.min(A0 + 2 * grid * Q + grid * grid * G)
        a = new
    return a[I + 1:I + 2 * N]


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_solve_a_matches_brute_force(seed):
    g, src, p = toy_chain(seed)
    a, _ = solve_a(src, g, SolveConfig(scheme="explicit", pi_bar=2.0))
    ref = _brute_a(g, p, 2.0)
    assert np.max(np.abs(a[0, 1:-1] - ref)) <= 1e-6


def test_solve_b_matches_linear_recursion():
    g, src, p = toy_chain(7)
    f = call_payoff(1.0)
    cfg = SolveConfig(scheme="explicit", payoff=f)
    res = solve(src, g, cfg, what="ab")
    I, N = g.I, g.N
    e = np.expm1(g.dz * np.arange(-I, I + 1))
    b = -2.0 * f(g.padded_z)
    for n in range(g.NT - 1, -1, -1):
        new = b.copy()
        for jj in range(2 * N - 1):
            pos = jj + 1 + I
            nb = b[pos - I:pos + I + 1]
            new[pos] = np.sum(p[n, jj] * nb * (1.0 + res.pi_star[n, jj + 1] * e))
        b = new
    assert np.max(np.abs(res.b[0, 1:-1] - b[I + 1:I + 2 * N])) <= 1e-12


def _enumerate_value(g, p, res, f, x0, j0):
    """Exact E[(f(Z_T) - X_T)^2] for the stopped chain by path enumeration."""
    I, N = g.I, g.N
    e_off = np.arange(-I, I + 1)
    total = 0.0
    for path in itertools.product(range(2 * I + 1), repeat=g.NT):
        prob, j, x = 1.0, j0, x0
        for n, c in enumerate(path):
            if abs(j) >= N:
                break
            prob *= p[n, j + N - 1, c]
            k = j + N
            amount = res.pi_star[n, k] * x + res.phi_b[n, k]
            step = e_off[c]
            x += amount * math.expm1(step * g.dz)
            j += step
        total += prob * (f(g.center + j * g.dz) - x) ** 2
    return total


@pytest.mark.parametrize("seed", [4, 5])
def test_quadratic_value_equals_enumerated_expectation(seed):
    g, src, p = toy_chain(seed, N=3, I=1, NT=3)
    f = put_payoff(1.1)
    res = solve(src, g, SolveConfig(scheme="explicit", payoff=f), what="abc")
    for x0 in (0.0, 0.7, res.at("x_star")):
        val = res.at("a") * x0 * x0 + res.at("b") * x0 + res.at("c")
        assert val == pytest.approx(_enumerate_value(g, p, res, f, x0, 0), rel=1e-11, abs=1e-13)


def test_degenerate_node_detected():
    g = SpaceTimeGrid(N=3, NT=2, dz=0.3, dt=1.0, I=1, kappa=0)
    p = np.zeros((5, 3))
    p[:, 1] = 1.0  # the chain never moves, so G vanishes
    with pytest.raises(DegenerateNode):
        solve(FixedKernels(p, g), g, SolveConfig(scheme="explicit"), what="a")


# control -----------------------------------------------------------------------------

def test_optimal_pi_examples():
    assert optimal_pi(0.0, 1.0, 1.0) == 0.0
    assert optimal_pi(3.0, 2.0, 1.0) == -1.0
    with pytest.raises(DegenerateNode):
        optimal_pi(1.0, 0.0, 1.0)


@settings(max_examples=200)
@given(Q=st.floats(-1e3, 1e3), G=st.floats(1e-3, 1e3), pi_bar=st.floats(0.01, 100),
       seed=st.integers(0, 2**31))
def test_optimal_pi_beats_random_search(Q, G, pi_bar, seed):
    pi = optimal_pi(Q, G, pi_bar)
    obj = lambda x: x * x * G + 2 * x * Q  # noqa: E731
    cand = np.random.default_rng(seed).uniform(-pi_bar, pi_bar, 1000)
    best = obj(pi)
    tol = 1e-12 * (abs(Q) + G) * (1 + pi_bar) ** 2
    assert best <= obj(-pi_bar) + tol and best <= obj(pi_bar) + tol
    assert best <= np.min(obj(cand)) + tol


# electricity runs ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def elec_runs():
    m = electricity(levy.CGMY(0.01, 1.1, 1.1, 1.9))
    g = coarse_grid(m, N=100, NT=200)
    K = math.exp(g.center)
    out = {}
    for scheme in ("explicit", "imex"):
        cfg = SolveConfig(scheme=scheme, payoff=call_payoff(K))
        out[scheme] = solve(m, g, cfg, what="abc")
    return m, g, out


def test_terminal_conditions(elec_runs):
    _, g, out = elec_runs
    r = out["imex"]
    f = call_payoff(math.exp(g.center))(g.z)
    assert np.all(r.a[-1] == 1.0)
    assert np.allclose(r.b[-1], -2 * f) and np.allclose(r.c[-1], f * f)


@pytest.mark.parametrize("scheme", ["explicit", "imex"])
def test_stability_bounds(elec_runs, scheme):
    _, g, out = elec_runs
    r = out[scheme]
    assert r.a.min() >= 0.0 and r.a.max() <= 1.0
    bound = np.max(np.abs(r.b[-1]))
    assert np.max(np.abs(r.b), axis=1).max() <= bound * (1 + 1e-12)
    # each level improves on doing nothing, so a never grows backwards in time
    assert np.all(r.a[:-1].max(axis=1) <= r.a[1:].max(axis=1) + 1e-15)
    assert r.diagnostics["clamped_nodes"] == 0


def test_imex_explicit_agree(elec_runs):
    m, g, out = elec_runs
    # time error estimate from a run with half the steps
    g2 = g.with_steps(NT=g.NT // 2)
    coarse = solve(m, g2, SolveConfig(scheme="imex", payoff=call_payoff(math.exp(g.center))),
                   what="ab")
    est_a = abs(coarse.at("a") - out["imex"].at("a"))
    est_b = abs(coarse.at("b") - out["imex"].at("b"))
    assert abs(out["imex"].at("a") - out["explicit"].at("a")) <= 5 * est_a
    assert abs(out["imex"].at("b") - out["explicit"].at("b")) <= 5 * est_b


def test_explicit_cfl_violation(elec):
    g = coarse_grid(elec, N=400, NT=50)
    with pytest.raises(CFLViolation, match="binding node"):
        solve(elec, g, SolveConfig(scheme="explicit"), what="a")


def test_price_and_hedge_ratio(elec_runs):
    _, g, out = elec_runs
    r = out["explicit"]
    assert np.allclose(r.x_star, price(r.a, r.b))
    assert r.at("x_star") == pytest.approx(-r.at("b") / (2 * r.at("a")), rel=1e-15)
    n, j = 10, 5
    th = [hedge_ratio(r, n, j, x) for x in (0.0, 1.0, 2.0)]
    slope = math.exp(-g.z[j + g.N]) * r.pi_star[n, j + g.N]
    assert th[1] - th[0] == pytest.approx(slope, rel=1e-12)
    assert th[2] - th[1] == pytest.approx(slope, rel=1e-12)
    with pytest.raises(IndexError):
        hedge_ratio(r, n, g.N, 1.0)
    with pytest.raises(DegenerateNode):
        price(np.zeros(2), np.ones(2))


def test_zero_payoff_hedge(elec):
    g = coarse_grid(elec, N=100, NT=100)
    r = solve(elec, g, SolveConfig(payoff=zero_payoff), what="ab")
    assert np.all(r.b == 0.0)
    assert hedge_ratio(r, 3, 2, 0.0) == 0.0
    k = 2 + g.N
    assert hedge_ratio(r, 3, 2, 1.0) == pytest.approx(math.exp(-g.z[k]) * r.pi_star[3, k])


def test_split_solvers_match_joint(elec_runs):
    m, g, out = elec_runs
    cfg = SolveConfig(scheme="imex", payoff=call_payoff(math.exp(g.center)))
    a, pi = solve_a(m, g, cfg)
    b = solve_b(m, g, cfg, pi)
    c = solve_c(m, g, cfg, a, b, pi)
    r = out["imex"]
    assert np.array_equal(a, r.a) and np.allclose(b, r.b, rtol=1e-13, atol=1e-12)
    assert np.allclose(c, r.c, rtol=1e-12)
    with pytest.raises(ValueError):
        solve_b(m, g, cfg, None)


def test_price_linear_in_payoff(elec_runs):
    m, g, _ = elec_runs
    K = math.exp(g.center)
    f1, f2 = call_payoff(K), put_payoff(0.8 * K)
    comb = lambda z: 2.5 * f1(z) - 0.75 * f2(z)  # noqa: E731
    xs = [solve(m, g, SolveConfig(payoff=f), what="ab").x_star for f in (f1, f2, comb)]
    assert np.max(np.abs(xs[2] - (2.5 * xs[0] - 0.75 * xs[1]))) <= 1e-10 * np.max(np.abs(xs[2]))


def test_mollified_payoff_close(elec_runs):
    m, g, out = elec_runs
    K = math.exp(g.center)
    r = solve(m, g, SolveConfig(scheme="imex", payoff=call_payoff(K), payoff_smoothing=2 * g.dz),
              what="ab")
    assert r.at("x_star") == pytest.approx(out["imex"].at("x_star"), rel=2e-2)


def test_save_load_and_csv(tmp_path, elec_runs):
    _, g, out = elec_runs
    r = out["imex"]
    r.save(tmp_path / "r.npz")
    back = SolveResult.load(tmp_path / "r.npz")
    assert back.grid == g
    for name in ("a", "b", "c", "pi_star", "phi_b"):
        assert np.array_equal(getattr(back, name), getattr(r, name))
    r.export_csv(tmp_path / "r.csv", levels=[0])
    lines = open(tmp_path / "r.csv").read().splitlines()
    assert lines[0] == "level,node,z,a,b,c,pi_star,x_star" and len(lines) == 2 * g.N + 2
    row = lines[1 + g.N].split(",")
    assert int(row[1]) == 0 and float(row[3]) == r.at("a")
