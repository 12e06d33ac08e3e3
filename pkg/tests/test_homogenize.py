import numpy as np
import pytest
from scipy.integrate import quad
from scipy.optimize import brentq

from weakkam.errors import ConfigError
from weakkam.expr import parse
from weakkam import homogenize as hz


def make_problem(b=0.5):
    return hz.HomogProblem(H=parse(f"u + p^2 + {b}*cos(2*pi*y)"),
                           dHu=parse("1"), Lambda1=1.0, Lambda2=1.0)


def oracle_effective(p, b=0.5):
    """Quadrature + root-find: E with integral of sqrt(E - b cos) equal to |p|."""
    p_crit = quad(lambda y: np.sqrt(b - b * np.cos(2 * np.pi * y)), 0, 1)[0]
    if abs(p) <= p_crit:
        return b
    fn = lambda E: quad(lambda y: np.sqrt(E - b * np.cos(2 * np.pi * y)), 0, 1)[0] - abs(p)
    return brentq(fn, b, b + p * p + 2 * abs(p) + 1)


def test_validate_rejects_bad_windows():
    with pytest.raises(ConfigError):
        hz.validate_problem(hz.HomogProblem(parse("u+p^2"), parse("1"), -1.0, 1.0))
    with pytest.raises(ConfigError, match="dH/du"):
        hz.validate_problem(hz.HomogProblem(parse("2*u+p^2"), parse("2"), 1.0, 1.5))
    with pytest.raises(ConfigError, match="convexity"):
        hz.validate_problem(hz.HomogProblem(parse("u-p^2"), parse("1"), 1.0, 1.0))


def test_cell_problem_no_oscillation():
    hp = make_problem(b=0.0)
    for (x, p, c) in [(0.0, 0.0, 0.0), (0.3, 1.0, 0.5), (0.0, -2.0, -1.0)]:
        val = hz.cell_problem(hp, x, p, c)
        assert val == pytest.approx(c + p * p, abs=5e-3)


def test_cell_problem_flat_part():
    hp = make_problem()
    assert hz.cell_problem(hp, 0.0, 0.0, 0.0) == pytest.approx(0.5, abs=5e-3)
    assert hz.cell_problem(hp, 0.0, 0.0, 1.0) == pytest.approx(1.5, abs=5e-3)


def test_cell_problem_quadrature_oracle():
    hp = make_problem()
    for p in (1.0, 2.0):
        val = hz.cell_problem(hp, 0.0, p, 0.0)
        assert val == pytest.approx(oracle_effective(p), abs=2e-2)


def test_cell_problem_rejects_nonfinite():
    hp = make_problem()
    with pytest.raises(ValueError):
        hz.cell_problem(hp, np.inf, 0.0, 0.0)


@pytest.fixture(scope="module")
def small_table():
    hp = make_problem()
    return hp, hz.build_effective_table(
        hp, [0.0], np.linspace(-2, 2, 9), np.linspace(-1.2, 1.2, 5))


def test_table_invariants(small_table):
    hp, et = small_table
    # monotone in c at rate Lambda1
    dc = np.diff(et.c_nodes)
    steps = np.diff(et.values, axis=2)
    assert np.all(steps >= hp.Lambda1 * dc[None, None, :] - 5e-2)
    # convex along p
    mid = et.values[:, 1:-1, :]
    avg = (et.values[:, :-2, :] + et.values[:, 2:, :]) / 2
    assert np.all(mid <= avg + 5e-2)


def test_table_spot_oracle(small_table):
    hp, et = small_table
    rng = np.random.default_rng(15)
    for _ in range(3):
        j = rng.integers(0, et.p_nodes.size)
        kk = rng.integers(0, et.c_nodes.size)
        p, c = float(et.p_nodes[j]), float(et.c_nodes[kk])
        assert et.values[0, j, kk] == pytest.approx(c + oracle_effective(p), abs=2e-2)


def test_table_trilinear_evaluate(small_table):
    _, et = small_table
    # exact at nodes
    assert et.evaluate(0.0, float(et.p_nodes[3]), float(et.c_nodes[2])) == pytest.approx(
        et.values[0, 3, 2], abs=1e-12)
    # between c nodes: linear interpolation
    cmid = 0.5 * (et.c_nodes[1] + et.c_nodes[2])
    expect = 0.5 * (et.values[0, 2, 1] + et.values[0, 2, 2])
    assert et.evaluate(0.0, float(et.p_nodes[2]), float(cmid)) == pytest.approx(
        expect, abs=1e-12)


def _synthetic_table(fn, p_nodes, c_nodes, x_nodes=(0.0,)):
    xn = np.asarray(x_nodes)
    pn = np.asarray(p_nodes)
    cn = np.asarray(c_nodes)
    vals = np.empty((xn.size, pn.size, cn.size))
    for i, x in enumerate(xn):
        for j, p in enumerate(pn):
            for kk, c in enumerate(cn):
                vals[i, j, kk] = fn(x, p, c)
    return hz.EffectiveTable(xn, pn, cn, vals, 1.0, 1.0)


def test_solve_effective_trivial_quadratic():
    et = _synthetic_table(lambda x, p, c: c + p * p,
                          np.linspace(-2, 2, 17), np.linspace(-1, 1, 5))
    ubar = hz.solve_effective(et, n_slow=64)
    assert np.max(np.abs(ubar.values)) <= 2e-2


def test_solve_effective_flat_oscillatory():
    et = _synthetic_table(lambda x, p, c: c + oracle_effective(p),
                          np.linspace(-2, 2, 17), np.linspace(-1.2, 1.2, 5))
    ubar = hz.solve_effective(et, n_slow=64)
    assert np.allclose(ubar.values, -0.5, atol=2e-2)


def test_solve_effective_potential_bracket():
    et = _synthetic_table(lambda x, p, c: c + p * p + 0.3 * np.cos(2 * np.pi * x),
                          np.linspace(-2, 2, 17), np.linspace(-1, 1, 5),
                          x_nodes=np.linspace(0, 1, 16, endpoint=False))
    ubar = hz.solve_effective(et, n_slow=64, tol=1e-6)
    # comparison with constant sub/supersolutions: |ubar| <= max|V|/Lambda1
    assert np.all(np.abs(ubar.values) <= 0.3 + 5e-2)


def test_solve_multiscale_no_fast_scale():
    hp = make_problem(b=0.0)
    ue = hz.solve_multiscale(hp, eps=1 / 8, n_per_period=16)
    assert np.max(np.abs(ue.values)) <= 1e-3   # exact solution is 0


def test_solve_multiscale_bracket_and_ladder():
    hp = make_problem()
    u8 = hz.solve_multiscale(hp, eps=1 / 8, n_per_period=16)
    assert np.all(u8.values <= 0 + 1e-6)
    assert np.all(u8.values >= -1 - 1e-6)
    u32 = hz.solve_multiscale(hp, eps=1 / 32, n_per_period=16)
    err8 = np.max(np.abs(u8.values + 0.5))
    err32 = np.max(np.abs(u32.values + 0.5))
    assert err32 < err8   # monotone error decrease along the ladder


def test_solve_multiscale_x_dependent_branch_consistency():
    # the same function routed through both tabulation branches must agree
    hp_fast = make_problem()                      # no x in the formula
    hp_slow = hz.HomogProblem(H=parse("0*x + u + p^2 + 0.5*cos(2*pi*y)"),
                              dHu=parse("1"), Lambda1=1.0, Lambda2=1.0)
    assert hp_fast.x_independent() and not hp_slow.x_independent()
    u_fast = hz.solve_multiscale(hp_fast, eps=1 / 8, n_per_period=16)
    u_slow = hz.solve_multiscale(hp_slow, eps=1 / 8, n_per_period=16)
    assert np.array_equal(u_fast.values, u_slow.values)


def test_solve_multiscale_x_dependent_bracket():
    hp = hz.HomogProblem(
        H=parse("u + p^2 + 0.25*cos(2*pi*x) + 0.5*cos(2*pi*y)"),
        dHu=parse("1"), Lambda1=1.0, Lambda2=1.0)
    ue = hz.solve_multiscale(hp, eps=1 / 8, n_per_period=16)
    # comparison with constants: |u| <= max |H(x,y,0,0)| / Lambda1
    assert np.all(np.abs(ue.values) <= 0.75 + 1e-6)


def test_solve_multiscale_validates_eps():
    hp = make_problem()
    with pytest.raises(ValueError, match="reciprocal"):
        hz.solve_multiscale(hp, eps=0.3)


def test_rate_experiment_small_ladder(small_table):
    hp, et = small_table
    res = hz.rate_experiment(hp, eps_list=(1 / 4, 1 / 8, 1 / 16),
                             n_per_period=16, table=et, n_slow=64)
    eps_sorted = sorted(res.errors)
    errs = [res.errors[e] for e in eps_sorted]
    assert errs == sorted(errs)          # smaller eps, smaller error
    assert res.slope is not None and res.slope >= 0.4
    assert res.C_fit == pytest.approx(max(res.errors[e] / np.sqrt(e)
                                          for e in res.errors))


def test_rate_experiment_noise_floor():
    hp = make_problem(b=0.0)
    et = _synthetic_table(lambda x, p, c: c + p * p,
                          np.linspace(-2, 2, 17), np.linspace(-1, 1, 5))
    res = hz.rate_experiment(hp, eps_list=(1 / 4, 1 / 8), n_per_period=16,
                             table=et, n_slow=64)
    assert res.slope is None             # errors at the scheme-noise level
    assert all(err <= 1e-3 for err in res.errors.values())


def test_problem_from_config_roundtrip():
    hp = hz.problem_from_config({"H": "u + p^2 + 0.5*cos(2*pi*y)", "dHu": "1",
                                 "Lambda1": 1.0, "Lambda2": 1.0})
    assert hp.x_independent()
    with pytest.raises(ConfigError):
        hz.problem_from_config({"H": "u + p^2"})
