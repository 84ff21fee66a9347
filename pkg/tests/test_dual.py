import json

import numpy as np
import pytest

from jumplp.dual import (DualParams, HJBParams, HJBSolver, KrylovDualBound, StateGrid,
                         ValueFunction, _Scheme, check_points, check_subsolution, dual_value,
                         kernel, lattice_weights, mollify, solve_hjb, solve_perturbed_hjb)
from jumplp.exceptions import ConfigurationError, ValidationError
from jumplp.generator import TestFunction
from jumplp.harness import lq_oracle
from jumplp.model import build_problem, levy_moment

# analytic values at x0 = 1 from an independent 40-digit Riccati evaluation
V_LQ = 0.451492782986673602
V_LQ_JUMP = 0.581277711384177546


def constant_cost(name="lq_jump", h0=2.0):
    return build_problem({"problem": {"name": name}, "cost": {"q": 0.0, "r": 0.0, "h0": h0}})


def test_state_grid():
    g = StateGrid(-1.0, 1.0, 5)
    assert g.dx == 0.5 and g.nodes.tolist() == [-1.0, -0.5, 0.0, 0.5, 1.0]
    for bad in ((-1.0, 1.0, 4), (-1.0, 1.0, 1), (1.0, -1.0, 5)):
        with pytest.raises(ValidationError):
            StateGrid(*bad)


def test_value_function_extension():
    g = StateGrid(0.0, 2.0, 5)
    vf = ValueFunction(g, g.nodes**2, "linear")
    assert vf(1.25) == pytest.approx(0.5 * (1.0 + 2.25))
    assert vf(3.0) == pytest.approx(4.0 + (4.0 - 2.25) / 0.5)
    quad = ValueFunction(g, g.nodes**2, "quadratic")
    assert quad(3.0) == pytest.approx(4.0 + 3.5 + 0.5 * 2.0)
    assert quad(-1.0) == pytest.approx(0.0 - 0.5 + 1.0)
    with pytest.raises(ValidationError):
        ValueFunction(g, np.array([0.0, np.nan, 0, 0, 0]))


def test_constant_cost_hjb():
    p = constant_cost()
    vf = solve_hjb(p, StateGrid.for_problem(p, 101))
    assert np.allclose(vf.values, 2.0 / p.discount, rtol=0, atol=1e-12)
    veps = solve_perturbed_hjb(p, 0.2, StateGrid.for_problem(p, 101))
    assert np.allclose(veps.values, 2.0 / p.discount, rtol=0, atol=1e-12)


@pytest.mark.parametrize("name, oracle", [("lq", V_LQ), ("lq_jump", V_LQ_JUMP)])
def test_hjb_matches_riccati(name, oracle, problems, quads, hjb401):
    assert lq_oracle(problems[name]) == pytest.approx(oracle, rel=1e-12)
    errors = []
    for n in (101, 201):
        vf = solve_hjb(problems[name], StateGrid.for_problem(problems[name], n), quad=quads[name])
        errors.append(abs(vf(1.0) - oracle) / oracle)
    errors.append(abs(hjb401[name](1.0) - oracle) / oracle)
    assert errors[-1] <= 1e-2
    assert errors[0] >= errors[1] >= errors[2]


def test_hjb_residual_and_policy(hjb401, lq_jump):
    vf = hjb401["lq_jump"]
    assert vf.info["residual"] <= 1e-9
    assert vf.info["iterations"] < 50
    # greedy control pushes the state toward zero
    assert vf.policy(2.0) < 0 < vf.policy(-2.0)
    assert vf.policy(0.0) == 0.0


def test_perturbed_eps_zero_is_identical(problems, quads):
    p = problems["lq_jump"]
    grid = StateGrid.for_problem(p, 201)
    a = solve_hjb(p, grid, quad=quads["lq_jump"])
    b = solve_perturbed_hjb(p, 0.0, grid, quad=quads["lq_jump"])
    assert np.array_equal(a.values, b.values)
    with pytest.raises(ConfigurationError):
        solve_perturbed_hjb(p, 1.0, grid)


def test_perturbed_below_unperturbed_and_trend(problems, quads):
    p = problems["lq_jump"]
    grid = StateGrid.for_problem(p, 201)
    v = solve_hjb(p, grid, quad=quads["lq_jump"])
    gaps = []
    for eps in (0.2, 0.1, 0.05):
        veps = solve_perturbed_hjb(p, eps, grid, quad=quads["lq_jump"])
        assert np.all(veps.values <= v.values + 1e-9)
        gaps.append(abs(veps(1.0) - v(1.0)))
    assert gaps[0] >= gaps[1] >= gaps[2]


def test_scheme_monotonicity(problems, quads):
    p = problems["lq_jump"]
    grid = StateGrid.for_problem(p, 41)
    scheme = _Scheme(p, grid, quads["lq_jump"], [0.0], "linear")
    rng = np.random.default_rng(0)
    values = rng.normal(size=grid.n)
    terms = scheme.end_terms(values)
    base = scheme.residual_table(values, terms)
    for j in rng.choice(grid.n, 10, replace=False):
        bumped = values.copy()
        bumped[j] += 0.37
        diff = scheme.residual_table(bumped, terms) - base
        others = np.delete(diff, j, axis=0)
        assert np.all(others <= 1e-12)


def test_policy_evaluation_preserves_order(problems, quads):
    p = problems["lq_jump_asym"]
    grid = StateGrid.for_problem(p, 41)
    scheme = _Scheme(p, grid, quads["lq_jump_asym"], [-0.1, 0.0, 0.1], "linear")
    rng = np.random.default_rng(1)
    for _ in range(5):
        policy = rng.integers(0, scheme.cost.shape[1], grid.n)
        mat, _ = scheme.policy_matrix(policy, np.zeros(4))
        inv = np.linalg.inv(mat)
        assert inv.min() >= -1e-12
        f = rng.normal(size=grid.n)
        g = f + rng.uniform(0, 1, grid.n)
        assert np.all(inv @ f <= inv @ g + 1e-12)


def test_kernel_unit_mass():
    x = np.linspace(-0.3, 0.3, 20001)
    for kappa in (0.05, 0.2):
        assert np.trapezoid(kernel(x, kappa), x) == pytest.approx(1.0, abs=1e-9)
        assert np.trapezoid(kernel(x, kappa, 1), x) == pytest.approx(0.0, abs=1e-9)
        assert np.all(kernel(np.array([kappa, -kappa, 2 * kappa]), kappa) == 0.0)


@pytest.mark.parametrize("kappa, h", [(0.05, 0.0125), (0.2, 0.05), (0.1, 0.03)])
def test_lattice_weights(kappa, h):
    offsets, weights, d1, d2 = lattice_weights(kappa, h)
    rng = np.random.default_rng(0)
    assert sum(weights) == 1.0 and np.sum(weights) == 1.0
    assert all(sum(rng.permutation(weights)) == 1.0 for _ in range(20))
    assert np.all(weights > 0) and np.all(np.abs(offsets) < kappa + h)
    assert np.allclose(weights, weights[::-1], rtol=0, atol=1e-15)
    with pytest.raises(ConfigurationError):
        lattice_weights(kappa, kappa)


def test_mollify_reproduces_affine():
    g = StateGrid(-3.0, 3.0, 121)
    const = mollify(ValueFunction(g, np.full(g.n, 1.7)), 0.1)
    x = np.linspace(-2.5, 2.5, 41)
    assert np.max(np.abs(const.representation(x) - 1.7)) <= 1e-12
    lin = mollify(ValueFunction(g, 0.4 * g.nodes - 0.3), 0.1)
    assert np.max(np.abs(lin.representation(x) - (0.4 * x - 0.3))) <= 1e-12
    assert np.max(np.abs(lin.representation.deriv(x, 1) - 0.4)) <= 1e-8
    assert np.max(np.abs(lin.representation.deriv(x, 2))) <= 1e-8
    with pytest.raises(ConfigurationError):
        mollify(ValueFunction(g, g.nodes), 0.1, h_step=0.1)


def test_mollified_derivatives_of_smooth_function():
    g = StateGrid(-3.0, 3.0, 1201)
    rep = mollify(ValueFunction(g, np.sin(g.nodes)), 0.05).representation
    x = np.linspace(-2.0, 2.0, 17)
    assert rep.deriv(x, 1) == pytest.approx(np.cos(x), abs=1e-3)
    assert rep.deriv(x, 2) == pytest.approx(-np.sin(x), abs=1e-2)
    with pytest.raises(ValueError):
        rep.deriv(x, 3)


def test_check_points_include_x0(lq_jump):
    grid = StateGrid.for_problem(lq_jump, 21)
    pts = check_points(lq_jump, grid)
    assert 1.0 in pts and grid.x_min not in pts and pts.size == 20


def test_deep_constant_subsolution(problems, quads):
    for name in ("lq_jump", "lq_jump_asym", "degenerate"):
        p = problems[name]
        grid = StateGrid.for_problem(p, 101)
        h_min = p.running_cost(grid.nodes[:, None], p.controls.values[None, :]).min()
        f = TestFunction([h_min / p.discount - 1.0])
        margin = check_subsolution(f, p, grid, quads[name])
        assert margin <= -p.discount


def test_constant_shift_law(lq_jump, quads, hjb401):
    grid = StateGrid.for_problem(lq_jump, 401)
    rep = mollify(hjb401["lq_jump"], 0.05).representation
    m0 = check_subsolution(rep, lq_jump, grid, quads["lq_jump"])
    m1 = check_subsolution(rep.shifted(0.25), lq_jump, grid, quads["lq_jump"])
    assert m1 - m0 == pytest.approx(0.25 * lq_jump.discount, abs=1e-12)
    f = TestFunction([0.1, 0.2, 0.3])
    g = f + TestFunction([0.25])
    d = check_subsolution(g, lq_jump, grid, quads["lq_jump"]) - check_subsolution(
        f, lq_jump, grid, quads["lq_jump"])
    assert d == pytest.approx(0.25 * lq_jump.discount, abs=1e-12)


def test_exact_value_polynomial_is_tight(problems, quads):
    from jumplp.harness import analytic_lq_jump

    p = problems["lq_jump_asym"]
    dyn, cost = p.dynamics, p.cost
    sol = analytic_lq_jump(dyn.a, dyn.beta, dyn.s, cost.q, cost.r, cost.discount,
                           levy_moment(p.levy, 1, "signed_tail"), levy_moment(p.levy, 2, "all"))
    f = TestFunction([sol.S, sol.R, sol.P])
    grid = StateGrid.for_problem(p, 401)
    margin = check_subsolution(f, p, grid, quads["lq_jump_asym"])
    assert abs(margin) <= 1e-6


def test_dual_value_constant_cost():
    p = constant_cost()
    rho, cert = dual_value(p, 0.1, 0.1, StateGrid.for_problem(p, 101))
    assert cert.feasible
    assert rho == pytest.approx(2.0 / p.discount - cert.shift, abs=1e-12)
    assert rho == pytest.approx(2.0 / p.discount, abs=1e-9)


def test_dual_value_degenerate(problems):
    p = problems["degenerate"]
    rho, cert = dual_value(p, 0.0, 0.05, StateGrid.for_problem(p, 401))
    oracle = min(p.running_cost(1.0, u) for u in p.controls.values) / p.discount
    assert cert.feasible
    assert rho <= oracle + 1e-9
    assert rho == pytest.approx(oracle, abs=5e-4)


@pytest.mark.slow
def test_dual_trend_lq_jump(lq_jump, quads, hjb401):
    grid = StateGrid.for_problem(lq_jump, 401)
    v_hat = hjb401["lq_jump"](1.0)
    values = []
    for eps in (0.2, 0.1, 0.05):
        rho, cert = dual_value(lq_jump, eps, eps, grid, quad=quads["lq_jump"])
        assert cert.feasible
        assert rho <= v_hat + cert.tolerance
        values.append(rho)
    assert values[0] <= values[1] <= values[2]


def test_certificate_exports(tmp_path, lq_jump, quads):
    grid = StateGrid.for_problem(lq_jump, 101)
    rho, cert = dual_value(lq_jump, 0.1, 0.1, grid, quad=quads["lq_jump"])
    cert.to_csv(tmp_path / "cert.csv", grid)
    data = np.loadtxt(tmp_path / "cert.csv", delimiter=",", skiprows=1)
    assert data.shape == (101, 2)
    meta = json.loads(cert.to_json())
    assert meta["eps"] == 0.1 and meta["kappa"] == 0.1 and meta["value_at_x0"] == rho
    assert {"margin", "shift", "tolerance", "feasible", "h_step"} <= set(meta)


def test_estimators(lq_jump):
    est = HJBSolver(n_state=101, eps=0.1)
    est.fit(lq_jump)
    assert est.predict([1.0]).shape == (1,)
    assert est.value_function_.info["eps"] == 0.1
    bound = KrylovDualBound(eps=0.1, kappa=0.1, n_state=101).fit(lq_jump)
    assert bound.predict([1.0])[0] == pytest.approx(bound.rho_star_)
    assert bound.get_params()["kappa"] == 0.1
