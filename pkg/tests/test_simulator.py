import math

import numpy as np
import pytest
from scipy import stats

from jumplp.exceptions import DivergenceError, ValidationError
from jumplp.generator import TestFunction
from jumplp.model import build_problem, levy_integral
from jumplp.simulator import (FeedbackPolicy, JumpSampler, OccupationMeasureEstimator,
                              check_adjoint_identity, discount_weights, estimate_occupation,
                              evaluate_cost, moment_check, simulate_path)


def degenerate(x0=1.0, **dynamics):
    cfg = {"problem": {"name": "degenerate", "x0": x0}}
    if dynamics:
        cfg["dynamics"] = dynamics
    return build_problem(cfg)


def test_constant_path_without_dynamics():
    p = degenerate(1.5)
    path = simulate_path(p, FeedbackPolicy.constant(p), 1.0, 0.01, seed=3)
    assert path.states.size == path.times.size == 101
    assert np.all(path.states == 1.5)
    assert path.jump_log == []


def test_constant_drift_is_exact():
    p = degenerate(0.0, b0=1.0)
    path = simulate_path(p, FeedbackPolicy.constant(p), 1.0, 0.125)
    assert path.states[-1] == 1.0
    path = simulate_path(p, FeedbackPolicy.constant(p), 1.0, 1e-3)
    assert path.states[-1] == pytest.approx(1.0, abs=1e-12)


def test_path_starts_at_x0_and_is_reproducible(lq_jump):
    pol = FeedbackPolicy.constant(lq_jump)
    a = simulate_path(lq_jump, pol, 2.0, 0.01, seed=11)
    b = simulate_path(lq_jump, pol, 2.0, 0.01, seed=11)
    c = simulate_path(lq_jump, pol, 2.0, 0.01, seed=12)
    assert a.states[0] == lq_jump.initial_state
    assert np.array_equal(a.states, b.states) and a.jump_log == b.jump_log
    assert not np.array_equal(a.states, c.states)
    assert len(a.jump_log) > 0


def test_path_csv(tmp_path, lq_jump):
    path = simulate_path(lq_jump, FeedbackPolicy.constant(lq_jump), 0.5, 0.01, seed=1)
    out = tmp_path / "path.csv"
    path.to_csv(out)
    data = np.loadtxt(out, delimiter=",", skiprows=1)
    assert data.shape == (51, 4)
    assert np.sum(data[:, 3]) == pytest.approx(sum(s for _, s in path.jump_log))


def test_jump_counts_are_poisson(lq_jump, quads):
    quad = quads["lq_jump"]
    occ = estimate_occupation(lq_jump, FeedbackPolicy.constant(lq_jump), 10_000, 1.0, 0.01,
                              seed=2024, max_power=0, quad=quad)
    nu = lq_jump.levy
    rate = levy_integral(nu, 0, quad.small_cutoff, np.inf, signed=False) * 1.0
    counts = occ.jump_counts
    lo, hi = int(stats.poisson.ppf(0.005, rate)), int(stats.poisson.ppf(0.995, rate))
    edges = np.arange(lo, hi + 1)
    observed = np.array([np.sum(counts < lo)] + [np.sum(counts == k) for k in edges[:-1]]
                        + [np.sum(counts >= hi)])
    probs = np.concatenate([[stats.poisson.cdf(lo - 1, rate)],
                            stats.poisson.pmf(edges[:-1], rate),
                            [stats.poisson.sf(hi - 1, rate)]])
    assert observed.sum() == counts.size
    _, pvalue = stats.chisquare(observed, probs * counts.size)
    assert pvalue > 0.01


def test_sampler_matches_measure(lq_jump, quads):
    quad = quads["lq_jump"]
    sampler = JumpSampler.build(lq_jump.levy, quad.small_cutoff, quad.z_max)
    assert sampler.rate == pytest.approx(quad.rate, rel=1e-8)
    assert sampler.compensator == pytest.approx(quad.compensator, abs=1e-8)
    z = sampler.sample(np.random.default_rng(0), 200_000)
    assert np.all((np.abs(z) >= quad.small_cutoff) & (np.abs(z) <= quad.z_max))
    expected_tail = levy_integral(lq_jump.levy, 0, 1.0, np.inf, signed=False) / sampler.rate
    assert np.mean(np.abs(z) >= 1.0) == pytest.approx(expected_tail, abs=4e-3)


def test_degenerate_occupation_sits_at_x0():
    p = degenerate(2.0)
    pol = FeedbackPolicy.constant(p)
    occ = estimate_occupation(p, pol, 3, 2.0, 0.01, record_atoms=True)
    assert np.all(occ.atoms[:, 0] == 2.0)
    assert np.all(occ.controls[occ.atoms[:, 1].astype(int)] == pol(2.0))
    assert occ.total_mass == math.fsum(discount_weights(1.0, 200, 0.01))
    cost = evaluate_cost(occ, p)
    assert cost.value == pytest.approx(4.0 * occ.total_mass, rel=1e-14)


def test_total_mass_is_exact_discount_integral(lq_jump):
    occ = estimate_occupation(lq_jump, FeedbackPolicy.constant(lq_jump), 200, 3.0, 0.01, seed=5)
    assert occ.total_mass == pytest.approx(-math.expm1(-3.0), rel=1e-14)
    assert abs(occ.integrate(lambda x, u: np.ones_like(x)) - occ.total_mass) <= 1e-15
    assert occ.integrate(lambda x, u: np.zeros_like(x)) == 0.0
    assert np.all(occ.weights >= 0)


def test_large_discount_mass():
    p = build_problem({"problem": {"name": "lq_jump"}, "cost": {"c": 100.0, "K": 200.0}})
    occ = estimate_occupation(p, FeedbackPolicy.constant(p), 50, 1.0, 1e-3, seed=1)
    assert occ.total_mass == pytest.approx(1.0 / 100.0, rel=0.02)


def test_cost_band_reports_truncation(lq_jump):
    occ = estimate_occupation(lq_jump, FeedbackPolicy.constant(lq_jump), 100, 2.0, 0.01)
    est = evaluate_cost(occ, lq_jump)
    assert est.truncation_band == pytest.approx(60.0 * math.exp(-2.0), rel=1e-12)


def test_adjoint_identity_for_constants(lq_jump, quads):
    occ = estimate_occupation(lq_jump, FeedbackPolicy.constant(lq_jump), 300, 4.0, 0.01, seed=9)
    res = check_adjoint_identity(occ, TestFunction([2.5]), lq_jump, quads["lq_jump"])
    assert res.value == pytest.approx(-2.5 * math.exp(-4.0), rel=1e-10)
    assert res.within()


def test_adjoint_identity_degenerate_dynamics(quads):
    p = degenerate(1.3)
    occ = estimate_occupation(p, FeedbackPolicy.constant(p), 4, 5.0, 0.01)
    for f in (TestFunction([1.0, -2.0, 0.5]), TestFunction.monomial(4)):
        res = check_adjoint_identity(occ, f, p, quads["degenerate"])
        assert res.value == pytest.approx(-f(1.3) * math.exp(-5.0), rel=1e-9)


@pytest.mark.slow
def test_adjoint_identity_lq_jump_moderate(lq_jump, quads, hjb401):
    occ = estimate_occupation(lq_jump, hjb401["lq_jump"].policy, 10_000, None, 1e-3, seed=17,
                              max_power=4, quad=quads["lq_jump"])
    for k in range(5):
        res = check_adjoint_identity(occ, TestFunction.monomial(k), lq_jump, quads["lq_jump"])
        assert res.within(3.0), (k, res)
    cost = evaluate_cost(occ, lq_jump)
    v_hat = hjb401["lq_jump"](lq_jump.initial_state)
    assert abs(cost.value - v_hat) <= 3 * cost.std_error + cost.truncation_band


def test_determinism_and_seed_dependence(lq_jump):
    pol = FeedbackPolicy.constant(lq_jump)
    a = estimate_occupation(lq_jump, pol, 250, 1.0, 0.01, seed=4)
    b = estimate_occupation(lq_jump, pol, 250, 1.0, 0.01, seed=4)
    c = estimate_occupation(lq_jump, pol, 250, 1.0, 0.01, seed=5)
    assert np.array_equal(a.step_sums, b.step_sums)
    assert np.array_equal(a.block_sums, b.block_sums)
    assert np.array_equal(a.terminal_states, b.terminal_states)
    assert not np.array_equal(a.terminal_states, c.terminal_states)


def test_small_jump_flag_changes_paths(lq_jump):
    pol = FeedbackPolicy.constant(lq_jump)
    a = estimate_occupation(lq_jump, pol, 50, 1.0, 0.01, seed=4)
    b = estimate_occupation(lq_jump, pol, 50, 1.0, 0.01, seed=4, small_jumps=False)
    assert not np.array_equal(a.terminal_states, b.terminal_states)


def test_non_polynomial_integrand_needs_atoms(lq_jump):
    pol = FeedbackPolicy.constant(lq_jump)
    occ = estimate_occupation(lq_jump, pol, 20, 0.5, 0.01, max_power=4)
    with pytest.raises(ValueError, match="record_atoms"):
        occ.integrate(lambda x, u: np.cos(x))
    occ = estimate_occupation(lq_jump, pol, 20, 0.5, 0.01, max_power=4, record_atoms=True)
    direct = occ.integrate(lambda x, u: np.cos(x))
    assert direct == pytest.approx(np.sum(np.cos(occ.atoms[:, 0]) * occ.atoms[:, 2]), rel=1e-12)
    assert occ.integrate(lambda x, u: x**2) == pytest.approx(
        np.sum(occ.atoms[:, 0] ** 2 * occ.atoms[:, 2]), rel=1e-10)


def test_occupation_csv(tmp_path, lq_jump):
    pol = FeedbackPolicy.constant(lq_jump)
    occ = estimate_occupation(lq_jump, pol, 20, 0.5, 0.01, max_power=2)
    occ.to_csv(tmp_path / "moments.csv")
    rows = (tmp_path / "moments.csv").read_text().splitlines()
    assert rows[0] == "u,power,moment" and len(rows) == 1 + 21 * 3


def test_divergence_is_reported():
    p = degenerate(1.0, a=60.0)
    with pytest.raises(DivergenceError) as err:
        simulate_path(p, FeedbackPolicy.constant(p), 2.0, 1e-3)
    assert err.value.step is not None and "step" in str(err.value)


def test_bad_time_grid(lq_jump):
    with pytest.raises(ValidationError):
        simulate_path(lq_jump, FeedbackPolicy.constant(lq_jump), 0.1, 0.5)
    with pytest.raises(ValueError):
        simulate_path(lq_jump, FeedbackPolicy.constant(lq_jump), -1.0, 0.01)


def test_moment_check_degenerate():
    p = degenerate(1.0)
    res = moment_check(p, FeedbackPolicy.constant(p), 5, 1.0, 0.01, p_exp=4, x0_values=[0.5, 1.0, 2.0])
    assert np.array_equal(res.moments, np.array([0.5, 1.0, 2.0]) ** 4)
    assert res.holds


@pytest.mark.parametrize("x0", [0.0, 1.0])
def test_moment_check_doob_bound(x0):
    s, T = 0.4, 1.0
    p = degenerate(0.5, s=s)
    res = moment_check(p, FeedbackPolicy.constant(p), 4000, T, 1e-3, seed=3, p_exp=2, x0_values=[x0])
    assert res.moments[0] <= 4 * (x0**2 + s * s * T)
    if x0 == 0.0:
        assert res.moments[0] <= x0**2 + 4 * s * s * T


def test_moment_check_lq_jump_monotone(lq_jump):
    res = moment_check(lq_jump, FeedbackPolicy.constant(lq_jump), 2000, 1.0, 0.01, seed=1, p_exp=2)
    assert np.all(np.isfinite(res.moments))
    assert res.monotone and res.holds
    assert np.all(res.moments <= res.bounds * (1 + 1e-12))


def test_feedback_policy_lookup(lq_jump):
    pol = FeedbackPolicy(-1.0, 0.5, np.array([0, 1, 2, 3, 4]), lq_jump.controls.values)
    assert list(pol.index(np.array([-5.0, -1.0, -0.7, 0.2, 9.0, np.nan]))) == [0, 0, 1, 2, 4, 0]
    with pytest.raises(ValueError):
        FeedbackPolicy(0.0, 1.0, np.array([0, 30]), lq_jump.controls.values)


def test_occupation_estimator(lq_jump):
    est = OccupationMeasureEstimator(n_paths=50, horizon=1.0, dt=0.01, seed=1, max_power=2)
    assert est.get_params()["n_paths"] == 50
    est.fit(lq_jump)
    cost = est.cost()
    assert cost.value > 0 and cost.std_error > 0
    assert est.integrate(lambda x, u: np.ones_like(x)) == est.occupation_.total_mass
