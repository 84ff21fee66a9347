import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jumplp.exceptions import ConfigurationError
from jumplp.generator import (SecondOrderState, TestFunction, apply_constraint_operator,
                              apply_jump_generator, apply_local_generator, build_quadrature,
                              hamiltonian)
from jumplp.model import ControlGrid, Dynamics, LevyMeasure, build_problem, levy_moment

# mpmath oracles (30 digits) for the registry measures
M2_LQ_JUMP = 0.313328534328875063
M1_ASYM = -0.00385883615921004008
M2_ASYM = 0.256340408444082632

coefficients = st.lists(st.floats(-3, 3), min_size=1, max_size=7)


def test_null_measure_quadrature():
    quad = build_quadrature(LevyMeasure.null())
    assert quad.small_variance == 0.0
    assert np.all(quad.weights == 0.0)


def test_symmetric_quadrature_signed_tail_moment():
    quad = build_quadrature(LevyMeasure(0.5, 0.5, 2.0, 2.0, 0.5, 0.5))
    assert abs(np.dot(quad.tail_weights, quad.tail_nodes)) <= 1e-10


@pytest.mark.parametrize("name", ["lq_jump", "lq_jump_asym"])
def test_quadrature_second_moment_matches_closed_form(name):
    nu = build_problem({"problem": {"name": name}}).levy
    quad = build_quadrature(nu, r0=0.01, z_max=30.0)
    assert quad.moment(2) + quad.small_variance == pytest.approx(levy_moment(nu, 2, "all"), rel=1e-6)
    assert quad.small_variance == pytest.approx(levy_moment(nu, 2, "small", cutoff=0.01), rel=1e-8)
    assert np.all(quad.weights >= 0)
    assert quad.tail_bound < 1e-10


def test_quadrature_rejects_short_truncation():
    nu = build_problem({"problem": {"name": "lq_jump"}}).levy
    with pytest.raises(ConfigurationError, match="z_max"):
        build_quadrature(nu, z_max=3.0)
    with pytest.raises(ConfigurationError):
        build_quadrature(nu, r0=1.5, z_max=30.0)
    with pytest.raises(ValueError):
        build_quadrature(nu, n_nodes=4)


def test_quadrature_json(quads):
    payload = json.loads(quads["lq_jump"].to_json())
    assert payload["small_cutoff"] == 0.01 and payload["n_mid"] == 128


def test_local_generator_examples():
    dyn = Dynamics(a=-0.5, beta=1.0, b0=0.25, s=0.3)
    assert apply_local_generator(TestFunction([2.0]), 1.3, 0.4, dyn) == 0.0
    assert apply_local_generator(TestFunction([0.0, 1.0]), 1.3, 0.4, Dynamics(b0=0.7)) == pytest.approx(0.7)
    x, u = 1.3, 0.4
    expected = (-0.5 * x + u + 0.25) * 2 * x + 0.3**2
    assert apply_local_generator(TestFunction.monomial(2), x, u, dyn) == pytest.approx(expected, rel=1e-14)


@settings(max_examples=40, deadline=None)
@given(coef=coefficients, x=st.floats(-3, 3), u=st.floats(-1.5, 1.5))
def test_local_generator_matches_finite_differences(coef, x, u):
    f = TestFunction(coef)
    dyn = Dynamics(a=-0.5, beta=1.0, b0=0.1, s=0.3, s_x=0.1)
    d = 1e-4
    fd1 = (f(x + d) - f(x - d)) / (2 * d)
    fd2 = (f(x + d) - 2 * f(x) + f(x - d)) / d**2
    sig = dyn.diffusion(x, u)
    fd = dyn.drift(x, u) * fd1 + 0.5 * sig * sig * fd2
    assert apply_local_generator(f, x, u, dyn) == pytest.approx(fd, abs=1e-6 * (1 + abs(fd)))


def test_jump_generator_kills_constants(lq_jump, quads):
    x = np.linspace(-5, 5, 11)
    assert np.all(apply_jump_generator(TestFunction([3.0]), x, 0.0, lq_jump.dynamics, quads["lq_jump"]) == 0.0)


def test_jump_generator_linear_symmetric(lq_jump, quads):
    x = np.linspace(-5, 5, 11)
    out = apply_jump_generator(TestFunction.monomial(1), x, 0.0, lq_jump.dynamics, quads["lq_jump"])
    assert np.max(np.abs(out)) <= 1e-10


@pytest.mark.parametrize("name,m1,m2", [("lq_jump", 0.0, M2_LQ_JUMP), ("lq_jump_asym", M1_ASYM, M2_ASYM)])
def test_jump_generator_quadratic(problems, quads, name, m1, m2):
    x = np.linspace(-4, 4, 9)
    out = apply_jump_generator(TestFunction.monomial(2), x, 0.3, problems[name].dynamics, quads[name])
    assert np.allclose(out, m2 + 2 * x * m1, rtol=0, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(coef=coefficients, x=st.floats(-5, 5))
def test_null_measure_jump_generator_vanishes(coef, x):
    quad = build_quadrature(LevyMeasure.null())
    assert apply_jump_generator(TestFunction(coef), x, 0.0, Dynamics(g=1.0), quad) == 0.0


def test_constraint_operator_examples(problems, quads, lq_jump):
    deg = problems["degenerate"]
    assert apply_constraint_operator(TestFunction([2.5]), 0.7, 0.0, deg, quads["degenerate"]) == pytest.approx(
        2.5 * deg.discount)
    assert apply_constraint_operator(TestFunction([0.0]), 0.7, 0.3, lq_jump, quads["lq_jump"]) == 0.0
    x, u = np.linspace(-3, 3, 7), 0.45
    out = apply_constraint_operator(TestFunction.monomial(2), x, u, lq_jump, quads["lq_jump"])
    expected = x**2 - (-0.5 * x + u) * 2 * x - 0.3**2 - M2_LQ_JUMP
    assert np.allclose(out, expected, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(f=coefficients, g=coefficients, a=st.floats(-2, 2), b=st.floats(-2, 2),
       x=st.floats(-5, 5), u=st.floats(-1.5, 1.5))
def test_constraint_operator_is_linear(problems, quads, f, g, a, b, x, u):
    p, quad = problems["lq_jump_asym"], quads["lq_jump_asym"]
    F, G = TestFunction(f), TestFunction(g)
    lhs = apply_constraint_operator(a * F + b * G, x, u, p, quad)
    rhs = a * apply_constraint_operator(F, x, u, p, quad) + b * apply_constraint_operator(G, x, u, p, quad)
    assert lhs == pytest.approx(rhs, abs=1e-10 * (1 + abs(lhs)) * 1e2)


def _quadratic_state(x, P, R, S):
    V = TestFunction([S, R, P])
    return SecondOrderState(x, V(x), V.deriv(x, 1), V.deriv(x, 2), V)


def test_hamiltonian_single_control(lq_jump, quads):
    from dataclasses import replace
    p = replace(lq_jump, controls=ControlGrid((0.3,)))
    s = _quadratic_state(0.5, 0.4, 0.1, 0.2)
    value, idx = hamiltonian(s, p, quads["lq_jump"])
    assert idx == 0
    from jumplp.generator import hamiltonian_table
    assert value == hamiltonian_table(s, p, quads["lq_jump"])[0]


def test_hamiltonian_shift_in_r(lq_jump, quads):
    s = _quadratic_state(0.5, 0.4, 0.1, 0.2)
    s2 = SecondOrderState(s.x, s.r + 0.37, s.p, s.X, s.nonlocal_fn)
    h1, _ = hamiltonian(s, lq_jump, quads["lq_jump"])
    h2, _ = hamiltonian(s2, lq_jump, quads["lq_jump"])
    assert h2 - h1 == pytest.approx(lq_jump.discount * 0.37, rel=1e-12)


def test_hamiltonian_lq_jump_closed_form(lq_jump, quads):
    # V = P x^2 + R x + S at x = 0; the inner minimization gives u* = -beta R / (2 r) = -0.3
    P, R, S = 0.4, 0.6, 0.2
    value, idx = hamiltonian(_quadratic_state(0.0, P, R, S), lq_jump, quads["lq_jump"])
    expected = S - 0.3**2 * P + R**2 / 4 - M2_LQ_JUMP * P
    assert lq_jump.controls.values[idx] == pytest.approx(-0.3)
    assert value == pytest.approx(expected, abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(x=st.floats(-4, 4), X1=st.floats(-5, 5), dX=st.floats(0, 5))
def test_hamiltonian_degenerate_ellipticity(lq_jump, quads, x, X1, dX):
    V = TestFunction([0.1, 0.2, 0.3])
    base = dict(x=x, r=0.4, p=0.2, nonlocal_fn=V)
    h1, _ = hamiltonian(SecondOrderState(X=X1, **base), lq_jump, quads["lq_jump"])
    h2, _ = hamiltonian(SecondOrderState(X=X1 + dX, **base), lq_jump, quads["lq_jump"])
    assert h1 >= h2 - 1e-12


def test_test_function_rejects_high_degree():
    with pytest.raises(ValueError):
        TestFunction(np.ones(8))
