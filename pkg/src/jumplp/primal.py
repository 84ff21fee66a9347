"""Discretized occupation-measure LP and its simplex solution.

Decision variables are nonnegative weights on (state, control) atoms.  Each
polynomial test function ``f`` contributes the row

    sum_j [c f - (A + J) f](x_j, u_j) w_j = f(x0)

relaxed to ``|row - f(x0)| <= delta``.  Near the box ends the jump term uses
the polynomial itself outside the box, so no extrapolation enters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_fitted, check_int
from .dual import StateGrid
from .exceptions import ValidationError
from .generator import MAX_DEGREE, TestFunction, apply_constraint_operator, build_quadrature
from .simplex import INFEASIBLE, OPTIMAL, revised_simplex


@dataclass(frozen=True)
class AtomGrid:
    """State-major product of state nodes and control points."""

    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        controls = np.asarray(self.controls, dtype=float)
        if states.ndim != 1 or controls.ndim != 1 or states.size == 0 or controls.size == 0:
            raise ValidationError("atom grid needs non-empty 1-D state and control arrays")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "controls", controls)

    @classmethod
    def for_problem(cls, problem, n_state=201, include_x0=True):
        """Uniform state nodes on the box, plus ``x0`` if it is not a node."""
        states = StateGrid.for_problem(problem, n_state).nodes
        x0 = problem.initial_state
        if include_x0 and not np.any(np.isclose(states, x0, rtol=0.0, atol=1e-12)):
            states = np.sort(np.append(states, x0))
        return cls(states, problem.controls.values)

    @property
    def atoms(self):
        xs, us = np.meshgrid(self.states, self.controls, indexing="ij")
        return np.column_stack([xs.ravel(), us.ravel()])

    def __len__(self):
        return self.states.size * self.controls.size


def build_basis(max_degree):
    """Monomials ``1, x, ..., x^max_degree``."""
    max_degree = check_int(max_degree, "max_degree", minimum=0, maximum=MAX_DEGREE)
    return [TestFunction.monomial(k) for k in range(max_degree + 1)]


def default_delta(basis, x0, rel=1e-6):
    return np.array([rel * (1.0 + abs(float(f(x0)))) for f in basis])


@dataclass
class LinearProgramInstance:
    """``min objective . w  s.t.  |A w - rhs| <= delta,  w >= 0``."""

    objective: np.ndarray
    constraint_matrix: np.ndarray
    rhs: np.ndarray
    delta: np.ndarray
    atoms: np.ndarray
    basis: list = field(default_factory=list)

    def __post_init__(self):
        m, n = self.constraint_matrix.shape
        if self.objective.shape != (n,) or self.rhs.shape != (m,) or self.delta.shape != (m,):
            raise ValidationError("LP data shapes do not match")
        if np.any(self.delta < 0):
            raise ValidationError("relaxation delta must be nonnegative")
        for name in ("objective", "constraint_matrix", "rhs", "delta"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValidationError(f"LP {name} has non-finite entries")

    @property
    def shape(self):
        return self.constraint_matrix.shape

    def standard_form(self):
        """Row-scaled ``(c, A, b)`` over ``[w, slacks]`` with ``A x = b, x >= 0``.

        A relaxed row becomes ``a w - s = rhs - delta`` and ``a w + s' = rhs + delta``;
        a row with ``delta = 0`` stays an equality.  Also returns the row map
        and the scale of every standard-form row.
        """
        m, n = self.shape
        rows, rhs, owner, sign = [], [], [], []
        for i in range(m):
            if self.delta[i] > 0:
                rows += [self.constraint_matrix[i]] * 2
                rhs += [self.rhs[i] - self.delta[i], self.rhs[i] + self.delta[i]]
                owner += [i, i]
                sign += [-1.0, 1.0]
            else:
                rows.append(self.constraint_matrix[i])
                rhs.append(self.rhs[i])
                owner.append(i)
                sign.append(0.0)
        A = np.array(rows).reshape(len(rows), n)
        b = np.array(rhs)
        scale = np.maximum(np.abs(A).max(axis=1), np.abs(b))
        scale[scale == 0] = 1.0
        slack_cols = [k for k, s in enumerate(sign) if s != 0]
        S = np.zeros((len(rows), len(slack_cols)))
        for j, k in enumerate(slack_cols):
            S[k, j] = sign[k]
        A_std = np.hstack([A, S]) / scale[:, None]
        c_std = np.concatenate([self.objective, np.zeros(len(slack_cols))])
        return c_std, A_std, b / scale, np.array(owner), scale

    def to_text(self, path):
        """Plain-text export.

        Line 1: ``m n``.  Line 2: objective (n numbers, atom order).  Next m
        lines: constraint rows.  Then a line of m right-hand sides, a line of m
        deltas, and n lines ``state control`` giving each column's atom.
        """
        m, n = self.shape

        def fmt(values):
            return " ".join(repr(float(v)) for v in values)

        with open(path, "w") as fh:
            fh.write(f"{m} {n}\n")
            fh.write(fmt(self.objective) + "\n")
            for row in self.constraint_matrix:
                fh.write(fmt(row) + "\n")
            fh.write(fmt(self.rhs) + "\n")
            fh.write(fmt(self.delta) + "\n")
            for atom in self.atoms:
                fh.write(fmt(atom) + "\n")

    @classmethod
    def from_text(cls, path):
        with open(path) as fh:
            lines = [line.split() for line in fh if line.strip()]
        m, n = int(lines[0][0]), int(lines[0][1])
        data = [np.array(line, dtype=float) for line in lines[1:]]
        objective = data[0]
        matrix = np.array(data[1:1 + m]).reshape(m, n)
        rhs, delta = data[1 + m], data[2 + m]
        atoms = np.array(data[3 + m:3 + m + n]).reshape(n, 2)
        return cls(objective, matrix, rhs.reshape(m), delta.reshape(m), atoms)


def assemble_lp(problem, basis, grid, delta=None, quad=None):
    """Constraint rows ``[c f - (A + J) f]`` at every atom, one per basis function."""
    quad = quad or build_quadrature(problem.levy)
    atoms = grid.atoms
    x, u = atoms[:, 0], atoms[:, 1]
    x0 = problem.initial_state
    matrix = np.array([apply_constraint_operator(f, x, u, problem, quad) for f in basis])
    matrix = matrix.reshape(len(basis), len(grid))
    rhs = np.array([float(f(x0)) for f in basis])
    if delta is None:
        delta = default_delta(basis, x0)
    delta = np.broadcast_to(np.asarray(delta, dtype=float), rhs.shape).copy()
    objective = problem.running_cost(x, u)
    return LinearProgramInstance(objective, matrix, rhs, delta, atoms, list(basis))


@dataclass
class LPSolution:
    weights: np.ndarray
    objective_value: float
    status: str
    dual_multipliers: np.ndarray
    iterations: int = 0

    def to_json(self, atoms=None, threshold=1e-12, **kwargs):
        """Status, value, multipliers and the weights above ``threshold``."""
        support = np.flatnonzero(self.weights > threshold)
        payload = {
            "status": self.status,
            "objective_value": None if not np.isfinite(self.objective_value) else self.objective_value,
            "iterations": self.iterations,
            "dual_multipliers": [float(v) for v in self.dual_multipliers],
            "weights": [
                {"index": int(j), "weight": float(self.weights[j]),
                 **({"state": float(atoms[j, 0]), "control": float(atoms[j, 1])}
                    if atoms is not None else {})}
                for j in support
            ],
        }
        return json.dumps(payload, **kwargs)


def solve_lp(lp, tol=1e-9, max_iter=10**6):
    """Two-phase revised simplex on the standard form of ``lp``.

    ``dual_multipliers[i]`` is the sensitivity of the optimum to ``rhs[i]``
    (the two sides of a relaxed row are summed).
    """
    c, A, b, owner, scale = lp.standard_form()
    res = revised_simplex(c, A, b, tol=tol, max_iter=max_iter)
    n = lp.shape[1]
    duals = np.zeros(lp.shape[0])
    if res.status == OPTIMAL:
        np.add.at(duals, owner, res.duals / scale)
    else:
        duals[:] = np.nan
    value = float(lp.objective @ res.x[:n]) if res.status == OPTIMAL else (
        np.inf if res.status == INFEASIBLE else -np.inf)
    return LPSolution(res.x[:n].copy(), value, res.status, duals, res.iterations)


def lp_diagnostics(lp, sol, discount):
    """Residuals, support, mass and the relaxation budget ``sum delta |y|``."""
    resid = lp.constraint_matrix @ sol.weights - lp.rhs
    excess = np.maximum(np.abs(resid) - lp.delta, 0.0)
    support = np.flatnonzero(sol.weights > 1e-12)
    reduced = lp.objective - lp.constraint_matrix.T @ sol.dual_multipliers
    row_gap = np.where(lp.delta > 0, lp.delta - np.abs(resid), 0.0)
    slackness = max(float(np.max(np.abs(reduced * sol.weights), initial=0.0)),
                    float(np.max(np.abs(sol.dual_multipliers * row_gap), initial=0.0)))
    return {
        "status": sol.status,
        "constraint_residuals": resid.tolist(),
        "feasibility_violation": float(excess.max(initial=0.0)),
        "complementary_slackness": slackness,
        "support": support.tolist(),
        "support_atoms": lp.atoms[support].tolist(),
        "mass": float(np.sum(sol.weights)),
        "mass_target": 1.0 / discount,
        "delta_budget": float(np.sum(lp.delta * np.abs(sol.dual_multipliers))),
        "iterations": sol.iterations,
    }


@dataclass(frozen=True)
class PrimalParams:
    n_state: int = 201
    max_degree: int = 4
    delta: object = None
    rel_delta: float = 1e-6
    r0: float = 0.01
    n_nodes: int = 64


def primal_value(problem, params=None, quad=None):
    """End-to-end ``rho_hat(x0)``; returns ``(rho_hat, solution, diagnostics)``."""
    params = params or PrimalParams()
    quad = quad or build_quadrature(problem.levy, r0=params.r0, n_nodes=params.n_nodes)
    basis = build_basis(params.max_degree)
    grid = AtomGrid.for_problem(problem, params.n_state)
    delta = params.delta
    if delta is None:
        delta = default_delta(basis, problem.initial_state, params.rel_delta)
    lp = assemble_lp(problem, basis, grid, delta, quad)
    sol = solve_lp(lp)
    diagnostics = lp_diagnostics(lp, sol, problem.discount) if sol.status == OPTIMAL else {
        "status": sol.status, "iterations": sol.iterations}
    diagnostics["shape"] = list(lp.shape)
    return sol.objective_value, sol, diagnostics


class PrimalLP(BaseEstimator):
    """Estimator wrapper: ``fit(problem)`` solves the discretized LP."""

    def __init__(self, n_state=201, max_degree=4, rel_delta=1e-6, r0=0.01, n_nodes=64):
        self.n_state = n_state
        self.max_degree = max_degree
        self.rel_delta = rel_delta
        self.r0 = r0
        self.n_nodes = n_nodes

    def fit(self, problem, y=None):
        params = PrimalParams(n_state=self.n_state, max_degree=self.max_degree,
                              rel_delta=self.rel_delta, r0=self.r0, n_nodes=self.n_nodes)
        self.value_, self.solution_, self.diagnostics_ = primal_value(problem, params)
        return self

    @property
    def occupation_(self):
        """Support atoms and weights of the optimal measure."""
        check_fitted(self, "solution_")
        keep = self.solution_.weights > 1e-12
        return self.diagnostics_["support_atoms"], self.solution_.weights[keep]
