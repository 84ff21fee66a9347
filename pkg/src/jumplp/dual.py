"""Monotone HJB solver, shaken equation, mollified sub-solutions, dual bounds.

The discrete operator at node ``i`` for a control ``(u, e)`` is

    (c + lo + up + W) V_i - lo V_{i-1} - up V_{i+1} - (J V)_i - ext_i = h_i

with central drift differences where they keep the scheme monotone (upwind
otherwise), central diffusion and the jump integral discretized by
:class:`~jumplp.generator.JumpQuadrature` plus linear interpolation.  Values
beyond the box come from the extension rule of :class:`ValueFunction`; its
end slopes (and curvatures) are lagged one policy-iteration step, which keeps
every policy matrix an M-matrix.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import integrate
from sklearn.base import BaseEstimator

from ._validation import check_fitted, check_int, check_states
from .exceptions import ConfigurationError, ConvergenceError, ValidationError
from .generator import SecondOrderState, build_quadrature, hamiltonian_table
from .simulator import FeedbackPolicy

EXTENSIONS = ("linear", "quadratic")


@dataclass(frozen=True)
class StateGrid:
    x_min: float
    x_max: float
    n: int

    def __post_init__(self):
        check_int(self.n, "n", minimum=3)
        if self.n % 2 == 0:
            raise ValidationError(f"state grid size must be odd, got {self.n}")
        if not self.x_max > self.x_min:
            raise ValidationError("state grid needs x_max > x_min")

    @classmethod
    def for_problem(cls, problem, n=401):
        return cls(problem.box[0], problem.box[1], n)

    @property
    def dx(self):
        return (self.x_max - self.x_min) / (self.n - 1)

    @property
    def nodes(self):
        return np.linspace(self.x_min, self.x_max, self.n)


def _end_terms(values, dx, extension):
    """Slopes and curvatures used by the extension rule at both ends."""
    s_left = (values[1] - values[0]) / dx
    s_right = (values[-1] - values[-2]) / dx
    if extension == "quadratic":
        k_left = (values[2] - 2 * values[1] + values[0]) / dx**2
        k_right = (values[-1] - 2 * values[-2] + values[-3]) / dx**2
    else:
        k_left = k_right = 0.0
    return s_left, k_left, s_right, k_right


@dataclass
class ValueFunction:
    """Grid values with linear interpolation inside the box.

    Outside, ``linear`` continues the end cell's slope and ``quadratic`` adds
    the end second difference; both are C^1-matched to the interpolant.
    """

    grid: StateGrid
    values: np.ndarray
    extension: str = "linear"
    policy: FeedbackPolicy | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n,):
            raise ValidationError("values must have one entry per grid node")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("value function must be finite")
        if self.extension not in EXTENSIONS:
            raise ValidationError(f"extension must be one of {EXTENSIONS}")

    def __call__(self, x):
        scalar = np.ndim(x) == 0
        x = np.atleast_1d(np.asarray(x, dtype=float))
        g = self.grid
        out = np.interp(x, g.nodes, self.values)
        sl, kl, sr, kr = _end_terms(self.values, g.dx, self.extension)
        right = x > g.x_max
        if np.any(right):
            d = x[right] - g.x_max
            out[right] = self.values[-1] + sr * d + 0.5 * kr * d * d
        left = x < g.x_min
        if np.any(left):
            d = x[left] - g.x_min
            out[left] = self.values[0] + sl * d + 0.5 * kl * d * d
        return float(out[0]) if scalar else out

    def to_csv(self, path):
        np.savetxt(
            path,
            np.column_stack([self.grid.nodes, self.values]),
            delimiter=",",
            header="node,value",
            comments="",
            fmt="%.17g",
        )

    def metadata(self):
        return {
            "x_min": self.grid.x_min,
            "x_max": self.grid.x_max,
            "n": self.grid.n,
            "extension": self.extension,
            **{k: v for k, v in self.info.items() if k != "residual_history"},
        }


# ---------------------------------------------------------------------------
# discrete operator


class _Scheme:
    """Precomputed pieces of the monotone discretization on one grid."""

    def __init__(self, problem, grid, quad, shifts, extension):
        self.problem, self.grid, self.quad, self.extension = problem, grid, quad, extension
        x, dx = grid.nodes, grid.dx
        dyn = problem.dynamics
        g = dyn.jump_scale
        us = problem.controls.values
        shifts = np.asarray(shifts, dtype=float)
        self.shifts = shifts
        self.n_u, self.n_e = us.size, shifts.size

        # control table, u-major: column k <-> (u[k // n_e], shifts[k % n_e])
        xe, uu = np.broadcast_arrays(x[:, None, None] + shifts[None, None, :], us[None, :, None])
        drift = dyn.drift(xe, uu) - g * quad.compensator
        sigma = dyn.diffusion(xe, uu)
        diff = sigma * sigma + g * g * quad.small_variance
        self.cost = problem.running_cost(xe, uu).reshape(grid.n, -1)
        drift = drift.reshape(grid.n, -1)
        diff = diff.reshape(grid.n, -1)
        # central drift differences where they stay monotone, upwind elsewhere
        central = diff >= np.abs(drift) * dx
        self.lo = np.where(
            central,
            0.5 * diff / dx**2 - 0.5 * drift / dx,
            np.maximum(-drift, 0.0) / dx + 0.5 * diff / dx**2,
        )
        self.up = np.where(
            central,
            0.5 * diff / dx**2 + 0.5 * drift / dx,
            np.maximum(drift, 0.0) / dx + 0.5 * diff / dx**2,
        )

        # jump integral: interpolation matrix plus extension moments
        n = grid.n
        z = quad.nodes
        w = quad.weights
        self.jump_mass = float(w.sum())
        jmat = np.zeros((n, n))
        self.ext = np.zeros((n, 4))  # coefficients of (s_left, k_left, s_right, k_right)
        if w.size and np.any(w > 0):
            y = x[:, None] + dyn.jump_coeff(x[:, None], us[0], z[None, :])
            ww = np.broadcast_to(w, y.shape)
            rows = np.broadcast_to(np.arange(n)[:, None], y.shape)
            inside = (y >= grid.x_min) & (y <= grid.x_max)
            pos = (y[inside] - grid.x_min) / dx
            j = np.minimum(np.floor(pos).astype(np.intp), n - 2)
            theta = pos - j
            np.add.at(jmat, (rows[inside], j), ww[inside] * (1 - theta))
            np.add.at(jmat, (rows[inside], j + 1), ww[inside] * theta)
            right = y > grid.x_max
            left = y < grid.x_min
            d_r = np.where(right, y - grid.x_max, 0.0)
            d_l = np.where(left, y - grid.x_min, 0.0)
            jmat[:, -1] += np.sum(np.where(right, ww, 0.0), axis=1)
            jmat[:, 0] += np.sum(np.where(left, ww, 0.0), axis=1)
            self.ext[:, 0] = np.sum(ww * d_l, axis=1)
            self.ext[:, 1] = np.sum(ww * 0.5 * d_l * d_l, axis=1)
            self.ext[:, 2] = np.sum(ww * d_r, axis=1)
            self.ext[:, 3] = np.sum(ww * 0.5 * d_r * d_r, axis=1)
        self.jmat = jmat

    def end_terms(self, values):
        return np.array(_end_terms(values, self.grid.dx, self.extension))

    def ghosts(self, values, terms):
        dx = self.grid.dx
        sl, kl, sr, kr = terms
        left = values[0] - sl * dx + 0.5 * kl * dx * dx
        right = values[-1] + sr * dx + 0.5 * kr * dx * dx
        return left, right

    def residual_table(self, values, terms=None):
        """``L^k V - h^k`` for every node and control column."""
        if terms is None:
            terms = self.end_terms(values)
        gl, gr = self.ghosts(values, terms)
        prev = np.concatenate([[gl], values[:-1]])
        nxt = np.concatenate([values[1:], [gr]])
        c = self.problem.discount
        nonlocal_part = self.jmat @ values + self.ext @ terms - self.jump_mass * values
        base = c * values - nonlocal_part
        return (
            base[:, None]
            + self.lo * (values[:, None] - prev[:, None])
            + self.up * (values[:, None] - nxt[:, None])
            - self.cost
        )

    def policy_matrix(self, policy, terms):
        n = self.grid.n
        rows = np.arange(n)
        lo = self.lo[rows, policy]
        up = self.up[rows, policy]
        c = self.problem.discount
        mat = -self.jmat.copy()
        mat[rows, rows] += c + lo + up + self.jump_mass
        mat[rows[1:], rows[1:] - 1] -= lo[1:]
        mat[rows[:-1], rows[:-1] + 1] -= up[:-1]
        rhs = self.cost[rows, policy] + self.ext @ terms
        dx = self.grid.dx
        sl, kl, sr, kr = terms
        # ghost nodes: V_{-1} = V_0 - sl dx + kl dx^2/2, V_n = V_{n-1} + sr dx + kr dx^2/2
        mat[0, 0] -= lo[0]
        rhs[0] += lo[0] * (-sl * dx + 0.5 * kl * dx * dx)
        mat[-1, -1] -= up[-1]
        rhs[-1] += up[-1] * (sr * dx + 0.5 * kr * dx * dx)
        return mat, rhs

    def evaluate(self, policy, terms):
        mat, rhs = self.policy_matrix(policy, terms)
        return np.linalg.solve(mat, rhs)


@dataclass(frozen=True)
class HJBParams:
    n_shift: int = 5
    tol: float = 1e-9
    max_iter: int = 200
    extension: str = "linear"
    r0: float = 0.01
    n_nodes: int = 64
    z_max: float | None = None


def _quadrature(problem, params):
    return build_quadrature(problem.levy, r0=params.r0, z_max=params.z_max, n_nodes=params.n_nodes)


def _policy_iteration(scheme, params):
    values = scheme.cost.min(axis=1) / scheme.problem.discount
    history = []
    for it in range(params.max_iter + 1):
        table = scheme.residual_table(values)
        err = float(np.max(np.abs(table.max(axis=1))))
        history.append(err)
        if err <= params.tol:
            return values, np.argmax(table, axis=1), history
        if it == params.max_iter:
            break
        policy = np.argmax(table, axis=1)
        values = scheme.evaluate(policy, scheme.end_terms(values))
    raise ConvergenceError(
        f"policy iteration did not reach residual {params.tol:g} in {params.max_iter} iterations",
        history,
    )


def _solve(problem, grid, shifts, params, quad=None):
    if problem.discount <= 0:
        raise ValidationError("discount must be positive")
    quad = quad if quad is not None else _quadrature(problem, params)
    scheme = _Scheme(problem, grid, quad, shifts, params.extension)
    values, policy, history = _policy_iteration(scheme, params)
    feedback = FeedbackPolicy(grid.x_min, grid.dx, policy // scheme.n_e, problem.controls.values)
    info = {
        "iterations": len(history) - 1,
        "residual": history[-1],
        "residual_history": history,
        "shifts": scheme.shifts.tolist(),
    }
    return ValueFunction(grid, values, params.extension, feedback, info)


def solve_hjb(problem, grid=None, params=None, quad=None):
    """Solve the discrete HJB equation by policy iteration.

    Returns a :class:`ValueFunction` whose ``policy`` attribute holds the
    greedy feedback rule.
    """
    params = params or HJBParams()
    grid = grid or StateGrid.for_problem(problem)
    return _solve(problem, grid, [0.0], params, quad)


def shift_grid(eps, n_shift):
    if eps < 0 or eps >= 1:
        raise ConfigurationError(f"eps must lie in [0, 1), got {eps}")
    if eps == 0:
        return np.array([0.0])
    check_int(n_shift, "n_shift", minimum=3)
    return np.linspace(-eps, eps, n_shift)


def solve_perturbed_hjb(problem, eps, grid=None, params=None, quad=None):
    """Value of the shaken problem: controls ``(u, e)`` with ``|e| <= eps``.

    Coefficients and cost are evaluated at ``x + e``; ``eps = 0`` reduces to
    :func:`solve_hjb`.
    """
    params = params or HJBParams()
    grid = grid or StateGrid.for_problem(problem)
    value = _solve(problem, grid, shift_grid(eps, params.n_shift), params, quad)
    value.info["eps"] = float(eps)
    return value


# ---------------------------------------------------------------------------
# mollification


def _bump(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    inside = np.abs(t) < 1
    out[inside] = np.exp(-1.0 / (1.0 - t[inside] ** 2))
    return out


_BUMP_MASS = integrate.quad(lambda t: math.exp(-1.0 / (1.0 - t * t)), -1, 1, epsabs=0, epsrel=1e-13)[0]


def kernel(x, kappa, order=0):
    """Normalized bump ``phi_kappa`` and its first two derivatives."""
    t = np.asarray(x, dtype=float) / kappa
    phi = _bump(t) / _BUMP_MASS
    if order == 0:
        return phi / kappa
    inside = np.abs(t) < 1
    one = np.where(inside, 1.0 - t * t, 1.0)
    g1 = np.where(inside, -2.0 * t / one**2, 0.0)
    if order == 1:
        return phi * g1 / kappa**2
    g2 = np.where(inside, -2.0 / one**2 - 8.0 * t * t / one**3, 0.0)
    return phi * (g1 * g1 + g2) / kappa**3


_ULP_SCALE = 2.0**52


def lattice_weights(kappa, h_step):
    """Cell masses of ``phi_kappa`` on ``h_step * Z``, renormalized to sum to one.

    The weights are rounded to multiples of ``2**-52`` so that their floating
    point sum is exactly one whatever the summation order.

    Returns ``(offsets, weights, d1, d2)`` where ``d1``/``d2`` are the cell
    integrals of the first/second kernel derivatives, scaled so that they
    differentiate quadratics exactly.
    """
    if not 0 < h_step < kappa:
        raise ConfigurationError(f"need 0 < h_step < kappa, got h_step={h_step}, kappa={kappa}")
    half = int(math.ceil(kappa / h_step - 0.5))
    j = np.arange(0, half + 1)
    alpha = j * h_step
    masses = []
    for a in alpha:
        lo = max((a - 0.5 * h_step) / kappa, -1.0)
        hi = min((a + 0.5 * h_step) / kappa, 1.0)
        m = integrate.quad(lambda t: math.exp(-1.0 / (1.0 - t * t)) if abs(t) < 1 else 0.0, lo, hi,
                           epsabs=0, epsrel=1e-13)[0] if hi > lo else 0.0
        masses.append(m / _BUMP_MASS)
    masses = np.asarray(masses)
    masses = masses / (masses[0] + 2.0 * math.fsum(masses[1:]))
    # multiples of 2^-52 add up exactly in any order; the centre takes the remainder
    masses = np.round(masses * _ULP_SCALE) / _ULP_SCALE
    keep = masses > 0
    alpha, masses = alpha[keep], masses[keep]
    masses[0] = 1.0 - 2.0 * math.fsum(masses[1:])
    offsets = np.concatenate([-alpha[:0:-1], alpha])
    weights = np.concatenate([masses[:0:-1], masses])
    ph = 0.5 * h_step
    d1 = kernel(offsets + ph, kappa) - kernel(offsets - ph, kappa)
    d2 = kernel(offsets + ph, kappa, 1) - kernel(offsets - ph, kappa, 1)
    # rescale so derivatives of affine and quadratic functions come out exact
    d1 = d1 / -math.fsum(offsets * d1)
    d2 = d2 / (0.5 * math.fsum(offsets**2 * d2))
    return offsets, weights, d1, d2


class MollifiedFunction:
    """``sum_a w_a V(x - a) + offset`` with kernel-derivative quadrature."""

    def __init__(self, value_function, offsets, weights, d1, d2, offset=0.0):
        self.value_function = value_function
        self.offsets = offsets
        self.weights = weights
        self.d1 = d1
        self.d2 = d2
        self.offset = float(offset)

    def _combine(self, x, coef):
        x = np.asarray(x, dtype=float)
        shifted = x[..., None] - self.offsets
        vals = self.value_function(shifted.ravel()).reshape(shifted.shape)
        return vals @ coef

    def __call__(self, x):
        return self._combine(x, self.weights) + self.offset

    def deriv(self, x, order=1):
        if order == 1:
            return self._combine(x, self.d1)
        if order == 2:
            return self._combine(x, self.d2)
        raise ValueError("only first and second derivatives are available")

    def shifted(self, delta):
        return MollifiedFunction(
            self.value_function, self.offsets, self.weights, self.d1, self.d2, self.offset + delta
        )


@dataclass
class SubSolutionCertificate:
    representation: object
    margin: float = math.nan
    value_at_x0: float = math.nan
    params: dict = field(default_factory=dict)
    shift: float = 0.0
    tolerance: float = 1e-6

    @property
    def feasible(self):
        return bool(self.margin <= self.tolerance)

    def metadata(self):
        return {
            "margin": self.margin,
            "value_at_x0": self.value_at_x0,
            "shift": self.shift,
            "tolerance": self.tolerance,
            "feasible": self.feasible,
            **self.params,
        }

    def to_csv(self, path, grid):
        x = grid.nodes
        np.savetxt(
            path,
            np.column_stack([x, self.representation(x)]),
            delimiter=",",
            header="node,value",
            comments="",
            fmt="%.17g",
        )

    def to_json(self, **kwargs):
        return json.dumps(self.metadata(), **kwargs)


def mollify(veps, kappa, h_step=None):
    """Krylov mollification of a (shaken) value function on a lattice."""
    if not 0 < kappa < 1:
        raise ConfigurationError(f"kappa must lie in (0, 1), got {kappa}")
    h_step = kappa / 4 if h_step is None else h_step
    offsets, weights, d1, d2 = lattice_weights(kappa, h_step)
    rep = MollifiedFunction(veps, offsets, weights, d1, d2)
    params = {"eps": veps.info.get("eps", 0.0), "kappa": float(kappa), "h_step": float(h_step)}
    return SubSolutionCertificate(rep, params=params)


def check_points(problem, grid):
    """Interior grid nodes plus the initial state (the LP's extra atom)."""
    return np.union1d(grid.nodes[1:-1], [problem.initial_state])


def subsolution_residuals(rep, problem, grid, quad):
    """``c f - h - (A + J) f`` at :func:`check_points`, one column per control."""
    x = check_points(problem, grid)
    state = SecondOrderState(x, rep(x), rep.deriv(x, 1), rep.deriv(x, 2), rep)
    return hamiltonian_table(state, problem, quad)


def check_subsolution(rep, problem, grid, quad):
    """Largest violation of the sub-solution inequality over the check points."""
    return float(np.max(subsolution_residuals(rep, problem, grid, quad)))


@dataclass(frozen=True)
class DualParams:
    hjb: HJBParams = HJBParams()
    h_ratio: float = 4.0
    feas_tol: float = 1e-6


def feasibility_tolerance(rep, grid, quad, feas_tol=1e-6):
    scale = float(np.max(np.abs(rep(grid.nodes))))
    return feas_tol + 2.0 * quad.tail_bound * (1.0 + scale)


def dual_value(problem, eps=0.05, kappa=0.05, grid=None, params=None, quad=None):
    """Certified lower bound from a mollified shaken value function.

    Returns ``(rho_star, certificate)``.  An infeasible certificate is lowered
    by ``margin / c``, which restores feasibility exactly because the
    generators annihilate constants.
    """
    params = params or DualParams()
    grid = grid or StateGrid.for_problem(problem)
    quad = quad if quad is not None else _quadrature(problem, params.hjb)
    veps = solve_perturbed_hjb(problem, eps, grid, params.hjb, quad)
    cert = mollify(veps, kappa, kappa / params.h_ratio)
    rep = cert.representation
    margin = check_subsolution(rep, problem, grid, quad)
    tol = feasibility_tolerance(rep, grid, quad, params.feas_tol)
    shift = 0.0
    if margin > tol:
        shift = margin / problem.discount
        rep = rep.shifted(-shift)
        margin = check_subsolution(rep, problem, grid, quad)
    x0 = problem.initial_state
    value = float(rep(np.array([x0]))[0])
    cert = replace(
        cert,
        representation=rep,
        margin=margin,
        value_at_x0=value,
        shift=shift,
        tolerance=tol,
        params={**cert.params, "hjb_value_at_x0": float(veps(np.array([x0]))[0])},
    )
    return value, cert


# ---------------------------------------------------------------------------
# estimator front-ends


class HJBSolver(BaseEstimator):
    """Estimator wrapper around :func:`solve_perturbed_hjb`.

    ``fit(problem)`` solves the equation; ``predict(X)`` evaluates the value
    function (with its extension rule) at states ``X``.
    """

    def __init__(self, n_state=401, eps=0.0, n_shift=5, tol=1e-9, max_iter=200,
                 extension="linear", r0=0.01, n_nodes=64):
        self.n_state = n_state
        self.eps = eps
        self.n_shift = n_shift
        self.tol = tol
        self.max_iter = max_iter
        self.extension = extension
        self.r0 = r0
        self.n_nodes = n_nodes

    def _params(self):
        return HJBParams(n_shift=self.n_shift, tol=self.tol, max_iter=self.max_iter,
                         extension=self.extension, r0=self.r0, n_nodes=self.n_nodes)

    def fit(self, problem, y=None):
        grid = StateGrid.for_problem(problem, self.n_state)
        self.value_function_ = solve_perturbed_hjb(problem, self.eps, grid, self._params())
        self.policy_ = self.value_function_.policy
        self.n_iter_ = self.value_function_.info["iterations"]
        return self

    def predict(self, X):
        check_fitted(self, "value_function_")
        return self.value_function_(check_states(X, "X"))


class KrylovDualBound(BaseEstimator):
    """Estimator wrapper around :func:`dual_value`.

    ``predict(X)`` evaluates the (shifted) certificate function.
    """

    def __init__(self, eps=0.05, kappa=0.05, n_state=401, n_shift=5, h_ratio=4.0,
                 feas_tol=1e-6, extension="linear", r0=0.01, n_nodes=64):
        self.eps = eps
        self.kappa = kappa
        self.n_state = n_state
        self.n_shift = n_shift
        self.h_ratio = h_ratio
        self.feas_tol = feas_tol
        self.extension = extension
        self.r0 = r0
        self.n_nodes = n_nodes

    def fit(self, problem, y=None):
        params = DualParams(
            hjb=HJBParams(n_shift=self.n_shift, extension=self.extension, r0=self.r0,
                          n_nodes=self.n_nodes),
            h_ratio=self.h_ratio,
            feas_tol=self.feas_tol,
        )
        grid = StateGrid.for_problem(problem, self.n_state)
        self.rho_star_, self.certificate_ = dual_value(problem, self.eps, self.kappa, grid, params)
        return self

    def predict(self, X):
        check_fitted(self, "certificate_")
        return self.certificate_.representation(check_states(X, "X"))
