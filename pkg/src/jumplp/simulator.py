"""Monte Carlo simulation of the controlled jump-diffusion.

Paths are advanced by Euler-Maruyama.  Jumps with ``|z| >= r0`` arrive as a
compound Poisson process whose sizes are drawn by inverse CDF from a
tabulated distribution; smaller jumps enter as extra Gaussian variance.

Randomness is split into blocks of paths.  Block ``b`` draws from
``numpy.random.default_rng([seed, b])`` in a fixed order, so a run is
reproducible bit for bit from ``(seed, n_paths)`` regardless of how the
aggregation is scheduled.

An :class:`OccupationEstimate` does not keep every (state, control, weight)
atom of a large run.  It keeps discounted power sums ``sum w x^p`` per step and
control, which integrate any integrand that is a polynomial of degree
``<= max_power`` in the state exactly.  Atoms can still be recorded for small
runs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numpy.polynomial import chebyshev
from sklearn.base import BaseEstimator

from ._validation import check_fitted, check_int, check_positive
from .exceptions import DivergenceError, ValidationError
from .generator import MAX_DEGREE, build_quadrature

EXPLOSION_BOUND = 1e8
N_BLOCKS = 100
CHUNK_STEPS = 64
CDF_POINTS = 4096


@dataclass(frozen=True)
class FeedbackPolicy:
    """Piecewise-constant feedback rule on a uniform state grid.

    ``indices[j]`` is the control-grid index used near node ``x_min + j dx``;
    states outside the grid are clamped to the end nodes.
    """

    x_min: float
    dx: float
    indices: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.intp)
        if idx.ndim != 1 or idx.size == 0:
            raise ValueError("indices must be a non-empty 1-D array")
        ctrl = np.asarray(self.controls, dtype=float)
        if idx.min() < 0 or idx.max() >= ctrl.size:
            raise ValueError("policy indices out of range of the control grid")
        idx.setflags(write=False)
        ctrl.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "controls", ctrl)

    @classmethod
    def constant(cls, problem, index=None):
        """Single control everywhere (the one closest to zero by default)."""
        controls = problem.controls.values
        if index is None:
            index = int(np.argmin(np.abs(controls)))
        lo, hi = problem.box
        return cls(lo, hi - lo, np.array([index, index]), controls)

    def index(self, x):
        x = np.asarray(x, dtype=float)
        j = np.rint((x - self.x_min) / self.dx)
        j = np.clip(np.nan_to_num(j, nan=0.0), 0, self.indices.size - 1).astype(np.intp)
        return self.indices[j]

    def __call__(self, x):
        return self.controls[self.index(x)]


# ---------------------------------------------------------------------------
# jump sizes


@dataclass(frozen=True)
class JumpSampler:
    """Inverse-CDF sampler for ``nu`` restricted to ``r0 <= |z| <= z_max``.

    Each sign gets ``n_points`` log-spaced edges split evenly between
    ``[r0, 1]`` and ``[1, z_max]``.  Inside a cell sizes are log-uniform.
    ``compensator`` is the mean of the tabulated law on ``r0 <= |z| < 1``
    times its mass, so the simulated compensated small jumps have mean zero.
    """

    log_lo: np.ndarray
    log_hi: np.ndarray
    signs: np.ndarray
    cdf: np.ndarray
    mid: np.ndarray

    @classmethod
    def build(cls, nu, r0, z_max, n_points=CDF_POINTS):
        n_half = max(n_points // 2, 2)
        gl_x, gl_w = np.polynomial.legendre.leggauss(8)
        lo, hi, signs, mass, mid = [], [], [], [], []
        for sign in (-1.0, 1.0):
            for a, b, is_mid in ((math.log(r0), 0.0, True), (0.0, math.log(z_max), False)):
                edges = np.linspace(a, b, n_half)
                t0, t1 = edges[:-1], edges[1:]
                t = 0.5 * (t1 - t0)[:, None] * gl_x + 0.5 * (t0 + t1)[:, None]
                z = np.exp(t)
                m = 0.5 * (t1 - t0) * ((nu.density(sign * z) * z) @ gl_w)
                lo.append(t0)
                hi.append(t1)
                signs.append(np.full(t0.size, sign))
                mass.append(m)
                mid.append(np.full(t0.size, is_mid))
        mass = np.concatenate(mass)
        return cls(
            log_lo=np.concatenate(lo),
            log_hi=np.concatenate(hi),
            signs=np.concatenate(signs),
            cdf=np.concatenate([[0.0], np.cumsum(mass)]),
            mid=np.concatenate(mid),
        )

    @property
    def masses(self):
        return np.diff(self.cdf)

    @property
    def rate(self):
        return float(self.cdf[-1])

    @property
    def compensator(self):
        mean = (np.exp(self.log_hi) - np.exp(self.log_lo)) / (self.log_hi - self.log_lo)
        return float(np.sum((self.signs * self.masses * mean)[self.mid]))

    def sample(self, rng, n):
        target = rng.random(n) * self.rate
        j = np.clip(np.searchsorted(self.cdf, target, side="right") - 1, 0, self.signs.size - 1)
        mass = self.masses[j]
        frac = np.divide(target - self.cdf[j], mass, out=np.zeros(n), where=mass > 0)
        t = self.log_lo[j] + np.clip(frac, 0.0, 1.0) * (self.log_hi[j] - self.log_lo[j])
        return self.signs[j] * np.exp(t)


# ---------------------------------------------------------------------------
# stepping engine


def _blocks(n_paths):
    bounds = np.linspace(0, n_paths, min(N_BLOCKS, n_paths) + 1).round().astype(int)
    return list(zip(bounds[:-1], bounds[1:]))


def _n_steps(horizon, dt):
    check_positive(horizon, "horizon")
    check_positive(dt, "dt")
    if dt > horizon:
        raise ValidationError(f"dt={dt} exceeds the horizon T={horizon}")
    return int(math.ceil(horizon / dt - 1e-9))


def _run(problem, policy, n_paths, n_steps, dt, seed, visit, *, quad=None, small_jumps=True,
         x0=None, want_jumps=False):
    """Advance ``n_paths`` paths and call ``visit`` once per chunk of steps.

    ``visit(k0, states, idx, jumps)`` receives the left-endpoint states of
    steps ``k0 .. k0+len(states)-1``, their control indices, and (when
    ``want_jumps``) a tuple ``(step, path, eta)`` of individual jumps landing
    at the end of each step.  Returns the terminal states.
    """
    dyn = problem.dynamics
    g = dyn.jump_scale
    x0 = problem.initial_state if x0 is None else float(x0)
    jumps_on = not problem.levy.is_null and g != 0.0
    if jumps_on:
        quad = quad or build_quadrature(problem.levy)
        sampler = JumpSampler.build(problem.levy, quad.small_cutoff, quad.z_max)
        lam_dt = sampler.rate * dt
        comp_drift = -g * sampler.compensator
        small_var = g * g * quad.small_variance if small_jumps else 0.0
    else:
        lam_dt, comp_drift, small_var = 0.0, 0.0, 0.0
    blocks = _blocks(n_paths)
    rngs = [np.random.default_rng([int(seed), b]) for b in range(len(blocks))]
    sqdt = math.sqrt(dt)
    controls = policy.controls
    x = np.full(n_paths, x0)
    for k0 in range(0, n_steps, CHUNK_STEPS):
        nk = min(CHUNK_STEPS, n_steps - k0)
        xi = np.empty((nk, n_paths))
        jump_sum = np.zeros((nk, n_paths))
        events = []
        for (lo, hi), rng in zip(blocks, rngs):
            width = hi - lo
            xi[:, lo:hi] = rng.standard_normal((nk, width))
            if lam_dt > 0.0:
                counts = rng.poisson(lam_dt, (nk, width)).ravel()
                hit = np.flatnonzero(counts)
                flat = np.repeat(hit, counts[hit])
                eta = g * sampler.sample(rng, flat.size)
                step, path = flat // width, lo + flat % width
                np.add.at(jump_sum, (step, path), eta)
                if want_jumps:
                    events.append((k0 + step, path, eta))
        states = np.empty((nk + 1, n_paths))
        idx = np.empty((nk, n_paths), dtype=np.intp)
        states[0] = x
        with np.errstate(over="ignore", invalid="ignore"):
            for j in range(nk):
                xj = states[j]
                i = policy.index(xj)
                idx[j] = i
                u = controls[i]
                sig = dyn.diffusion(xj, u)
                vol = np.sqrt(sig * sig + small_var)
                states[j + 1] = (xj + (dyn.drift(xj, u) + comp_drift) * dt
                                 + vol * sqdt * xi[j] + jump_sum[j])
            bad = ~(np.abs(states[1:]) <= EXPLOSION_BOUND)
        if bad.any():
            step = k0 + int(np.argmax(bad.any(axis=1))) + 1
            raise DivergenceError(
                f"state left [-{EXPLOSION_BOUND:g}, {EXPLOSION_BOUND:g}] at step {step} "
                f"(t = {step * dt:g})", step=step)
        if want_jumps and events:
            events = tuple(np.concatenate(parts) for parts in zip(*events))
        else:
            events = (np.empty(0, np.intp), np.empty(0, np.intp), np.empty(0))
        visit(k0, states[:-1], idx, events)
        x = states[-1]
    return x


# ---------------------------------------------------------------------------
# single paths


@dataclass
class PathSample:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    jump_log: list

    def to_csv(self, path):
        """Columns ``t, x, u, jump`` (total jump landing at that time)."""
        jumps = np.zeros(self.times.size)
        for t, size in self.jump_log:
            jumps[int(round(t / (self.times[1] - self.times[0])))] += size
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "x", "u", "jump"])
            for row in zip(self.times, self.states, self.controls, jumps):
                writer.writerow([repr(float(v)) for v in row])


def simulate_path(problem, policy, horizon, dt, seed=0, small_jumps=True, quad=None):
    """One Euler-Maruyama path; ``states[0]`` is the initial state."""
    n_steps = _n_steps(horizon, dt)
    states = np.empty(n_steps + 1)
    log = []

    def visit(k0, xs, idx, jumps):
        states[k0:k0 + xs.shape[0]] = xs[:, 0]
        for k, size in zip(jumps[0], jumps[2]):
            log.append(((int(k) + 1) * dt, float(size)))

    states[-1] = _run(problem, policy, 1, n_steps, dt, seed, visit, quad=quad,
                      small_jumps=small_jumps, want_jumps=True)[0]
    times = np.arange(n_steps + 1) * dt
    return PathSample(times, states, policy(states), sorted(log))


# ---------------------------------------------------------------------------
# occupation measure


class Estimate(NamedTuple):
    value: float
    std_error: float
    truncation_band: float

    def within(self, k=3.0):
        """``|value| <= k * std_error + truncation_band``."""
        return abs(self.value) <= k * self.std_error + self.truncation_band


def discount_weights(discount, n_steps, dt):
    """``w_k = int_{t_k}^{t_k + dt} e^{-c t} dt``, so ``sum w = (1 - e^{-cT}) / c``."""
    t = np.arange(n_steps) * dt
    return np.exp(-discount * t) * (-math.expm1(-discount * dt) / discount)


@dataclass
class OccupationEstimate:
    """Discounted occupation measure of a simulated feedback policy.

    ``step_sums[k, u, p]`` is ``sum over paths of x_k^p 1{u_k = u}`` (counts
    for ``p = 0``), ``block_sums[b, u, p]`` the discounted analogue summed
    over the steps of block ``b``.  Weights are the exact discount integrals
    over each step, divided by the number of paths.
    """

    horizon: float
    dt: float
    discount: float
    n_paths: int
    initial_state: float
    controls: np.ndarray
    weights: np.ndarray
    step_sums: np.ndarray
    block_sums: np.ndarray
    block_sizes: np.ndarray
    state_range: tuple
    terminal_states: np.ndarray
    jump_counts: np.ndarray
    atoms: np.ndarray | None = None
    seed: int = 0

    @property
    def max_power(self):
        return self.step_sums.shape[2] - 1

    @property
    def total_mass(self):
        return math.fsum(self.weights)

    @property
    def truncation_factor(self):
        return math.exp(-self.discount * self.horizon)

    def _coefficients(self, g):
        """Per-control monomial coefficients of ``g(., u)`` on the visited range."""
        lo, hi = self.state_range
        if hi - lo < 1e-12:
            lo, hi = lo - 1.0, hi + 1.0
        check = np.linspace(lo, hi, 4 * self.max_power + 5)
        coef = np.zeros((self.controls.size, self.max_power + 1))
        for iu, u in enumerate(self.controls):
            target = np.asarray(g(check, u), dtype=float) * np.ones_like(check)
            scale = 1.0 + np.max(np.abs(target))
            for deg in range(self.max_power + 1):
                if deg == 0:
                    c = np.array([float(np.asarray(g(np.array([0.5 * (lo + hi)]), u)).ravel()[0])])
                else:
                    nodes = 0.5 * (lo + hi) + 0.5 * (hi - lo) * chebyshev.chebpts1(deg + 1)
                    vals = np.asarray(g(nodes, u), dtype=float) * np.ones_like(nodes)
                    c = np.linalg.solve(np.vander(nodes, deg + 1, increasing=True), vals)
                fit = np.polynomial.polynomial.polyval(check, c)
                if np.max(np.abs(fit - target)) <= 1e-9 * scale:
                    coef[iu, : deg + 1] = c
                    break
            else:
                return None
        return coef

    def _from_atoms(self, g):
        x, iu, w = self.atoms[:, 0], self.atoms[:, 1].astype(np.intp), self.atoms[:, 2]
        vals = np.empty(x.size)
        for k, u in enumerate(self.controls):
            sel = iu == k
            if sel.any():
                vals[sel] = g(x[sel], u)
        return math.fsum(vals * w)

    def _estimate(self, g):
        coef = self._coefficients(g)
        if coef is None:
            if self.atoms is None:
                raise ValueError(
                    f"integrand is not a polynomial of degree <= {self.max_power} in the state; "
                    "re-run with record_atoms=True to integrate it")
            return self._from_atoms(g), math.nan
        inner = np.einsum("kup,up->k", self.step_sums, coef) / self.n_paths
        value = math.fsum(self.weights * inner)
        per_block = np.einsum("bup,up->b", self.block_sums, coef) / self.block_sizes
        nb = per_block.size
        if nb < 2:
            return value, math.nan
        share = self.block_sizes / self.n_paths
        se = math.sqrt(nb / (nb - 1) * np.sum(share**2 * (per_block - value) ** 2))
        return value, se

    def integrate(self, g):
        """``int g(x, u) gamma(dx, du)`` for ``g`` vectorized in ``x``."""
        return self._estimate(g)[0]

    def std_error(self, g):
        """Batch-means standard error of :meth:`integrate` across path blocks."""
        return self._estimate(g)[1]

    def terminal_mean(self, fn):
        return float(np.mean(fn(self.terminal_states)))

    def to_csv(self, path):
        """Atoms (``x, u, weight``) when recorded, otherwise the power sums."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            if self.atoms is not None:
                writer.writerow(["x", "u", "weight"])
                for x, iu, w in self.atoms:
                    writer.writerow([repr(float(x)), repr(float(self.controls[int(iu)])), repr(float(w))])
            else:
                writer.writerow(["u", "power", "moment"])
                totals = np.einsum("k,kup->up", self.weights, self.step_sums) / self.n_paths
                for iu, u in enumerate(self.controls):
                    for p in range(self.max_power + 1):
                        writer.writerow([repr(float(u)), p, repr(float(totals[iu, p]))])


def default_horizon(problem, tol=1e-4):
    """Smallest ``T`` with ``K e^{-cT} / c < tol``."""
    c, K = problem.discount, problem.cost.lipschitz_bound
    return max(math.log(K / (c * tol)) / c, 0.0) + 1e-12


def estimate_occupation(problem, policy, n_paths, horizon=None, dt=1e-3, seed=0,
                        max_power=MAX_DEGREE, record_atoms=False, small_jumps=True, quad=None):
    """Monte Carlo estimate of the discounted occupation measure of ``policy``."""
    n_paths = check_int(n_paths, "n_paths", minimum=1)
    max_power = check_int(max_power, "max_power", minimum=0, maximum=2 * MAX_DEGREE)
    horizon = default_horizon(problem) if horizon is None else horizon
    n_steps = _n_steps(horizon, dt)
    weights = discount_weights(problem.discount, n_steps, dt)
    controls = problem.controls.values
    if policy.controls.size != controls.size or not np.array_equal(policy.controls, controls):
        raise ValidationError("policy must use the problem's control grid")
    n_u, n_p = controls.size, max_power + 1
    blocks = _blocks(n_paths)
    block_of = np.repeat(np.arange(len(blocks)), [hi - lo for lo, hi in blocks])
    nb = len(blocks)
    step_sums = np.zeros((n_steps, n_u, n_p))
    block_sums = np.zeros((nb, n_u, n_p))
    jump_counts = np.zeros(n_paths, dtype=np.int64)
    seen = [math.inf, -math.inf]
    atoms = [] if record_atoms else None

    def visit(k0, xs, idx, jumps):
        nk = xs.shape[0]
        comb = ((np.arange(nk)[:, None] * nb + block_of[None, :]) * n_u + idx).ravel()
        size = nk * nb * n_u
        w = weights[k0:k0 + nk]
        power = np.ones(xs.size)
        flat = xs.ravel()
        for p in range(n_p):
            if p == 0:
                sums = np.bincount(comb, minlength=size).astype(float)
            else:
                power = power * flat
                sums = np.bincount(comb, weights=power, minlength=size)
            sums = sums.reshape(nk, nb, n_u)
            step_sums[k0:k0 + nk, :, p] = sums.sum(axis=1)
            block_sums[:, :, p] += np.einsum("k,kbu->bu", w, sums)
        seen[0] = min(seen[0], float(xs.min()))
        seen[1] = max(seen[1], float(xs.max()))
        jump_counts[:] += np.bincount(jumps[1], minlength=n_paths)
        if atoms is not None:
            atoms.append(np.column_stack([flat, idx.ravel(),
                                          np.repeat(w / n_paths, xs.shape[1])]))

    terminal = _run(problem, policy, n_paths, n_steps, dt, seed, visit, quad=quad,
                    small_jumps=small_jumps, want_jumps=True)
    return OccupationEstimate(
        horizon=n_steps * dt,
        dt=dt,
        discount=problem.discount,
        n_paths=n_paths,
        initial_state=problem.initial_state,
        controls=controls,
        weights=weights,
        step_sums=step_sums,
        block_sums=block_sums,
        block_sizes=np.array([hi - lo for lo, hi in blocks], dtype=float),
        state_range=(seen[0], seen[1]),
        terminal_states=terminal,
        jump_counts=jump_counts,
        atoms=np.concatenate(atoms) if atoms else None,
        seed=int(seed),
    )


def evaluate_cost(occ, problem):
    """``<h, gamma>`` with its standard error and the band ``K e^{-cT} / c``."""
    value, se = occ._estimate(problem.running_cost)
    band = problem.cost.lipschitz_bound * occ.truncation_factor / problem.discount
    return Estimate(value, se, band)


def check_adjoint_identity(occ, f, problem, quad):
    """Residual of ``int [c f - (A + J) f] d gamma = f(x0)``.

    The horizon cut leaves ``-e^{-cT} E f(X_T)`` in the residual; the band is
    ``e^{-cT} E|f(X_T)|`` plus a floating-point allowance.
    """
    from .generator import apply_constraint_operator

    def g(x, u):
        return apply_constraint_operator(f, x, u, problem, quad)

    integral, se = occ._estimate(g)
    f0 = float(f(occ.initial_state))
    band = occ.truncation_factor * occ.terminal_mean(lambda x: np.abs(f(x)))
    band += 1e-12 * (abs(f0) + abs(integral))
    return Estimate(integral - f0, se, band)


@dataclass
class MomentCheck:
    x0_values: np.ndarray
    moments: np.ndarray
    std_errors: np.ndarray
    constant: float
    p_exp: int
    holds: bool = field(default=True)

    @property
    def bounds(self):
        return self.constant * (1.0 + np.abs(self.x0_values) ** self.p_exp)

    @property
    def monotone(self):
        order = np.argsort(np.abs(self.x0_values), kind="stable")
        return bool(np.all(np.diff(self.moments[order]) >= -3 * np.hypot(
            self.std_errors[order][1:], self.std_errors[order][:-1])))


def moment_check(problem, policy, n_paths, horizon, dt, seed=0, p_exp=2, x0_values=None):
    """``E sup_{t <= T} |X_t|^p`` over a grid of initial states.

    ``C`` is the smallest constant with ``moment <= C (1 + |x0|^p)`` on the
    tested grid.
    """
    if p_exp not in (2, 4):
        raise ValidationError(f"p_exp must be 2 or 4, got {p_exp}")
    n_steps = _n_steps(horizon, dt)
    if x0_values is None:
        lo, hi = problem.box
        x0_values = np.clip(np.array([0.0, 0.5, 1.0, 2.0]) * max(1.0, abs(problem.initial_state)),
                            lo + 1e-6, hi - 1e-6)
    x0_values = np.asarray(x0_values, dtype=float)
    moments, errors = [], []
    for x0 in x0_values:
        run_max = np.full(n_paths, abs(x0))

        def visit(k0, xs, idx, jumps, run_max=run_max):
            np.maximum(run_max, np.abs(xs).max(axis=0), out=run_max)

        final = _run(problem, policy, n_paths, n_steps, dt, seed, visit, x0=x0)
        np.maximum(run_max, np.abs(final), out=run_max)
        sample = run_max**p_exp
        moments.append(float(sample.mean()))
        errors.append(float(sample.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0)
    moments, errors = np.array(moments), np.array(errors)
    constant = float(np.max(moments / (1.0 + np.abs(x0_values) ** p_exp)))
    holds = bool(np.all(moments <= constant * (1.0 + np.abs(x0_values) ** p_exp) * (1 + 1e-12)))
    return MomentCheck(x0_values, moments, errors, constant, p_exp, holds)


class OccupationMeasureEstimator(BaseEstimator):
    """Estimator wrapper: ``fit(problem, policy)`` simulates the occupation measure."""

    def __init__(self, n_paths=10_000, horizon=None, dt=1e-3, seed=0, max_power=MAX_DEGREE,
                 small_jumps=True):
        self.n_paths = n_paths
        self.horizon = horizon
        self.dt = dt
        self.seed = seed
        self.max_power = max_power
        self.small_jumps = small_jumps

    def fit(self, problem, policy=None):
        policy = policy or FeedbackPolicy.constant(problem)
        self.occupation_ = estimate_occupation(
            problem, policy, self.n_paths, self.horizon, self.dt, self.seed,
            max_power=self.max_power, small_jumps=self.small_jumps)
        self.problem_ = problem
        return self

    def integrate(self, g):
        check_fitted(self, "occupation_")
        return self.occupation_.integrate(g)

    def cost(self):
        check_fitted(self, "occupation_")
        return evaluate_cost(self.occupation_, self.problem_)
