"""Local and nonlocal generators, the LP constraint operator and the Hamiltonian.

Every operator accepts any *evaluable* function: an object that is callable
on arrays and exposes ``deriv(x, order)`` for ``order`` in ``(1, 2)``.
:class:`TestFunction` (polynomials) and the mollified certificates of
:mod:`jumplp.dual` both qualify.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.polynomial import polynomial as P

from ._validation import check_int
from .exceptions import ConfigurationError
from .model import levy_integral, levy_moment

MAX_DEGREE = 6


class TestFunction:
    """Polynomial ``sum_k coefficients[k] x^k`` with exact derivatives."""

    __test__ = False  # keep pytest from collecting this class

    def __init__(self, coefficients):
        coef = np.atleast_1d(np.asarray(coefficients, dtype=float))
        if coef.ndim != 1 or coef.size == 0:
            raise ValueError("coefficients must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(coef)):
            raise ValueError("coefficients must be finite")
        if coef.size - 1 > MAX_DEGREE:
            raise ValueError(f"degree {coef.size - 1} exceeds the supported maximum {MAX_DEGREE}")
        self.coefficients = coef
        self.coefficients.setflags(write=False)

    @classmethod
    def monomial(cls, k):
        coef = np.zeros(k + 1)
        coef[k] = 1.0
        return cls(coef)

    @property
    def degree(self):
        return self.coefficients.size - 1

    def __call__(self, x):
        return P.polyval(np.asarray(x, dtype=float), self.coefficients)

    def deriv(self, x, order=1):
        return P.polyval(np.asarray(x, dtype=float), P.polyder(self.coefficients, order))

    def __add__(self, other):
        if isinstance(other, TestFunction):
            return TestFunction(P.polyadd(self.coefficients, other.coefficients))
        coef = self.coefficients.copy()
        coef[0] += float(other)
        return TestFunction(coef)

    __radd__ = __add__

    def __mul__(self, scalar):
        return TestFunction(self.coefficients * float(scalar))

    __rmul__ = __mul__

    def __repr__(self):
        return f"TestFunction({self.coefficients.tolist()})"


@dataclass(frozen=True)
class JumpQuadrature:
    """Discretization of the Levy measure used inside the jump generator.

    Jumps with ``|z| < small_cutoff`` enter through ``small_variance`` only.
    ``mid_*`` covers ``small_cutoff <= |z| < 1`` (compensated), ``tail_*``
    covers ``1 <= |z| <= z_max``.  Nodes carry their sign.
    """

    small_cutoff: float
    small_variance: float
    mid_nodes: np.ndarray
    mid_weights: np.ndarray
    tail_nodes: np.ndarray
    tail_weights: np.ndarray
    tail_bound: float
    z_max: float

    @property
    def nodes(self):
        return np.concatenate([self.mid_nodes, self.tail_nodes])

    @property
    def weights(self):
        return np.concatenate([self.mid_weights, self.tail_weights])

    @property
    def compensator(self):
        """``int_{r0 <= |z| < 1} z nu(dz)``."""
        return float(np.dot(self.mid_weights, self.mid_nodes))

    @property
    def rate(self):
        """Total mass of the discretized measure on ``r0 <= |z| <= z_max``."""
        return float(self.mid_weights.sum() + self.tail_weights.sum())

    def moment(self, p):
        return float(np.dot(self.weights, self.nodes**p))

    def to_dict(self):
        return {
            "small_cutoff": self.small_cutoff,
            "small_variance": self.small_variance,
            "z_max": self.z_max,
            "tail_bound": self.tail_bound,
            "n_mid": int(self.mid_nodes.size),
            "n_tail": int(self.tail_nodes.size),
            "rate": self.rate,
            "compensator": self.compensator,
            "second_moment": self.moment(2) + self.small_variance,
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


def _weighted_tail(nu, z_max, degree=MAX_DEGREE):
    """``int_{|z| > z_max} (1 + |z|)^degree nu(dz)``."""
    return sum(
        math.comb(degree, k) * levy_integral(nu, k, z_max, np.inf, signed=False)
        for k in range(degree + 1)
    )


def default_z_max(nu, tol=1e-10):
    """Smallest ``z_max`` (on a 1.25-geometric ladder from 2) with a negligible tail."""
    z = 2.0
    if nu.is_null:
        return z
    while _weighted_tail(nu, z) >= tol:
        z *= 1.25
        if z > 1e6:
            raise ConfigurationError("could not find a truncation point for the Levy measure")
    return z


def _log_gauss(lo, hi, n_nodes, n_panels):
    """Composite Gauss-Legendre nodes/weights in ``t = log z`` on ``[lo, hi]``."""
    per_panel = max(n_nodes // n_panels, 2)
    x, w = np.polynomial.legendre.leggauss(per_panel)
    edges = np.linspace(math.log(lo), math.log(hi), n_panels + 1)
    t, wt = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        t.append(0.5 * (b - a) * x + 0.5 * (a + b))
        wt.append(0.5 * (b - a) * w)
    t, wt = np.concatenate(t), np.concatenate(wt)
    z = np.exp(t)
    return z, wt * z


def build_quadrature(nu, r0=0.01, z_max=None, n_nodes=64, n_panels=4, tail_tol=1e-10):
    """Precompute quadrature nodes and weights for ``nu``."""
    if z_max is None:
        z_max = default_z_max(nu, tail_tol)
    if not 0 < r0 < 1 < z_max:
        raise ConfigurationError(f"need 0 < r0 < 1 < z_max, got r0={r0}, z_max={z_max}")
    n_nodes = check_int(n_nodes, "n_nodes", minimum=8)
    tail_bound = levy_integral(nu, 0, z_max, np.inf, signed=False)
    if tail_bound > tail_tol:
        raise ConfigurationError(
            f"Levy mass beyond z_max={z_max} is {tail_bound:.3e} > {tail_tol:.1e}; increase z_max"
        )
    small_variance = levy_moment(nu, 2, "small", cutoff=r0) if not nu.is_null else 0.0

    mid_z, mid_w, tail_z, tail_w = [], [], [], []
    for sign in (1.0, -1.0):
        zm, wm = _log_gauss(r0, 1.0, n_nodes, n_panels)
        zt, wt = _log_gauss(1.0, z_max, n_nodes, n_panels)
        mid_z.append(sign * zm)
        mid_w.append(wm * nu.density(sign * zm))
        tail_z.append(sign * zt)
        tail_w.append(wt * nu.density(sign * zt))
    return JumpQuadrature(
        small_cutoff=float(r0),
        small_variance=float(small_variance),
        mid_nodes=np.concatenate(mid_z),
        mid_weights=np.concatenate(mid_w),
        tail_nodes=np.concatenate(tail_z),
        tail_weights=np.concatenate(tail_w),
        tail_bound=float(tail_bound),
        z_max=float(z_max),
    )


def apply_local_generator(f, x, u, dyn):
    """``b f' + (1/2) sigma^2 f''`` evaluated pointwise."""
    x = np.asarray(x, dtype=float)
    sigma = dyn.diffusion(x, u)
    return dyn.drift(x, u) * f.deriv(x, 1) + 0.5 * sigma * sigma * f.deriv(x, 2)


def _jump_part(values, x, u, dyn, quad, f_x, df_x, d2f_x):
    """Shared body of the jump generator given ``f`` and its derivatives at ``x``."""
    x, u = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(u, dtype=float))
    shape = x.shape
    xf, uf = x.ravel(), u.ravel()
    f_x = np.broadcast_to(f_x, shape).ravel()
    df_x = np.broadcast_to(df_x, shape).ravel()
    d2f_x = np.broadcast_to(d2f_x, shape).ravel()
    g = dyn.jump_scale
    out = 0.5 * quad.small_variance * g * g * d2f_x
    if quad.mid_nodes.size:
        eta = dyn.jump_coeff(xf[:, None], uf[:, None], quad.mid_nodes[None, :])
        integrand = values(xf[:, None] + eta) - f_x[:, None] - eta * df_x[:, None]
        out = out + integrand @ quad.mid_weights
    if quad.tail_nodes.size:
        eta = dyn.jump_coeff(xf[:, None], uf[:, None], quad.tail_nodes[None, :])
        integrand = values(xf[:, None] + eta) - f_x[:, None]
        out = out + integrand @ quad.tail_weights
    return np.reshape(out, shape)


def apply_jump_generator(f, x, u, dyn, quad):
    """Nonlocal operator ``J^u f(x)``.

    Small jumps contribute ``(1/2) sigma_small^2 g^2 f''``; the middle region
    uses the compensated integrand and the tail the uncompensated one.
    """
    x = np.asarray(x, dtype=float)
    return _jump_part(f, x, u, dyn, quad, f(x), f.deriv(x, 1), f.deriv(x, 2))


def apply_constraint_operator(f, x, u, p, quad):
    """``c f - (A^u + J^u) f``, the adjoint of the LP constraint map."""
    x = np.asarray(x, dtype=float)
    return (
        p.discount * f(x)
        - apply_local_generator(f, x, u, p.dynamics)
        - apply_jump_generator(f, x, u, p.dynamics, quad)
    )


@dataclass(frozen=True)
class SecondOrderState:
    """Arguments of the Hamiltonian: point, value, gradient, Hessian, function."""

    x: object
    r: object
    p: object
    X: object
    nonlocal_fn: Callable


def hamiltonian_table(s, problem, quad):
    """Bracket of the Hamiltonian for every control; last axis indexes controls.

    ``r``, ``p`` and ``X`` enter the local part only; the nonlocal term is
    ``J^u`` applied to ``nonlocal_fn`` itself.
    """
    x = np.asarray(s.x, dtype=float)
    r = np.broadcast_to(np.asarray(s.r, dtype=float), x.shape)
    grad = np.broadcast_to(np.asarray(s.p, dtype=float), x.shape)
    hess = np.broadcast_to(np.asarray(s.X, dtype=float), x.shape)
    us = problem.controls.values
    xs = x[..., None]
    dyn = problem.dynamics
    sigma = dyn.diffusion(xs, us)
    fn = s.nonlocal_fn
    f_x, df_x, d2f_x = fn(x), fn.deriv(x, 1), fn.deriv(x, 2)
    if dyn.jump_depends_on_control:
        shape = x.shape + us.shape
        jump = _jump_part(fn, np.broadcast_to(xs, shape), np.broadcast_to(us, shape), dyn, quad,
                          f_x[..., None], df_x[..., None], d2f_x[..., None])
    else:
        jump = _jump_part(fn, x, us[0], dyn, quad, f_x, df_x, d2f_x)[..., None]
    return (
        problem.discount * r[..., None]
        - problem.running_cost(xs, us)
        - dyn.drift(xs, us) * grad[..., None]
        - 0.5 * sigma * sigma * hess[..., None]
        - jump
    )


def hamiltonian(s, problem, quad):
    """Maximum over the control grid of the Hamiltonian bracket.

    Returns ``(value, argmax)``; ties resolve to the smallest control index.
    """
    table = hamiltonian_table(s, problem, quad)
    idx = np.argmax(table, axis=-1)
    value = np.take_along_axis(table, idx[..., None], axis=-1)[..., 0]
    if value.ndim == 0:
        return float(value), int(idx)
    return value, idx
