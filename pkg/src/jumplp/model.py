"""Problem data: tempered-stable Levy measures, affine dynamics, costs.

All objects are immutable.  States and controls are one-dimensional; the
``state_dim`` field on :class:`ControlProblem` is carried so that a 2-D
extension does not need a new data model.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import mpmath
import numpy as np
from scipy import integrate, special

from ._validation import check_int, check_positive
from .exceptions import DomainError, ValidationError

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

REGIONS = ("small", "tail", "signed_tail", "all")


@dataclass(frozen=True)
class LevyMeasure:
    """Two-sided tempered-stable Levy measure.

    ``nu(dz) = c_plus e^{-lambda_plus z} z^{-1-alpha_plus} dz`` on ``z > 0`` and
    the mirrored expression with the ``minus`` parameters on ``z < 0``.
    ``c_plus == c_minus == 0`` is the null measure (pure diffusion).
    """

    c_plus: float = 0.0
    c_minus: float = 0.0
    lambda_plus: float = 1.0
    lambda_minus: float = 1.0
    alpha_plus: float = 0.5
    alpha_minus: float = 0.5

    def __post_init__(self):
        check_positive(self.c_plus, "c_plus", strict=False)
        check_positive(self.c_minus, "c_minus", strict=False)
        check_positive(self.lambda_plus, "lambda_plus")
        check_positive(self.lambda_minus, "lambda_minus")
        for name in ("alpha_plus", "alpha_minus"):
            alpha = getattr(self, name)
            if not np.isfinite(alpha) or alpha >= 2:
                raise ValidationError(f"{name} must be < 2, got {alpha!r}")

    @classmethod
    def null(cls):
        return cls()

    @property
    def is_null(self):
        return self.c_plus == 0 and self.c_minus == 0

    def sides(self):
        """Active half-lines as ``(sign, C, lambda, alpha)`` tuples."""
        out = []
        if self.c_plus > 0:
            out.append((1.0, self.c_plus, self.lambda_plus, self.alpha_plus))
        if self.c_minus > 0:
            out.append((-1.0, self.c_minus, self.lambda_minus, self.alpha_minus))
        return out

    def density(self, z):
        z = np.asarray(z, dtype=float)
        out = np.zeros_like(z)
        pos, neg = z > 0, z < 0
        if self.c_plus > 0:
            zp = z[pos]
            out[pos] = self.c_plus * np.exp(-self.lambda_plus * zp) * zp ** (-1.0 - self.alpha_plus)
        if self.c_minus > 0:
            zn = -z[neg]
            out[neg] = self.c_minus * np.exp(-self.lambda_minus * zn) * zn ** (-1.0 - self.alpha_minus)
        return out

    @property
    def min_tempering(self):
        rates = [lam for _, _, lam, _ in self.sides()]
        return min(rates) if rates else math.inf


def _half_line_closed(C, lam, alpha, p, lo, hi):
    """``C * int_lo^hi z^(p-1-alpha) e^(-lam z) dz`` via incomplete gamma."""
    s = p - alpha
    if lo == 0 and s <= 0:
        raise DomainError(f"z^{p} is not integrable at 0 for alpha={alpha}")
    if s > 0:
        scale = C * lam ** (-s) * special.gamma(s)
        x_lo, x_hi = lam * lo, lam * hi
        if x_hi <= s or x_lo == 0:
            lower_hi = special.gammainc(s, x_hi) if np.isfinite(x_hi) else 1.0
            return scale * (lower_hi - special.gammainc(s, x_lo))
        upper_hi = special.gammaincc(s, x_hi) if np.isfinite(x_hi) else 0.0
        return scale * (special.gammaincc(s, x_lo) - upper_hi)
    b = mpmath.inf if not np.isfinite(hi) else lam * hi
    return float(C * lam ** (-s) * mpmath.gammainc(s, lam * lo, b))


def _half_line_quad(C, lam, alpha, p, lo, hi):
    """Same integral by adaptive quadrature in the variable ``t = log z``."""
    s = p - alpha
    if lo == 0 and s <= 0:
        raise DomainError(f"z^{p} is not integrable at 0 for alpha={alpha}")
    t_lo = -np.inf if lo == 0 else math.log(lo)
    t_hi = np.inf if not np.isfinite(hi) else math.log(hi)

    def integrand(t):
        return math.exp(s * t - lam * math.exp(t)) if t < 700 else 0.0

    if np.isfinite(t_lo) and np.isfinite(t_hi):
        value, _ = integrate.quad(integrand, t_lo, t_hi, epsabs=0.0, epsrel=1e-13, limit=500)
        return C * value
    # split infinite ranges at the integrand's peak to help the adaptive rule
    pivot = math.log(max(s, 1e-3) / lam) if s > 0 else 0.0
    pivot = min(max(pivot, t_lo), t_hi)
    left, _ = integrate.quad(integrand, t_lo, pivot, epsabs=0.0, epsrel=1e-13, limit=500)
    right, _ = integrate.quad(integrand, pivot, t_hi, epsabs=0.0, epsrel=1e-13, limit=500)
    return C * (left + right)


def levy_integral(nu, p, lo, hi, signed=True, method="closed"):
    """``int_{lo <= |z| < hi} z^p nu(dz)`` (``|z|^p`` when ``signed`` is false)."""
    half_line = {"closed": _half_line_closed, "quad": _half_line_quad}[method]
    total = 0.0
    for sign, C, lam, alpha in nu.sides():
        if hi <= lo:
            continue
        value = half_line(C, lam, alpha, p, lo, hi)
        if signed and sign < 0 and p % 2 == 1:
            value = -value
        total += value
    return total


def levy_moment(nu, p, region="all", cutoff=1.0, method="closed"):
    """Moment of ``nu`` over a region split at ``|z| = cutoff``.

    ``small``, ``tail`` and ``all`` return absolute moments ``int |z|^p``;
    ``signed_tail`` returns ``int_{|z|>=cutoff} z^p`` with the sign kept.
    ``method`` selects the incomplete-gamma closed form or adaptive quadrature.
    """
    p = check_int(p, "p", minimum=0)
    if region not in REGIONS:
        raise ValueError(f"region must be one of {REGIONS}, got {region!r}")
    if method not in ("closed", "quad"):
        raise ValueError(f"method must be 'closed' or 'quad', got {method!r}")
    check_positive(cutoff, "cutoff")
    if region == "small":
        return levy_integral(nu, p, 0.0, cutoff, signed=False, method=method)
    if region == "tail":
        return levy_integral(nu, p, cutoff, np.inf, signed=False, method=method)
    if region == "signed_tail":
        return levy_integral(nu, p, cutoff, np.inf, signed=True, method=method)
    return levy_integral(nu, p, 0.0, np.inf, signed=False, method=method)


def validate_levy_measure(nu, m):
    """Exponential tail moment ``int_{|z|>=1} e^{m|z|} nu(dz)``.

    Raises :class:`ValidationError` naming the tail when the integral diverges.
    """
    m = check_positive(m, "m")
    total = 0.0
    for sign, C, lam, alpha in nu.sides():
        if m >= lam:
            tail = "positive" if sign > 0 else "negative"
            raise ValidationError(
                f"exponential moment diverges on the {tail} tail: m={m} >= lambda={lam}"
            )
        value, _ = integrate.quad(
            lambda z: math.exp((m - lam) * z) * z ** (-1.0 - alpha),
            1.0,
            np.inf,
            epsabs=0.0,
            epsrel=1e-12,
            limit=400,
        )
        total += C * value
    return total


@dataclass(frozen=True)
class ControlGrid:
    points: tuple

    def __post_init__(self):
        pts = tuple(float(u) for u in self.points)
        if not pts:
            raise ValidationError("control grid must be non-empty")
        if not all(np.isfinite(pts)):
            raise ValidationError("control grid points must be finite")
        if any(b <= a for a, b in zip(pts, pts[1:])):
            raise ValidationError("control grid must be strictly increasing without duplicates")
        object.__setattr__(self, "points", pts)

    @classmethod
    def uniform(cls, lo, hi, n):
        n = check_int(n, "n_control", minimum=1)
        if n == 1:
            return cls((0.5 * (lo + hi),))
        return cls(tuple(np.linspace(lo, hi, n)))

    @property
    def values(self):
        return np.asarray(self.points)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class Dynamics:
    """Affine coefficients.

    drift ``b(x,u) = a x + beta u + b0``, diffusion ``sigma(x,u) = s + s_x x``,
    jump ``eta(x,u,z) = g z``.
    """

    a: float = 0.0
    beta: float = 0.0
    b0: float = 0.0
    s: float = 0.0
    s_x: float = 0.0
    g: float = 0.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not np.isfinite(value):
                raise ValidationError(f"dynamics coefficient {name} must be finite")

    def drift(self, x, u):
        return self.a * np.asarray(x, dtype=float) + self.beta * np.asarray(u, dtype=float) + self.b0

    def diffusion(self, x, u):
        x = np.asarray(x, dtype=float)
        return self.s + self.s_x * x + 0.0 * np.asarray(u, dtype=float)

    def jump_coeff(self, x, u, z):
        shape = np.broadcast(np.asarray(x), np.asarray(u), np.asarray(z)).shape
        return np.broadcast_to(self.g * np.asarray(z, dtype=float), shape)

    @property
    def jump_depends_on_control(self):
        return False

    @property
    def jump_scale(self):
        """``d eta / d z`` at ``z = 0`` (the small-jump linearization)."""
        return self.g

    @property
    def is_null(self):
        return self.a == self.beta == self.b0 == self.s == self.s_x == self.g == 0


@dataclass(frozen=True)
class CostModel:
    """Running cost ``h(x,u) = q x^2 + r u^2 + h0`` with constant discount."""

    q: float = 1.0
    r: float = 1.0
    h0: float = 0.0
    discount: float = 1.0
    lipschitz_bound: float = 60.0

    def __post_init__(self):
        if not (isinstance(self.discount, (int, float)) and self.discount > 0):
            raise ValidationError("discount must be positive")
        check_positive(self.lipschitz_bound, "lipschitz_bound")
        for name in ("q", "r", "h0"):
            if not np.isfinite(getattr(self, name)):
                raise ValidationError(f"cost coefficient {name} must be finite")

    def running_cost(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return self.q * x * x + self.r * u * u + self.h0


@dataclass(frozen=True)
class ControlProblem:
    name: str
    dynamics: Dynamics
    cost: CostModel
    levy: LevyMeasure
    controls: ControlGrid
    box: tuple
    initial_state: float
    state_dim: int = 1
    noise_dim: int = 1

    def __post_init__(self):
        lo, hi = (float(v) for v in self.box)
        if not (np.isfinite(lo) and np.isfinite(hi) and hi > lo):
            raise ValidationError(f"state box must be a non-degenerate interval, got {self.box!r}")
        object.__setattr__(self, "box", (lo, hi))
        x0 = float(self.initial_state)
        if not lo < x0 < hi:
            raise ValidationError(f"initial_state {x0} must lie strictly inside the box [{lo}, {hi}]")
        object.__setattr__(self, "initial_state", x0)
        if self.state_dim != 1 or self.noise_dim != 1:
            raise ValidationError("only state_dim = noise_dim = 1 is implemented")

    @property
    def discount(self):
        return self.cost.discount

    def running_cost(self, x, u):
        return self.cost.running_cost(x, u)


# ---------------------------------------------------------------------------
# (A2)/(A3) sampling checks


@dataclass
class AssumptionCheck:
    name: str
    passed: bool
    value: float
    bound: float
    detail: str = ""


@dataclass
class ValidationReport:
    problem: str
    checks: list = field(default_factory=list)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def check(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self):
        checks = []
        for c in self.checks:
            checks.append(
                {
                    "name": c.name,
                    "passed": bool(c.passed),
                    "value": float(c.value) if np.isfinite(c.value) else None,
                    "bound": float(c.bound) if np.isfinite(c.bound) else None,
                    "detail": c.detail,
                }
            )
        return {"problem": self.problem, "passed": bool(self.passed), "checks": checks}

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


def _sup_and_lipschitz(fn, xs, us):
    vals = fn(xs[:, None], us[None, :])
    sup = float(np.max(np.abs(vals)))
    ratios = np.abs(np.diff(vals, axis=0)) / np.diff(xs)[:, None]
    return sup, float(np.max(ratios)) if ratios.size else 0.0


def validate_problem(p, n_states=201, n_jumps=200, m=None):
    """Sample ``(x, u, z)`` and compare the coefficient norms against ``K``.

    ``|phi|_1`` is read as ``sup|phi| + Lipschitz(phi)`` on the state box.
    """
    K = p.cost.lipschitz_bound
    xs = np.linspace(p.box[0], p.box[1], n_states)
    us = p.controls.values
    report = ValidationReport(problem=p.name)

    b_sup, b_lip = _sup_and_lipschitz(p.dynamics.drift, xs, us)
    s_sup, s_lip = _sup_and_lipschitz(p.dynamics.diffusion, xs, us)
    h_sup, h_lip = _sup_and_lipschitz(p.cost.running_cost, xs, us)
    total = b_sup + b_lip + s_sup + s_lip + p.discount + h_sup + h_lip
    report.checks.append(
        AssumptionCheck(
            "A2",
            total <= K,
            total,
            K,
            f"|b|_1={b_sup + b_lip:.6g} |sigma|_1={s_sup + s_lip:.6g} "
            f"|c|_1={p.discount:.6g} |h|_1={h_sup + h_lip:.6g}; "
            f"max Lipschitz ratios b={b_lip:.6g} sigma={s_lip:.6g} h={h_lip:.6g}",
        )
    )

    if m is None:
        m = 0.5 * p.levy.min_tempering if not p.levy.is_null else 1.0
    zs = np.geomspace(1e-3, 50.0, n_jumps)
    zs = np.concatenate([-zs[::-1], zs])
    eta = p.dynamics.jump_coeff(xs[:, None, None], us[None, :, None], zs[None, None, :])
    eta_sup = np.max(np.abs(eta), axis=(0, 1))
    eta_lip = np.max(np.abs(np.diff(eta, axis=0)) / np.diff(xs)[:, None, None], axis=(0, 1))
    az = np.abs(zs)
    envelope = np.where(az < 1, az, np.exp(m * az))
    ratio = float(np.max((eta_sup + eta_lip) / envelope))
    report.checks.append(
        AssumptionCheck("A3", ratio <= K, ratio, K, f"max |eta|_1 / envelope with m={m:.6g}")
    )

    if p.levy.is_null:
        a1 = AssumptionCheck("A1", True, 0.0, math.inf, "null measure")
    else:
        try:
            val = validate_levy_measure(p.levy, m)
            a1 = AssumptionCheck("A1", np.isfinite(val), val, math.inf, f"m={m:.6g}")
        except ValidationError as exc:
            a1 = AssumptionCheck("A1", False, math.inf, math.inf, str(exc))
    report.checks.insert(0, a1)
    return report


# ---------------------------------------------------------------------------
# registry and configuration

_LQ_JUMP = {
    "problem": {"name": "lq_jump", "x0": 1.0},
    "levy": {"C1": 0.5, "C2": 0.5, "lambda1": 2.0, "lambda2": 2.0, "alpha1": 0.5, "alpha2": 0.5},
    "dynamics": {"a": -0.5, "beta": 1.0, "b0": 0.0, "s": 0.3, "s_x": 0.0, "g": 1.0},
    "cost": {"q": 1.0, "r": 1.0, "h0": 0.0, "c": 1.0, "K": 60.0},
    "grid": {"x_min": -6.0, "x_max": 6.0, "n_control": 21, "u_min": -1.5, "u_max": 1.5},
}


def _variant(name, **sections):
    cfg = copy.deepcopy(_LQ_JUMP)
    cfg["problem"]["name"] = name
    for section, values in sections.items():
        cfg[section].update(values)
    return cfg


REGISTRY = {
    "lq_jump": _variant("lq_jump"),
    "lq": _variant("lq", levy={"C1": 0.0, "C2": 0.0}, dynamics={"g": 0.0}),
    "lq_jump_asym": _variant(
        "lq_jump_asym",
        levy={"C1": 0.8, "C2": 0.3, "lambda1": 3.0, "lambda2": 2.0, "alpha1": 0.5, "alpha2": 0.8},
    ),
    "degenerate": _variant(
        "degenerate",
        levy={"C1": 0.0, "C2": 0.0},
        dynamics={"a": 0.0, "beta": 0.0, "b0": 0.0, "s": 0.0, "s_x": 0.0, "g": 0.0},
    ),
}

_KNOWN_KEYS = {
    "problem": {"name", "x0"},
    "levy": {"C1", "C2", "lambda1", "lambda2", "alpha1", "alpha2"},
    "dynamics": {"a", "beta", "b0", "s", "s_x", "g"},
    "cost": {"q", "r", "h0", "c", "K"},
    "grid": {"x_min", "x_max", "n_control", "u_min", "u_max", "n_state"},
}


def load_config(path):
    """Parse a TOML configuration file into a plain dict."""
    with open(Path(path), "rb") as fh:
        return tomllib.load(fh)


def resolve_config(config):
    """Merge a (possibly partial) configuration over its registry defaults."""
    config = config or {}
    name = config.get("problem", {}).get("name", "lq_jump")
    if name not in REGISTRY:
        raise ValidationError(f"unknown problem {name!r}; known: {sorted(REGISTRY)}")
    merged = copy.deepcopy(REGISTRY[name])
    for section, values in config.items():
        if section in _KNOWN_KEYS:
            unknown = set(values) - _KNOWN_KEYS[section]
            if unknown:
                raise ValidationError(f"unknown keys in [{section}]: {sorted(unknown)}")
            merged[section].update(values)
        else:
            merged[section] = copy.deepcopy(values)
    return merged


def build_problem(config=None):
    """Build a validated :class:`ControlProblem` from a configuration dict.

    ``config`` follows the TOML layout (``[problem]``, ``[levy]``,
    ``[dynamics]``, ``[cost]``, ``[grid]``); missing entries fall back to the
    registry defaults of the named problem.
    """
    cfg = resolve_config(config)
    lv, dy, co, gr = cfg["levy"], cfg["dynamics"], cfg["cost"], cfg["grid"]
    try:
        levy = LevyMeasure(
            c_plus=float(lv["C1"]),
            c_minus=float(lv["C2"]),
            lambda_plus=float(lv["lambda1"]),
            lambda_minus=float(lv["lambda2"]),
            alpha_plus=float(lv["alpha1"]),
            alpha_minus=float(lv["alpha2"]),
        )
        dynamics = Dynamics(**{k: float(v) for k, v in dy.items()})
        if float(co["c"]) <= 0:
            raise ValidationError("discount must be positive")
        cost = CostModel(
            q=float(co["q"]),
            r=float(co["r"]),
            h0=float(co["h0"]),
            discount=float(co["c"]),
            lipschitz_bound=float(co["K"]),
        )
        controls = ControlGrid.uniform(float(gr["u_min"]), float(gr["u_max"]), gr["n_control"])
        return ControlProblem(
            name=cfg["problem"]["name"],
            dynamics=dynamics,
            cost=cost,
            levy=levy,
            controls=controls,
            box=(float(gr["x_min"]), float(gr["x_max"])),
            initial_state=float(cfg["problem"]["x0"]),
        )
    except ValidationError as exc:
        raise ValidationError(f"invalid configuration for {cfg['problem']['name']!r}: {exc}") from exc
