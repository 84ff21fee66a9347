"""Three-way cross-validation of primal, dual and HJB values, plus reports.

A benchmark configuration is the problem TOML layout with optional extra
sections::

    [primal]    n_state, max_degree, rel_delta
    [hjb]       n_state, n_shift
    [dual]      eps, kappa, h_ratio, feas_tol
    [sim]       paths, horizon, dt, seed
    [benchmark] gap_tol, weak_duality_tol

``[grid] n_state`` sets every state grid at once.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .dual import DualParams, HJBParams, StateGrid, dual_value, solve_hjb
from .exceptions import ConfigurationError, MonotonicityError, StageError, WeakDualityError
from .generator import build_quadrature
from .model import build_problem, levy_moment, resolve_config
from .primal import PrimalParams, primal_value
from .simulator import estimate_occupation, evaluate_cost

DEFAULTS = {
    "primal": {"n_state": 401, "max_degree": 4, "rel_delta": 1e-6},
    "hjb": {"n_state": 401, "n_shift": 5},
    "dual": {"eps": 0.05, "kappa": 0.05, "h_ratio": 4.0, "feas_tol": 1e-6},
    "sim": {"paths": 2000, "horizon": None, "dt": 0.01, "seed": 0},
    "benchmark": {"gap_tol": 0.05, "weak_duality_tol": 1e-6},
}


class LQSolution(NamedTuple):
    P: float
    R: float
    S: float
    value: Callable

    def feedback(self, x, beta, r):
        """Unconstrained optimal control ``-beta (2 P x + R) / (2 r)``."""
        return -beta * (2.0 * self.P * np.asarray(x, dtype=float) + self.R) / (2.0 * r)


def analytic_lq_jump(a, beta, s, q, r, c, m1, m2):
    """Quadratic value ``P x^2 + R x + S`` of the scalar LQ problem with jumps.

    ``m1`` is the signed first moment of the jumps with ``|z| >= 1`` and
    ``m2`` the full second moment.
    """
    if c <= 0:
        raise ConfigurationError("discount must be positive")
    if beta != 0 and r <= 0:
        raise ConfigurationError("control cost r must be positive when beta != 0")
    k = beta * beta / r if beta != 0 else 0.0
    lin = c - 2.0 * a
    if k > 0:
        disc = lin * lin + 4.0 * k * q
        if disc < 0:
            raise ConfigurationError("Riccati equation has no real root")
        P = (-lin + math.sqrt(disc)) / (2.0 * k)
    else:
        if lin <= 0:
            raise ConfigurationError("need c > 2a for a positive Riccati root without control")
        P = q / lin
    if P < 0 or (q > 0 and P <= 0):
        raise ConfigurationError(f"Riccati root P={P} is not positive")
    denom = c - a + k * P
    if denom <= 0:
        raise ConfigurationError("need c - a + beta^2 P / r > 0")
    R = 2.0 * P * m1 / denom
    S = (s * s * P + R * m1 + P * m2 - (k * R * R / 4.0)) / c

    def value(x):
        x = np.asarray(x, dtype=float)
        return P * x * x + R * x + S

    return LQSolution(P, R, S, value)


def lq_oracle(problem):
    """Analytic value at ``x0`` when the problem is in the LQ family, else ``None``."""
    dyn, cost = problem.dynamics, problem.cost
    if dyn.s_x != 0 or dyn.b0 != 0:
        return None
    g = dyn.g
    if problem.levy.is_null or g == 0:
        m1 = m2 = 0.0
    else:
        m1 = g * levy_moment(problem.levy, 1, "signed_tail")
        m2 = g * g * levy_moment(problem.levy, 2, "all")
    try:
        sol = analytic_lq_jump(dyn.a, dyn.beta, dyn.s, cost.q, cost.r, cost.discount, m1, m2)
    except ConfigurationError:
        return None
    return float(sol.value(problem.initial_state)) + cost.h0 / cost.discount


def benchmark_config(config=None):
    """Problem configuration merged with the stage defaults."""
    cfg = resolve_config(config or {})
    for section, values in DEFAULTS.items():
        merged = dict(values)
        merged.update(cfg.get(section, {}))
        unknown = set(merged) - set(values)
        if unknown:
            raise ConfigurationError(f"unknown keys in [{section}]: {sorted(unknown)}")
        cfg[section] = merged
    n_state = cfg["grid"].get("n_state")
    if n_state is not None:
        for section in ("primal", "hjb"):
            if "n_state" not in (config or {}).get(section, {}):
                cfg[section]["n_state"] = int(n_state)
    return cfg


def _relative(a, b, ref):
    ref = abs(ref)
    return abs(a - b) / ref if ref > 0 else abs(a - b)


@dataclass
class BenchmarkResult:
    """One row of the cross-validation.

    Construction asserts weak duality, ``rho_dual <= rho_primal + budget``.
    """

    problem: str
    x0: float
    rho_primal: float
    rho_dual: float
    v_hjb: float
    v_analytic: float | None
    gaps: dict
    tolerances: dict
    checks: dict
    seeds: dict
    grid_sizes: dict
    monte_carlo: dict
    diagnostics: dict
    config: dict
    runtimes: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        budget = self.tolerances["delta_budget"] + self.tolerances["weak_duality_tol"]
        if not self.rho_dual <= self.rho_primal + budget:
            raise WeakDualityError(
                f"{self.problem}: dual bound {self.rho_dual!r} exceeds primal value "
                f"{self.rho_primal!r} by {self.rho_dual - self.rho_primal:.3e} > budget {budget:.3e}")

    @property
    def passed(self):
        return all(self.checks.values())

    def to_dict(self, include_runtimes=True):
        out = asdict(self)
        if not include_runtimes:
            out.pop("runtimes")
        return out

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls)}
        return cls(**{k: copy.deepcopy(v) for k, v in data.items() if k in names})


def _stage(name, fn, runtimes):
    start = time.perf_counter()
    try:
        out = fn()
    except (WeakDualityError, MonotonicityError):
        raise
    except Exception as exc:  # noqa: BLE001 - surfaced with the stage name
        raise StageError(name, exc) from exc
    runtimes[name] = time.perf_counter() - start
    return out


def run_benchmark(config=None, seed=None):
    """Primal, HJB, dual, Monte Carlo and oracle stages on one problem."""
    cfg = benchmark_config(config)
    if seed is not None:
        cfg["sim"]["seed"] = int(seed)
    runtimes = {}
    problem = _stage("problem", lambda: build_problem(cfg), runtimes)
    pc, hc, dc, sc, bc = (cfg[k] for k in ("primal", "hjb", "dual", "sim", "benchmark"))
    quad = _stage("quadrature", lambda: build_quadrature(problem.levy), runtimes)

    rho, sol, pdiag = _stage("primal", lambda: primal_value(
        problem, PrimalParams(n_state=int(pc["n_state"]), max_degree=int(pc["max_degree"]),
                              rel_delta=float(pc["rel_delta"])), quad), runtimes)
    if sol.status != "optimal":
        raise StageError("primal", f"LP status {sol.status}")

    hparams = HJBParams(n_shift=int(hc["n_shift"]))
    grid = StateGrid.for_problem(problem, int(hc["n_state"]))
    vf = _stage("hjb", lambda: solve_hjb(problem, grid, hparams, quad), runtimes)
    v_hjb = float(vf(problem.initial_state))

    dparams = DualParams(hjb=hparams, h_ratio=float(dc["h_ratio"]), feas_tol=float(dc["feas_tol"]))
    rho_star, cert = _stage("dual", lambda: dual_value(
        problem, float(dc["eps"]), float(dc["kappa"]), grid, dparams, quad), runtimes)

    v_exact = _stage("oracle", lambda: lq_oracle(problem), runtimes)

    monte_carlo = {}
    if int(sc["paths"]) > 0:
        def simulate():
            occ = estimate_occupation(problem, vf.policy, int(sc["paths"]), sc["horizon"],
                                      float(sc["dt"]), int(sc["seed"]), max_power=2, quad=quad)
            return evaluate_cost(occ, problem)

        est = _stage("simulate", simulate, runtimes)
        monte_carlo = {"cost": est.value, "std_error": est.std_error,
                       "truncation_band": est.truncation_band}

    gaps = {
        "primal_dual": _relative(rho, rho_star, v_hjb),
        "primal_hjb": _relative(rho, v_hjb, v_hjb),
        "dual_hjb": _relative(rho_star, v_hjb, v_hjb),
    }
    gaps["max_pairwise"] = max(gaps.values())
    if v_exact is not None:
        gaps["hjb_analytic"] = _relative(v_hjb, v_exact, v_exact)
    tolerances = {
        "delta_budget": pdiag["delta_budget"],
        "weak_duality_tol": float(bc["weak_duality_tol"]),
        "gap_tol": float(bc["gap_tol"]),
        "hjb_tol": hparams.tol,
        "feasibility_tol": cert.tolerance,
    }
    checks = {
        "lp_optimal": sol.status == "optimal",
        "certificate_feasible": cert.feasible,
        "dual_below_hjb": rho_star <= v_hjb + tolerances["weak_duality_tol"],
        "gap_within_tol": gaps["max_pairwise"] <= tolerances["gap_tol"],
    }
    return BenchmarkResult(
        problem=problem.name,
        x0=problem.initial_state,
        rho_primal=float(rho),
        rho_dual=float(rho_star),
        v_hjb=v_hjb,
        v_analytic=v_exact,
        gaps=gaps,
        tolerances=tolerances,
        checks=checks,
        seeds={"sim": int(sc["seed"])},
        grid_sizes={"primal_state": int(pc["n_state"]), "hjb_state": int(hc["n_state"]),
                    "control": len(problem.controls), "max_degree": int(pc["max_degree"]),
                    "lp_rows": pdiag["shape"][0], "lp_columns": pdiag["shape"][1]},
        monte_carlo=monte_carlo,
        diagnostics={"eps": float(dc["eps"]), "kappa": float(dc["kappa"]),
                     "margin": cert.margin, "shift": cert.shift,
                     "hjb_iterations": vf.info["iterations"], "hjb_residual": vf.info["residual"],
                     "lp_iterations": sol.iterations, "lp_mass": pdiag["mass"],
                     "lp_support": len(pdiag["support"])},
        config=cfg,
        runtimes=runtimes,
    )


# ---------------------------------------------------------------------------
# convergence studies

STUDY_KINDS = ("state", "control", "delta")


@dataclass
class ConvergenceTable:
    kind: str
    rows: list
    monotone: bool
    criterion: str

    def to_csv(self, path):
        columns = list(self.rows[0]) if self.rows else ["level"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(columns)
            for row in self.rows:
                writer.writerow([_cell(row[c]) for c in columns])

    def to_json(self, **kwargs):
        return json.dumps(asdict(self), **kwargs)


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def convergence_study(config, levels, kind="state", strict=True):
    """Refinement table over ``levels``.

    ``state``: state-grid sizes; the HJB-oracle gap must not increase.
    ``control``: control-grid sizes (nested grids); ``V_hat`` must not increase.
    ``delta``: LP relaxations; ``rho_hat`` must not decrease as delta shrinks.
    With ``strict`` a violation raises :class:`MonotonicityError`.
    """
    if kind not in STUDY_KINDS:
        raise ConfigurationError(f"kind must be one of {STUDY_KINDS}, got {kind!r}")
    if len(levels) < 3:
        raise ConfigurationError("a convergence study needs at least 3 levels")
    cfg = benchmark_config(config)
    problem = build_problem(cfg)
    quad = build_quadrature(problem.levy)
    v_exact = lq_oracle(problem)
    dc = cfg["dual"]
    rows = []
    for level in levels:
        if kind == "control":
            sub = copy.deepcopy(cfg)
            sub["grid"]["n_control"] = int(level)
            prob = build_problem(sub)
        else:
            prob = problem
        n_state = int(level) if kind == "state" else int(cfg["hjb"]["n_state"])
        rel_delta = float(level) if kind == "delta" else float(cfg["primal"]["rel_delta"])
        grid = StateGrid.for_problem(prob, n_state)
        hparams = HJBParams(n_shift=int(cfg["hjb"]["n_shift"]))
        vf = solve_hjb(prob, grid, hparams, quad)
        v_hjb = float(vf(prob.initial_state))
        rho, sol, _ = primal_value(prob, PrimalParams(
            n_state=n_state, max_degree=int(cfg["primal"]["max_degree"]), rel_delta=rel_delta), quad)
        rho_star, _ = dual_value(prob, float(dc["eps"]), float(dc["kappa"]), grid,
                                 DualParams(hjb=hparams, h_ratio=float(dc["h_ratio"]),
                                            feas_tol=float(dc["feas_tol"])), quad)
        rows.append({
            "level": level,
            "rho_primal": float(rho),
            "rho_dual": float(rho_star),
            "v_hjb": v_hjb,
            "gap_primal_hjb": abs(rho - v_hjb),
            "gap_dual_hjb": abs(rho_star - v_hjb),
            "gap_hjb_analytic": None if v_exact is None else abs(v_hjb - v_exact),
        })
    if kind == "state":
        criterion = "gap_hjb_analytic non-increasing"
        key = "gap_hjb_analytic" if v_exact is not None else "gap_dual_hjb"
        seq = [r[key] for r in rows]
        monotone = all(b <= a + 1e-12 for a, b in zip(seq, seq[1:]))
    elif kind == "control":
        criterion = "v_hjb non-increasing over nested control grids"
        seq = [r["v_hjb"] for r in rows]
        monotone = all(b <= a + 1e-12 for a, b in zip(seq, seq[1:]))
    else:
        criterion = "rho_primal non-decreasing as delta shrinks"
        ordered = sorted(rows, key=lambda r: -r["level"])
        seq = [r["rho_primal"] for r in ordered]
        monotone = all(b >= a - 1e-12 for a, b in zip(seq, seq[1:]))
    table = ConvergenceTable(kind, rows, bool(monotone), criterion)
    if strict and not monotone:
        raise MonotonicityError(f"convergence study ({kind}) failed: {criterion}; values {seq}")
    return table


# ---------------------------------------------------------------------------
# reports

REPORT_COLUMNS = (
    "problem", "x0", "rho_primal", "rho_dual", "v_hjb", "v_analytic",
    "gap_max_pairwise", "gap_primal_dual", "gap_primal_hjb", "gap_dual_hjb", "gap_hjb_analytic",
    "delta_budget", "weak_duality_tol", "mc_cost", "mc_std_error", "seed",
    "primal_state", "hjb_state", "control", "max_degree", "eps", "kappa", "passed",
)


def _row(result):
    g, t = result.gaps, result.tolerances
    return {
        "problem": result.problem,
        "x0": result.x0,
        "rho_primal": result.rho_primal,
        "rho_dual": result.rho_dual,
        "v_hjb": result.v_hjb,
        "v_analytic": result.v_analytic,
        "gap_max_pairwise": g["max_pairwise"],
        "gap_primal_dual": g["primal_dual"],
        "gap_primal_hjb": g["primal_hjb"],
        "gap_dual_hjb": g["dual_hjb"],
        "gap_hjb_analytic": g.get("hjb_analytic"),
        "delta_budget": t["delta_budget"],
        "weak_duality_tol": t["weak_duality_tol"],
        "mc_cost": result.monte_carlo.get("cost"),
        "mc_std_error": result.monte_carlo.get("std_error"),
        "seed": result.seeds.get("sim"),
        "primal_state": result.grid_sizes["primal_state"],
        "hjb_state": result.grid_sizes["hjb_state"],
        "control": result.grid_sizes["control"],
        "max_degree": result.grid_sizes["max_degree"],
        "eps": result.diagnostics["eps"],
        "kappa": result.diagnostics["kappa"],
        "passed": result.passed,
    }


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if math.isfinite(value) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def emit_report(results, out_dir, fmt="csv", name="report", include_runtimes=False):
    """Write ``results`` to ``out_dir/name.{csv,json}`` and return the path.

    Runtimes are left out by default so reruns give identical files.
    """
    if fmt not in ("csv", "json"):
        raise ConfigurationError(f"format must be 'csv' or 'json', got {fmt!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{name}.{fmt}"
    results = list(results)
    if fmt == "json":
        payload = {"results": [_json_safe(r.to_dict(include_runtimes)) for r in results]}
        path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
        return path
    stages = sorted({k for r in results for k in r.runtimes}) if include_runtimes else []
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(REPORT_COLUMNS) + [f"runtime_{s}" for s in stages])
        for r in results:
            row = _row(r)
            writer.writerow([_cell(row[c]) for c in REPORT_COLUMNS]
                            + [_cell(r.runtimes.get(s)) for s in stages])
    return path


def load_report(path):
    """Re-read a JSON report into :class:`BenchmarkResult` objects."""
    data = json.loads(Path(path).read_text())
    return [BenchmarkResult.from_dict(d) for d in data["results"]]
