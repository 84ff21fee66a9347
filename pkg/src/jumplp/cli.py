"""Command-line entry point: ``jumplp <command> <config> [--seed] [--out-dir] [--format]``.

``<config>`` is a TOML file or the name of a registry problem.  Exit status is
0 when every check passes, 2 when an assertion fails and 1 on any other error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness
from .dual import DualParams, HJBParams, StateGrid, dual_value, solve_hjb
from .generator import TestFunction, build_quadrature
from .model import REGISTRY, build_problem, load_config, validate_problem
from .primal import AtomGrid, assemble_lp, build_basis, default_delta, lp_diagnostics, solve_lp
from .simulator import check_adjoint_identity, estimate_occupation, evaluate_cost, simulate_path

COMMANDS = ("validate", "simulate", "primal", "hjb", "dual", "benchmark", "converge")


def _config(source):
    path = Path(source)
    if path.exists():
        return load_config(path)
    if source in REGISTRY:
        return {"problem": {"name": source}}
    raise FileNotFoundError(f"{source!r} is neither a config file nor a registry problem")


def _write_json(path, payload):
    path.write_text(json.dumps(harness._json_safe(payload), sort_keys=True, indent=2) + "\n")
    return path


def _validate(cfg, args, out):
    report = validate_problem(build_problem(cfg))
    path = out / "validation.json"
    path.write_text(report.to_json(indent=2) + "\n")
    for check in report.checks:
        print(f"{check.name}: {'pass' if check.passed else 'FAIL'} ({check.value:.6g})")
    return 0 if report.passed else 2


def _simulate(cfg, args, out):
    full = harness.benchmark_config(cfg)
    problem = build_problem(full)
    sc = full["sim"]
    seed = int(sc["seed"]) if args.seed is None else args.seed
    quad = build_quadrature(problem.levy)
    policy = solve_hjb(problem, StateGrid.for_problem(problem, int(full["hjb"]["n_state"])),
                       quad=quad).policy
    horizon = sc["horizon"]
    path = simulate_path(problem, policy, horizon or 10.0, float(sc["dt"]), seed, quad=quad)
    path.to_csv(out / "path.csv")
    occ = estimate_occupation(problem, policy, int(sc["paths"]), horizon, float(sc["dt"]), seed,
                              max_power=4, quad=quad)
    occ.to_csv(out / "occupation.csv")
    cost = evaluate_cost(occ, problem)
    adjoint = {}
    ok = True
    for k in range(5):
        res = check_adjoint_identity(occ, TestFunction.monomial(k), problem, quad)
        adjoint[f"x^{k}"] = res._asdict()
        ok &= res.within(3.0)
        print(f"adjoint x^{k}: residual {res.value:.3e}, std error {res.std_error:.3e}, "
              f"band {res.truncation_band:.3e} -> {'pass' if res.within(3.0) else 'FAIL'}")
    print(f"cost {cost.value:.6f} +/- {cost.std_error:.2e} (truncation band {cost.truncation_band:.1e})")
    _write_json(out / "simulation.json", {"seed": seed, "n_paths": occ.n_paths, "horizon": occ.horizon,
                                          "dt": occ.dt, "total_mass": occ.total_mass,
                                          "cost": cost._asdict(), "adjoint": adjoint})
    return 0 if ok else 2


def _primal(cfg, args, out):
    full = harness.benchmark_config(cfg)
    problem = build_problem(full)
    pc = full["primal"]
    quad = build_quadrature(problem.levy)
    basis = build_basis(int(pc["max_degree"]))
    grid = AtomGrid.for_problem(problem, int(pc["n_state"]))
    lp = assemble_lp(problem, basis, grid, default_delta(basis, problem.initial_state,
                                                         float(pc["rel_delta"])), quad)
    lp.to_text(out / "lp.txt")
    sol = solve_lp(lp)
    (out / "lp_solution.json").write_text(sol.to_json(lp.atoms, indent=2) + "\n")
    print(f"status {sol.status}, rho_hat {sol.objective_value:.10g}, {lp.shape[0]} rows x {lp.shape[1]} columns")
    if sol.status != "optimal":
        return 2
    diag = lp_diagnostics(lp, sol, problem.discount)
    _write_json(out / "lp_diagnostics.json", diag)
    return 0


def _hjb(cfg, args, out):
    full = harness.benchmark_config(cfg)
    problem = build_problem(full)
    grid = StateGrid.for_problem(problem, int(full["hjb"]["n_state"]))
    vf = solve_hjb(problem, grid, HJBParams(n_shift=int(full["hjb"]["n_shift"])))
    vf.to_csv(out / "value_function.csv")
    _write_json(out / "value_function.json", vf.metadata())
    print(f"V_hat(x0) = {float(vf(problem.initial_state)):.10g} after {vf.info['iterations']} iterations")
    return 0


def _dual(cfg, args, out):
    full = harness.benchmark_config(cfg)
    problem = build_problem(full)
    dc = full["dual"]
    grid = StateGrid.for_problem(problem, int(full["hjb"]["n_state"]))
    params = DualParams(hjb=HJBParams(n_shift=int(full["hjb"]["n_shift"])),
                        h_ratio=float(dc["h_ratio"]), feas_tol=float(dc["feas_tol"]))
    rho_star, cert = dual_value(problem, float(dc["eps"]), float(dc["kappa"]), grid, params)
    cert.to_csv(out / "certificate.csv", grid)
    (out / "certificate.json").write_text(cert.to_json(indent=2, sort_keys=True) + "\n")
    print(f"rho_star_hat = {rho_star:.10g}, margin {cert.margin:.3e}, shift {cert.shift:.3e}, "
          f"{'feasible' if cert.feasible else 'INFEASIBLE'}")
    return 0 if cert.feasible else 2


def _benchmark(cfg, args, out):
    result = harness.run_benchmark(cfg, seed=args.seed)
    path = harness.emit_report([result], out, args.format)
    for name, ok in result.checks.items():
        print(f"{name}: {'pass' if ok else 'FAIL'}")
    print(f"rho_hat {result.rho_primal:.8g}  rho_star_hat {result.rho_dual:.8g}  "
          f"V_hat {result.v_hjb:.8g}  analytic {result.v_analytic}")
    print(f"report written to {path}")
    return 0 if result.passed else 2


def _converge(cfg, args, out):
    levels = args.levels or [101, 201, 401]
    if args.kind == "delta":
        levels = [float(v) for v in (args.levels or [1e-4, 1e-6, 1e-8])]
    elif args.kind == "control" and not args.levels:
        levels = [11, 21, 41]
    table = harness.convergence_study(cfg, levels, args.kind, strict=False)
    path = out / f"convergence_{args.kind}.{args.format}"
    if args.format == "csv":
        table.to_csv(path)
    else:
        path.write_text(table.to_json(indent=2, sort_keys=True) + "\n")
    for row in table.rows:
        print(", ".join(f"{k}={v}" for k, v in row.items()))
    print(f"{table.criterion}: {'pass' if table.monotone else 'FAIL'}")
    return 0 if table.monotone else 2


HANDLERS = {
    "validate": _validate,
    "simulate": _simulate,
    "primal": _primal,
    "hjb": _hjb,
    "dual": _dual,
    "benchmark": _benchmark,
    "converge": _converge,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="jumplp", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None, help="override the simulation seed")
    parser.add_argument("--out-dir", default=".", help="directory for output files")
    parser.add_argument("--format", choices=("csv", "json"), default="csv", help="report format")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("config", help="TOML config file or registry problem name")
        if name == "converge":
            p.add_argument("--kind", choices=harness.STUDY_KINDS, default="state")
            p.add_argument("--levels", type=float, nargs="+", default=None)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "converge" and args.levels and args.kind != "delta":
        args.levels = [int(v) for v in args.levels]
    try:
        cfg = _config(args.config)
        if args.seed is not None:
            cfg.setdefault("sim", {})["seed"] = args.seed
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        return HANDLERS[args.command](cfg, args, out)
    except AssertionError as exc:
        print(f"assertion failed: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as exit status 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
