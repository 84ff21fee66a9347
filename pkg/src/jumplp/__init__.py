"""Occupation-measure linear programming for discounted control of jump-diffusions.

Modules: :mod:`~jumplp.model` (problem data), :mod:`~jumplp.generator`
(operators), :mod:`~jumplp.simulator` (Monte Carlo), :mod:`~jumplp.primal`
(discretized LP), :mod:`~jumplp.dual` (HJB solver and dual certificates) and
:mod:`~jumplp.harness` (benchmarks and reports).
"""

from .dual import (HJBSolver, KrylovDualBound, StateGrid, ValueFunction, check_subsolution,
                   dual_value, mollify, solve_hjb, solve_perturbed_hjb)
from .generator import (JumpQuadrature, SecondOrderState, TestFunction, apply_constraint_operator,
                        apply_jump_generator, apply_local_generator, build_quadrature, hamiltonian)
from .harness import (BenchmarkResult, analytic_lq_jump, convergence_study, emit_report,
                      load_report, lq_oracle, run_benchmark)
from .model import (REGISTRY, ControlGrid, ControlProblem, CostModel, Dynamics, LevyMeasure,
                    build_problem, levy_moment, validate_levy_measure, validate_problem)
from .primal import (AtomGrid, LinearProgramInstance, LPSolution, PrimalLP, assemble_lp,
                     build_basis, primal_value, solve_lp)
from .simulator import (FeedbackPolicy, OccupationEstimate, OccupationMeasureEstimator,
                        check_adjoint_identity, estimate_occupation, evaluate_cost, moment_check,
                        simulate_path)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
