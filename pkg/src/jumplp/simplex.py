"""Dense two-phase revised simplex for ``min c'x  s.t.  A x = b, x >= 0``.

Pricing is Dantzig's most-negative reduced cost; after a run of degenerate
pivots the solver switches to Bland's smallest-index rule, which cannot
cycle.  The basis inverse is refactorized from scratch every iteration, which
is cheap for the handful of rows the LPs here have.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConvergenceError

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"


@dataclass
class SimplexResult:
    x: np.ndarray
    objective: float
    status: str
    duals: np.ndarray
    basis: np.ndarray
    iterations: int


def _iterate(c, A, b, basis, tol, max_iter, degenerate_limit, allowed, it0=0):
    m, n = A.shape
    bland = False
    degenerate_run = 0
    it = it0
    while True:
        if it >= max_iter:
            raise ConvergenceError(f"simplex iteration cap {max_iter} reached")
        B = A[:, basis]
        x_b = np.linalg.solve(B, b)
        y = np.linalg.solve(B.T, c[basis])
        d = c - A.T @ y
        d[basis] = 0.0
        d[~allowed] = 0.0
        candidates = np.flatnonzero(d < -tol)
        if candidates.size == 0:
            return basis, x_b, y, OPTIMAL, it
        enter = int(candidates[0]) if bland else int(candidates[np.argmin(d[candidates])])
        direction = np.linalg.solve(B, A[:, enter])
        positive = direction > tol
        if not np.any(positive):
            return basis, x_b, y, UNBOUNDED, it
        ratios = np.full(m, np.inf)
        ratios[positive] = np.maximum(x_b[positive], 0.0) / direction[positive]
        best = ratios.min()
        ties = np.flatnonzero(ratios <= best + tol * max(1.0, abs(best)))
        leave = int(ties[np.argmin(basis[ties])]) if bland else int(ties[np.argmax(direction[ties])])
        if best <= tol:
            degenerate_run += 1
            if degenerate_run >= degenerate_limit:
                bland = True
        else:
            degenerate_run = 0
        basis = basis.copy()
        basis[leave] = enter
        it += 1


def revised_simplex(c, A, b, tol=1e-9, max_iter=10**6, degenerate_limit=50):
    """Solve the standard-form LP; returns a :class:`SimplexResult`.

    ``duals`` solve ``B' y = c_B`` for the final basis, so ``c - A' y >= 0``
    at optimality.
    """
    c = np.asarray(c, dtype=float)
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    m, n = A.shape
    flip = b < 0
    A = np.where(flip[:, None], -A, A)
    b = np.where(flip, -b, b)

    # phase I on [A | I] with artificial costs
    A1 = np.hstack([A, np.eye(m)])
    c1 = np.concatenate([np.zeros(n), np.ones(m)])
    allowed = np.ones(n + m, dtype=bool)
    basis = np.arange(n, n + m)
    basis, x_b, _, status, it = _iterate(c1, A1, b, basis, tol, max_iter, degenerate_limit, allowed)
    infeas = float(np.sum(x_b[basis >= n]))
    if infeas > tol * max(1.0, float(np.abs(b).max(initial=0.0))) * 10:
        x = np.zeros(n)
        return SimplexResult(x, np.nan, INFEASIBLE, np.full(m, np.nan), basis, it)

    # drive zero-level artificials out of the basis; drop redundant rows
    keep_rows = np.ones(m, dtype=bool)
    for row in range(m):
        if basis[row] < n:
            continue
        B = A1[:, basis]
        tableau_row = np.linalg.solve(B.T, np.eye(m)[row]) @ A
        cand = [j for j in np.flatnonzero(np.abs(tableau_row) > 1e-9) if j not in basis]
        if cand:
            basis[row] = cand[0]
        else:
            keep_rows[row] = False
    A2, b2, basis = A[keep_rows], b[keep_rows], basis[keep_rows]

    allowed = np.ones(n, dtype=bool)
    basis, x_b, y, status, it = _iterate(c, A2, b2, basis, tol, max_iter, degenerate_limit,
                                         allowed, it)
    x = np.zeros(n)
    x[basis] = np.maximum(x_b, 0.0)
    duals = np.zeros(m)
    duals[keep_rows] = y
    duals = np.where(flip, -duals, duals)
    objective = float(c @ x) if status == OPTIMAL else -np.inf
    return SimplexResult(x, objective, status, duals, basis, it)
