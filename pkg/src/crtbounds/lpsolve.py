"""Dense two-phase primal simplex for equality-form linear programs.

Problems have the form ``min/max c'x`` subject to ``A x = b`` and ``x >= 0``.
Pricing uses Bland's rule (smallest eligible index enters, ties in the
ratio test go to the smallest basic index), which cannot cycle on
degenerate problems.
"""
import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg

MIN, MAX = "MIN", "MAX"
OPTIMAL, INFEASIBLE, UNBOUNDED = "OPTIMAL", "INFEASIBLE", "UNBOUNDED"

MAX_ITER = 50_000
RANK_TOL = 1e-9
PIVOT_TOL = 1e-11
COST_TOL = 1e-9
FEAS_TOL = 1e-9


class IterationLimitError(RuntimeError):
    pass


class PresolveInfeasible(ValueError):
    """Dependent equality rows with contradictory right-hand sides."""


@dataclass(frozen=True, eq=False)
class LinearProgram:
    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    sense: str = MIN
    names: tuple = None
    row_map: tuple = None

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).ravel()
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.asarray(self.b, dtype=float).ravel()
        if A.size == 0:
            A = A.reshape(len(b), len(c))
        if A.shape != (len(b), len(c)):
            raise ValueError(f"inconsistent dimensions: A {A.shape}, b {b.shape}, c {c.shape}")
        if self.sense not in (MIN, MAX):
            raise ValueError(f"sense must be MIN or MAX, got {self.sense!r}")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        if self.row_map is None:
            object.__setattr__(self, "row_map", tuple(range(len(b))))

    @property
    def shape(self):
        return self.A.shape


@dataclass(frozen=True, eq=False)
class LpSolution:
    status: str
    x: np.ndarray = None
    objective_value: float = float("nan")
    basis: tuple = ()
    reduced_costs: np.ndarray = field(default=None, repr=False)
    iterations: int = 0


def presolve(lp: LinearProgram) -> LinearProgram:
    """Drop numerically dependent equality rows.

    Rank is read off a column-pivoted QR of ``A'`` with relative threshold
    1e-9. Each dropped row must be consistent with the rows kept, otherwise
    :class:`PresolveInfeasible` is raised.
    """
    A, b = lp.A, lp.b
    m = A.shape[0]
    if m == 0:
        return lp
    _, R, piv = scipy.linalg.qr(A.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    scale = diag[0] if len(diag) else 0.0
    rank = int(np.sum(diag > RANK_TOL * max(scale, 1e-300))) if scale > 0 else 0
    keep = np.sort(piv[:rank])
    drop = np.setdiff1d(np.arange(m), keep)
    if len(drop) == 0:
        return lp
    if rank:
        coef, *_ = np.linalg.lstsq(A[keep].T, A[drop].T, rcond=None)
        implied = coef.T @ b[keep]
    else:
        implied = np.zeros(len(drop))
    gap = np.abs(b[drop] - implied)
    if np.any(gap > RANK_TOL * (1.0 + np.abs(b).max())):
        bad = [lp.row_map[i] for i in drop[gap > RANK_TOL * (1.0 + np.abs(b).max())]]
        raise PresolveInfeasible(f"dependent rows {bad} contradict the rest of the system")
    return replace(lp, A=A[keep], b=b[keep], row_map=tuple(lp.row_map[i] for i in keep))


def _pivot(T, basis, row, col):
    T[row] /= T[row, col]
    colv = T[:, col].copy()
    colv[row] = 0.0
    T -= np.outer(colv, T[row])
    basis[row] = col


def _simplex(T, basis, ncols, iters):
    """Bland-rule iterations on tableau ``T`` (last row holds reduced costs,
    last column the rhs). Returns ``(status, iterations)``."""
    m = T.shape[0] - 1
    while True:
        cost = T[-1, :ncols]
        cand = np.flatnonzero(cost < -COST_TOL)
        if len(cand) == 0:
            return OPTIMAL, iters
        if iters >= MAX_ITER:
            raise IterationLimitError(f"cycling/degeneracy cap: {MAX_ITER} simplex iterations exceeded")
        col = cand[0]
        colv = T[:m, col]
        pos = np.flatnonzero(colv > PIVOT_TOL)
        if len(pos) == 0:
            return UNBOUNDED, iters
        ratios = T[pos, -1] / colv[pos]
        best = ratios.min()
        tied = pos[ratios <= best + 1e-12 * max(1.0, abs(best))]
        row = tied[np.argmin([basis[i] for i in tied])]
        _pivot(T, basis, row, col)
        iters += 1


def _tableau(A, b, cost, basis):
    """Canonical tableau for a given basis, or None if it is singular."""
    m, n = A.shape
    Bm = A[:, basis]
    try:
        Binv_A = np.linalg.solve(Bm, np.column_stack([A, b]))
    except np.linalg.LinAlgError:
        return None
    T = np.zeros((m + 1, n + 1))
    T[:m] = Binv_A
    T[-1, :n] = cost
    T[-1] -= cost[basis] @ T[:m]
    return T


def solve(lp: LinearProgram, basis=None) -> LpSolution:
    """Solve ``lp`` with the two-phase simplex method.

    ``basis`` optionally names ``m`` columns forming a primal feasible basis
    of the full system; Phase 1 is then skipped. A basis that is singular or
    infeasible falls back to the standard two phases.
    """
    cost = lp.c if lp.sense == MIN else -lp.c
    n = len(cost)
    if basis is not None and len(basis) == lp.A.shape[0]:
        basis = [int(j) for j in basis]
        T = _tableau(lp.A, lp.b, cost, basis)
        if T is not None and np.all(T[:-1, -1] >= -FEAS_TOL):
            T[:-1, -1] = np.maximum(T[:-1, -1], 0.0)
            status, iters = _simplex(T, basis, n, 0)
            return _finish(lp, T, basis, status, iters, lp.A, lp.b)

    try:
        red = presolve(lp)
    except PresolveInfeasible:
        return LpSolution(INFEASIBLE)
    A, b = red.A.copy(), red.b.copy()
    m = A.shape[0]
    if m == 0:
        if np.any(cost < -COST_TOL):
            return LpSolution(UNBOUNDED)
        x = np.zeros(n)
        return LpSolution(OPTIMAL, x, float(lp.c @ x), (), cost.copy(), 0)
    neg = b < 0
    A[neg] *= -1.0
    b[neg] *= -1.0

    # phase 1 on [A | I] with artificial columns n..n+m-1
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    T[:m, n:n + m] = np.eye(m)
    T[:m, -1] = b
    T[-1, :n] = -A.sum(axis=0)
    T[-1, -1] = -b.sum()
    basis = list(range(n, n + m))
    status, iters = _simplex(T, basis, n + m, 0)
    if -T[-1, -1] > FEAS_TOL * (1.0 + np.abs(b).max()):
        return LpSolution(INFEASIBLE, iterations=iters)

    # drive remaining artificials out of the basis
    keep_rows = list(range(m))
    for row in range(m):
        if basis[row] >= n:
            nz = np.flatnonzero(np.abs(T[row, :n]) > 1e-9)
            if len(nz):
                _pivot(T, basis, row, nz[0])
            else:
                keep_rows.remove(row)
    rows = T[keep_rows][:, list(range(n)) + [n + m]]
    basis = [basis[r] for r in keep_rows]
    T = np.zeros((len(keep_rows) + 1, n + 1))
    T[:-1] = rows
    T[-1, :n] = cost
    T[-1] -= cost[basis] @ T[:-1]
    T[:-1, -1] = np.maximum(T[:-1, -1], 0.0)
    status, iters = _simplex(T, basis, n, iters)
    return _finish(lp, T, basis, status, iters, red.A[keep_rows], red.b[keep_rows])


def _finish(lp, T, basis, status, iters, A, b):
    n = len(lp.c)
    if status == UNBOUNDED:
        return LpSolution(UNBOUNDED, basis=tuple(basis), iterations=iters)
    x = np.zeros(n)
    x[basis] = T[:-1, -1]
    # one step of iterative refinement on the basic solution
    Bm = A[:, basis]
    resid = b - A @ x
    if np.any(resid):
        try:
            x[basis] += np.linalg.solve(Bm, resid)
        except np.linalg.LinAlgError:
            pass
    x[np.abs(x) < 1e-14] = 0.0
    rc = T[-1, :n].copy()
    return LpSolution(OPTIMAL, x, float(lp.c @ x), tuple(basis), rc, iters)


def dump_csv(lp: LinearProgram, path):
    """Write ``(c, A, b)`` as a CSV: one header row of variable names, one row
    ``c``, then one row per constraint with ``b`` in the last column."""
    n = len(lp.c)
    names = list(lp.names) if lp.names is not None else [f"x{j}" for j in range(n)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["row"] + names + ["rhs"])
        w.writerow([f"objective_{lp.sense.lower()}"] + [repr(float(v)) for v in lp.c] + [""])
        for i, (a, bi) in enumerate(zip(lp.A, lp.b)):
            w.writerow([f"r{lp.row_map[i]}"] + [repr(float(v)) for v in a] + [repr(float(bi))])
