import itertools

import numpy as np
import pytest

from crtbounds import lpsolve
from crtbounds.lpsolve import (INFEASIBLE, MAX, MIN, OPTIMAL, UNBOUNDED, IterationLimitError,
                               LinearProgram, PresolveInfeasible, presolve, solve)


def enumerate_vertices(A, b, c, sense=MIN):
    """Best objective over all basic feasible solutions (None if there are none)."""
    m, n = A.shape
    best = None
    for cols in itertools.combinations(range(n), m):
        B = A[:, cols]
        if abs(np.linalg.det(B)) < 1e-10:
            continue
        xb = np.linalg.solve(B, b)
        if np.any(xb < -1e-9):
            continue
        x = np.zeros(n)
        x[list(cols)] = xb
        val = c @ x
        if best is None or (val < best if sense == MIN else val > best):
            best = val
    return best


def random_bounded_lp(rng, m, n):
    A = rng.normal(size=(m, n))
    A[0] = rng.uniform(0.5, 2.0, size=n)  # positive row keeps the region bounded
    x0 = rng.uniform(0.0, 1.0, size=n) * (rng.random(n) < 0.7)
    return A, A @ x0, rng.normal(size=n)


def _check_solution(lp, sol):
    assert sol.status == OPTIMAL
    resid = np.abs(lp.A @ sol.x - lp.b).max()
    assert resid <= 1e-7 * (1 + np.abs(lp.b).max())
    assert sol.x.min() >= -1e-9


def test_simple_max():
    sol = solve(LinearProgram([1.0, 0.0], [[1.0, 1.0]], [1.0], MAX))
    assert sol.status == OPTIMAL
    np.testing.assert_allclose(sol.x, [1.0, 0.0])
    assert sol.objective_value == pytest.approx(1.0)


def test_simple_infeasible():
    sol = solve(LinearProgram([1.0, 1.0], [[1.0, 1.0]], [-1.0], MIN))
    assert sol.status == INFEASIBLE


def test_unbounded():
    sol = solve(LinearProgram([-1.0, 0.0], [[1.0, -1.0]], [1.0], MIN))
    assert sol.status == UNBOUNDED


def test_random_lps_match_vertex_enumeration():
    rng = np.random.default_rng(2024)
    for k in range(100):
        m = int(rng.integers(1, 6))
        n = int(rng.integers(m + 1, 9))
        A, b, c = random_bounded_lp(rng, m, n)
        sense = MIN if k % 2 == 0 else MAX
        lp = LinearProgram(c, A, b, sense)
        sol = solve(lp)
        _check_solution(lp, sol)
        assert sol.objective_value == pytest.approx(enumerate_vertices(A, b, c, sense), abs=1e-6)


def test_optimality_certificate():
    rng = np.random.default_rng(5)
    for _ in range(20):
        A, b, c = random_bounded_lp(rng, 3, 7)
        sol = solve(LinearProgram(c, A, b, MIN))
        nonbasic = np.setdiff1d(np.arange(7), sol.basis)
        assert sol.reduced_costs[nonbasic].min() >= -1e-8


def test_deterministic_basis():
    rng = np.random.default_rng(8)
    A, b, c = random_bounded_lp(rng, 4, 8)
    lp = LinearProgram(c, A, b)
    assert solve(lp).basis == solve(lp).basis


def test_scaling_rhs_scales_objective():
    rng = np.random.default_rng(9)
    A, b, c = random_bounded_lp(rng, 3, 6)
    base = solve(LinearProgram(c, A, b)).objective_value
    assert solve(LinearProgram(c, A, 3.5 * b)).objective_value == pytest.approx(3.5 * base, rel=1e-9, abs=1e-12)


def test_degenerate_problem_terminates():
    # many ties in the ratio test; Bland's rule must not cycle
    A = np.array([[0.5, -5.5, -2.5, 9.0, 1.0, 0.0, 0.0],
                  [0.5, -1.5, -0.5, 1.0, 0.0, 1.0, 0.0],
                  [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]])
    b = np.array([0.0, 0.0, 1.0])
    c = np.array([-10.0, 57.0, 9.0, 24.0, 0.0, 0.0, 0.0])
    lp = LinearProgram(c, A, b)
    sol = solve(lp)
    _check_solution(lp, sol)
    assert sol.objective_value == pytest.approx(enumerate_vertices(A, b, c), abs=1e-9)


def test_presolve_duplicate_row():
    A = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 1.0]])
    red = presolve(LinearProgram(np.zeros(3), A, [1.0, 1.0, 2.0]))
    assert red.A.shape[0] == 2


def test_presolve_combination_row():
    A = np.array([[1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 1.0], [1.0, 1.0, 1.0, 1.0]])
    red = presolve(LinearProgram(np.ones(4), A, [1.0, 2.0, 3.0]))
    assert red.A.shape[0] == 2
    assert len(red.row_map) == 2
    with pytest.raises(PresolveInfeasible):
        presolve(LinearProgram(np.ones(4), A, [1.0, 2.0, 3.5]))
    assert solve(LinearProgram(np.ones(4), A, [1.0, 2.0, 3.5])).status == INFEASIBLE
    sol = solve(LinearProgram(np.ones(4), A, [1.0, 2.0, 3.0]))
    assert sol.status == OPTIMAL and sol.objective_value == pytest.approx(3.0)


def test_warm_start_basis():
    A = np.array([[1.0, 1.0, 1.0, 0.0], [1.0, -1.0, 0.0, 1.0]])
    b = np.array([4.0, 1.0])
    c = np.array([-1.0, -2.0, 0.0, 0.0])
    cold = solve(LinearProgram(c, A, b))
    warm = solve(LinearProgram(c, A, b), basis=[2, 3])
    assert warm.objective_value == pytest.approx(cold.objective_value)
    # an infeasible starting basis falls back to two phases
    fallback = solve(LinearProgram(c, A, b), basis=[0, 1])
    assert fallback.objective_value == pytest.approx(cold.objective_value)


def test_iteration_cap(monkeypatch):
    monkeypatch.setattr(lpsolve, "MAX_ITER", 0)
    with pytest.raises(IterationLimitError, match="cycling/degeneracy cap"):
        solve(LinearProgram([-1.0, -1.0, 0.0], [[1.0, 2.0, 1.0]], [4.0]))


def test_bad_dimensions():
    with pytest.raises(ValueError):
        LinearProgram([1.0, 2.0], [[1.0, 2.0, 3.0]], [1.0])
    with pytest.raises(ValueError):
        LinearProgram([1.0], [[1.0]], [1.0], "SIDEWAYS")


def test_dump_csv(tmp_path):
    lp = LinearProgram([1.0, 2.0], [[1.0, 1.0]], [3.0], MAX, names=("u", "v"))
    lpsolve.dump_csv(lp, tmp_path / "lp.csv")
    lines = (tmp_path / "lp.csv").read_text().splitlines()
    assert lines[0] == "row,u,v,rhs"
    assert lines[1].startswith("objective_max,1.0,2.0")
    assert lines[2] == "r0,1.0,1.0,3.0"
