from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

import lpcore
from clearing import build_dcco
from lpcore import EQ
from lpcore import GE
from lpcore import LpProblem
from netmodel import load_case
from tests.market_cases import case_path

SOLVER_NAMES = ("simplex", "highs")


def _two_var():
    lp = LpProblem("two")
    lp.add_var("x", cost=1)
    lp.add_var("y", cost=1)
    lp.add_row("cover", {"x": 1, "y": 1}, GE, 2)
    lp.add_row("tie", {"x": 1, "y": -1}, EQ, 0)
    return lp


@pytest.mark.parametrize("solver", SOLVER_NAMES)
def test_solve_lp_primal_and_duals(solver):
    lp = _two_var()

    sol = lpcore.solve_lp(lp, solver=solver)

    assert sol.status == lpcore.OPTIMAL
    assert sol.solver == solver
    assert sol.value("x") == pytest.approx(1)
    assert sol.value("y") == pytest.approx(1)
    assert sol.objective == pytest.approx(2)
    assert sol.dual("cover") == pytest.approx(1)
    assert sol.dual("tie") == pytest.approx(0, abs=1e-9)
    assert lpcore.check_kkt(lp, sol).passed


@pytest.mark.parametrize("solver", SOLVER_NAMES)
def test_solve_lp_infeasible(solver):
    lp = LpProblem()
    lp.add_var("x")
    lp.add_row("floor", {"x": 1}, GE, 3)
    lp.add_row("ceiling", {"x": -1}, GE, -1)

    sol = lpcore.solve_lp(lp, solver=solver)

    assert sol.status == lpcore.INFEASIBLE
    assert math.isnan(sol.objective)


def test_simplex_unbounded():
    lp = LpProblem()
    lp.add_var("x", cost=-1)
    lp.add_row("floor", {"x": 1}, GE, 1)

    sol = lpcore.solve_lp(lp, solver="simplex")

    assert sol.status == lpcore.UNBOUNDED


@pytest.mark.parametrize("solver", SOLVER_NAMES)
def test_free_column_below_zero(solver):
    lp = LpProblem()
    lp.add_var("x", cost=1, free=True)
    lp.add_row("floor", {"x": 1}, GE, -3)

    sol = lpcore.solve_lp(lp, solver=solver)

    assert sol.value("x") == pytest.approx(-3)
    assert sol.dual("floor") == pytest.approx(1)
    assert sol.objective == pytest.approx(-3)


@pytest.mark.parametrize("solver", SOLVER_NAMES)
def test_redundant_equalities(solver):
    lp = LpProblem()
    lp.add_var("x", cost=1)
    lp.add_var("y", cost=2)
    lp.add_row("a", {"x": 1, "y": 1}, EQ, 2)
    lp.add_row("b", {"x": 2, "y": 2}, EQ, 4)

    sol = lpcore.solve_lp(lp, solver=solver)

    assert sol.status == lpcore.OPTIMAL
    assert sol.value("x") == pytest.approx(2)
    assert sol.objective == pytest.approx(2)
    # the split of the price across the copies is arbitrary, the sum is not
    assert sol.dual("a") + 2 * sol.dual("b") == pytest.approx(1)
    assert lpcore.check_kkt(lp, sol).passed


def test_objective_constant_is_included():
    lp = _two_var()
    lp.objective_constant = 5.0

    sol = lpcore.solve_lp(lp, solver="simplex")

    assert sol.objective == pytest.approx(7)


def test_no_rows():
    lp = LpProblem()
    lp.add_var("x", cost=3)
    lp.objective_constant = 1.5

    sol = lpcore.solve_lp(lp)

    assert sol.status == lpcore.OPTIMAL
    assert sol.objective == 1.5


def test_no_rows_free_column_is_unbounded():
    lp = LpProblem()
    lp.add_var("x", cost=3, free=True)

    assert lpcore.solve_lp(lp).status == lpcore.UNBOUNDED


def test_pick_solver():
    small = _two_var()

    assert lpcore.pick_solver(small).name == "simplex"
    assert lpcore.pick_solver(small, "highs").name == "highs"

    big = LpProblem()
    big.add_var("x")
    for i in range(lpcore.DENSE_ROW_LIMIT + 1):
        big.add_row(f"r{i}", {"x": 1}, GE, 0)
    assert lpcore.pick_solver(big).name == "highs"


def test_check_kkt_detects_bad_duals():
    lp = _two_var()
    sol = lpcore.solve_lp(lp, solver="simplex")

    bad = sol._replace(y=np.array([1.5, 0.0]))
    report = lpcore.check_kkt(lp, bad)

    assert not report.passed
    assert report.dual_residual == pytest.approx(0.5)
    assert report.gap == pytest.approx(0.5)


def test_check_kkt_detects_bad_primal():
    lp = _two_var()
    sol = lpcore.solve_lp(lp, solver="simplex")

    bad = sol._replace(x=np.array([1.0, 0.5]))
    report = lpcore.check_kkt(lp, bad)

    assert not report.passed
    assert report.primal_residual == pytest.approx(0.5)


def test_add_var_duplicate():
    lp = LpProblem()
    lp.add_var("x")

    with pytest.raises(ValueError) as excinfo:
        lp.add_var("x")

    (msg,) = excinfo.value.args
    assert msg == "duplicate column: x"


@pytest.mark.parametrize(
    ("coeffs", "sense", "rhs", "expected"),
    (
        ({"z": 1}, GE, 0, "r: unknown column z"),
        ({"x": math.inf}, GE, 0, "r: coefficient of x must be finite"),
        ({"x": 1}, GE, math.nan, "r: rhs must be finite, got nan"),
        ({"x": 1}, "<=", 0, "r: unknown sense '<='"),
    ),
)
def test_add_row_errors(coeffs, sense, rhs, expected):
    lp = LpProblem()
    lp.add_var("x")

    with pytest.raises(ValueError) as excinfo:
        lp.add_row("r", coeffs, sense, rhs)

    (msg,) = excinfo.value.args
    assert msg == expected


def test_add_row_merges_repeated_columns():
    lp = LpProblem()
    lp.add_var("x")
    lp.add_var("y")

    lp.add_row("r", [("x", 1.0), ("y", 2.0), ("x", 3.0), ("y", -2.0)], GE, 0)

    assert lp.row_entries(0) == {0: 4.0}
    assert lp.dense().tolist() == [[4.0, 0.0]]


def test_write_lp():
    lp = LpProblem("demo")
    lp.add_var("x", cost=1)
    lp.add_var("y", free=True)
    lp.add_var("1 z")
    lp.add_row("balance(1)", {"x": 1, "y": -2}, GE, 3)
    lp.add_row("pin", {"1 z": 1}, EQ, 0)
    lp.objective_constant = 2.5

    assert lpcore.write_lp(lp) == (
        "\\ Problem name: demo\n"
        "\\ objective constant: 2.5\n"
        "Minimize\n"
        " obj: 1.0 x\n"
        "Subject To\n"
        " balance(1): 1.0 x - 2.0 y >= 3.0\n"
        " pin: 1.0 _1_z = 0.0\n"
        "Bounds\n"
        " y free\n"
        "End\n"
    )


def test_simplex_agrees_with_highs_on_a_bundled_case():
    lp = build_dcco(load_case(case_path(1)))

    dense = lpcore.solve_lp(lp, solver="simplex")
    highs = lpcore.solve_lp(lp, solver="highs")

    assert dense.status == highs.status == lpcore.OPTIMAL
    assert dense.objective == pytest.approx(highs.objective, rel=1e-7)
    assert lpcore.check_kkt(lp, dense).passed
    assert lpcore.check_kkt(lp, highs, tol=1e-6).passed


def _random_cover(seed, h=None):
    rng = np.random.default_rng(seed)
    n, m = 3, 4
    A = rng.uniform(0.1, 1.0, (m, n))
    b = rng.uniform(1.0, 5.0, m)
    c = rng.uniform(1.0, 3.0, n)
    if h is not None:
        b[h[0]] += h[1]
    lp = LpProblem(f"cover{seed}")
    for j in range(n):
        lp.add_var(f"x{j}", cost=c[j])
    for i in range(m):
        lp.add_row(f"r{i}", {f"x{j}": A[i, j] for j in range(n)}, GE, b[i])
    return lp, A, b, c


def _best_vertex(A, b, c):
    m, n = A.shape
    G = np.vstack((A, np.eye(n)))
    g = np.concatenate((b, np.zeros(n)))
    best = math.inf
    for active in itertools.combinations(range(m + n), n):
        sub = G[list(active)]
        if abs(np.linalg.det(sub)) < 1e-12:
            continue
        x = np.linalg.solve(sub, g[list(active)])
        if np.all(G @ x >= g - 1e-9):
            best = min(best, float(c @ x))
    return best


@pytest.mark.parametrize("solver", SOLVER_NAMES)
@pytest.mark.parametrize("seed", range(20))
def test_solve_lp_matches_vertex_enumeration(seed, solver):
    lp, A, b, c = _random_cover(seed)

    sol = lpcore.solve_lp(lp, solver=solver)

    assert sol.status == lpcore.OPTIMAL
    assert sol.objective == pytest.approx(_best_vertex(A, b, c), rel=1e-7)


@pytest.mark.parametrize("seed", range(10))
def test_duals_match_finite_differences(seed):
    lp, _, _, _ = _random_cover(seed)
    base = lpcore.solve_lp(lp, solver="simplex")
    step = 1e-6

    for i, name in enumerate(lp.row_names):
        bumped, _, _, _ = _random_cover(seed, h=(i, step))
        moved = lpcore.solve_lp(bumped, solver="simplex")
        slope = (moved.objective - base.objective) / step
        assert slope == pytest.approx(base.dual(name), abs=1e-5)
