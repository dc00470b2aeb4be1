from __future__ import annotations

import math
import re
from collections.abc import Iterable
from collections.abc import Mapping
from typing import Any
from typing import NamedTuple
from typing import Protocol

import numpy as np
import numpy.typing as npt
from scipy import linalg
from scipy import optimize
from scipy import sparse

EQ = "="
GE = ">="

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"

# above this many rows `auto` hands the problem to HiGHS
DENSE_ROW_LIMIT = 400

# consecutive degenerate pivots before switching to Bland's rule
DEGENERATE_LIMIT = 50

FloatArray = npt.NDArray[np.float64]


class SolverError(RuntimeError):
    pass


class Tolerances(NamedTuple):
    pivot: float = 1e-9
    feasibility: float = 1e-9
    optimality: float = 1e-9
    gap: float = 1e-7


class LpProblem:
    """minimization LP with named columns and named rows

    Columns are either nonnegative or free.  Rows are `EQ` or `GE`.
    """

    def __init__(self, name: str = "lp") -> None:
        self.name = name
        self.col_names: list[str] = []
        self.free: list[bool] = []
        self.cost: list[float] = []
        self.objective_constant = 0.0
        self.row_names: list[str] = []
        self.senses: list[str] = []
        self.rhs: list[float] = []
        self._cols: dict[str, int] = {}
        self._rows: dict[str, int] = {}
        self._entries: list[dict[int, float]] = []

    @property
    def n_cols(self) -> int:
        return len(self.col_names)

    @property
    def n_rows(self) -> int:
        return len(self.row_names)

    def add_var(self, name: str, *, cost: float = 0.0, free: bool = False) -> int:
        if name in self._cols:
            raise ValueError(f"duplicate column: {name}")
        if not math.isfinite(cost):
            raise ValueError(f"{name}: cost must be finite, got {cost!r}")
        self._cols[name] = len(self.col_names)
        self.col_names.append(name)
        self.free.append(free)
        self.cost.append(float(cost))
        return self._cols[name]

    def add_cost(self, name: str, amount: float) -> None:
        if not math.isfinite(amount):
            raise ValueError(f"{name}: cost must be finite, got {amount!r}")
        self.cost[self.col(name)] += amount

    def add_row(
        self,
        name: str,
        coeffs: Mapping[str, float] | Iterable[tuple[str, float]],
        sense: str,
        rhs: float,
    ) -> int:
        if name in self._rows:
            raise ValueError(f"duplicate row: {name}")
        if sense not in (EQ, GE):
            raise ValueError(f"{name}: unknown sense {sense!r}")
        if not math.isfinite(rhs):
            raise ValueError(f"{name}: rhs must be finite, got {rhs!r}")

        items = coeffs.items() if isinstance(coeffs, Mapping) else coeffs
        entries: dict[int, float] = {}
        for col_name, val in items:
            if not math.isfinite(val):
                raise ValueError(f"{name}: coefficient of {col_name} must be finite")
            try:
                j = self._cols[col_name]
            except KeyError:
                raise ValueError(f"{name}: unknown column {col_name}") from None
            entries[j] = entries.get(j, 0.0) + val

        self._rows[name] = len(self.row_names)
        self.row_names.append(name)
        self.senses.append(sense)
        self.rhs.append(float(rhs))
        self._entries.append({j: v for j, v in entries.items() if v != 0.0})
        return self._rows[name]

    def col(self, name: str) -> int:
        return self._cols[name]

    def row(self, name: str) -> int:
        return self._rows[name]

    def has_row(self, name: str) -> bool:
        return name in self._rows

    def row_entries(self, i: int) -> dict[int, float]:
        return self._entries[i]

    def matrix(self) -> sparse.csr_matrix:
        rows, cols, vals = [], [], []
        for i, entries in enumerate(self._entries):
            for j, v in sorted(entries.items()):
                rows.append(i)
                cols.append(j)
                vals.append(v)
        return sparse.csr_matrix(
            (vals, (rows, cols)),
            shape=(self.n_rows, self.n_cols),
            dtype=np.float64,
        )

    def dense(self) -> FloatArray:
        return np.asarray(self.matrix().toarray(), dtype=np.float64)


class LpSolution(NamedTuple):
    status: str
    x: FloatArray
    y: FloatArray
    objective: float
    problem: LpProblem
    solver: str = "simplex"
    iterations: int = 0

    def value(self, name: str) -> float:
        return float(self.x[self.problem.col(name)])

    def dual(self, name: str) -> float:
        return float(self.y[self.problem.row(name)])


class Solver(Protocol):
    name: str

    def solve(self, problem: LpProblem, tol: Tolerances) -> LpSolution: ...


def _empty(problem: LpProblem, status: str, solver: str) -> LpSolution:
    return LpSolution(
        status=status,
        x=np.zeros(problem.n_cols),
        y=np.zeros(problem.n_rows),
        objective=math.nan,
        problem=problem,
        solver=solver,
    )


class _StandardForm(NamedTuple):
    A: FloatArray
    b: FloatArray
    c: FloatArray
    row_sign: FloatArray
    plus: list[int]
    minus: dict[int, int]


def _standard_form(problem: LpProblem) -> _StandardForm:
    """`A x = b, x >= 0, b >= 0`: free columns split, GE rows get surplus"""
    m = problem.n_rows
    plus: list[int] = []
    minus: dict[int, int] = {}
    n = 0
    for j, is_free in enumerate(problem.free):
        plus.append(n)
        n += 1
        if is_free:
            minus[j] = n
            n += 1
    surplus = {}
    for i, sense in enumerate(problem.senses):
        if sense == GE:
            surplus[i] = n
            n += 1

    A = np.zeros((m, n))
    c = np.zeros(n)
    for j, cost in enumerate(problem.cost):
        c[plus[j]] = cost
        if j in minus:
            c[minus[j]] = -cost
    for i in range(m):
        for j, v in problem.row_entries(i).items():
            A[i, plus[j]] = v
            if j in minus:
                A[i, minus[j]] = -v
        if i in surplus:
            A[i, surplus[i]] = -1.0

    b = np.array(problem.rhs, dtype=np.float64)
    row_sign = np.where(b < 0, -1.0, 1.0)
    A *= row_sign[:, None]
    b *= row_sign
    return _StandardForm(A=A, b=b, c=c, row_sign=row_sign, plus=plus, minus=minus)


class _Phase(NamedTuple):
    status: str
    basis: npt.NDArray[np.intp]
    iterations: int


def _factor(B: FloatArray, tol: Tolerances) -> tuple[FloatArray, npt.NDArray[np.int32]]:
    lu, piv = linalg.lu_factor(B, check_finite=False)
    scale = max(1.0, float(np.max(np.abs(B))))
    if np.min(np.abs(np.diag(lu))) < tol.pivot * scale:
        raise SolverError("singular basis: pivot below threshold")
    return lu, piv


def _iterate(
    A: FloatArray,
    b: FloatArray,
    c: FloatArray,
    basis: npt.NDArray[np.intp],
    tol: Tolerances,
    iteration_limit: int,
) -> _Phase:
    m, n = A.shape
    bland = False
    degenerate = 0
    for it in range(iteration_limit):
        lu = _factor(A[:, basis], tol)
        x_b = np.maximum(linalg.lu_solve(lu, b, check_finite=False), 0.0)
        y = linalg.lu_solve(lu, c[basis], trans=1, check_finite=False)
        d = c - A.T @ y
        d[basis] = 0.0

        candidates = np.flatnonzero(d < -tol.optimality)
        if candidates.size == 0:
            return _Phase(OPTIMAL, basis, it)
        if bland:
            q = int(candidates[0])
        else:
            q = int(candidates[np.argmin(d[candidates])])

        u = linalg.lu_solve(lu, A[:, q], check_finite=False)
        rows = np.flatnonzero(u > tol.pivot)
        if rows.size == 0:
            return _Phase(UNBOUNDED, basis, it)
        ratios = x_b[rows] / u[rows]
        theta = float(np.min(ratios))
        ties = rows[ratios <= theta + tol.feasibility]
        if bland:
            r = int(ties[np.argmin(basis[ties])])
        else:
            r = int(ties[np.argmax(u[ties])])

        if theta <= tol.feasibility:
            degenerate += 1
            if degenerate > DEGENERATE_LIMIT:
                bland = True
        else:
            degenerate = 0

        basis = basis.copy()
        basis[r] = q
    raise SolverError(f"iteration limit reached ({iteration_limit})")


class SimplexSolver:
    """dense two-phase revised simplex

    Dantzig pricing with a Bland fallback after a run of degenerate pivots.
    The basis is refactorized every iteration, and duals are read off the
    final basis as y = B⁻ᵀ c_B.
    """

    name = "simplex"

    def solve(self, problem: LpProblem, tol: Tolerances) -> LpSolution:
        if problem.n_rows == 0:
            return self._no_rows(problem)

        std = _standard_form(problem)
        A, b, c = std.A, std.b, std.c
        m, n = A.shape
        limit = 50 * (m + n) + 1000

        # phase 1: artificial identity basis
        A1 = np.hstack((A, np.eye(m)))
        c1 = np.concatenate((np.zeros(n), np.ones(m)))
        phase1 = _iterate(A1, b, c1, np.arange(n, n + m), tol, limit)
        if phase1.status != OPTIMAL:
            raise SolverError(f"phase 1 ended {phase1.status}")
        basis = phase1.basis
        lu = _factor(A1[:, basis], tol)
        x_b = linalg.lu_solve(lu, b, check_finite=False)
        infeasibility = float(np.sum(x_b[basis >= n]))
        if infeasibility > tol.feasibility * max(1.0, float(np.max(np.abs(b)))):
            return _empty(problem, INFEASIBLE, self.name)

        # drive zero-level artificials out, dropping rows that are redundant
        keep = np.ones(m, dtype=bool)
        keep_pos = np.ones(m, dtype=bool)
        for r in range(m):
            if basis[r] < n:
                continue
            e_r = np.zeros(m)
            e_r[r] = 1.0
            row = linalg.lu_solve(lu, e_r, trans=1, check_finite=False) @ A
            row[basis[basis < n]] = 0.0
            j = int(np.argmax(np.abs(row)))
            if abs(row[j]) > tol.pivot:
                basis = basis.copy()
                basis[r] = j
                lu = _factor(A1[:, basis], tol)
            else:
                # the artificial of constraint i is basic here: that row is redundant
                keep[basis[r] - n] = False
                keep_pos[r] = False

        A2 = A[keep]
        b2 = b[keep]
        basis2 = basis[keep_pos]
        phase2 = _iterate(A2, b2, c, basis2, tol, limit)
        iterations = phase1.iterations + phase2.iterations
        if phase2.status == UNBOUNDED:
            return _empty(problem, UNBOUNDED, self.name)

        lu = _factor(A2[:, phase2.basis], tol)
        x_std = np.zeros(n)
        x_std[phase2.basis] = linalg.lu_solve(lu, b2, check_finite=False)
        y_std = np.zeros(m)
        y_std[keep] = linalg.lu_solve(lu, c[phase2.basis], trans=1, check_finite=False)

        x = x_std[std.plus]
        for j, k in std.minus.items():
            x[j] -= x_std[k]
        y = y_std * std.row_sign
        objective = float(np.dot(problem.cost, x)) + problem.objective_constant
        return LpSolution(
            status=OPTIMAL,
            x=x,
            y=y,
            objective=objective,
            problem=problem,
            solver=self.name,
            iterations=iterations,
        )

    def _no_rows(self, problem: LpProblem) -> LpSolution:
        for cost, is_free in zip(problem.cost, problem.free):
            if cost < 0 or (is_free and cost != 0):
                return _empty(problem, UNBOUNDED, self.name)
        return LpSolution(
            status=OPTIMAL,
            x=np.zeros(problem.n_cols),
            y=np.zeros(0),
            objective=problem.objective_constant,
            problem=problem,
            solver=self.name,
        )


class HighsSolver:
    """`scipy.optimize.linprog` with the HiGHS backend

    GE rows are passed as negated `A_ub` rows, so their duals come back as
    the negated inequality marginals.
    """

    name = "highs"

    def solve(self, problem: LpProblem, tol: Tolerances) -> LpSolution:
        A = problem.matrix()
        rhs = np.array(problem.rhs, dtype=np.float64)
        ge = np.array([s == GE for s in problem.senses], dtype=bool)
        eq = ~ge

        kwargs: dict[str, Any] = {}
        if ge.any():
            kwargs["A_ub"] = -A[np.flatnonzero(ge)]
            kwargs["b_ub"] = -rhs[ge]
        if eq.any():
            kwargs["A_eq"] = A[np.flatnonzero(eq)]
            kwargs["b_eq"] = rhs[eq]
        bounds = [(None, None) if f else (0, None) for f in problem.free]

        res = optimize.linprog(
            np.array(problem.cost, dtype=np.float64),
            bounds=bounds,
            method="highs",
            options={
                "primal_feasibility_tolerance": max(tol.feasibility, 1e-10),
                "dual_feasibility_tolerance": max(tol.optimality, 1e-10),
            },
            **kwargs,
        )
        if res.status == 2:
            return _empty(problem, INFEASIBLE, self.name)
        elif res.status == 3:
            return _empty(problem, UNBOUNDED, self.name)
        elif res.status != 0:
            raise SolverError(f"highs: {res.message}")

        y = np.zeros(problem.n_rows)
        if ge.any():
            y[ge] = -np.asarray(res.ineqlin.marginals)
        if eq.any():
            y[eq] = np.asarray(res.eqlin.marginals)
        return LpSolution(
            status=OPTIMAL,
            x=np.asarray(res.x, dtype=np.float64),
            y=y,
            objective=float(res.fun) + problem.objective_constant,
            problem=problem,
            solver=self.name,
            iterations=int(getattr(res, "nit", 0)),
        )


SOLVERS: dict[str, Solver] = {"simplex": SimplexSolver(), "highs": HighsSolver()}


def pick_solver(problem: LpProblem, solver: str | Solver = "auto") -> Solver:
    if not isinstance(solver, str):
        return solver
    elif solver == "auto":
        if problem.n_rows <= DENSE_ROW_LIMIT:
            return SOLVERS["simplex"]
        else:
            return SOLVERS["highs"]
    else:
        return SOLVERS[solver]


def solve_lp(
    problem: LpProblem,
    tol: Tolerances = Tolerances(),
    solver: str | Solver = "auto",
) -> LpSolution:
    return pick_solver(problem, solver).solve(problem, tol)


class KktReport(NamedTuple):
    primal_residual: float
    dual_residual: float
    complementarity: float
    gap: float
    tol: float

    @property
    def passed(self) -> bool:
        return max(
            self.primal_residual,
            self.dual_residual,
            self.complementarity,
            self.gap,
        ) <= self.tol


def check_kkt(problem: LpProblem, solution: LpSolution, tol: float = 1e-7) -> KktReport:
    A = problem.matrix()
    b = np.array(problem.rhs, dtype=np.float64)
    c = np.array(problem.cost, dtype=np.float64)
    ge = np.array([s == GE for s in problem.senses], dtype=bool)
    free = np.array(problem.free, dtype=bool)
    x, y = solution.x, solution.y

    activity = A @ x - b
    primal = np.concatenate((
        np.abs(activity[~ge]),
        np.maximum(-activity[ge], 0.0),
        np.maximum(-x[~free], 0.0),
    ))

    reduced = c - A.T @ y
    dual = np.concatenate((
        np.abs(reduced[free]),
        np.maximum(-reduced[~free], 0.0),
        np.maximum(-y[ge], 0.0),
    ))

    comp = np.concatenate((
        np.abs(x[~free] * reduced[~free]),
        np.abs(y[ge] * activity[ge]),
    ))

    primal_obj = float(c @ x)
    dual_obj = float(b @ y)
    gap = abs(primal_obj - dual_obj) / max(1.0, abs(primal_obj))

    def _max(arr: FloatArray) -> float:
        return float(np.max(arr)) if arr.size else 0.0

    return KktReport(
        primal_residual=_max(primal),
        dual_residual=_max(dual),
        complementarity=_max(comp),
        gap=gap,
        tol=tol,
    )


_LP_NAME_BAD = re.compile(r"[^A-Za-z0-9!\"#$%&()/,.;?@_`'{}|~]")


def _lp_name(name: str) -> str:
    ret = _LP_NAME_BAD.sub("_", name)
    if ret[0].isdigit() or ret[0] in ".eE":
        ret = f"_{ret}"
    return ret


def _lp_terms(terms: Iterable[tuple[str, float]]) -> str:
    parts = []
    for name, val in terms:
        sign = "-" if val < 0 else "+"
        parts.append(f"{sign} {abs(val)!r} {_lp_name(name)}")
    if not parts:
        return "0"
    ret = " ".join(parts)
    return ret[2:] if ret.startswith("+ ") else ret


def write_lp(problem: LpProblem) -> str:
    """the problem in CPLEX LP text format"""
    lines = [f"\\ Problem name: {problem.name}"]
    if problem.objective_constant:
        lines.append(f"\\ objective constant: {problem.objective_constant!r}")
    lines.append("Minimize")
    objective = [
        (name, cost)
        for name, cost in zip(problem.col_names, problem.cost)
        if cost != 0.0
    ]
    lines.append(f" obj: {_lp_terms(objective)}")
    lines.append("Subject To")
    for i, name in enumerate(problem.row_names):
        entries = problem.row_entries(i)
        terms = [(problem.col_names[j], v) for j, v in sorted(entries.items())]
        sense = "=" if problem.senses[i] == EQ else ">="
        lines.append(f" {_lp_name(name)}: {_lp_terms(terms)} {sense} {problem.rhs[i]!r}")
    lines.append("Bounds")
    for name, is_free in zip(problem.col_names, problem.free):
        if is_free:
            lines.append(f" {_lp_name(name)} free")
    lines.append("End")
    return "\n".join(lines) + "\n"
