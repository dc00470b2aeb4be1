from __future__ import annotations

import argparse
import math
import os
import sys
from collections.abc import Callable
from collections.abc import Sequence
from typing import NamedTuple

import pandas as pd

from clearing import AssumptionError
from clearing import CcoSolution
from clearing import InfeasibleError
from clearing import model_size
from clearing import sample_scenarios
from clearing import ScenarioSet
from clearing import solve_cco
from clearing import solve_nominal
from clearing import solve_so
from clearing import SoSolution
from lpcore import check_kkt
from lpcore import LpProblem
from lpcore import SolverError
from lpcore import SOLVERS
from lpcore import write_lp
from montecarlo import compare_profits
from montecarlo import compare_violations
from montecarlo import MIN_DRAWS
from montecarlo import simulate
from netmodel import case_warnings
from netmodel import load_case
from netmodel import MarketCase
from netmodel import validate
from pricing import analytic_comparison_frame
from pricing import cco_prices
from pricing import comparison_frame
from pricing import dispatch_frame
from pricing import histogram_frame
from pricing import price_frame
from pricing import PriceSchedule
from pricing import read_price_frame
from pricing import so_dispatch_frame
from pricing import so_price_frame
from pricing import so_prices
from pricing import SoPriceSchedule
from profits import adequacy_frame
from profits import adequacy_report
from profits import ADEQUACY_TOL
from profits import AdequacyError
from profits import cco_profit_report
from profits import IdentityError
from profits import profit_comparison_frame
from profits import profit_frame
from profits import ProfitReport
from profits import so_profits
from profits import SoProfitReport

EXIT_OK = 0
EXIT_IO = 2
EXIT_INVALID = 10
EXIT_INFEASIBLE = 20
EXIT_ASSUMPTION = 21
EXIT_CHECK = 30
EXIT_STATISTICS = 40
EXIT_DIFF = 50

KKT_TOL = 1e-7
CONSERVATION_TOL = 1e-8

CASE_NUMBERS = (1, 2, 3, 4)
EXPECTED_COLUMNS = ("scheme", "participant", "quantity", "value", "tolerance", "source")


class RunConfig(NamedTuple):
    command: str
    case: str | None
    epsilon: float | None
    scenarios: int
    seed: int
    draws: int
    mc_seed: int
    out: str
    tol: float | None
    digits: int
    solver: str
    trace: bool
    prices: str | None
    cases: str
    expected: str
    no_so: bool
    write_lp: bool
    scenario_file: str | None

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> RunConfig:
        return cls(
            command=args.command,
            case=getattr(args, "case", None),
            epsilon=args.epsilon,
            scenarios=getattr(args, "scenarios", 1000),
            seed=getattr(args, "seed", 7),
            draws=getattr(args, "draws", 200_000),
            mc_seed=getattr(args, "mc_seed", 11),
            out=args.out,
            tol=args.tol,
            digits=args.digits,
            solver=args.solver,
            trace=getattr(args, "trace", False),
            prices=getattr(args, "prices", None),
            cases=getattr(args, "cases", "cases"),
            expected=getattr(args, "expected", "expected"),
            no_so=getattr(args, "no_so", False),
            write_lp=getattr(args, "write_lp", False),
            scenario_file=getattr(args, "scenario_file", None),
        )

    @property
    def adequacy_tol(self) -> float:
        return ADEQUACY_TOL if self.tol is None else self.tol

    @property
    def kkt_tol(self) -> float:
        return KKT_TOL if self.tol is None else self.tol


def _exit_code(e: Exception) -> int:
    if isinstance(e, OSError):
        return EXIT_IO
    elif isinstance(e, AssumptionError):
        return EXIT_ASSUMPTION
    elif isinstance(e, ValueError):
        return EXIT_INVALID
    elif isinstance(e, (InfeasibleError, SolverError)):
        return EXIT_INFEASIBLE
    elif isinstance(e, (AdequacyError, IdentityError)):
        return EXIT_CHECK
    else:
        raise AssertionError(f"unhandled: {e!r}")


_ERRORS = (
    OSError,
    ValueError,
    InfeasibleError,
    SolverError,
    AdequacyError,
    IdentityError,
)


def _report_error(filename: str, e: Exception) -> int:
    if isinstance(e, OSError) and e.filename is not None:
        print(f"{e.filename}: {e.strerror}", file=sys.stderr)
    else:
        print(f"{filename}: {e}", file=sys.stderr)
    return _exit_code(e)


def _load(filename: str, epsilon: float | None) -> MarketCase:
    case = load_case(filename)
    if epsilon is not None:
        case = case._replace(epsilon=epsilon)
        validate(case)
    for warning in case_warnings(case):
        print(f"{filename}: warning: {warning}", file=sys.stderr)
    return case


def _write(out: str, name: str, frame: pd.DataFrame, digits: int | None = None) -> None:
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, name)
    if digits is None:
        frame.to_csv(path, index=False)
    else:
        frame = frame.copy()
        floats = frame.select_dtypes("float").columns
        # adding 0.0 turns -0.0 into 0.0
        frame[floats] = frame[floats].round(digits) + 0.0
        frame.to_csv(path, index=False, float_format=f"%.{digits}f")
    print(f"wrote {path}")


def duals_frame(sol: CcoSolution) -> pd.DataFrame:
    lp = sol.lp
    return pd.DataFrame({
        "row": lp.row_names,
        "sense": lp.senses,
        "rhs": lp.rhs,
        "dual": sol.raw.y,
    })


def size_frame(case: MarketCase, scenario_count: int | None = None) -> pd.DataFrame:
    sizes = [model_size(case)]
    if scenario_count is not None:
        sizes.append(model_size(case, scenario_count))
    return pd.DataFrame(sizes, columns=sizes[0]._fields)


def objective_frame(sol: CcoSolution, solver: str) -> pd.DataFrame:
    """chance-constrained cost next to the deterministic clearing at the forecast"""
    case = sol.case
    forecast = {bus: case.forecast(bus) for bus in case.buses}
    nominal = solve_nominal(case, forecast, solver=solver)
    return pd.DataFrame({
        "model": ["dcco", "nominal"],
        "objective": [sol.objective, nominal.objective],
        "uncertainty_cost": [sol.objective - nominal.objective, 0.0],
    })


def _write_lp(out: str, name: str, lp: LpProblem) -> None:
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, name)
    with open(path, "w", encoding="UTF-8") as f:
        f.write(write_lp(lp))
    print(f"wrote {path}")


class CcoRun(NamedTuple):
    sol: CcoSolution
    prices: PriceSchedule
    report: ProfitReport


class SoRun(NamedTuple):
    sol: SoSolution
    prices: SoPriceSchedule
    report: SoProfitReport


def _run_cco(case: MarketCase, config: RunConfig) -> CcoRun:
    sol = solve_cco(case, solver=config.solver)
    kkt = check_kkt(sol.lp, sol.raw, config.kkt_tol)
    if not kkt.passed:
        raise IdentityError(f"optimality conditions violated: {kkt}")
    prices = cco_prices(sol)
    report = cco_profit_report(sol, prices, config.adequacy_tol, check=False)
    return CcoRun(sol, prices, report)


def _run_so(case: MarketCase, config: RunConfig) -> SoRun:
    if config.scenario_file is not None:
        scenarios = ScenarioSet.read_csv(config.scenario_file)
    else:
        scenarios = sample_scenarios(case, config.scenarios, config.seed)
    sol = solve_so(case, scenarios, solver=config.solver)
    report = so_profits(sol, config.adequacy_tol, check=False)
    return SoRun(sol, so_prices(sol), report)


def _write_cco(run: CcoRun, out: str, config: RunConfig) -> None:
    _write(out, "dispatch.csv", dispatch_frame(run.sol, run.prices), config.digits)
    _write(out, "prices.csv", price_frame(run.sol, run.prices))
    _write(out, "profits.csv", profit_frame(run.report), config.digits)
    _write(out, "duals.csv", duals_frame(run.sol))
    verdicts = adequacy_report(run.report, tol=config.adequacy_tol)
    _write(out, "adequacy.csv", adequacy_frame(verdicts))


def _write_so(run: SoRun, out: str, config: RunConfig) -> None:
    _write(out, "scenarios.csv", run.sol.scenarios.to_frame())
    _write(out, "so_dispatch.csv", so_dispatch_frame(run.sol), config.digits)
    _write(out, "so_prices.csv", so_price_frame(run.sol, run.prices), config.digits)
    _write(out, "so_profits.csv", profit_frame(run.report), config.digits)
    _write(out, "histogram.csv", histogram_frame(run.prices))
    verdicts = adequacy_report(so=run.report, tol=config.adequacy_tol)
    _write(out, "so_adequacy.csv", adequacy_frame(verdicts))


def _verify_cco(run: CcoRun, config: RunConfig) -> None:
    cco_profit_report(run.sol, run.prices, config.adequacy_tol)


def _verify_so(run: SoRun, config: RunConfig) -> None:
    so_profits(run.sol, config.adequacy_tol)


def cmd_solve_cco(config: RunConfig) -> int:
    assert config.case is not None
    case = _load(config.case, config.epsilon)
    print(f"solving chance-constrained model: {config.case}")
    run = _run_cco(case, config)
    _write_cco(run, config.out, config)
    _write(config.out, "model_size.csv", size_frame(case))
    _write(config.out, "objective.csv", objective_frame(run.sol, config.solver))
    if config.write_lp:
        _write_lp(config.out, "dcco.lp", run.sol.lp)
    _verify_cco(run, config)
    return EXIT_OK


def cmd_solve_so(config: RunConfig) -> int:
    assert config.case is not None
    case = _load(config.case, config.epsilon)
    if config.scenario_file is not None:
        source = config.scenario_file
    else:
        source = f"{config.scenarios} scenarios, seed {config.seed}"
    print(f"solving stochastic model: {config.case} ({source})")
    run = _run_so(case, config)
    _write_so(run, config.out, config)
    _write(config.out, "model_size.csv", size_frame(case, run.sol.scenarios.count))
    if config.write_lp:
        _write_lp(config.out, "so.lp", run.sol.lp)
    _verify_so(run, config)
    return EXIT_OK


def cmd_compare(config: RunConfig) -> int:
    assert config.case is not None
    case = _load(config.case, config.epsilon)
    print(f"comparing pricing schemes: {config.case}")
    cco = _run_cco(case, config)
    so = _run_so(case, config)
    _write(config.out, "compare.csv", comparison_frame(case, cco.prices, so.prices), config.digits)
    _write(
        config.out,
        "compare_analytic.csv",
        analytic_comparison_frame(case, cco.prices, so.prices),
        config.digits,
    )
    _write(
        config.out,
        "compare_profits.csv",
        profit_comparison_frame(cco.report, so.report),
        config.digits,
    )
    _write(config.out, "histogram.csv", histogram_frame(so.prices))
    _verify_cco(cco, config)
    _verify_so(so, config)
    return EXIT_OK


def cmd_simulate(config: RunConfig) -> int:
    assert config.case is not None
    case = _load(config.case, config.epsilon)
    run = _run_cco(case, config)
    _verify_cco(run, config)

    prices, operator_prices = run.prices, None
    if config.prices is not None:
        frame = pd.read_csv(
            config.prices,
            dtype={"participant": str, "bus": str},
            float_precision="round_trip",
        )
        prices, operator_prices = read_price_frame(frame, run.prices, run.sol), run.prices

    os.makedirs(config.out, exist_ok=True)
    trace = os.path.join(config.out, "trace.csv") if config.trace else None
    print(f"simulating {config.draws} draws (seed {config.mc_seed}): {config.case}")
    stats = simulate(run.sol, prices, config.draws, config.mc_seed, trace, operator_prices)
    if trace is not None:
        print(f"wrote {trace}")

    profits = compare_profits(stats, run.report)
    violations = compare_violations(stats, case.epsilon)
    _write(config.out, "simulation.csv", profits)
    _write(config.out, "violations.csv", violations)

    if stats.n < MIN_DRAWS:
        print(
            f"{config.case}: warning: {stats.n} draws is below {MIN_DRAWS}, "
            f"statistical bands not applied",
            file=sys.stderr,
        )
    if stats.max_conservation_residual > CONSERVATION_TOL:
        print(
            f"{config.case}: money is not conserved: "
            f"residual {stats.max_conservation_residual!r}",
            file=sys.stderr,
        )
        return EXIT_CHECK

    failed = [
        *profits.loc[~profits["passed"], "participant"],
        *violations.loc[~violations["passed"], "bound"],
    ]
    if failed:
        print(
            f"{config.case}: outside statistical band: {', '.join(failed)}",
            file=sys.stderr,
        )
        return EXIT_STATISTICS
    else:
        return EXIT_OK


Cells = dict[tuple[str, str, str], float]


def read_expected(filename: str) -> tuple[pd.DataFrame, float | None]:
    """expected cells and the `# epsilon:` they were produced at"""
    epsilon = None
    with open(filename, encoding="UTF-8") as f:
        for line in f:
            if not line.startswith("#"):
                break
            key, _, val = line[1:].partition(":")
            if key.strip() == "epsilon":
                epsilon = float(val)
    frame = pd.read_csv(
        filename,
        comment="#",
        dtype={"scheme": str, "participant": str, "quantity": str, "source": str},
    )
    missing = sorted(set(EXPECTED_COLUMNS) - set(frame.columns))
    if missing:
        raise ValueError(f"missing columns: {missing}")
    return frame, epsilon


def cco_cells(run: CcoRun) -> Cells:
    cells: Cells = {}
    for row in dispatch_frame(run.sol, run.prices).itertuples(index=False):
        for column in ("expected", "std", "price"):
            cells["cco", row.element, f"{row.action}.{column}"] = float(getattr(row, column))
    for row in profit_frame(run.report).itertuples(index=False):
        cells["cco", row.participant, "profit.expected"] = float(row.expected)
        cells["cco", row.participant, "profit.std"] = float(row.std)
    return cells


def so_cells(case: MarketCase, cco: CcoRun, so: SoRun) -> Cells:
    cells: Cells = {}
    for row in comparison_frame(case, cco.prices, so.prices).itertuples(index=False):
        cells["so", row.element, f"{row.action}.mean"] = float(row.so_mean)
        cells["so", row.element, f"{row.action}.std"] = float(row.so_std)
    for row in profit_frame(so.report).itertuples(index=False):
        cells["so", row.participant, "profit.expected"] = float(row.expected)
        cells["so", row.participant, "profit.std"] = float(row.std)
    return cells


def diff_cells(expected: pd.DataFrame, cells: Cells, digits: int) -> pd.DataFrame:
    rows: list[dict[str, object]] = []
    for row in expected.itertuples(index=False):
        actual = cells.get((row.scheme, row.participant, row.quantity), math.nan)
        passed = (
            not math.isnan(actual)
            and abs(round(actual, digits) - row.value) <= row.tolerance + 1e-9
        )
        rows.append({
            "scheme": row.scheme,
            "participant": row.participant,
            "quantity": row.quantity,
            "expected": row.value,
            "actual": actual,
            "tolerance": row.tolerance,
            "passed": passed,
            "source": row.source,
        })
    return pd.DataFrame(rows)


def cmd_reproduce(config: RunConfig) -> int:
    if config.solver == "auto":
        # published tables sit on the optimal dual face HiGHS returns
        config = config._replace(solver="highs")
    frames = []
    for number in CASE_NUMBERS:
        case_file = os.path.join(config.cases, f"case{number}.json")
        expected_file = os.path.join(config.expected, f"case{number}.csv")
        try:
            expected, epsilon = read_expected(expected_file)
            if config.epsilon is not None:
                epsilon = config.epsilon
            case = _load(case_file, epsilon)
            print(f"=== case{number}: {case_file} (epsilon {case.epsilon})")
            out = os.path.join(config.out, f"case{number}")

            cco = _run_cco(case, config)
            _write_cco(cco, out, config)
            cells = cco_cells(cco)
            _verify_cco(cco, config)
            if not config.no_so:
                so = _run_so(case, config)
                _write_so(so, out, config)
                cells.update(so_cells(case, cco, so))
                _verify_so(so, config)
        except _ERRORS as e:
            return _report_error(case_file, e)

        if config.no_so:
            expected = expected[expected["scheme"] != "so"]
        diff = diff_cells(expected, cells, config.digits)
        diff.insert(0, "case", f"case{number}")
        frames.append(diff)

        failed = diff[~diff["passed"]]
        print(f"-> {len(diff) - len(failed)} of {len(diff)} cells match")
        for row in failed.itertuples(index=False):
            print(
                f"{expected_file}: {row.participant} {row.quantity} ({row.scheme}): "
                f"expected {row.expected}, got {row.actual!r}",
                file=sys.stderr,
            )

    report = pd.concat(frames, ignore_index=True)
    _write(config.out, "diff.csv", report)
    if report["passed"].all():
        return EXIT_OK
    else:
        return EXIT_DIFF


COMMANDS: dict[str, Callable[[RunConfig], int]] = {
    "solve-cco": cmd_solve_cco,
    "solve-so": cmd_solve_so,
    "compare": cmd_compare,
    "simulate": cmd_simulate,
    "reproduce": cmd_reproduce,
}


def _positive_int(s: str) -> int:
    val = int(s)
    if val < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {val}")
    return val


def _nonnegative_int(s: str) -> int:
    val = int(s)
    if val < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {val}")
    return val


def main(argv: Sequence[str] | None = None) -> int:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--epsilon", type=float)
    common.add_argument("--out", default="out")
    common.add_argument("--tol", type=float)
    common.add_argument("--round", type=_nonnegative_int, default=2, dest="digits")
    common.add_argument("--solver", choices=("auto", *SOLVERS), default="auto")

    casefile = argparse.ArgumentParser(add_help=False)
    casefile.add_argument("case", metavar="CASEFILE")

    sampling = argparse.ArgumentParser(add_help=False)
    sampling.add_argument("--scenarios", type=_positive_int, default=1000)
    sampling.add_argument("--seed", type=int, default=7)

    scenario_file = argparse.ArgumentParser(add_help=False)
    scenario_file.add_argument("--scenario-file", help="read scenarios from this csv")

    export = argparse.ArgumentParser(add_help=False)
    export.add_argument("--write-lp", action="store_true")

    parser = argparse.ArgumentParser(
        prog="ccmkt",
        description="clear, price and settle chance-constrained electricity markets",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    subparsers.add_parser("solve-cco", parents=[common, export, casefile])
    subparsers.add_parser("solve-so", parents=[common, sampling, scenario_file, export, casefile])
    subparsers.add_parser("compare", parents=[common, sampling, scenario_file, casefile])

    simulate_parser = subparsers.add_parser("simulate", parents=[common, casefile])
    simulate_parser.add_argument("--draws", type=_positive_int, default=200_000)
    simulate_parser.add_argument("--mc-seed", type=int, default=11)
    simulate_parser.add_argument("--trace", action="store_true")
    simulate_parser.add_argument("--prices", help="settle participants at these prices")

    reproduce_parser = subparsers.add_parser("reproduce", parents=[common, sampling])
    reproduce_parser.add_argument("--cases", default="cases")
    reproduce_parser.add_argument("--expected", default="expected")
    reproduce_parser.add_argument("--no-so", action="store_true")

    args = parser.parse_args(argv)
    config = RunConfig.from_args(args)

    try:
        return COMMANDS[config.command](config)
    except _ERRORS as e:
        return _report_error(config.case or config.cases, e)


if __name__ == "__main__":
    raise SystemExit(main())
