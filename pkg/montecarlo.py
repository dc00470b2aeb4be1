from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
import numpy.typing as npt
import pandas as pd

from clearing import CcoSolution
from clearing import CHUNK
from clearing import MONTE_CARLO_STREAM
from clearing import standard_draws
from pricing import PriceSchedule
from profits import OPERATOR
from profits import ProfitReport

FloatArray = npt.NDArray[np.float64]
BoolArray = npt.NDArray[np.bool_]

# slack on realized bounds before a draw counts as a violation
VIOLATION_TOL = 1e-7

# bounds flagged for information only, outside the chance-constrained set
UNCONSTRAINED_FLAGS = ("wind_negative",)

Z_LIMIT = 4.0
MIN_DRAWS = 30
MEAN_TOL = 1e-6
# relative std error allowed at any N, widened for small samples
STD_REL_LIMIT = 0.03


class RealTimeOutcome(NamedTuple):
    error: FloatArray
    realized_w: FloatArray
    ru: dict[str, FloatArray]
    rd: dict[str, FloatArray]
    wspi: dict[str, FloatArray]
    s: dict[str, FloatArray]
    violations: dict[str, BoolArray]
    rebalance_residual: FloatArray

    @property
    def count(self) -> int:
        return self.error.shape[0]


def realize(sol: CcoSolution, draw: npt.ArrayLike) -> RealTimeOutcome:
    """apply the affine recourse to forecast errors, one row of `draw` per sample"""
    case = sol.case
    error = np.atleast_2d(np.asarray(draw, dtype=np.float64))
    if error.shape[1] != len(case.buses):
        raise ValueError(
            f"draw has {error.shape[1]} entries per sample, case has {len(case.buses)} buses",
        )
    col = {bus: error[:, i] for i, bus in enumerate(case.buses)}
    realized_w = np.column_stack([case.forecast(bus) + col[bus] for bus in case.buses])

    ru, rd = {}, {}
    violations: dict[str, BoolArray] = {}
    for gen in case.generators:
        d = col[gen.bus]
        ru[gen.id] = sol.ru[gen.id] - sol.alpha_u[gen.id] * d
        rd[gen.id] = sol.rd[gen.id] + sol.alpha_d[gen.id] * d
        output = sol.p[gen.id] + ru[gen.id] - rd[gen.id]
        violations[f"ru_lo({gen.id})"] = ru[gen.id] < -VIOLATION_TOL
        violations[f"ru_hi({gen.id})"] = ru[gen.id] > gen.up_cap + VIOLATION_TOL
        violations[f"rd_lo({gen.id})"] = rd[gen.id] < -VIOLATION_TOL
        violations[f"rd_hi({gen.id})"] = rd[gen.id] > gen.down_cap + VIOLATION_TOL
        violations[f"gen_lo({gen.id})"] = output < -VIOLATION_TOL
        violations[f"gen_hi({gen.id})"] = output > gen.capacity + VIOLATION_TOL

    wspi = {}
    for i, bus in enumerate(case.buses):
        wspi[bus] = sol.wspi[bus] + sol.beta[bus] * col[bus]
        if case.has_vres(bus):
            w = realized_w[:, i]
            vres_id = case.bus_vres(bus).id
            violations[f"spill_lo({vres_id})"] = wspi[bus] < -VIOLATION_TOL
            violations[f"spill_hi({vres_id})"] = wspi[bus] > w + VIOLATION_TOL
            violations[f"wind_negative({vres_id})"] = w < 0

    s = {}
    for load in case.loads:
        s[load.id] = sol.s[load.id] - sol.gamma[load.id] * col[load.bus]
        violations[f"shed_lo({load.id})"] = s[load.id] < -VIOLATION_TOL
        violations[f"shed_hi({load.id})"] = s[load.id] > load.demand + VIOLATION_TOL

    residual = np.zeros(error.shape[0])
    for i, bus in enumerate(case.buses):
        shift = math.fsum(
            b * (sol.theta0[bus] - sol.theta[bus] - sol.theta0[other] + sol.theta[other])
            for other, b in case.neighbors(bus)
        )
        total = realized_w[:, i] - sol.wsch[bus] - wspi[bus] + shift
        for gen in case.bus_generators(bus):
            total = total + ru[gen.id] - rd[gen.id]
        for load in case.bus_loads(bus):
            total = total + s[load.id]
        residual = np.maximum(residual, np.abs(total))

    return RealTimeOutcome(
        error=error,
        realized_w=realized_w,
        ru=ru,
        rd=rd,
        wspi=wspi,
        s=s,
        violations=violations,
        rebalance_residual=residual,
    )


class CashFlows(NamedTuple):
    # money received by each participant, negative when it pays
    transfers: dict[str, FloatArray]
    profits: dict[str, FloatArray]
    conservation: FloatArray


def _participant_transfers(
    sol: CcoSolution,
    outcome: RealTimeOutcome,
    prices: PriceSchedule,
) -> tuple[dict[str, FloatArray], dict[str, FloatArray]]:
    case = sol.case
    transfers: dict[str, FloatArray] = {}
    costs: dict[str, FloatArray] = {}
    zeros = np.zeros(outcome.count)

    for gen in case.generators:
        ru, rd = outcome.ru[gen.id], outcome.rd[gen.id]
        p = sol.p[gen.id]
        transfers[gen.id] = (
            prices.energy[gen.bus] * p
            + prices.upward[gen.id] * ru
            - prices.downward[gen.id] * rd
        )
        costs[gen.id] = gen.cost * p + gen.up_cost * ru - gen.down_cost * rd

    for i, bus in enumerate(case.buses):
        if not case.has_vres(bus):
            continue
        vres = case.bus_vres(bus)
        w = outcome.realized_w[:, i]
        wspi = outcome.wspi[bus]
        transfers[vres.id] = (
            prices.vres_scheduled[bus] * sol.wsch[bus]
            + prices.vres_deviation[bus] * (w - sol.wsch[bus] - wspi)
        )
        costs[vres.id] = vres.cost * (w - wspi)

    for load in case.loads:
        transfers[load.id] = (
            prices.curtailment[load.bus] * outcome.s[load.id]
            - prices.load_scheduled[load.bus] * load.demand
            + zeros
        )
        costs[load.id] = zeros
    return transfers, costs


def settle(
    outcome: RealTimeOutcome,
    prices: PriceSchedule,
    sol: CcoSolution,
    operator_prices: PriceSchedule | None = None,
) -> CashFlows:
    """cash flows per draw; the operator books its side at `operator_prices`"""
    transfers, costs = _participant_transfers(sol, outcome, prices)
    if operator_prices is None or operator_prices is prices:
        booked = transfers
    else:
        booked, _ = _participant_transfers(sol, outcome, operator_prices)

    operator = -np.sum(np.vstack(list(booked.values())), axis=0)
    conservation = np.sum(np.vstack(list(transfers.values())), axis=0) + operator

    profits = {k: transfers[k] - costs[k] for k in transfers}
    profits[OPERATOR] = operator
    transfers = {**transfers, OPERATOR: operator}
    return CashFlows(transfers=transfers, profits=profits, conservation=conservation)


class _Moments(NamedTuple):
    count: int
    mean: float
    m2: float

    def merge(self, values: FloatArray) -> _Moments:
        n_b = len(values)
        if n_b == 0:
            return self
        mean_b = float(np.mean(values))
        m2_b = float(np.sum((values - mean_b) ** 2))
        n = self.count + n_b
        delta = mean_b - self.mean
        return _Moments(
            count=n,
            mean=self.mean + delta * n_b / n,
            m2=self.m2 + m2_b + delta * delta * self.count * n_b / n,
        )


class EmpiricalStats(NamedTuple):
    n: int
    seed: int
    mean: dict[str, float]
    std: dict[str, float]
    stderr: dict[str, float]
    violations: dict[str, float]
    max_conservation_residual: float
    max_rebalance_residual: float


def draw_errors(sol: CcoSolution, seed: int, start: int, count: int) -> FloatArray:
    case = sol.case
    columns = []
    for index, bus in enumerate(case.buses):
        sigma = case.sigma(bus)
        if sigma == 0:
            columns.append(np.zeros(count))
        else:
            draws = standard_draws(
                case.family_at(bus),
                seed,
                MONTE_CARLO_STREAM,
                index,
                start,
                count,
            )
            columns.append(sigma * draws)
    return np.column_stack(columns)


def _trace_frame(sol: CcoSolution, start: int, outcome: RealTimeOutcome, flows: CashFlows) -> pd.DataFrame:
    frame = pd.DataFrame({"draw": np.arange(start, start + outcome.count)})
    for i, bus in enumerate(sol.case.buses):
        frame[f"error({bus})"] = outcome.error[:, i]
    for participant, vals in flows.profits.items():
        frame[f"profit({participant})"] = vals
    return frame


def simulate(
    sol: CcoSolution,
    prices: PriceSchedule,
    n: int,
    seed: int,
    trace_path: str | None = None,
    operator_prices: PriceSchedule | None = None,
) -> EmpiricalStats:
    if n < 1:
        raise ValueError(f"draw count must be >= 1, got {n}")

    moments: dict[str, _Moments] = {}
    hits: dict[str, int] = {}
    conservation = 0.0
    rebalance = 0.0
    for start in range(0, n, CHUNK):
        size = min(CHUNK, n - start)
        outcome = realize(sol, draw_errors(sol, seed, start, size))
        flows = settle(outcome, prices, sol, operator_prices)

        for participant, vals in flows.profits.items():
            moments[participant] = moments.get(participant, _Moments(0, 0.0, 0.0)).merge(vals)
        for flag, vals in outcome.violations.items():
            hits[flag] = hits.get(flag, 0) + int(np.count_nonzero(vals))
        conservation = max(conservation, float(np.max(np.abs(flows.conservation))))
        rebalance = max(rebalance, float(np.max(outcome.rebalance_residual)))

        if trace_path is not None:
            _trace_frame(sol, start, outcome, flows).to_csv(
                trace_path,
                mode="w" if start == 0 else "a",
                header=start == 0,
                index=False,
            )

    std = {
        k: math.sqrt(m.m2 / (m.count - 1)) if m.count > 1 else math.nan
        for k, m in moments.items()
    }
    return EmpiricalStats(
        n=n,
        seed=seed,
        mean={k: m.mean for k, m in moments.items()},
        std=std,
        stderr={k: v / math.sqrt(n) for k, v in std.items()},
        violations={k: v / n for k, v in hits.items()},
        max_conservation_residual=conservation,
        max_rebalance_residual=rebalance,
    )


def _analytic(report: ProfitReport) -> dict[str, tuple[float, float]]:
    ret = {OPERATOR: (report.operator.expected, report.operator.std)}
    for group in (report.generators, report.vres, report.loads):
        for participant, profit in group.items():
            ret[participant] = (profit.expected, profit.std)
    return ret


def std_band(n: int) -> float:
    """allowed relative error of an empirical std over `n` draws"""
    return max(STD_REL_LIMIT, Z_LIMIT / math.sqrt(2 * n))


def compare_profits(stats: EmpiricalStats, report: ProfitReport) -> pd.DataFrame:
    insufficient = stats.n < MIN_DRAWS
    band = std_band(stats.n)
    rows: list[dict[str, object]] = []
    for participant, (mean, std) in _analytic(report).items():
        emp_mean = stats.mean[participant]
        emp_std = stats.std[participant]
        stderr = stats.stderr[participant]
        diff = emp_mean - mean
        if abs(diff) <= MEAN_TOL * max(1.0, abs(mean)):
            # constant profits leave only rounding noise in the stderr
            z = 0.0
        elif math.isnan(stderr):
            z = math.nan
        elif stderr == 0:
            z = math.inf
        else:
            z = diff / stderr
        if std > MEAN_TOL * max(1.0, abs(mean)):
            std_rel = abs(emp_std - std) / std
        else:
            std_rel = math.nan
        spread_ok = math.isnan(std_rel) or std_rel <= band
        rows.append({
            "participant": participant,
            "analytic_mean": mean,
            "analytic_std": std,
            "empirical_mean": emp_mean,
            "empirical_std": emp_std,
            "stderr": stderr,
            "z": z,
            "std_rel_err": std_rel,
            "std_band": band,
            "insufficient_n": insufficient,
            "passed": insufficient or (abs(z) <= Z_LIMIT and spread_ok),
        })
    return pd.DataFrame(rows)


def violation_band(epsilon: float, n: int) -> float:
    return epsilon + 3 * math.sqrt(epsilon * (1 - epsilon) / n)


def compare_violations(stats: EmpiricalStats, epsilon: float) -> pd.DataFrame:
    insufficient = stats.n < MIN_DRAWS
    band = violation_band(epsilon, stats.n)
    rows: list[dict[str, object]] = []
    for flag, freq in stats.violations.items():
        constrained = not flag.startswith(UNCONSTRAINED_FLAGS)
        rows.append({
            "bound": flag,
            "frequency": freq,
            "band": band if constrained else math.nan,
            "insufficient_n": insufficient,
            "passed": insufficient or not constrained or freq <= band,
        })
    return pd.DataFrame(rows)
