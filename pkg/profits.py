from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
import numpy.typing as npt
import pandas as pd

from clearing import CcoSolution
from clearing import SoSolution
from lpcore import EQ
from lpcore import GE
from lpcore import LpProblem
from lpcore import OPTIMAL
from lpcore import solve_lp
from pricing import PriceSchedule
from pricing import weighted_moments

FloatArray = npt.NDArray[np.float64]

ADEQUACY_TOL = 1e-6

# above this many scenarios the per-scenario terms are not kept on the report
STORE_LIMIT = 10_000

OPERATOR = "Operator"


class AdequacyError(RuntimeError):
    pass


class IdentityError(RuntimeError):
    pass


class Profit(NamedTuple):
    expected: float
    std: float


class OperatorProfit(NamedTuple):
    expected: float
    std: float
    scheduled_part: float
    residual_part: float
    # Σ_n λ_n·flow⁰_n − ν_n·(flow⁰_n − flow_n) at the optimal angles
    congestion: float


class GeneratorProfit(NamedTuple):
    expected: float
    std: float
    settlement_part: float
    adder_part: float


class ProfitReport(NamedTuple):
    operator: OperatorProfit
    vres: dict[str, Profit]
    generators: dict[str, GeneratorProfit]
    loads: dict[str, Profit]


def _flows(sol: CcoSolution, bus: str) -> tuple[float, float]:
    """scheduled flow out of `bus` and its real-time change"""
    case = sol.case
    flow0 = math.fsum(
        b * (sol.theta0[bus] - sol.theta0[other]) for other, b in case.neighbors(bus)
    )
    shift = math.fsum(
        b * (sol.theta0[bus] - sol.theta[bus] - sol.theta0[other] + sol.theta[other])
        for other, b in case.neighbors(bus)
    )
    return flow0, shift


def congestion_at_angles(sol: CcoSolution) -> float:
    terms = []
    for bus in sol.case.buses:
        flow0, shift = _flows(sol, bus)
        terms.append(sol.lam[bus] * flow0 - sol.nu[bus] * shift)
    return math.fsum(terms)


def congestion_rent(sol: CcoSolution) -> float:
    """minimum over line-feasible angles of the balance-dual-weighted flows

    At an optimal primal-dual pair this equals `congestion_at_angles(sol)`.
    """
    case = sol.case
    lp = LpProblem("congestion")
    for bus in case.buses:
        lp.add_var(f"theta0({bus})", free=True)
        lp.add_var(f"theta({bus})", free=True)
    for bus in case.buses:
        for other, b in case.neighbors(bus):
            lam, nu = sol.lam[bus], sol.nu[bus]
            lp.add_cost(f"theta0({bus})", (lam - nu) * b)
            lp.add_cost(f"theta0({other})", -(lam - nu) * b)
            lp.add_cost(f"theta({bus})", nu * b)
            lp.add_cost(f"theta({other})", -nu * b)
    for k, l, b, cap in case.directed_lines():
        lp.add_row(f"line0({k},{l})", {f"theta0({k})": -b, f"theta0({l})": b}, GE, -cap)
        lp.add_row(f"line({k},{l})", {f"theta({k})": -b, f"theta({l})": b}, GE, -cap)
    lp.add_row("ref_theta0", {f"theta0({case.reference_bus})": 1.0}, EQ, 0.0)
    lp.add_row("ref_theta", {f"theta({case.reference_bus})": 1.0}, EQ, 0.0)

    res = solve_lp(lp, solver="simplex")
    if res.status != OPTIMAL:
        raise IdentityError(f"congestion subproblem is {res.status}")
    return res.objective


def _within(a: float, b: float, tol: float) -> bool:
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def cco_operator_profit(
    sol: CcoSolution,
    prices: PriceSchedule,
    tol: float = ADEQUACY_TOL,
    check: bool = True,
) -> OperatorProfit:
    case = sol.case
    spill = {bus: sol.y_spi[bus] - sol.x_spi[bus] for bus in case.buses}

    # settlement of every scheduled and expected real-time quantity
    settlement = []
    for gen in case.generators:
        settlement.append(-prices.energy[gen.bus] * sol.p[gen.id])
        settlement.append(-prices.upward[gen.id] * sol.ru[gen.id])
        settlement.append(prices.downward[gen.id] * sol.rd[gen.id])
    for bus in case.buses:
        surplus = case.forecast(bus) - sol.wsch[bus] - sol.wspi[bus]
        settlement.append(-prices.vres_scheduled[bus] * sol.wsch[bus])
        settlement.append(-prices.vres_deviation[bus] * surplus)
    for load in case.loads:
        settlement.append(prices.load_scheduled[load.bus] * load.demand)
        settlement.append(-prices.curtailment[load.bus] * sol.s[load.id])
    expected = math.fsum(settlement)

    scheduled = []
    for bus in case.buses:
        gens = case.bus_generators(bus)
        loads = case.bus_loads(bus)
        net_demand = case.demand(bus) - math.fsum(sol.p[g.id] for g in gens) - sol.wsch[bus]
        realtime = math.fsum(
            [sol.ru[g.id] - sol.rd[g.id] for g in gens]
            + [sol.s[j.id] for j in loads]
            + [case.forecast(bus), -sol.wsch[bus], -sol.wspi[bus]],
        )
        scheduled.append(sol.lam[bus] * net_demand - sol.nu[bus] * realtime)
    scheduled_part = math.fsum(scheduled)

    residual = [
        -(prices.tau[g.id].up * sol.ru[g.id] + prices.tau[g.id].down * sol.rd[g.id])
        for g in case.generators
    ]
    residual.extend(
        spill[bus] * (case.forecast(bus) - sol.wspi[bus]) for bus in case.buses
    )
    residual.append(prices.zeta * math.fsum(j.demand - sol.s[j.id] for j in case.loads))
    residual_part = math.fsum(residual)

    congestion = congestion_at_angles(sol)

    variance = []
    for bus in case.buses:
        sigma = case.sigma(bus)
        if sigma == 0:
            continue
        slope = math.fsum(
            [
                sol.alpha_u[g.id] * prices.upward[g.id] + sol.alpha_d[g.id] * prices.downward[g.id]
                for g in case.bus_generators(bus)
            ]
            + [-prices.vres_deviation[bus] * (1 - sol.beta[bus])]
            + [sol.gamma[j.id] * prices.curtailment[bus] for j in case.bus_loads(bus)],
        )
        variance.append((sigma * slope) ** 2)

    ret = OperatorProfit(
        expected=expected,
        std=math.sqrt(math.fsum(variance)),
        scheduled_part=scheduled_part,
        residual_part=residual_part,
        congestion=congestion,
    )
    if check:
        rent = congestion_rent(sol)
        if not _within(rent, congestion, tol):
            raise IdentityError(
                f"congestion rent {rent!r} != {congestion!r} at the scheduled angles",
            )
        if not _within(expected, scheduled_part + residual_part, tol):
            raise IdentityError(
                f"operator profit {expected!r} != {scheduled_part!r} + {residual_part!r}",
            )
        if abs(residual_part) > tol * max(1.0, abs(expected)):
            raise IdentityError(f"residual profit term is {residual_part!r}, expected 0")
        if not _within(scheduled_part, -congestion, tol):
            raise IdentityError(
                f"scheduled profit {scheduled_part!r} != -congestion {-congestion!r}",
            )
        if congestion > tol * max(1.0, abs(expected)):
            raise IdentityError(f"congestion term is positive: {congestion!r}")
    return ret


def cco_vres_profit(sol: CcoSolution, prices: PriceSchedule) -> dict[str, Profit]:
    ret = {}
    for vres in sol.case.vres:
        bus = vres.bus
        unit = -vres.cost + prices.vres_deviation[bus]
        ret[vres.id] = Profit(
            expected=sol.mu[bus] * sol.wsch[bus] + unit * vres.expected_output,
            std=abs(unit * (1 - sol.beta[bus]) * vres.std),
        )
    return ret


def cco_generator_profit(sol: CcoSolution, prices: PriceSchedule) -> dict[str, GeneratorProfit]:
    ret = {}
    for gen in sol.case.generators:
        lam, nu = sol.lam[gen.bus], sol.nu[gen.bus]
        tau = prices.tau[gen.id]
        p, ru, rd = sol.p[gen.id], sol.ru[gen.id], sol.rd[gen.id]
        settlement_part = math.fsum((
            -gen.cost * p,
            -gen.up_cost * ru,
            gen.down_cost * rd,
            lam * p,
            nu * (ru - rd),
        ))
        adder_part = tau.up * ru + tau.down * rd
        slope = (
            sol.alpha_u[gen.id] * (gen.up_cost - nu - tau.up)
            + sol.alpha_d[gen.id] * (gen.down_cost - nu + tau.down)
        )
        ret[gen.id] = GeneratorProfit(
            expected=settlement_part + adder_part,
            std=abs(slope) * sol.case.sigma(gen.bus),
            settlement_part=settlement_part,
            adder_part=adder_part,
        )
    return ret


def cco_consumer_surplus(sol: CcoSolution, prices: PriceSchedule) -> dict[str, Profit]:
    ret = {}
    for load in sol.case.loads:
        realtime = prices.curtailment[load.bus]
        ret[load.id] = Profit(
            expected=realtime * sol.s[load.id] - prices.load_scheduled[load.bus] * load.demand,
            std=abs(realtime) * sol.gamma[load.id] * sol.case.sigma(load.bus),
        )
    return ret


def cco_profit_report(
    sol: CcoSolution,
    prices: PriceSchedule,
    tol: float = ADEQUACY_TOL,
    check: bool = True,
) -> ProfitReport:
    ret = ProfitReport(
        operator=cco_operator_profit(sol, prices, tol, check),
        vres=cco_vres_profit(sol, prices),
        generators=cco_generator_profit(sol, prices),
        loads=cco_consumer_surplus(sol, prices),
    )
    if check:
        failed = [v for v in adequacy_report(ret, tol=tol) if not v.passed]
        if failed:
            raise AdequacyError(
                "; ".join(f"{v.participant}: {v.margin!r}" for v in failed),
            )
    return ret


class SoProfitReport(NamedTuple):
    operator: Profit
    vres: dict[str, Profit]
    generators: dict[str, Profit]
    loads: dict[str, Profit]
    # per-scenario terms, kept for scenario sets up to STORE_LIMIT
    operator_terms: FloatArray | None
    vres_terms: dict[str, FloatArray] | None
    generator_terms: dict[str, FloatArray] | None


def so_profits(
    sol: SoSolution,
    tol: float = ADEQUACY_TOL,
    check: bool = True,
) -> SoProfitReport:
    case = sol.case
    probs = sol.scenarios.probabilities
    count = sol.scenarios.count

    price = {bus: sol.realtime_price(bus) for bus in case.buses}
    mismatch = {}
    for bus in case.buses:
        gens = case.bus_generators(bus)
        total = np.zeros(count)
        for g in gens:
            total += sol.ru[g.id] - sol.rd[g.id]
        for j in case.bus_loads(bus):
            total += sol.s[j.id]
        mismatch[bus] = total - (sol.wspi[bus] + sol.wsch[bus] - sol.scenarios.column(bus))

    scheduled = math.fsum(
        -sol.lam[bus] * (
            math.fsum(sol.p[g.id] for g in case.bus_generators(bus))
            + sol.wsch[bus]
            - case.demand(bus)
        )
        for bus in case.buses
    )
    operator_terms = np.zeros(count)
    for bus in case.buses:
        operator_terms -= price[bus] * mismatch[bus]
    op_mean, op_std = weighted_moments(probs, operator_terms)
    operator = Profit(expected=scheduled + op_mean, std=op_std)

    vres_terms = {}
    vres = {}
    for w in case.vres:
        realized = sol.scenarios.column(w.bus)
        terms = (
            price[w.bus] * (realized - sol.wsch[w.bus] - sol.wspi[w.bus])
            - w.cost * (realized - sol.wspi[w.bus])
        )
        mean, std = weighted_moments(probs, terms)
        vres_terms[w.id] = terms
        vres[w.id] = Profit(expected=sol.lam[w.bus] * sol.wsch[w.bus] + mean, std=std)

    generator_terms = {}
    generators = {}
    for g in case.generators:
        terms = (
            (price[g.bus] - g.up_cost) * sol.ru[g.id]
            - (price[g.bus] - g.down_cost) * sol.rd[g.id]
        )
        mean, std = weighted_moments(probs, terms)
        generator_terms[g.id] = terms
        generators[g.id] = Profit(
            expected=(sol.lam[g.bus] - g.cost) * sol.p[g.id] + mean,
            std=std,
        )

    loads = {}
    for j in case.loads:
        mean, std = weighted_moments(probs, price[j.bus] * sol.s[j.id])
        loads[j.id] = Profit(expected=mean - sol.lam[j.bus] * j.demand, std=std)

    keep = count <= STORE_LIMIT
    ret = SoProfitReport(
        operator=operator,
        vres=vres,
        generators=generators,
        loads=loads,
        operator_terms=operator_terms if keep else None,
        vres_terms=vres_terms if keep else None,
        generator_terms=generator_terms if keep else None,
    )
    if check:
        failed = [v for v in adequacy_report(so=ret, tol=tol) if not v.passed]
        if failed:
            raise AdequacyError(
                "; ".join(f"{v.participant}: {v.margin!r}" for v in failed),
            )
    return ret


class Verdict(NamedTuple):
    scheme: str
    kind: str
    participant: str
    margin: float
    passed: bool


def adequacy_report(
    cco: ProfitReport | None = None,
    so: SoProfitReport | None = None,
    tol: float = ADEQUACY_TOL,
) -> list[Verdict]:
    """nonnegative expected profit for the operator and every generating unit"""
    ret = []
    for scheme, report in (("cco", cco), ("so", so)):
        if report is None:
            continue
        entries: list[tuple[str, str, float]] = [
            ("operator", OPERATOR, report.operator.expected),
        ]
        entries.extend(("vres", k, v.expected) for k, v in report.vres.items())
        entries.extend(("generator", k, v.expected) for k, v in report.generators.items())
        for kind, participant, margin in entries:
            ret.append(Verdict(scheme, kind, participant, margin, margin >= -tol))
    return ret


def adequacy_frame(verdicts: list[Verdict]) -> pd.DataFrame:
    return pd.DataFrame(verdicts, columns=Verdict._fields)


def profit_frame(report: ProfitReport | SoProfitReport) -> pd.DataFrame:
    rows = [{
        "participant": OPERATOR,
        "kind": "operator",
        "expected": report.operator.expected,
        "std": report.operator.std,
    }]
    for kind, group in (
        ("generator", report.generators),
        ("vres", report.vres),
        ("load", report.loads),
    ):
        for participant, profit in group.items():
            rows.append({
                "participant": participant,
                "kind": kind,
                "expected": profit.expected,
                "std": profit.std,
            })
    return pd.DataFrame(rows)


def profit_comparison_frame(cco: ProfitReport, so: SoProfitReport) -> pd.DataFrame:
    """expected profit and spread of every participant under both schemes"""
    merged = profit_frame(cco).merge(
        profit_frame(so),
        on=["participant", "kind"],
        suffixes=("_cco", "_so"),
        how="outer",
        sort=False,
    )
    return merged.rename(columns={
        "expected_cco": "cco_expected",
        "std_cco": "cco_std",
        "expected_so": "so_expected",
        "std_so": "so_std",
    })
