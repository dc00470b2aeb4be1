from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
import numpy.typing as npt
import pandas as pd

from clearing import AssumptionError
from clearing import CcoSolution
from clearing import dispatched_demand
from clearing import SoSolution
from netmodel import MarketCase

FloatArray = npt.NDArray[np.float64]

BRANCH_KAPPA = "kappa"
BRANCH_DUAL = "dual"
BRANCH_ZERO_SIGMA = "zero-sigma"

HISTOGRAM_WIDTH = 0.5


class Tau(NamedTuple):
    up: float
    down: float
    up_branch: str
    down_branch: str
    tie: bool


def _tau_side(kappa: float, sig: float, y: float, tol: float) -> tuple[float, str, bool]:
    if sig <= 0:
        return y, BRANCH_ZERO_SIGMA, False
    diff = kappa - sig * y
    if diff >= -tol:
        return kappa / sig, BRANCH_KAPPA, abs(diff) <= tol
    else:
        return y, BRANCH_DUAL, False


def compute_tau(sol: CcoSolution, tol: float = 1e-9) -> dict[str, Tau]:
    ret = {}
    for gen in sol.case.generators:
        sig = sol.gen_sigma_prime(gen.id)
        kappa = sol.kappa[gen.bus]
        up, up_branch, up_tie = _tau_side(kappa, sig, sol.y_u[gen.id], tol)
        down, down_branch, down_tie = _tau_side(kappa, sig, sol.y_d[gen.id], tol)
        ret[gen.id] = Tau(up, down, up_branch, down_branch, up_tie or down_tie)
    return ret


def compute_zeta(
    sol: CcoSolution,
    tau: dict[str, Tau] | None = None,
    tol: float = 1e-9,
) -> float:
    """load price adder that makes the operator's residual profit term vanish"""
    if tau is None:
        tau = compute_tau(sol)
    case = sol.case

    denominator = dispatched_demand(case, sol.s)
    if denominator <= tol:
        raise AssumptionError(f"dispatched demand is {denominator!r}: load price adder undefined")

    terms = [
        tau[g.id].up * sol.ru[g.id] + tau[g.id].down * sol.rd[g.id]
        for g in case.generators
    ]
    terms.extend(
        -(sol.y_spi[bus] - sol.x_spi[bus]) * (case.forecast(bus) - sol.wspi[bus])
        for bus in case.buses
    )
    return math.fsum(terms) / denominator


class PriceSchedule(NamedTuple):
    # per bus
    energy: dict[str, float]
    vres_scheduled: dict[str, float]
    load_scheduled: dict[str, float]
    rebalance: dict[str, float]
    vres_deviation: dict[str, float]
    curtailment: dict[str, float]
    # per generator
    upward: dict[str, float]
    downward: dict[str, float]
    tau: dict[str, Tau]
    zeta: float


def cco_prices(sol: CcoSolution, tol: float = 1e-9) -> PriceSchedule:
    tau = compute_tau(sol, tol)
    zeta = compute_zeta(sol, tau, tol)
    buses = sol.case.buses
    spill = {bus: -sol.y_spi[bus] + sol.x_spi[bus] for bus in buses}
    return PriceSchedule(
        energy=dict(sol.lam),
        vres_scheduled={bus: sol.lam[bus] + spill[bus] for bus in buses},
        load_scheduled={bus: sol.lam[bus] + zeta for bus in buses},
        rebalance=dict(sol.nu),
        vres_deviation={bus: sol.nu[bus] + spill[bus] for bus in buses},
        curtailment={bus: sol.nu[bus] + zeta for bus in buses},
        upward={g.id: sol.nu[g.bus] + tau[g.id].up for g in sol.case.generators},
        downward={g.id: sol.nu[g.bus] - tau[g.id].down for g in sol.case.generators},
        tau=tau,
        zeta=zeta,
    )


def weighted_moments(probabilities: FloatArray, values: FloatArray) -> tuple[float, float]:
    """probability-weighted mean and standard deviation"""
    mean = math.fsum(probabilities * values)
    var = math.fsum(probabilities * (values - mean) ** 2)
    return mean, math.sqrt(var)


class SoPriceSchedule(NamedTuple):
    energy: dict[str, float]
    realtime: dict[str, FloatArray]
    mean: dict[str, float]
    std: dict[str, float]


def so_prices(sol: SoSolution) -> SoPriceSchedule:
    probabilities = sol.scenarios.probabilities
    realtime = {bus: sol.realtime_price(bus) for bus in sol.case.buses}
    moments = {bus: weighted_moments(probabilities, vals) for bus, vals in realtime.items()}
    return SoPriceSchedule(
        energy=dict(sol.lam),
        realtime=realtime,
        mean={bus: m for bus, (m, _) in moments.items()},
        std={bus: s for bus, (_, s) in moments.items()},
    )


def realtime_histogram(values: FloatArray, width: float = HISTOGRAM_WIDTH) -> pd.DataFrame:
    lo = float(np.min(values)) - 1
    hi = float(np.max(values)) + 1
    edges = lo + width * np.arange(int(math.ceil((hi - lo) / width)) + 1)
    counts, edges = np.histogram(values, bins=edges)
    return pd.DataFrame({
        "bin_left": edges[:-1],
        "bin_right": edges[1:],
        "count": counts,
    })


def histogram_frame(prices: SoPriceSchedule, width: float = HISTOGRAM_WIDTH) -> pd.DataFrame:
    frames = []
    for bus, values in prices.realtime.items():
        frame = realtime_histogram(values, width)
        frame.insert(0, "bus", bus)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def price_frame(sol: CcoSolution, prices: PriceSchedule) -> pd.DataFrame:
    """one row per participant, full precision"""
    case = sol.case
    rows: list[dict[str, object]] = []
    for gen in case.generators:
        tau = prices.tau[gen.id]
        rows.append({
            "participant": gen.id,
            "kind": "generator",
            "bus": gen.bus,
            "scheduled": prices.energy[gen.bus],
            "upward": prices.upward[gen.id],
            "downward": prices.downward[gen.id],
            "realtime": math.nan,
            "tau_up": tau.up,
            "tau_down": tau.down,
            "tau_up_branch": tau.up_branch,
            "tau_down_branch": tau.down_branch,
            "tau_tie": tau.tie,
        })
    for vres in case.vres:
        rows.append({
            "participant": vres.id,
            "kind": "vres",
            "bus": vres.bus,
            "scheduled": prices.vres_scheduled[vres.bus],
            "realtime": prices.vres_deviation[vres.bus],
        })
    for load in case.loads:
        rows.append({
            "participant": load.id,
            "kind": "load",
            "bus": load.bus,
            "scheduled": prices.load_scheduled[load.bus],
            "realtime": prices.curtailment[load.bus],
        })
    frame = pd.DataFrame(rows)
    frame["zeta"] = prices.zeta
    return frame


def read_price_frame(frame: pd.DataFrame, base: PriceSchedule, sol: CcoSolution) -> PriceSchedule:
    """participant prices from a price table, bus prices left as in `base`"""
    case = sol.case
    by_id = {str(row.participant): row for row in frame.itertuples(index=False)}

    def pick(participant: str, column: str, default: float) -> float:
        row = by_id.get(participant)
        if row is None:
            return default
        val = getattr(row, column)
        return default if pd.isna(val) else float(val)

    vres_scheduled = dict(base.vres_scheduled)
    vres_deviation = dict(base.vres_deviation)
    for vres in case.vres:
        vres_scheduled[vres.bus] = pick(vres.id, "scheduled", vres_scheduled[vres.bus])
        vres_deviation[vres.bus] = pick(vres.id, "realtime", vres_deviation[vres.bus])
    load_scheduled = dict(base.load_scheduled)
    curtailment = dict(base.curtailment)
    for load in case.loads:
        load_scheduled[load.bus] = pick(load.id, "scheduled", load_scheduled[load.bus])
        curtailment[load.bus] = pick(load.id, "realtime", curtailment[load.bus])
    return base._replace(
        vres_scheduled=vres_scheduled,
        load_scheduled=load_scheduled,
        vres_deviation=vres_deviation,
        curtailment=curtailment,
        upward={g.id: pick(g.id, "upward", base.upward[g.id]) for g in case.generators},
        downward={g.id: pick(g.id, "downward", base.downward[g.id]) for g in case.generators},
    )


def dispatch_frame(sol: CcoSolution, prices: PriceSchedule) -> pd.DataFrame:
    """actions, expected values, standard deviations and prices by stage"""
    case = sol.case
    rows: list[dict[str, object]] = []

    def add(element: str, action: str, stage: str, expected: float, std: float, price: float) -> None:
        rows.append({
            "element": element,
            "action": action,
            "stage": stage,
            "expected": expected,
            "std": std,
            "price": price,
        })

    for gen in case.generators:
        add(gen.id, "p", "scheduling", sol.p[gen.id], 0.0, prices.energy[gen.bus])
    for vres in case.vres:
        add(vres.id, "wsch", "scheduling", sol.wsch[vres.bus], 0.0, prices.vres_scheduled[vres.bus])
    for load in case.loads:
        add(load.id, "L", "scheduling", load.demand, 0.0, prices.load_scheduled[load.bus])
    for gen in case.generators:
        sigma = case.sigma(gen.bus)
        add(gen.id, "ru", "real-time", sol.ru[gen.id], sol.alpha_u[gen.id] * sigma, prices.upward[gen.id])
    for gen in case.generators:
        sigma = case.sigma(gen.bus)
        add(gen.id, "rd", "real-time", sol.rd[gen.id], sol.alpha_d[gen.id] * sigma, prices.downward[gen.id])
    for vres in case.vres:
        add(
            vres.id,
            "wspi",
            "real-time",
            sol.wspi[vres.bus],
            sol.beta[vres.bus] * vres.std,
            prices.vres_deviation[vres.bus],
        )
    for load in case.loads:
        add(
            load.id,
            "s",
            "real-time",
            sol.s[load.id],
            sol.gamma[load.id] * case.sigma(load.bus),
            prices.curtailment[load.bus],
        )
    return pd.DataFrame(rows)


def _realtime_actions(case: MarketCase) -> list[tuple[str, str, str]]:
    return (
        [(g.id, "ru", g.bus) for g in case.generators]
        + [(g.id, "rd", g.bus) for g in case.generators]
        + [(w.id, "wspi", w.bus) for w in case.vres]
        + [(j.id, "s", j.bus) for j in case.loads]
    )


def so_price_frame(sol: SoSolution, prices: SoPriceSchedule) -> pd.DataFrame:
    """real-time actions with the mean and spread of their scenario prices"""
    rows: list[dict[str, object]] = []
    for element, action, bus in _realtime_actions(sol.case):
        rows.append({
            "element": element,
            "action": action,
            "bus": bus,
            "scheduled": prices.energy[bus],
            "mean": prices.mean[bus],
            "std": prices.std[bus],
        })
    return pd.DataFrame(rows)


def so_dispatch_frame(sol: SoSolution) -> pd.DataFrame:
    case = sol.case
    probabilities = sol.scenarios.probabilities
    rows: list[dict[str, object]] = []

    def add(element: str, action: str, stage: str, expected: float, std: float) -> None:
        rows.append({
            "element": element,
            "action": action,
            "stage": stage,
            "expected": expected,
            "std": std,
        })

    for gen in case.generators:
        add(gen.id, "p", "scheduling", sol.p[gen.id], 0.0)
    for vres in case.vres:
        add(vres.id, "wsch", "scheduling", sol.wsch[vres.bus], 0.0)
    stage2 = {"ru": sol.ru, "rd": sol.rd, "s": sol.s}
    for element, action, bus in _realtime_actions(case):
        values = sol.wspi[bus] if action == "wspi" else stage2[action][element]
        add(element, action, "real-time", *weighted_moments(probabilities, values))
    return pd.DataFrame(rows)


def _cco_realtime_price(prices: PriceSchedule, element: str, action: str, bus: str) -> float:
    if action == "ru":
        return prices.upward[element]
    elif action == "rd":
        return prices.downward[element]
    elif action == "wspi":
        return prices.vres_deviation[bus]
    else:
        return prices.curtailment[bus]


def comparison_frame(
    case: MarketCase,
    cco: PriceSchedule,
    so: SoPriceSchedule,
) -> pd.DataFrame:
    """real-time prices side by side: uniform CCO price, SO mean and spread"""
    rows: list[dict[str, object]] = []
    for element, action, bus in _realtime_actions(case):
        rows.append({
            "element": element,
            "action": action,
            "bus": bus,
            "cco_price": _cco_realtime_price(cco, element, action, bus),
            "so_mean": so.mean[bus],
            "so_std": so.std[bus],
        })
    return pd.DataFrame(rows)


_SCHEDULED = "lam"
_REALTIME_SO = "nu / pi"
_ANALYTIC = (
    ("conventional generation", "p", "scheduling", "lam"),
    ("vres generation", "wsch", "scheduling", "lam - y_spi + x_spi"),
    ("load consumption", "L", "scheduling", "lam + zeta"),
    ("load curtailment", "s", "real-time", "nu + zeta"),
    ("upward reserve", "ru", "real-time", "nu + tau_up"),
    ("downward reserve", "rd", "real-time", "nu - tau_down"),
    ("vres surplus or deficit", "wspi", "real-time", "nu - y_spi + x_spi"),
)


def analytic_comparison_frame(
    case: MarketCase,
    cco: PriceSchedule,
    so: SoPriceSchedule,
) -> pd.DataFrame:
    """price expression of each scheme per action, with the values they take"""
    elements = {
        "p": [(g.id, g.bus) for g in case.generators],
        "wsch": [(w.id, w.bus) for w in case.vres],
        "L": [(j.id, j.bus) for j in case.loads],
        "s": [(j.id, j.bus) for j in case.loads],
        "ru": [(g.id, g.bus) for g in case.generators],
        "rd": [(g.id, g.bus) for g in case.generators],
        "wspi": [(w.id, w.bus) for w in case.vres],
    }
    scheduled = {
        "p": cco.energy,
        "wsch": cco.vres_scheduled,
        "L": cco.load_scheduled,
    }
    rows: list[dict[str, object]] = []
    for label, action, stage, expression in _ANALYTIC:
        for element, bus in elements[action]:
            if stage == "scheduling":
                cco_price = scheduled[action][bus]
                so_expression = _SCHEDULED
                so_mean, so_std = so.energy[bus], 0.0
            else:
                cco_price = _cco_realtime_price(cco, element, action, bus)
                so_expression = _REALTIME_SO
                so_mean, so_std = so.mean[bus], so.std[bus]
            rows.append({
                "action": label,
                "element": element,
                "bus": bus,
                "stage": stage,
                "cco_expression": expression,
                "so_expression": so_expression,
                "cco_price": cco_price,
                "so_mean": so_mean,
                "so_std": so_std,
            })
    return pd.DataFrame(rows)
