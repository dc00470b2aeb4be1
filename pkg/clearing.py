from __future__ import annotations

import math
from collections.abc import Sequence
from typing import NamedTuple

import numpy as np
import numpy.typing as npt
import pandas as pd
from scipy import stats

from lpcore import EQ
from lpcore import GE
from lpcore import LpProblem
from lpcore import LpSolution
from lpcore import OPTIMAL
from lpcore import Solver
from lpcore import solve_lp
from lpcore import SolverError
from lpcore import Tolerances
from netmodel import DistributionFamily
from netmodel import MarketCase

FloatArray = npt.NDArray[np.float64]

# draws come in fixed-size chunks, one Philox counter block per chunk
CHUNK = 8192

SCENARIO_STREAM = 0
MONTE_CARLO_STREAM = 1

# absolute, per scenario and bus
REBALANCE_TOL = 1e-6


class InfeasibleError(RuntimeError):
    pass


class AssumptionError(ValueError):
    pass


def _n(kind: str, *keys: str) -> str:
    return f"{kind}({','.join(keys)})"


def quantile(family: DistributionFamily, prob: float) -> float:
    """standardized upper quantile of a symmetric unit-variance family"""
    if not (0.5 < prob < 1):
        raise ValueError(f"probability must lie in (0.5, 1), got {prob!r}")

    if family.table:
        probs = [p for p, _ in family.table]
        vals = [v for _, v in family.table]
        if not (probs[0] <= prob <= probs[-1]):
            raise ValueError(
                f"probability {prob!r} outside the quantile table "
                f"[{probs[0]!r}, {probs[-1]!r}]",
            )
        return float(np.interp(prob, probs, vals))
    elif family.tag == "normal":
        return float(stats.norm.ppf(prob))
    elif family.tag == "uniform-symmetric":
        return math.sqrt(3) * (2 * prob - 1)
    else:
        raise ValueError(f"unknown distribution family {family.tag!r}")


class QuantileSpec(NamedTuple):
    family: DistributionFamily
    epsilon: float
    value: float

    @classmethod
    def make(cls, family: DistributionFamily, epsilon: float) -> QuantileSpec:
        return cls(family, epsilon, quantile(family, 1 - epsilon))


def bus_quantiles(case: MarketCase) -> dict[str, QuantileSpec]:
    return {
        bus: QuantileSpec.make(case.family_at(bus), case.epsilon)
        for bus in case.buses
    }


def sigma_prime(case: MarketCase) -> dict[str, float]:
    """q·σ at every bus"""
    q = bus_quantiles(case)
    return {bus: q[bus].value * case.sigma(bus) for bus in case.buses}


def _add_angles(lp: LpProblem, case: MarketCase, kind: str, *suffix: str) -> None:
    for bus in case.buses:
        lp.add_var(_n(kind, bus, *suffix), free=True)
    lp.add_row(
        _n(f"ref_{kind}", *suffix) if suffix else f"ref_{kind}",
        {_n(kind, case.reference_bus, *suffix): 1.0},
        EQ,
        0.0,
    )


def _flow_terms(case: MarketCase, bus: str, kind: str, *suffix: str) -> list[tuple[str, float]]:
    """Σ_l B(δ_n − δ_l) as (column, coefficient) terms"""
    terms = []
    for other, susceptance in case.neighbors(bus):
        terms.append((_n(kind, bus, *suffix), susceptance))
        terms.append((_n(kind, other, *suffix), -susceptance))
    return terms


def _add_line_limits(lp: LpProblem, case: MarketCase, row: str, kind: str, *suffix: str) -> None:
    for k, l, susceptance, capacity in case.directed_lines():
        lp.add_row(
            _n(row, k, l, *suffix),
            [(_n(kind, k, *suffix), -susceptance), (_n(kind, l, *suffix), susceptance)],
            GE,
            -capacity,
        )


def build_nominal(case: MarketCase, realized_w: dict[str, float]) -> LpProblem:
    for bus, val in realized_w.items():
        if val < 0:
            raise ValueError(f"realized output at bus {bus} must be >= 0, got {val!r}")
    w = {bus: realized_w.get(bus, 0.0) for bus in case.buses}

    lp = LpProblem("nominal")
    for gen in case.generators:
        lp.add_var(_n("p", gen.id), cost=gen.cost)
        lp.add_var(_n("ru", gen.id), cost=gen.up_cost)
        lp.add_var(_n("rd", gen.id), cost=-gen.down_cost)
    for bus in case.buses:
        vres = case.bus_vres(bus)
        lp.add_var(_n("wsch", bus))
        lp.add_var(_n("wspi", bus), cost=-vres.cost)
        lp.objective_constant += vres.cost * w[bus]
    for load in case.loads:
        lp.add_var(_n("s", load.id), cost=load.curtailment_cost)
    _add_angles(lp, case, "theta0")
    _add_angles(lp, case, "theta")

    for bus in case.buses:
        gens = case.bus_generators(bus)
        lp.add_row(
            _n("balance", bus),
            [(_n("p", g.id), 1.0) for g in gens]
            + [(_n("wsch", bus), 1.0)]
            + [(col, -v) for col, v in _flow_terms(case, bus, "theta0")],
            EQ,
            case.demand(bus),
        )
        lp.add_row(
            _n("rebalance", bus),
            [(_n("ru", g.id), 1.0) for g in gens]
            + [(_n("rd", g.id), -1.0) for g in gens]
            + [(_n("s", j.id), 1.0) for j in case.bus_loads(bus)]
            + [(_n("wsch", bus), -1.0), (_n("wspi", bus), -1.0)]
            + _flow_terms(case, bus, "theta0")
            + [(col, -v) for col, v in _flow_terms(case, bus, "theta")],
            EQ,
            -w[bus],
        )
    _add_line_limits(lp, case, "line0", "theta0")
    _add_line_limits(lp, case, "line", "theta")

    for bus in case.buses:
        vres = case.bus_vres(bus)
        lp.add_row(_n("wcap", bus), {_n("wsch", bus): -1.0}, GE, -vres.cap)
        lp.add_row(_n("spill_hi", bus), {_n("wspi", bus): -1.0}, GE, -w[bus])
    for gen in case.generators:
        p, ru, rd = _n("p", gen.id), _n("ru", gen.id), _n("rd", gen.id)
        lp.add_row(_n("pcap", gen.id), {p: -1.0}, GE, -gen.capacity)
        lp.add_row(_n("ru_hi", gen.id), {ru: -1.0}, GE, -gen.up_cap)
        lp.add_row(_n("rd_hi", gen.id), {rd: -1.0}, GE, -gen.down_cap)
        lp.add_row(_n("gen_lo", gen.id), {p: 1.0, ru: 1.0, rd: -1.0}, GE, 0.0)
        lp.add_row(_n("gen_hi", gen.id), {p: -1.0, ru: -1.0, rd: 1.0}, GE, -gen.capacity)
    for load in case.loads:
        lp.add_row(_n("shed_hi", load.id), {_n("s", load.id): -1.0}, GE, -load.demand)
    return lp


class NominalSolution(NamedTuple):
    objective: float
    values: dict[str, float]
    raw: LpSolution


def solve_nominal(
    case: MarketCase,
    realized_w: dict[str, float],
    tol: Tolerances = Tolerances(),
    solver: str | Solver = "auto",
) -> NominalSolution:
    lp = build_nominal(case, realized_w)
    raw = solve_lp(lp, tol, solver)
    if raw.status != OPTIMAL:
        raise InfeasibleError(f"nominal model is {raw.status}")
    return NominalSolution(
        objective=raw.objective,
        values=dict(zip(lp.col_names, (float(v) for v in raw.x))),
        raw=raw,
    )


def build_dcco(case: MarketCase) -> LpProblem:
    sig = sigma_prime(case)
    lp = LpProblem("dcco")

    for gen in case.generators:
        lp.add_var(_n("p", gen.id), cost=gen.cost)
        lp.add_var(_n("ru", gen.id), cost=gen.up_cost)
        lp.add_var(_n("rd", gen.id), cost=-gen.down_cost)
        lp.add_var(_n("au", gen.id))
        lp.add_var(_n("ad", gen.id))
    for bus in case.buses:
        vres = case.bus_vres(bus)
        lp.add_var(_n("wsch", bus))
        lp.add_var(_n("wspi", bus), cost=-vres.cost)
        lp.add_var(_n("beta", bus))
        lp.objective_constant += vres.cost * case.forecast(bus)
    for load in case.loads:
        lp.add_var(_n("gamma", load.id))
        lp.add_var(_n("s", load.id), cost=load.curtailment_cost)
    _add_angles(lp, case, "theta0")
    _add_angles(lp, case, "theta")

    for bus in case.buses:
        gens = case.bus_generators(bus)
        loads = case.bus_loads(bus)
        lp.add_row(
            _n("balance", bus),
            [(_n("p", g.id), 1.0) for g in gens]
            + [(_n("wsch", bus), 1.0)]
            + [(col, -v) for col, v in _flow_terms(case, bus, "theta0")],
            EQ,
            case.demand(bus),
        )
        lp.add_row(
            _n("rebalance", bus),
            [(_n("ru", g.id), 1.0) for g in gens]
            + [(_n("rd", g.id), -1.0) for g in gens]
            + [(_n("s", j.id), 1.0) for j in loads]
            + [(_n("wsch", bus), -1.0), (_n("wspi", bus), -1.0)]
            + _flow_terms(case, bus, "theta0")
            + [(col, -v) for col, v in _flow_terms(case, bus, "theta")],
            EQ,
            -case.forecast(bus),
        )
        if case.sigma(bus) > 0:
            lp.add_row(
                _n("control", bus),
                [(_n("au", g.id), 1.0) for g in gens]
                + [(_n("ad", g.id), 1.0) for g in gens]
                + [(_n("gamma", j.id), 1.0) for j in loads]
                + [(_n("beta", bus), 1.0)],
                EQ,
                1.0,
            )
        else:
            # no error to distribute: recourse coefficients stay at zero
            for g in gens:
                lp.add_row(_n("pin_au", g.id), {_n("au", g.id): 1.0}, EQ, 0.0)
                lp.add_row(_n("pin_ad", g.id), {_n("ad", g.id): 1.0}, EQ, 0.0)
            for j in loads:
                lp.add_row(_n("pin_gamma", j.id), {_n("gamma", j.id): 1.0}, EQ, 0.0)
            lp.add_row(_n("pin_beta", bus), {_n("beta", bus): 1.0}, EQ, 0.0)
    _add_line_limits(lp, case, "line0", "theta0")
    _add_line_limits(lp, case, "line", "theta")

    for bus in case.buses:
        vres = case.bus_vres(bus)
        wspi, beta = _n("wspi", bus), _n("beta", bus)
        lp.add_row(_n("wcap", bus), {_n("wsch", bus): -1.0}, GE, -vres.cap)
        lp.add_row(_n("spill_lo", bus), {wspi: 1.0, beta: -sig[bus]}, GE, 0.0)
        lp.add_row(
            _n("spill_hi", bus),
            {wspi: -1.0, beta: sig[bus]},
            GE,
            sig[bus] - case.forecast(bus),
        )
    for gen in case.generators:
        s = sig[gen.bus]
        p, ru, rd = _n("p", gen.id), _n("ru", gen.id), _n("rd", gen.id)
        au, ad = _n("au", gen.id), _n("ad", gen.id)
        lp.add_row(_n("pcap", gen.id), {p: -1.0}, GE, -gen.capacity)
        lp.add_row(_n("ru_lo", gen.id), {ru: 1.0, au: -s}, GE, 0.0)
        lp.add_row(_n("ru_hi", gen.id), {ru: -1.0, au: -s}, GE, -gen.up_cap)
        lp.add_row(_n("rd_lo", gen.id), {rd: 1.0, ad: -s}, GE, 0.0)
        lp.add_row(_n("rd_hi", gen.id), {rd: -1.0, ad: -s}, GE, -gen.down_cap)
        lp.add_row(
            _n("gen_lo", gen.id),
            {p: 1.0, ru: 1.0, rd: -1.0, au: -s, ad: -s},
            GE,
            0.0,
        )
        lp.add_row(
            _n("gen_hi", gen.id),
            {p: -1.0, ru: -1.0, rd: 1.0, au: -s, ad: -s},
            GE,
            -gen.capacity,
        )
    for load in case.loads:
        s = sig[load.bus]
        shed, gamma = _n("s", load.id), _n("gamma", load.id)
        lp.add_row(_n("shed_lo", load.id), {shed: 1.0, gamma: -s}, GE, 0.0)
        lp.add_row(_n("shed_hi", load.id), {shed: -1.0, gamma: -s}, GE, -load.demand)
    return lp


class CcoSolution(NamedTuple):
    case: MarketCase
    quantiles: dict[str, float]
    sigma_prime: dict[str, float]
    objective: float
    # primal, per generator
    p: dict[str, float]
    ru: dict[str, float]
    rd: dict[str, float]
    alpha_u: dict[str, float]
    alpha_d: dict[str, float]
    # primal, per bus
    wsch: dict[str, float]
    wspi: dict[str, float]
    beta: dict[str, float]
    theta0: dict[str, float]
    theta: dict[str, float]
    # primal, per load
    gamma: dict[str, float]
    s: dict[str, float]
    # duals, per bus
    lam: dict[str, float]
    nu: dict[str, float]
    kappa: dict[str, float]
    mu: dict[str, float]
    y_spi: dict[str, float]
    x_spi: dict[str, float]
    # duals, per generator
    rho: dict[str, float]
    y_u: dict[str, float]
    x_u: dict[str, float]
    y_d: dict[str, float]
    x_d: dict[str, float]
    y_gen: dict[str, float]
    x_gen: dict[str, float]
    # duals, per load
    y_s: dict[str, float]
    x_s: dict[str, float]
    lp: LpProblem
    raw: LpSolution

    def gen_sigma_prime(self, gen_id: str) -> float:
        return self.sigma_prime[self.case.generator(gen_id).bus]


def dispatched_demand(case: MarketCase, curtailed: dict[str, float]) -> float:
    return math.fsum(load.demand - curtailed[load.id] for load in case.loads)


def solve_cco(
    case: MarketCase,
    tol: Tolerances = Tolerances(),
    solver: str | Solver = "auto",
) -> CcoSolution:
    lp = build_dcco(case)
    raw = solve_lp(lp, tol, solver)
    if raw.status != OPTIMAL:
        raise InfeasibleError(f"chance-constrained model is {raw.status}")

    def primal(kind: str, keys: Sequence[str]) -> dict[str, float]:
        return {key: raw.value(_n(kind, key)) for key in keys}

    def dual(kind: str, keys: Sequence[str]) -> dict[str, float]:
        return {
            key: raw.dual(_n(kind, key)) if lp.has_row(_n(kind, key)) else 0.0
            for key in keys
        }

    gens = [g.id for g in case.generators]
    buses = list(case.buses)
    loads = [j.id for j in case.loads]
    ret = CcoSolution(
        case=case,
        quantiles={bus: q.value for bus, q in bus_quantiles(case).items()},
        sigma_prime=sigma_prime(case),
        objective=raw.objective,
        p=primal("p", gens),
        ru=primal("ru", gens),
        rd=primal("rd", gens),
        alpha_u=primal("au", gens),
        alpha_d=primal("ad", gens),
        wsch=primal("wsch", buses),
        wspi=primal("wspi", buses),
        beta=primal("beta", buses),
        theta0=primal("theta0", buses),
        theta=primal("theta", buses),
        gamma=primal("gamma", loads),
        s=primal("s", loads),
        lam=dual("balance", buses),
        nu=dual("rebalance", buses),
        kappa=dual("control", buses),
        mu=dual("wcap", buses),
        y_spi=dual("spill_lo", buses),
        x_spi=dual("spill_hi", buses),
        rho=dual("pcap", gens),
        y_u=dual("ru_lo", gens),
        x_u=dual("ru_hi", gens),
        y_d=dual("rd_lo", gens),
        x_d=dual("rd_hi", gens),
        y_gen=dual("gen_lo", gens),
        x_gen=dual("gen_hi", gens),
        y_s=dual("shed_lo", loads),
        x_s=dual("shed_hi", loads),
        lp=lp,
        raw=raw,
    )

    # a market that dispatches no demand has no load price adder
    if dispatched_demand(case, ret.s) <= tol.feasibility:
        raise AssumptionError("optimal dispatch serves no demand: sum(L - s) <= 0")
    return ret


def _philox(seed: int, purpose: int, stream: int, chunk: int) -> np.random.Generator:
    key = np.random.SeedSequence([seed, purpose, stream]).generate_state(2, dtype=np.uint64)
    # chunks sit 2**128 counter steps apart so their blocks never overlap
    return np.random.Generator(np.random.Philox(key=key, counter=chunk << 128))


def standard_draws(
    family: DistributionFamily,
    seed: int,
    purpose: int,
    stream: int,
    start: int,
    count: int,
) -> FloatArray:
    """draws `start .. start+count` of one zero-mean unit-variance stream

    Draw i always comes from chunk i // CHUNK of the stream, whatever
    slice is requested.
    """
    if count <= 0:
        return np.zeros(0)
    first, last = start // CHUNK, (start + count - 1) // CHUNK
    parts = []
    for chunk in range(first, last + 1):
        gen = _philox(seed, purpose, stream, chunk)
        if family.tag == "uniform-symmetric":
            root3 = math.sqrt(3)
            parts.append(gen.uniform(-root3, root3, CHUNK))
        else:
            parts.append(gen.standard_normal(CHUNK))
    offset = start - first * CHUNK
    return np.concatenate(parts)[offset:offset + count]


class ScenarioSet(NamedTuple):
    buses: tuple[str, ...]
    probabilities: FloatArray
    values: FloatArray

    @property
    def count(self) -> int:
        return len(self.probabilities)

    def column(self, bus: str) -> FloatArray:
        return self.values[:, self.buses.index(bus)]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=list(self.buses))
        frame.insert(0, "probability", self.probabilities)
        frame.insert(0, "scenario", np.arange(self.count))
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> ScenarioSet:
        buses = tuple(str(c) for c in frame.columns if c not in ("scenario", "probability"))
        probabilities = frame["probability"].to_numpy(dtype=np.float64)
        values = frame[list(buses)].to_numpy(dtype=np.float64)
        if (probabilities <= 0).any() or abs(math.fsum(probabilities) - 1) > 1e-9:
            raise ValueError("scenario probabilities must be > 0 and sum to 1")
        if (values < 0).any():
            raise ValueError("scenario realizations must be >= 0")
        return cls(buses, probabilities, values)

    @classmethod
    def read_csv(cls, filename: str) -> ScenarioSet:
        return cls.from_frame(pd.read_csv(filename, dtype={"scenario": int}))


def sample_scenarios(case: MarketCase, count: int, seed: int) -> ScenarioSet:
    if count < 1:
        raise ValueError(f"scenario count must be >= 1, got {count}")
    columns = []
    for index, bus in enumerate(case.buses):
        sigma = case.sigma(bus)
        if sigma == 0:
            columns.append(np.full(count, case.forecast(bus)))
            continue
        draws = standard_draws(case.family_at(bus), seed, SCENARIO_STREAM, index, 0, count)
        # negative wind is not physical
        columns.append(np.maximum(case.forecast(bus) + sigma * draws, 0.0))
    return ScenarioSet(
        buses=tuple(case.buses),
        probabilities=np.full(count, 1 / count),
        values=np.column_stack(columns),
    )


def forecast_scenarios(case: MarketCase, count: int = 1) -> ScenarioSet:
    """`count` equally likely scenarios, every one at the forecast"""
    return ScenarioSet(
        buses=tuple(case.buses),
        probabilities=np.full(count, 1 / count),
        values=np.tile([case.forecast(bus) for bus in case.buses], (count, 1)),
    )


def build_so(case: MarketCase, scenarios: ScenarioSet) -> LpProblem:
    if scenarios.buses != tuple(case.buses):
        raise ValueError(
            f"scenario buses {list(scenarios.buses)} do not match case buses "
            f"{list(case.buses)}",
        )
    lp = LpProblem("so")
    omegas = [str(w) for w in range(scenarios.count)]

    for gen in case.generators:
        lp.add_var(_n("p", gen.id), cost=gen.cost)
    for bus in case.buses:
        lp.add_var(_n("wsch", bus))
    _add_angles(lp, case, "theta0")

    for w, prob, values in zip(omegas, scenarios.probabilities, scenarios.values):
        realized = dict(zip(case.buses, values))
        for gen in case.generators:
            lp.add_var(_n("ru", gen.id, w), cost=prob * gen.up_cost)
            lp.add_var(_n("rd", gen.id, w), cost=-prob * gen.down_cost)
        for bus in case.buses:
            vres = case.bus_vres(bus)
            lp.add_var(_n("wspi", bus, w), cost=-prob * vres.cost)
            lp.objective_constant += prob * vres.cost * realized[bus]
        for load in case.loads:
            lp.add_var(_n("s", load.id, w), cost=prob * load.curtailment_cost)
        _add_angles(lp, case, "theta", w)

    for bus in case.buses:
        gens = case.bus_generators(bus)
        lp.add_row(
            _n("balance", bus),
            [(_n("p", g.id), 1.0) for g in gens]
            + [(_n("wsch", bus), 1.0)]
            + [(col, -v) for col, v in _flow_terms(case, bus, "theta0")],
            EQ,
            case.demand(bus),
        )
    _add_line_limits(lp, case, "line0", "theta0")
    for bus in case.buses:
        lp.add_row(_n("wcap", bus), {_n("wsch", bus): -1.0}, GE, -case.bus_vres(bus).cap)
    for gen in case.generators:
        lp.add_row(_n("pcap", gen.id), {_n("p", gen.id): -1.0}, GE, -gen.capacity)

    for w, values in zip(omegas, scenarios.values):
        realized = dict(zip(case.buses, values))
        for bus in case.buses:
            gens = case.bus_generators(bus)
            lp.add_row(
                _n("rebalance", bus, w),
                [(_n("ru", g.id, w), 1.0) for g in gens]
                + [(_n("rd", g.id, w), -1.0) for g in gens]
                + [(_n("s", j.id, w), 1.0) for j in case.bus_loads(bus)]
                + [(_n("wsch", bus), -1.0), (_n("wspi", bus, w), -1.0)]
                + _flow_terms(case, bus, "theta0")
                + [(col, -v) for col, v in _flow_terms(case, bus, "theta", w)],
                EQ,
                -realized[bus],
            )
            lp.add_row(
                _n("spill_hi", bus, w),
                {_n("wspi", bus, w): -1.0},
                GE,
                -realized[bus],
            )
        _add_line_limits(lp, case, "line", "theta", w)
        for gen in case.generators:
            p, ru, rd = _n("p", gen.id), _n("ru", gen.id, w), _n("rd", gen.id, w)
            lp.add_row(_n("ru_hi", gen.id, w), {ru: -1.0}, GE, -gen.up_cap)
            lp.add_row(_n("rd_hi", gen.id, w), {rd: -1.0}, GE, -gen.down_cap)
            lp.add_row(_n("gen_lo", gen.id, w), {p: 1.0, ru: 1.0, rd: -1.0}, GE, 0.0)
            lp.add_row(
                _n("gen_hi", gen.id, w),
                {p: -1.0, ru: -1.0, rd: 1.0},
                GE,
                -gen.capacity,
            )
        for load in case.loads:
            lp.add_row(
                _n("shed_hi", load.id, w),
                {_n("s", load.id, w): -1.0},
                GE,
                -load.demand,
            )
    return lp


class SoSolution(NamedTuple):
    case: MarketCase
    scenarios: ScenarioSet
    objective: float
    p: dict[str, float]
    wsch: dict[str, float]
    theta0: dict[str, float]
    ru: dict[str, FloatArray]
    rd: dict[str, FloatArray]
    wspi: dict[str, FloatArray]
    theta: dict[str, FloatArray]
    s: dict[str, FloatArray]
    lam: dict[str, float]
    # per-scenario rebalance duals, still weighted by the scenario probability
    nu: dict[str, FloatArray]
    lp: LpProblem
    raw: LpSolution

    def realtime_price(self, bus: str) -> FloatArray:
        return self.nu[bus] / self.scenarios.probabilities


def solve_so(
    case: MarketCase,
    scenarios: ScenarioSet,
    tol: Tolerances = Tolerances(),
    solver: str | Solver = "auto",
) -> SoSolution:
    lp = build_so(case, scenarios)
    raw = solve_lp(lp, tol, solver)
    if raw.status != OPTIMAL:
        raise InfeasibleError(f"stochastic model is {raw.status}")

    omegas = [str(w) for w in range(scenarios.count)]

    def stage2(kind: str, key: str) -> FloatArray:
        return np.array([raw.value(_n(kind, key, w)) for w in omegas])

    gens = [g.id for g in case.generators]
    ret = SoSolution(
        case=case,
        scenarios=scenarios,
        objective=raw.objective,
        p={g: raw.value(_n("p", g)) for g in gens},
        wsch={bus: raw.value(_n("wsch", bus)) for bus in case.buses},
        theta0={bus: raw.value(_n("theta0", bus)) for bus in case.buses},
        ru={g: stage2("ru", g) for g in gens},
        rd={g: stage2("rd", g) for g in gens},
        wspi={bus: stage2("wspi", bus) for bus in case.buses},
        theta={bus: stage2("theta", bus) for bus in case.buses},
        s={j.id: stage2("s", j.id) for j in case.loads},
        lam={bus: raw.dual(_n("balance", bus)) for bus in case.buses},
        nu={
            bus: np.array([raw.dual(_n("rebalance", bus, w)) for w in omegas])
            for bus in case.buses
        },
        lp=lp,
        raw=raw,
    )
    residual = rebalance_residual(ret)
    if residual > REBALANCE_TOL:
        raise SolverError(f"stochastic solution leaves a rebalance residual of {residual!r}")
    return ret


def rebalance_residual(sol: SoSolution) -> float:
    """largest per-scenario rebalance violation"""
    case = sol.case
    worst = 0.0
    for bus in case.buses:
        gens = case.bus_generators(bus)
        flow0 = math.fsum(
            b * (sol.theta0[bus] - sol.theta0[other]) for other, b in case.neighbors(bus)
        )
        flow = sum(
            (b * (sol.theta[bus] - sol.theta[other]) for other, b in case.neighbors(bus)),
            np.zeros(sol.scenarios.count),
        )
        total = (
            sum((sol.ru[g.id] - sol.rd[g.id] for g in gens), np.zeros(sol.scenarios.count))
            + sum((sol.s[j.id] for j in case.bus_loads(bus)), np.zeros(sol.scenarios.count))
            + sol.scenarios.column(bus)
            - sol.wsch[bus]
            - sol.wspi[bus]
            + flow0
            - flow
        )
        worst = max(worst, float(np.max(np.abs(total))))
    return worst


class ModelSize(NamedTuple):
    model: str
    variables: int
    rows: int
    formula_variables: int
    formula_rows: int


def model_size(case: MarketCase, scenario_count: int | None = None) -> ModelSize:
    """emitted dimensions next to the closed-form counts

    The closed-form row counts use directed lines and leave out the
    reference pins, the zero-σ pins and one side of several bound pairs, so
    they trail the emitted counts; both are reported.
    """
    n_gen, n_bus, n_load = len(case.generators), len(case.buses), len(case.loads)
    n_directed = 2 * len(case.lines)
    if scenario_count is None:
        lp = build_dcco(case)
        return ModelSize(
            model="dcco",
            variables=lp.n_cols,
            rows=lp.n_rows,
            formula_variables=5 * n_gen + 5 * n_bus + 2 * n_load,
            formula_rows=6 * n_gen + 5 * n_bus + 2 * n_load + 2 * n_directed,
        )
    else:
        lp = build_so(case, forecast_scenarios(case, scenario_count))
        return ModelSize(
            model="so",
            variables=lp.n_cols,
            rows=lp.n_rows,
            formula_variables=n_gen + 2 * n_bus + scenario_count * (2 * n_gen + 2 * n_bus + n_load),
            formula_rows=n_bus + n_directed + n_gen
            + scenario_count * (2 * n_bus + n_directed + 3 * n_gen + n_load),
        )
