from __future__ import annotations

import math

import numpy as np
import pandas as pd
import pytest

import clearing
import pricing
from clearing import AssumptionError
from netmodel import load_case
from tests.market_cases import case_path
from tests.market_cases import toy_case
from tests.market_cases import TOY_SIGMA_PRIME


@pytest.fixture(scope="module")
def toy():
    sol = clearing.solve_cco(toy_case())
    return sol, pricing.cco_prices(sol)


def test_tau_tie_resolves_to_kappa_branch(toy):
    _, prices = toy

    tau = prices.tau["G"]
    assert tau.up == pytest.approx(2)
    assert tau.down == pytest.approx(2)
    assert tau.up_branch == tau.down_branch == pricing.BRANCH_KAPPA
    assert tau.tie is True


def test_cco_prices_toy(toy):
    _, prices = toy

    assert prices.energy == {"1": pytest.approx(10)}
    assert prices.rebalance == {"1": pytest.approx(10)}
    # the reserve prices land on the reserve offers
    assert prices.upward == {"G": pytest.approx(12)}
    assert prices.downward == {"G": pytest.approx(8)}
    assert prices.load_scheduled["1"] == pytest.approx(10 + prices.zeta)
    assert prices.curtailment["1"] == pytest.approx(10 + prices.zeta)


def test_zero_sigma_bus_uses_the_reserve_dual():
    sol = clearing.solve_cco(load_case(case_path(1)))

    tau = pricing.compute_tau(sol)

    assert tau["G1"].up_branch == pricing.BRANCH_ZERO_SIGMA
    assert tau["G1"].up == sol.y_u["G1"]
    assert tau["G1"].down == sol.y_d["G1"]
    for gen_id in ("G2", "G3", "G4"):
        assert tau[gen_id].up_branch in (pricing.BRANCH_KAPPA, pricing.BRANCH_DUAL)


def test_tau_dual_branch():
    assert pricing._tau_side(1.0, 2.0, 3.0, 1e-9) == (3.0, pricing.BRANCH_DUAL, False)
    assert pricing._tau_side(8.0, 2.0, 3.0, 1e-9) == (4.0, pricing.BRANCH_KAPPA, False)
    assert pricing._tau_side(6.0, 2.0, 3.0, 1e-9) == (3.0, pricing.BRANCH_KAPPA, True)


def test_compute_zeta_no_dispatched_demand(toy):
    sol, _ = toy
    tampered = sol._replace(s={"L": 50.0})

    with pytest.raises(AssumptionError) as excinfo:
        pricing.compute_zeta(tampered)

    (msg,) = excinfo.value.args
    assert msg == "dispatched demand is 0.0: load price adder undefined"


def test_weighted_moments():
    mean, std = pricing.weighted_moments(np.array([0.5, 0.5]), np.array([1.0, 3.0]))

    assert (mean, std) == (2.0, 1.0)


def test_weighted_moments_single_value_has_no_spread():
    mean, std = pricing.weighted_moments(np.ones(1), np.array([0.1]))

    assert (mean, std) == (0.1, 0.0)


def test_realtime_histogram():
    frame = pricing.realtime_histogram(np.array([10.0, 10.2, 11.0]))

    assert frame["bin_left"].tolist() == [9.0, 9.5, 10.0, 10.5, 11.0, 11.5]
    assert frame["bin_right"].tolist() == [9.5, 10.0, 10.5, 11.0, 11.5, 12.0]
    assert frame["count"].tolist() == [0, 0, 2, 0, 1, 0]


def test_histogram_frame():
    prices = pricing.SoPriceSchedule(
        energy={"1": 10.0, "2": 11.0},
        realtime={"1": np.array([10.0]), "2": np.array([12.0, 12.0])},
        mean={"1": 10.0, "2": 12.0},
        std={"1": 0.0, "2": 0.0},
    )

    frame = pricing.histogram_frame(prices, width=1.0)

    assert list(frame.columns) == ["bus", "bin_left", "bin_right", "count"]
    assert frame.groupby("bus")["count"].sum().to_dict() == {"1": 1, "2": 2}


def test_price_frame(toy):
    sol, prices = toy

    frame = pricing.price_frame(sol, prices).set_index("participant")

    assert frame.loc["G", "upward"] == pytest.approx(12)
    assert frame.loc["G", "tau_up_branch"] == "kappa"
    assert math.isnan(frame.loc["G", "realtime"])
    assert frame.loc["W", "kind"] == "vres"
    assert frame.loc["L", "scheduled"] == pytest.approx(prices.load_scheduled["1"])
    assert (frame["zeta"] == prices.zeta).all()


def test_read_price_frame_overrides_listed_prices(toy):
    sol, prices = toy
    frame = pricing.price_frame(sol, prices)
    frame.loc[frame["participant"] == "G", "upward"] = 13.5
    frame = frame[frame["participant"] != "L"]

    ret = pricing.read_price_frame(frame, prices, sol)

    assert ret.upward == {"G": 13.5}
    assert ret.downward == {"G": pytest.approx(8)}
    assert ret.curtailment == prices.curtailment
    assert ret.vres_deviation == prices.vres_deviation


def test_dispatch_frame(toy):
    sol, prices = toy

    frame = pricing.dispatch_frame(sol, prices).set_index(["element", "action"])

    assert frame.loc[("G", "p"), "expected"] == pytest.approx(30 + TOY_SIGMA_PRIME)
    assert frame.loc[("G", "p"), "stage"] == "scheduling"
    assert frame.loc[("L", "L"), "expected"] == 50
    assert frame.loc[("G", "rd"), "expected"] == pytest.approx(TOY_SIGMA_PRIME)
    # every bit of the forecast error lands on downward reserve
    assert frame.loc[("G", "rd"), "std"] == pytest.approx(2)
    assert frame.loc[("G", "rd"), "price"] == pytest.approx(8)
    assert frame.loc[("G", "ru"), "std"] == pytest.approx(0, abs=1e-9)
    assert frame.loc[("W", "wspi"), "stage"] == "real-time"


def test_so_prices_single_scenario():
    case = toy_case()
    sol = clearing.solve_so(case, clearing.forecast_scenarios(case))

    prices = pricing.so_prices(sol)

    assert prices.energy == {"1": pytest.approx(10)}
    assert prices.std == {"1": 0.0}
    assert prices.realtime["1"].shape == (1,)
    assert prices.mean["1"] == prices.realtime["1"][0]


@pytest.fixture(scope="module")
def toy_so():
    case = toy_case()
    sol = clearing.solve_so(case, clearing.sample_scenarios(case, 8, seed=3))
    return sol, pricing.so_prices(sol)


def test_so_dispatch_frame(toy_so):
    sol, _ = toy_so

    frame = pricing.so_dispatch_frame(sol)

    assert list(frame.columns) == ["element", "action", "stage", "expected", "std"]
    assert frame["action"].tolist() == ["p", "wsch", "ru", "rd", "wspi", "s"]
    assert (frame["std"] >= 0).all()


def test_so_price_frame(toy_so):
    sol, prices = toy_so

    frame = pricing.so_price_frame(sol, prices)

    assert frame["action"].tolist() == ["ru", "rd", "wspi", "s"]
    assert (frame["mean"] == prices.mean["1"]).all()


def test_comparison_frames(toy, toy_so):
    sol, prices = toy
    _, so = toy_so

    frame = pricing.comparison_frame(sol.case, prices, so).set_index("action")
    assert frame.loc["ru", "cco_price"] == pytest.approx(12)
    assert frame.loc["rd", "cco_price"] == pytest.approx(8)
    assert frame.loc["s", "so_mean"] == so.mean["1"]

    analytic = pricing.analytic_comparison_frame(sol.case, prices, so)
    assert len(analytic) == 7
    by_action = analytic.set_index("action")
    assert by_action.loc["upward reserve", "cco_expression"] == "nu + tau_up"
    assert by_action.loc["upward reserve", "so_expression"] == "nu / pi"
    assert by_action.loc["conventional generation", "so_expression"] == "lam"
    assert by_action.loc["conventional generation", "so_std"] == 0
    assert by_action.loc["load consumption", "cco_price"] == pytest.approx(
        prices.load_scheduled["1"],
    )
    assert isinstance(analytic, pd.DataFrame)
