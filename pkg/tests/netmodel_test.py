from __future__ import annotations

import json
import math
import os

import pytest
import re_assert

import netmodel
from netmodel import CaseVariant
from netmodel import DistributionFamily
from netmodel import Override
from netmodel import ParseError
from netmodel import ValidationError
from tests.market_cases import case_path
from tests.market_cases import CASES
from tests.market_cases import toy_doc


def test_parse_network_case1():
    case = netmodel.load_case(case_path(1))

    assert case.buses == ("1", "2", "3")
    assert case.reference_bus == "1"
    assert case.epsilon == 0.025
    assert [g.id for g in case.generators] == ["G1", "G2", "G3", "G4"]
    assert case.generator("G3").up_cap == 30
    assert case.sigma("2") == 5.175
    assert case.forecast("3") == 80
    assert case.demand("2") == 200
    assert case.sigma("1") == 0
    assert case.has_vres("1") is False
    assert case.distribution == DistributionFamily("normal")


def test_bus_without_vres_has_a_zero_aggregate():
    case = netmodel.load_case(case_path(1))

    vres = case.bus_vres("1")
    assert vres.id == "W1"
    assert (vres.cap, vres.forecast, vres.std) == (0, 0, 0)


def test_directed_lines_yields_both_orientations():
    case = netmodel.load_case(case_path(1))

    directed = list(case.directed_lines())
    assert len(directed) == 6
    assert ("1", "3", 7.6923076923076925, 60.0) in directed
    assert ("3", "1", 7.6923076923076925, 60.0) in directed
    assert case.neighbors("1") == (("2", 7.6923076923076925), ("3", 7.6923076923076925))


def test_parse_network_invalid_json():
    with pytest.raises(ParseError) as excinfo:
        netmodel.parse_network("{")

    (msg,) = excinfo.value.args
    re_assert.Matches(r"^\$: invalid JSON: ").assert_matches(msg)


def test_parse_network_missing_key():
    doc = toy_doc()
    del doc["epsilon"]

    with pytest.raises(ParseError) as excinfo:
        netmodel.parse_network(doc)

    (msg,) = excinfo.value.args
    assert msg == "$.epsilon: required"


def test_parse_network_unexpected_attrs():
    doc = toy_doc()
    doc["generators"][0]["ramp"] = 5
    doc["generators"][0]["colour"] = "red"

    with pytest.raises(ParseError) as excinfo:
        netmodel.parse_network(doc)

    (msg,) = excinfo.value.args
    assert msg == "unexpected attrs for $.generators[0]: ['colour', 'ramp']"


def test_parse_network_bool_is_not_a_number():
    doc = toy_doc()
    doc["loads"][0]["demand"] = True

    with pytest.raises(ParseError) as excinfo:
        netmodel.parse_network(doc)

    (msg,) = excinfo.value.args
    assert msg == "$.loads[0].demand: expected a number, got True"


def test_parse_network_unknown_distribution():
    doc = toy_doc()
    doc["distribution"] = "cauchy"

    with pytest.raises(ParseError) as excinfo:
        netmodel.parse_network(doc)

    (msg,) = excinfo.value.args
    assert msg.startswith("$.distribution.family: expected one of")


def test_validation_reports_every_problem():
    doc = toy_doc()
    doc["epsilon"] = 0.7
    doc["reference_bus"] = "9"
    doc["generators"][0]["capacity"] = -1
    doc["loads"][0]["bus"] = "2"

    with pytest.raises(ValidationError) as excinfo:
        netmodel.parse_network(doc)

    assert excinfo.value.problems == (
        "reference_bus: unknown bus '9'",
        "epsilon: must lie in (0, 0.5), got 0.7",
        "generator G capacity: must be >= 0, got -1.0",
        "load L: unknown bus '2'",
    )


@pytest.mark.parametrize("epsilon", (0, 0.5, -0.1))
def test_validation_epsilon_bounds(epsilon):
    doc = toy_doc()
    doc["epsilon"] = epsilon

    with pytest.raises(ValidationError):
        netmodel.parse_network(doc)


def test_validation_lines():
    doc = toy_doc()
    doc["buses"] = ["1", "2"]
    doc["lines"] = [
        {"from": "1", "to": "2", "susceptance": 0, "capacity": 10},
        {"from": "2", "to": "1", "susceptance": 5, "capacity": 10},
        {"from": "1", "to": "3", "susceptance": 5, "capacity": math.inf},
    ]

    with pytest.raises(ValidationError) as excinfo:
        netmodel.parse_network(doc)

    assert excinfo.value.problems == (
        "line (1, 2): susceptance must be finite and > 0",
        "line (2, 1): duplicate line, store one record per pair",
        "line (1, 3): unknown bus '3'",
        "line (1, 3) capacity: must be finite, got inf",
    )


def test_validation_one_vres_per_bus():
    doc = toy_doc()
    doc["vres"].append(dict(doc["vres"][0], id="W'"))

    with pytest.raises(ValidationError) as excinfo:
        netmodel.parse_network(doc)

    assert excinfo.value.problems == ("vres W': bus '1' already has a vres aggregate",)


def test_validation_duplicate_generator():
    doc = toy_doc()
    doc["generators"].append(dict(doc["generators"][0]))

    with pytest.raises(ValidationError) as excinfo:
        netmodel.parse_network(doc)

    assert excinfo.value.problems == ("generator G: duplicate identifier",)


def test_quantile_table_is_sorted_numerically():
    doc = toy_doc()
    doc["distribution"] = {"family": "normal", "quantiles": {".95": 1.64, "0.9": 1.28}}

    case = netmodel.parse_network(doc)

    assert case.distribution.table == ((0.9, 1.28), (0.95, 1.64))


def test_validation_quantile_table():
    doc = toy_doc()
    doc["distribution"] = {
        "family": "normal",
        "quantiles": {"0.4": 0.1, "0.9": 1.3, "0.95": 1.2},
    }
    doc["vres"][0]["distribution"] = {
        "family": "normal",
        "quantiles": {"0.9": -1, "0.90": 1.3},
    }

    with pytest.raises(ValidationError) as excinfo:
        netmodel.parse_network(doc)

    assert excinfo.value.problems == (
        "distribution: quantile probability must lie in (0.5, 1), got 0.4",
        "distribution: quantiles must increase with probability, got 1.3 at 0.9 and 1.2 at 0.95",
        "vres W distribution: quantile at 0.9 must be finite and > 0, got -1.0",
        "vres W distribution: duplicate quantile probability 0.9",
    )


def test_case_warnings_forecast_above_cap():
    doc = toy_doc()
    doc["vres"][0]["cap"] = 15

    case = netmodel.parse_network(doc)

    assert netmodel.case_warnings(case) == ["vres W: forecast 20.0 exceeds schedule cap 15.0"]


def test_error_mean_shifts_the_forecast():
    doc = toy_doc()
    doc["vres"][0]["error_mean"] = -1.5

    case = netmodel.parse_network(doc)

    assert case.forecast("1") == 18.5
    assert case.bus_vres("1").forecast == 20


def test_per_bus_distribution_overrides_the_case_family():
    doc = toy_doc()
    doc["vres"][0]["distribution"] = {
        "family": "uniform-symmetric",
        "quantiles": {"0.9": 1.2, "0.99": 1.7},
    }

    case = netmodel.parse_network(doc)

    assert case.family_at("1") == DistributionFamily(
        "uniform-symmetric",
        ((0.9, 1.2), (0.99, 1.7)),
    )


def test_serialize_round_trips_a_bundled_case():
    with open(case_path(1), encoding="UTF-8") as f:
        contents = f.read()

    assert netmodel.serialize(netmodel.parse_network(contents)) == contents


def test_serialize_keeps_optional_vres_fields():
    doc = toy_doc()
    doc["vres"][0]["error_mean"] = 0.5
    doc["vres"][0]["distribution"] = "uniform-symmetric"

    out = json.loads(netmodel.serialize(netmodel.parse_network(doc)))

    assert out["vres"][0]["error_mean"] == 0.5
    assert out["vres"][0]["distribution"] == "uniform-symmetric"


def test_case_variant_absolute_and_multiplicative():
    variant = CaseVariant.from_ini("[G2]\nup_cap = *0.5\ndown_cost = 19\n")

    assert variant == CaseVariant((
        Override("G2", "down_cost", 19.0, False),
        Override("G2", "up_cap", 0.5, True),
    ))


def test_case_variant_unexpected_keys_raises_errors():
    with pytest.raises(ValueError) as excinfo:
        CaseVariant.make("G1", {"ramp": "1", "cost": "2"})

    (msg,) = excinfo.value.args
    assert msg == "unexpected attrs for G1: ['cost', 'ramp']"


def test_case_variant_not_a_number():
    with pytest.raises(ValueError) as excinfo:
        CaseVariant.make("G1", {"up_cap": "*lots"})

    (msg,) = excinfo.value.args
    assert msg == "[G1] up_cap: not a number: '*lots'"


def test_apply_case_variant_unknown_generator():
    case = netmodel.load_case(case_path(1))
    variant = CaseVariant.from_ini("[G9]\nup_cap = 1\n")

    with pytest.raises(ValidationError) as excinfo:
        netmodel.apply_case_variant(case, variant)

    assert excinfo.value.problems == ("variant: unknown generator 'G9'",)


@pytest.mark.parametrize(
    ("number", "variants"),
    (
        (2, ("half_reserves.ini",)),
        (3, ("reserve_costs.ini",)),
        (4, ("half_reserves.ini", "reserve_costs.ini")),
    ),
)
def test_bundled_variants_produce_bundled_cases(tmp_path, capsys, number, variants):
    out = tmp_path.joinpath("case.json")
    argv = [case_path(1)]
    argv.extend(os.path.join(CASES, "variants", v) for v in variants)
    argv.extend(("--out", str(out)))

    assert netmodel.main(argv) == 0

    with open(case_path(number), encoding="UTF-8") as f:
        assert out.read_text() == f.read()
    out_s, _ = capsys.readouterr()
    assert out_s == f"wrote {out}\n"


def test_main_missing_base_file(tmp_path):
    with pytest.raises(SystemExit) as excinfo:
        netmodel.main((str(tmp_path.joinpath("nope.json")), "--out", str(tmp_path)))

    (msg,) = excinfo.value.args
    assert msg == f"{tmp_path.joinpath('nope.json')}: No such file or directory"
