from __future__ import annotations

import argparse
import configparser
import json
import math
from collections.abc import Iterator
from collections.abc import Mapping
from collections.abc import Sequence
from typing import Any
from typing import NamedTuple

DISTRIBUTIONS = ("normal", "uniform-symmetric")
VARIANT_FIELDS = ("up_cost", "down_cost", "up_cap", "down_cap")


class ParseError(ValueError):
    pass


class ValidationError(ValueError):
    def __init__(self, problems: Sequence[str]) -> None:
        self.problems = tuple(problems)
        super().__init__("\n".join(self.problems))


def _number(dct: dict[str, Any], key: str, path: str) -> float:
    try:
        val = dct.pop(key)
    except KeyError:
        raise ParseError(f"{path}.{key}: required") from None
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ParseError(f"{path}.{key}: expected a number, got {val!r}")
    return float(val)


def _ident(dct: dict[str, Any], key: str, path: str) -> str:
    try:
        val = dct.pop(key)
    except KeyError:
        raise ParseError(f"{path}.{key}: required") from None
    if not isinstance(val, str) or not val:
        raise ParseError(f"{path}.{key}: expected an identifier string, got {val!r}")
    return val


def _object(val: Any, path: str) -> dict[str, Any]:
    if not isinstance(val, dict):
        raise ParseError(f"{path}: expected an object, got {type(val).__name__}")
    return dict(val)


def _array(val: Any, path: str) -> list[Any]:
    if not isinstance(val, list):
        raise ParseError(f"{path}: expected an array, got {type(val).__name__}")
    return val


def _no_leftovers(dct: dict[str, Any], path: str) -> None:
    if dct:
        raise ParseError(f"unexpected attrs for {path}: {sorted(dct)}")


class DistributionFamily(NamedTuple):
    """standardized (zero mean, unit variance) symmetric error distribution

    `table` optionally pins the upper quantiles as (probability, value) pairs,
    which then take precedence over the parametric family.
    """

    tag: str = "normal"
    table: tuple[tuple[float, float], ...] = ()

    @classmethod
    def from_doc(cls, doc: Any, path: str) -> DistributionFamily:
        if isinstance(doc, str):
            doc = {"family": doc}
        dct = _object(doc, path)
        tag = _ident(dct, "family", path)
        if tag not in DISTRIBUTIONS:
            raise ParseError(f"{path}.family: expected one of {DISTRIBUTIONS}, got {tag!r}")
        raw = _object(dct.pop("quantiles", {}), f"{path}.quantiles")
        table = []
        for prob_s, val in raw.items():
            try:
                prob = float(prob_s)
            except ValueError:
                raise ParseError(f"{path}.quantiles: bad probability {prob_s!r}") from None
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ParseError(f"{path}.quantiles.{prob_s}: expected a number")
            table.append((prob, float(val)))
        _no_leftovers(dct, path)
        return cls(tag=tag, table=tuple(sorted(table)))

    def to_doc(self) -> str | dict[str, Any]:
        if not self.table:
            return self.tag
        return {
            "family": self.tag,
            "quantiles": {repr(prob): val for prob, val in self.table},
        }


class Line(NamedTuple):
    from_bus: str
    to_bus: str
    susceptance: float
    capacity: float

    @classmethod
    def from_doc(cls, doc: Any, path: str) -> Line:
        dct = _object(doc, path)
        ret = cls(
            from_bus=_ident(dct, "from", path),
            to_bus=_ident(dct, "to", path),
            susceptance=_number(dct, "susceptance", path),
            capacity=_number(dct, "capacity", path),
        )
        _no_leftovers(dct, path)
        return ret

    def to_doc(self) -> dict[str, Any]:
        return {
            "from": self.from_bus,
            "to": self.to_bus,
            "susceptance": self.susceptance,
            "capacity": self.capacity,
        }


class Generator(NamedTuple):
    id: str
    bus: str
    cost: float
    up_cost: float
    down_cost: float
    capacity: float
    up_cap: float
    down_cap: float

    @classmethod
    def from_doc(cls, doc: Any, path: str) -> Generator:
        dct = _object(doc, path)
        ret = cls(
            id=_ident(dct, "id", path),
            bus=_ident(dct, "bus", path),
            cost=_number(dct, "cost", path),
            up_cost=_number(dct, "up_cost", path),
            down_cost=_number(dct, "down_cost", path),
            capacity=_number(dct, "capacity", path),
            up_cap=_number(dct, "up_cap", path),
            down_cap=_number(dct, "down_cap", path),
        )
        _no_leftovers(dct, path)
        return ret

    def to_doc(self) -> dict[str, Any]:
        return self._asdict()


class Vres(NamedTuple):
    """aggregate variable renewable output at one bus"""

    id: str
    bus: str
    cost: float
    cap: float
    forecast: float
    std: float
    distribution: DistributionFamily | None = None
    error_mean: float = 0.0

    @classmethod
    def from_doc(cls, doc: Any, path: str) -> Vres:
        dct = _object(doc, path)
        ret = cls(
            id=_ident(dct, "id", path),
            bus=_ident(dct, "bus", path),
            cost=_number(dct, "cost", path),
            cap=_number(dct, "cap", path),
            forecast=_number(dct, "forecast", path),
            std=_number(dct, "std", path),
        )
        if "distribution" in dct:
            dist = DistributionFamily.from_doc(
                dct.pop("distribution"),
                f"{path}.distribution",
            )
            ret = ret._replace(distribution=dist)
        if "error_mean" in dct:
            ret = ret._replace(error_mean=_number(dct, "error_mean", path))
        _no_leftovers(dct, path)
        return ret

    @property
    def expected_output(self) -> float:
        # a known error mean moves into the forecast, leaving a centered error
        return self.forecast + self.error_mean

    def to_doc(self) -> dict[str, Any]:
        ret: dict[str, Any] = {
            "id": self.id,
            "bus": self.bus,
            "cost": self.cost,
            "cap": self.cap,
            "forecast": self.forecast,
            "std": self.std,
        }
        if self.distribution is not None:
            ret["distribution"] = self.distribution.to_doc()
        if self.error_mean:
            ret["error_mean"] = self.error_mean
        return ret


class Load(NamedTuple):
    id: str
    bus: str
    demand: float
    curtailment_cost: float

    @classmethod
    def from_doc(cls, doc: Any, path: str) -> Load:
        dct = _object(doc, path)
        ret = cls(
            id=_ident(dct, "id", path),
            bus=_ident(dct, "bus", path),
            demand=_number(dct, "demand", path),
            curtailment_cost=_number(dct, "curtailment_cost", path),
        )
        _no_leftovers(dct, path)
        return ret

    def to_doc(self) -> dict[str, Any]:
        return self._asdict()


class MarketCase(NamedTuple):
    buses: tuple[str, ...]
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...]
    vres: tuple[Vres, ...]
    loads: tuple[Load, ...]
    epsilon: float
    reference_bus: str
    distribution: DistributionFamily = DistributionFamily()

    def bus_generators(self, bus: str) -> tuple[Generator, ...]:
        return tuple(gen for gen in self.generators if gen.bus == bus)

    def bus_loads(self, bus: str) -> tuple[Load, ...]:
        return tuple(load for load in self.loads if load.bus == bus)

    def bus_vres(self, bus: str) -> Vres:
        for vres in self.vres:
            if vres.bus == bus:
                return vres
        # buses without a declared source carry a zero aggregate
        return Vres(id=f"W{bus}", bus=bus, cost=0.0, cap=0.0, forecast=0.0, std=0.0)

    def has_vres(self, bus: str) -> bool:
        return any(vres.bus == bus for vres in self.vres)

    def family_at(self, bus: str) -> DistributionFamily:
        dist = self.bus_vres(bus).distribution
        return self.distribution if dist is None else dist

    def sigma(self, bus: str) -> float:
        return self.bus_vres(bus).std

    def forecast(self, bus: str) -> float:
        return self.bus_vres(bus).expected_output

    def demand(self, bus: str) -> float:
        return math.fsum(load.demand for load in self.bus_loads(bus))

    def directed_lines(self) -> Iterator[tuple[str, str, float, float]]:
        for line in self.lines:
            yield line.from_bus, line.to_bus, line.susceptance, line.capacity
            yield line.to_bus, line.from_bus, line.susceptance, line.capacity

    def neighbors(self, bus: str) -> tuple[tuple[str, float], ...]:
        return tuple(
            (to_bus, susceptance)
            for from_bus, to_bus, susceptance, _ in self.directed_lines()
            if from_bus == bus
        )

    def generator(self, gen_id: str) -> Generator:
        for gen in self.generators:
            if gen.id == gen_id:
                return gen
        raise KeyError(gen_id)


def _finite_nonneg(what: str, val: float) -> list[str]:
    if not math.isfinite(val):
        return [f"{what}: must be finite, got {val!r}"]
    elif val < 0:
        return [f"{what}: must be >= 0, got {val!r}"]
    else:
        return []


def _table_problems(what: str, family: DistributionFamily) -> list[str]:
    problems = []
    for prob, val in family.table:
        if not (0.5 < prob < 1):
            problems.append(f"{what}: quantile probability must lie in (0.5, 1), got {prob!r}")
        if not math.isfinite(val) or val <= 0:
            problems.append(f"{what}: quantile at {prob!r} must be finite and > 0, got {val!r}")
    for (p0, v0), (p1, v1) in zip(family.table, family.table[1:]):
        if p0 == p1:
            problems.append(f"{what}: duplicate quantile probability {p0!r}")
        elif v1 <= v0:
            problems.append(
                f"{what}: quantiles must increase with probability, "
                f"got {v0!r} at {p0!r} and {v1!r} at {p1!r}",
            )
    return problems


def validate(case: MarketCase) -> None:
    problems: list[str] = []

    if not case.buses:
        problems.append("buses: at least one bus is required")
    if len(set(case.buses)) != len(case.buses):
        problems.append(f"buses: duplicate identifiers in {list(case.buses)}")
    buses = set(case.buses)

    if case.reference_bus not in buses:
        problems.append(f"reference_bus: unknown bus {case.reference_bus!r}")

    if not (0 < case.epsilon < 0.5):
        problems.append(f"epsilon: must lie in (0, 0.5), got {case.epsilon!r}")
    problems.extend(_table_problems("distribution", case.distribution))

    pairs: set[frozenset[str]] = set()
    for line in case.lines:
        what = f"line ({line.from_bus}, {line.to_bus})"
        for end in (line.from_bus, line.to_bus):
            if end not in buses:
                problems.append(f"{what}: unknown bus {end!r}")
        if line.from_bus == line.to_bus:
            problems.append(f"{what}: endpoints must differ")
        pair = frozenset((line.from_bus, line.to_bus))
        if pair in pairs:
            problems.append(f"{what}: duplicate line, store one record per pair")
        pairs.add(pair)
        if not math.isfinite(line.susceptance) or line.susceptance <= 0:
            problems.append(f"{what}: susceptance must be finite and > 0")
        problems.extend(_finite_nonneg(f"{what} capacity", line.capacity))

    seen: set[str] = set()
    for gen in case.generators:
        what = f"generator {gen.id}"
        if gen.id in seen:
            problems.append(f"{what}: duplicate identifier")
        seen.add(gen.id)
        if gen.bus not in buses:
            problems.append(f"{what}: unknown bus {gen.bus!r}")
        for field in (
            "cost",
            "up_cost",
            "down_cost",
            "capacity",
            "up_cap",
            "down_cap",
        ):
            problems.extend(_finite_nonneg(f"{what} {field}", getattr(gen, field)))

    vres_buses: set[str] = set()
    for vres in case.vres:
        what = f"vres {vres.id}"
        if vres.bus not in buses:
            problems.append(f"{what}: unknown bus {vres.bus!r}")
        if vres.bus in vres_buses:
            problems.append(f"{what}: bus {vres.bus!r} already has a vres aggregate")
        vres_buses.add(vres.bus)
        for field in ("cost", "cap", "forecast", "std"):
            problems.extend(_finite_nonneg(f"{what} {field}", getattr(vres, field)))
        if not math.isfinite(vres.error_mean):
            problems.append(f"{what} error_mean: must be finite")
        if vres.distribution is not None:
            problems.extend(_table_problems(f"{what} distribution", vres.distribution))

    seen = set()
    for load in case.loads:
        what = f"load {load.id}"
        if load.id in seen:
            problems.append(f"{what}: duplicate identifier")
        seen.add(load.id)
        if load.bus not in buses:
            problems.append(f"{what}: unknown bus {load.bus!r}")
        for field in ("demand", "curtailment_cost"):
            problems.extend(_finite_nonneg(f"{what} {field}", getattr(load, field)))

    if problems:
        raise ValidationError(problems)


def case_warnings(case: MarketCase) -> list[str]:
    return [
        f"vres {vres.id}: forecast {vres.forecast} exceeds schedule cap {vres.cap}"
        for vres in case.vres
        if vres.forecast > vres.cap
    ]


_CASE_KEYS = (
    "buses",
    "lines",
    "generators",
    "vres",
    "loads",
    "epsilon",
    "reference_bus",
    "distribution",
)


def parse_network(document: str | Mapping[str, Any]) -> MarketCase:
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as e:
            raise ParseError(f"$: invalid JSON: {e}") from None

    dct = _object(document, "$")
    for key in _CASE_KEYS:
        if key not in dct and key != "distribution":
            raise ParseError(f"$.{key}: required")

    buses = _array(dct.pop("buses"), "$.buses")
    for i, bus in enumerate(buses):
        if not isinstance(bus, str) or not bus:
            raise ParseError(f"$.buses[{i}]: expected an identifier string, got {bus!r}")

    case = MarketCase(
        buses=tuple(buses),
        lines=tuple(
            Line.from_doc(doc, f"$.lines[{i}]")
            for i, doc in enumerate(_array(dct.pop("lines"), "$.lines"))
        ),
        generators=tuple(
            Generator.from_doc(doc, f"$.generators[{i}]")
            for i, doc in enumerate(_array(dct.pop("generators"), "$.generators"))
        ),
        vres=tuple(
            Vres.from_doc(doc, f"$.vres[{i}]")
            for i, doc in enumerate(_array(dct.pop("vres"), "$.vres"))
        ),
        loads=tuple(
            Load.from_doc(doc, f"$.loads[{i}]")
            for i, doc in enumerate(_array(dct.pop("loads"), "$.loads"))
        ),
        epsilon=_number(dct, "epsilon", "$"),
        reference_bus=_ident(dct, "reference_bus", "$"),
        distribution=DistributionFamily.from_doc(
            dct.pop("distribution", "normal"),
            "$.distribution",
        ),
    )
    _no_leftovers(dct, "$")

    validate(case)
    return case


def load_case(filename: str) -> MarketCase:
    with open(filename, encoding="UTF-8") as f:
        return parse_network(f.read())


def serialize(case: MarketCase) -> str:
    doc = {
        "buses": list(case.buses),
        "reference_bus": case.reference_bus,
        "epsilon": case.epsilon,
        "distribution": case.distribution.to_doc(),
        "lines": [line.to_doc() for line in case.lines],
        "generators": [gen.to_doc() for gen in case.generators],
        "vres": [vres.to_doc() for vres in case.vres],
        "loads": [load.to_doc() for load in case.loads],
    }
    return f"{json.dumps(doc, indent=2)}\n"


class Override(NamedTuple):
    generator: str
    field: str
    value: float
    multiplicative: bool

    def apply(self, current: float) -> float:
        if self.multiplicative:
            return current * self.value
        else:
            return self.value


class CaseVariant(NamedTuple):
    overrides: tuple[Override, ...] = ()

    @classmethod
    def make(cls, key: str, val: Mapping[str, str]) -> CaseVariant:
        dct = dict(val)
        overrides = []
        for field in VARIANT_FIELDS:
            raw = dct.pop(field, "").strip()
            if not raw:
                continue
            multiplicative = raw.startswith("*")
            try:
                value = float(raw.lstrip("*").strip())
            except ValueError:
                raise ValueError(f"[{key}] {field}: not a number: {raw!r}") from None
            overrides.append(Override(key, field, value, multiplicative))
        if dct:
            raise ValueError(f"unexpected attrs for {key}: {sorted(dct)}")
        return cls(tuple(overrides))

    @classmethod
    def from_ini(cls, contents: str) -> CaseVariant:
        cfg = configparser.ConfigParser()
        cfg.read_string(contents)
        overrides: list[Override] = []
        for section in cfg.sections():
            overrides.extend(cls.make(section, cfg[section]).overrides)
        return cls(tuple(overrides))

    @classmethod
    def from_file(cls, filename: str) -> CaseVariant:
        with open(filename, encoding="UTF-8") as f:
            return cls.from_ini(f.read())

    def combine(self, other: CaseVariant) -> CaseVariant:
        return CaseVariant(self.overrides + other.overrides)


def apply_case_variant(base: MarketCase, variant: CaseVariant) -> MarketCase:
    known = {gen.id for gen in base.generators}
    unknown = sorted({o.generator for o in variant.overrides} - known)
    if unknown:
        raise ValidationError([f"variant: unknown generator {g!r}" for g in unknown])

    generators = []
    for gen in base.generators:
        for override in variant.overrides:
            if override.generator == gen.id:
                new = override.apply(getattr(gen, override.field))
                gen = gen._replace(**{override.field: new})
        generators.append(gen)

    ret = base._replace(generators=tuple(generators))
    validate(ret)
    return ret


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        description="apply variant files to a base case and write the result",
    )
    parser.add_argument("base")
    parser.add_argument("variants", nargs="*")
    parser.add_argument("--out", required=True)
    args = parser.parse_args(argv)

    try:
        case = load_case(args.base)
        variant = CaseVariant()
        for filename in args.variants:
            variant = variant.combine(CaseVariant.from_file(filename))
        case = apply_case_variant(case, variant)
    except OSError as e:
        raise SystemExit(f"{e.filename}: {e.strerror}")
    except ValueError as e:
        raise SystemExit(f"{args.base}: {e}")

    with open(args.out, "w", encoding="UTF-8") as f:
        f.write(serialize(case))
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
