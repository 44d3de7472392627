"""Network case data model: buses, DC lines, generators, RES units.

The canonical on-disk format is a single JSON document (see CASE_SCHEMA_KEYS
below).  MATPOWER-style column files are not parsed directly; convert them to
the JSON schema first (bus id / Pd -> buses, branch X / rateA -> lines,
gencost coefficients -> c2/c1/c0).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

__all__ = [
    "Bus",
    "Line",
    "Generator",
    "ResUnit",
    "GridCase",
    "CaseError",
    "ValidationReport",
    "load_case",
    "loads_case",
    "save_case",
    "case_to_dict",
    "scale_res",
    "validate_case",
]

CASE_SCHEMA_KEYS = {
    "buses": ("id", "demand"),
    "lines": ("from", "to", "x", "f_max"),
    "generators": ("bus", "c2", "c1", "c0", "p_max", "p_min", "c_up", "c_dw"),
    "res": ("bus", "forecast", "sigma"),
}


class CaseError(ValueError):
    """Raised when a case file fails to parse or violates an invariant."""


@dataclass(frozen=True)
class Bus:
    id: int
    demand: float  # MW


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    x: float       # p.u. reactance
    f_max: float   # MW thermal limit, symmetric +/-


@dataclass(frozen=True)
class Generator:
    bus: int
    c2: float      # $/MW^2 h
    c1: float      # $/MWh
    c0: float      # $/h
    p_max: float   # MW
    p_min: float   # MW
    c_up: float = 0.0   # $/MWh upward reserve offer (SC-OPF only)
    c_dw: float = 0.0   # $/MWh downward reserve offer (SC-OPF only)

    @property
    def is_provider(self) -> bool:
        """True when the unit has dispatchable range (counts toward |G|)."""
        return self.p_max > self.p_min

    def cost(self, p: float) -> float:
        return self.c2 * p * p + self.c1 * p + self.c0


@dataclass(frozen=True)
class ResUnit:
    bus: int
    forecast: float  # MW
    sigma: float     # MW forecast-error standard deviation


@dataclass(frozen=True)
class GridCase:
    """Immutable network case; safe to share across concurrent solves."""

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...]
    res_units: tuple[ResUnit, ...]
    reference_bus: int
    name: str = ""
    _gen_by_bus: dict = field(init=False, repr=False, compare=False, hash=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "_gen_by_bus", {g.bus: g for g in self.generators})

    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    def generator_at(self, bus_id: int) -> Generator:
        """Generator hosted at a bus; zero-capacity placeholder when empty.

        Placeholders keep price formulas uniformly indexable but are never
        given optimization variables and never enter 1/|G| averages.
        """
        g = self._gen_by_bus.get(bus_id)
        if g is None:
            return Generator(bus=bus_id, c2=0.0, c1=0.0, c0=0.0, p_max=0.0, p_min=0.0)
        return g

    @property
    def providers(self) -> tuple[Generator, ...]:
        return tuple(g for g in self.generators if g.is_provider)

    def total_demand(self) -> float:
        return sum(b.demand for b in self.buses)

    def res_penetration(self) -> float:
        """Total RES forecast over total demand."""
        d = self.total_demand()
        return sum(r.forecast for r in self.res_units) / d if d > 0 else 0.0


@dataclass
class ValidationReport:
    entries: list[str] = field(default_factory=list)

    def add(self, message: str) -> None:
        self.entries.append(message)

    @property
    def ok(self) -> bool:
        return not self.entries

    def __bool__(self) -> bool:  # truthy when clean, matching "empty report iff clean"
        return self.ok


def _require(obj: dict, key: str, where: str, optional_default=None):
    if key not in obj:
        if optional_default is not None:
            return optional_default
        raise CaseError(f"{where}: missing field '{key}'")
    return obj[key]


def loads_case(text: str, name: str = "") -> GridCase:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseError(f"case parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise CaseError("case document must be a JSON object")
    version = doc.get("version")
    if version != 1:
        raise CaseError(f"unsupported case version {version!r} (expected 1)")
    if "reference_bus" not in doc:
        raise CaseError("no reference bus")

    buses = []
    for k, entry in enumerate(doc.get("buses", [])):
        buses.append(Bus(id=int(_require(entry, "id", f"buses[{k}]")),
                         demand=float(_require(entry, "demand", f"buses[{k}]"))))
    lines = []
    for k, entry in enumerate(doc.get("lines", [])):
        lines.append(Line(from_bus=int(_require(entry, "from", f"lines[{k}]")),
                          to_bus=int(_require(entry, "to", f"lines[{k}]")),
                          x=float(_require(entry, "x", f"lines[{k}]")),
                          f_max=float(_require(entry, "f_max", f"lines[{k}]"))))
    gens = []
    for k, entry in enumerate(doc.get("generators", [])):
        where = f"generators[{k}]"
        gens.append(Generator(bus=int(_require(entry, "bus", where)),
                              c2=float(_require(entry, "c2", where)),
                              c1=float(_require(entry, "c1", where)),
                              c0=float(_require(entry, "c0", where)),
                              p_max=float(_require(entry, "p_max", where)),
                              p_min=float(_require(entry, "p_min", where)),
                              c_up=float(entry.get("c_up", 0.0)),
                              c_dw=float(entry.get("c_dw", 0.0))))
    res = []
    for k, entry in enumerate(doc.get("res", [])):
        where = f"res[{k}]"
        res.append(ResUnit(bus=int(_require(entry, "bus", where)),
                           forecast=float(_require(entry, "forecast", where)),
                           sigma=float(_require(entry, "sigma", where))))

    buses.sort(key=lambda b: b.id)
    lines.sort(key=lambda l: (l.from_bus, l.to_bus))
    gens.sort(key=lambda g: g.bus)
    res.sort(key=lambda r: r.bus)
    case = GridCase(buses=tuple(buses), lines=tuple(lines), generators=tuple(gens),
                    res_units=tuple(res), reference_bus=int(doc["reference_bus"]), name=name)
    report = validate_case(case)
    if not report.ok:
        raise CaseError("invalid case: " + "; ".join(report.entries))
    return case


def load_case(path) -> GridCase:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    import os
    return loads_case(text, name=os.path.splitext(os.path.basename(str(path)))[0])


def case_to_dict(case: GridCase) -> dict:
    return {
        "version": 1,
        "reference_bus": case.reference_bus,
        "buses": [{"id": b.id, "demand": b.demand} for b in case.buses],
        "lines": [{"from": l.from_bus, "to": l.to_bus, "x": l.x, "f_max": l.f_max}
                  for l in case.lines],
        "generators": [{"bus": g.bus, "c2": g.c2, "c1": g.c1, "c0": g.c0,
                        "p_max": g.p_max, "p_min": g.p_min, "c_up": g.c_up, "c_dw": g.c_dw}
                       for g in case.generators],
        "res": [{"bus": r.bus, "forecast": r.forecast, "sigma": r.sigma}
                for r in case.res_units],
    }


def save_case(case: GridCase, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(case_to_dict(case), fh, indent=1, sort_keys=True)
        fh.write("\n")


def scale_res(case: GridCase, factor: float) -> GridCase:
    """Scale every RES forecast and sigma by `factor` (installed-capacity scaling)."""
    if not (factor > 0.0) or not math.isfinite(factor):
        raise ValueError(f"scale factor must be positive, got {factor}")
    scaled = tuple(replace(r, forecast=r.forecast * factor, sigma=r.sigma * factor)
                   for r in case.res_units)
    return replace(case, res_units=scaled)


def _connected(case: GridCase, lines=None) -> set[int]:
    """Bus ids reachable from the reference bus over the given lines."""
    adj: dict[int, list[int]] = {b.id: [] for b in case.buses}
    for l in (case.lines if lines is None else lines):
        if l.from_bus in adj and l.to_bus in adj:
            adj[l.from_bus].append(l.to_bus)
            adj[l.to_bus].append(l.from_bus)
    seen = set()
    stack = [case.reference_bus] if case.reference_bus in adj else []
    while stack:
        b = stack.pop()
        if b in seen:
            continue
        seen.add(b)
        stack.extend(n for n in adj[b] if n not in seen)
    return seen


def validate_case(case: GridCase) -> ValidationReport:
    """Check every case invariant; an empty report means the case is clean."""
    rep = ValidationReport()
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        rep.add(f"duplicate bus ids {dupes}")
    id_set = set(ids)
    if case.reference_bus not in id_set:
        rep.add("no reference bus")
    for b in case.buses:
        if b.demand < 0:
            rep.add(f"negative demand at bus {b.id}")
    for l in case.lines:
        if l.from_bus == l.to_bus:
            rep.add(f"line {l.from_bus}-{l.to_bus} is a self-loop")
        if l.x <= 0:
            rep.add(f"non-positive reactance on line {l.from_bus}-{l.to_bus}")
        if l.f_max <= 0:
            rep.add(f"non-positive capacity on line {l.from_bus}-{l.to_bus}")
        for end in (l.from_bus, l.to_bus):
            if end not in id_set:
                rep.add(f"line {l.from_bus}-{l.to_bus} references unknown bus {end}")
    seen_gen_bus: set[int] = set()
    for g in case.generators:
        if g.bus not in id_set:
            rep.add(f"generator at unknown bus {g.bus}")
        if g.bus in seen_gen_bus:
            rep.add(f"multiple generators at bus {g.bus}")
        seen_gen_bus.add(g.bus)
        if g.is_provider and g.c2 <= 0:
            rep.add(f"generator at bus {g.bus}: non-strictly-convex cost "
                    "(c2 <= 0), dual price formulas undefined")
        if g.p_min > g.p_max:
            rep.add(f"generator at bus {g.bus}: p_min > p_max")
        if g.c_up < 0 or g.c_dw < 0:
            rep.add(f"generator at bus {g.bus}: negative reserve cost")
    seen_res_bus: set[int] = set()
    for r in case.res_units:
        if r.bus not in id_set:
            rep.add(f"RES at unknown bus {r.bus}")
        if r.bus in seen_res_bus:
            rep.add(f"multiple RES units at bus {r.bus}")
        seen_res_bus.add(r.bus)
        if r.forecast < 0:
            rep.add(f"RES at bus {r.bus}: negative forecast")
        if r.sigma < 0:
            rep.add(f"RES at bus {r.bus}: negative sigma")
    if case.reference_bus in id_set:
        reachable = _connected(case)
        for b in sorted(id_set - reachable):
            rep.add(f"unreachable bus {b}")
    return rep
