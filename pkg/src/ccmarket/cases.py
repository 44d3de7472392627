"""Bundled test systems.

Builders are deterministic; `python -m ccmarket.cases` regenerates the JSON
files shipped under ccmarket/data/.  The 118-bus system is a synthetic
approximation (real demands/branches of the modified IEEE-118 study live in
an external supplement): it keeps the documented wind-farm placement and the
normalized forecast/sigma table, scaled so the base penetration is 9.7% of
total demand.
"""

from __future__ import annotations

import importlib.resources as resources
import json

import numpy as np

from .grid import Bus, Generator, GridCase, Line, ResUnit, loads_case, save_case

__all__ = ["three_bus", "ten_bus", "five_bus_sc", "ieee118_like",
           "load_bundled", "BUNDLED"]

# Normalized wind data: bus -> (forecast, sigma), base penetration 9.7%.
WIND_TABLE = {
    3: (0.112, 0.10), 8: (0.801, 0.26), 11: (0.610, 0.22), 20: (0.086, 0.25),
    24: (0.142, 0.22), 26: (0.000, 0.19), 31: (0.056, 0.14), 38: (0.137, 0.44),
    43: (0.353, 0.17), 49: (0.207, 0.13), 53: (0.305, 0.07),
}
BASE_PENETRATION = 0.097
# Error magnitudes are damped relative to the normalized table so the
# z ~ 9.95 Chebyshev margin stays feasible up to 4x wind capacity; the
# sigma RATIOS (which fix the beta_u shares) are preserved exactly.
SIGMA_DAMPING = 0.25


def three_bus() -> GridCase:
    """Triangle system: two generators, one wind farm, single load pocket.

    Sized so both units stay strictly inside their capacity range and hold
    interior participation factors (the regime the closed-form price
    expressions cover) at wind scales up to 4x.
    """
    return GridCase(
        buses=(Bus(1, 30.0), Bus(2, 40.0), Bus(3, 150.0)),
        lines=(Line(1, 2, 0.10, 300.0), Line(1, 3, 0.08, 300.0), Line(2, 3, 0.12, 300.0)),
        generators=(Generator(1, 0.020, 20.0, 100.0, 300.0, 0.0, 5.0, 4.0),
                    Generator(2, 0.030, 21.0, 80.0, 250.0, 0.0, 6.0, 5.0)),
        res_units=(ResUnit(3, 30.0, 2.0),),
        reference_bus=1,
        name="three_bus",
    )


def ten_bus() -> GridCase:
    """10-bus ring with chords; five generators, three wind farms.

    Wind sigmas are exactly proportional to forecasts (kappa = 0.2), which
    the RES cost-equivalence identity assumes.
    """
    demands = {1: 40.0, 2: 55.0, 3: 70.0, 4: 45.0, 5: 80.0,
               6: 50.0, 7: 65.0, 8: 40.0, 9: 60.0, 10: 45.0}
    buses = tuple(Bus(i, demands[i]) for i in range(1, 11))
    ring = [Line(i, i + 1, 0.10, 400.0) for i in range(1, 10)]
    ring.append(Line(10, 1, 0.10, 400.0))
    chords = [Line(1, 5, 0.15, 400.0), Line(2, 7, 0.18, 400.0), Line(4, 9, 0.16, 400.0)]
    gens = (
        Generator(1, 0.015, 18.0, 120.0, 400.0, 0.0, 4.0, 3.5),
        Generator(3, 0.025, 20.0, 100.0, 320.0, 0.0, 5.0, 4.0),
        Generator(5, 0.020, 22.0, 90.0, 360.0, 0.0, 4.5, 4.0),
        Generator(7, 0.035, 23.0, 70.0, 260.0, 0.0, 6.0, 5.0),
        Generator(9, 0.030, 21.0, 80.0, 300.0, 0.0, 5.5, 4.5),
    )
    res = (ResUnit(2, 22.0, 3.3), ResUnit(6, 18.0, 2.7), ResUnit(8, 15.0, 2.25))
    return GridCase(buses=buses, lines=tuple(ring + chords), generators=gens,
                    res_units=res, reference_bus=1, name="ten_bus")


def five_bus_sc() -> GridCase:
    """5-bus meshed system for N-1 security studies (stays connected)."""
    buses = (Bus(1, 0.0), Bus(2, 90.0), Bus(3, 70.0), Bus(4, 60.0), Bus(5, 80.0))
    lines = (Line(1, 2, 0.08, 220.0), Line(2, 3, 0.10, 220.0), Line(3, 4, 0.09, 220.0),
             Line(4, 5, 0.11, 220.0), Line(5, 1, 0.07, 220.0), Line(2, 5, 0.12, 220.0),
             Line(1, 3, 0.14, 220.0))
    gens = (Generator(1, 0.020, 16.0, 90.0, 250.0, 0.0, 4.0, 3.0),
            Generator(3, 0.028, 22.0, 70.0, 200.0, 0.0, 5.0, 4.0),
            Generator(5, 0.024, 19.0, 80.0, 220.0, 0.0, 4.5, 3.5))
    res = (ResUnit(4, 30.0, 6.0),)
    return GridCase(buses=buses, lines=lines, generators=gens, res_units=res,
                    reference_bus=1, name="five_bus_sc")


def ieee118_like(seed: int = 118) -> GridCase:
    """Synthetic 118-bus approximation with the 11 documented wind farms."""
    rng = np.random.default_rng(seed)
    n = 118
    ref = 69

    raw = rng.uniform(0.0, 1.0, size=n)
    raw[rng.choice(n, size=20, replace=False)] = 0.0  # zero-load buses
    demands = raw / raw.sum() * 4242.0
    buses = tuple(Bus(i + 1, round(float(demands[i]), 3)) for i in range(n))

    lines: list[Line] = []
    seen = set()

    def add_line(a: int, b: int, x: float, cap: float):
        key = (min(a, b), max(a, b))
        if a == b or key in seen:
            return
        seen.add(key)
        lines.append(Line(key[0], key[1], round(x, 4), cap))

    for i in range(1, n):
        add_line(i, i + 1, float(rng.uniform(0.03, 0.12)), 600.0)
    add_line(n, 1, float(rng.uniform(0.03, 0.12)), 600.0)
    for i in range(1, n - 9, 5):
        add_line(i, i + 9, float(rng.uniform(0.06, 0.20)), 500.0)
    for i in range(1, n - 29, 17):
        add_line(i, i + 29, float(rng.uniform(0.08, 0.25)), 500.0)
    for other in (10, 30, 50, 90, 110):
        add_line(ref, other, float(rng.uniform(0.05, 0.15)), 700.0)

    gen_buses = sorted(rng.choice(np.arange(1, n + 1), size=54, replace=False).tolist())
    if ref not in gen_buses:
        gen_buses[0] = ref
        gen_buses.sort()
    gens = []
    for gb in gen_buses:
        # Keep every unit inframarginal with capacity margin across the
        # 0.5x..4x wind sweep so participation factors stay interior.
        c2 = float(rng.uniform(0.02, 0.06))
        c1 = float(rng.uniform(8.0, 14.0))
        c0 = float(rng.uniform(0.0, 400.0))
        p_max = (20.0 - c1) / (2.0 * c2) * float(rng.uniform(1.5, 2.4))
        gens.append(Generator(gb, round(c2, 5), round(c1, 3), round(c0, 2),
                              round(p_max, 1), 0.0,
                              round(float(rng.uniform(2.0, 8.0)), 2),
                              round(float(rng.uniform(2.0, 8.0)), 2)))

    total_demand = sum(b.demand for b in buses)
    total_norm = sum(w for w, _ in WIND_TABLE.values())
    mw_base = BASE_PENETRATION * total_demand / total_norm
    res = tuple(ResUnit(bus, round(w * mw_base, 3),
                        round(s * SIGMA_DAMPING * mw_base, 3))
                for bus, (w, s) in sorted(WIND_TABLE.items()))
    return GridCase(buses=buses, lines=tuple(lines), generators=tuple(gens),
                    res_units=res, reference_bus=ref, name="ieee118_like")


BUNDLED = {
    "three_bus": three_bus,
    "ten_bus": ten_bus,
    "five_bus_sc": five_bus_sc,
    "ieee118": ieee118_like,
}


def load_bundled(name: str) -> GridCase:
    """Load a bundled case from package data (exercises the JSON loader)."""
    if name not in BUNDLED:
        raise KeyError(f"unknown bundled case {name!r}; have {sorted(BUNDLED)}")
    path = resources.files("ccmarket").joinpath(f"data/{name}.json")
    return loads_case(path.read_text(encoding="utf-8"), name=name)


def bundled_path(name: str):
    """Filesystem path of a bundled case (for CLI --case arguments)."""
    return resources.files("ccmarket").joinpath(f"data/{name}.json")


def _regenerate() -> None:
    import pathlib
    data_dir = pathlib.Path(__file__).parent / "data"
    data_dir.mkdir(exist_ok=True)
    for name, builder in BUNDLED.items():
        save_case(builder(), data_dir / f"{name}.json")
        print(f"wrote {data_dir / (name + '.json')}")
    _ = json  # canonical writer lives in grid.save_case


if __name__ == "__main__":
    _regenerate()
