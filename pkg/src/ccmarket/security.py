"""Security-constrained OPF with symmetric balancing (preventive/corrective).

One monolithic program couples the base state k=0 with contingency states
through the shared schedule (preventive) or reserve bands r_up/r_dw
(corrective).  Gen/line/RES availability enters through binary activity
masks; the state-k uncertainty statistics mask out disconnected RES.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .conic import ConicProgram, Solution
from .grid import GridCase, validate_case
from .models import line_key
from .policies import Policy
from .uncertainty import UncertaintyModel

__all__ = ["ContingencyState", "ContingencySet", "ScopfResult", "ScPrices",
           "enumerate_n1", "contingencies_from_spec", "build_scopf",
           "decode_scopf", "sc_prices"]

log = logging.getLogger(__name__)

COUPLING_TOL = 1e-6


@dataclass(frozen=True)
class ContingencyState:
    label: str
    gen_off: frozenset = frozenset()    # generator buses out of service
    line_off: frozenset = frozenset()   # line keys out of service
    res_off: frozenset = frozenset()    # RES buses out of service

    def gen_active(self, bus: int) -> int:
        return 0 if bus in self.gen_off else 1

    def line_active(self, key: str) -> int:
        return 0 if key in self.line_off else 1

    def res_active(self, bus: int) -> int:
        return 0 if bus in self.res_off else 1


@dataclass
class ContingencySet:
    states: list[ContingencyState]       # states[0] is always the base case
    mode: str = "corrective"             # or "preventive"

    def __post_init__(self):
        if self.mode not in ("preventive", "corrective"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.states or (self.states[0].gen_off or self.states[0].line_off
                               or self.states[0].res_off):
            raise ValueError("state 0 must be the all-in-service base case")

    @property
    def k_max(self) -> int:
        return len(self.states) - 1


def _survives(case: GridCase, line_off: frozenset) -> bool:
    adj: dict[int, list[int]] = {b.id: [] for b in case.buses}
    for k, l in enumerate(case.lines):
        if line_key(case, k) in line_off:
            continue
        adj[l.from_bus].append(l.to_bus)
        adj[l.to_bus].append(l.from_bus)
    seen, stack = set(), [case.buses[0].id]
    while stack:
        b = stack.pop()
        if b in seen:
            continue
        seen.add(b)
        stack.extend(n for n in adj[b] if n not in seen)
    return len(seen) == len(case.buses)


def enumerate_n1(case: GridCase, classes=("lines", "gens", "res"),
                 mode: str = "corrective") -> ContingencySet:
    """All single-element outages in the requested classes; islanding
    line outages are dropped with a warning."""
    states = [ContingencyState("base")]
    if "lines" in classes:
        for k, _ in enumerate(case.lines):
            key = line_key(case, k)
            if not _survives(case, frozenset([key])):
                log.warning("dropping islanding line outage %s", key)
                continue
            states.append(ContingencyState(f"line:{key}", line_off=frozenset([key])))
    if "gens" in classes:
        for g in case.generators:
            states.append(ContingencyState(f"gen:{g.bus}", gen_off=frozenset([g.bus])))
    if "res" in classes:
        for r in case.res_units:
            states.append(ContingencyState(f"res:{r.bus}", res_off=frozenset([r.bus])))
    return ContingencySet(states=states, mode=mode)


def contingencies_from_spec(case: GridCase, entries: list[dict],
                            mode: str = "corrective") -> ContingencySet:
    """Build from a JSON-style list [{"type": "line"|"gen"|"res", "element": id}].

    Line elements may be given as "a-b" keys or [a, b] pairs.
    """
    states = [ContingencyState("base")]
    for entry in entries:
        etype = entry["type"]
        elem = entry["element"]
        if etype == "line":
            key = f"{elem[0]}-{elem[1]}" if isinstance(elem, (list, tuple)) else str(elem)
            if not _survives(case, frozenset([key])):
                log.warning("dropping islanding line outage %s", key)
                continue
            states.append(ContingencyState(f"line:{key}", line_off=frozenset([key])))
        elif etype == "gen":
            states.append(ContingencyState(f"gen:{elem}", gen_off=frozenset([int(elem)])))
        elif etype == "res":
            states.append(ContingencyState(f"res:{elem}", res_off=frozenset([int(elem)])))
        else:
            raise ValueError(f"unknown contingency type {etype!r}")
    return ContingencySet(states=states, mode=mode)


def _state_sigma(unc: UncertaintyModel, state: ContingencyState) -> float:
    """Aggregate std of the in-service RES errors in one state."""
    mask = np.array([state.res_active(u) for u in unc.nodes], dtype=float)
    cov = unc.nodal_covariance * np.outer(mask, mask)
    return math.sqrt(max(float(cov.sum()), 0.0))


def build_scopf(case: GridCase, unc: UncertaintyModel,
                cont: ContingencySet) -> ConicProgram:
    """Assemble the security-constrained clearing program.

    Requires a symmetric system-wide uncertainty model; the per-state nodal
    participation decomposition is imposed in covariance form, which for
    uncorrelated errors pins alpha_iu^k = alpha_i^k on in-service RES.
    """
    if Policy.parse(unc.policy) is not Policy.SW_SB:
        raise ValueError("SC-OPF uses the symmetric system-wide uncertainty model")
    report = validate_case(case)
    if not report.ok:
        raise ValueError("invalid case: " + "; ".join(report.entries))
    gens = [g for g in case.generators if not (g.p_max == 0.0 and g.p_min == 0.0)]
    providers = [g for g in gens if g.is_provider]
    corrective = cont.mode == "corrective"

    for state in cont.states:
        if all(state.gen_active(g.bus) == 0 for g in gens):
            raise ValueError(f"state {state.label!r} has no active generators")

    prog = ConicProgram()
    if corrective:
        for g in gens:
            prog.add_var(f"rup@g{g.bus}", lb=0.0)
            prog.add_var(f"rdw@g{g.bus}", lb=0.0)
    for k, state in enumerate(cont.states):
        for b in case.buses:
            prog.add_var(f"th@{b.id},k{k}")
        for idx, _ in enumerate(case.lines):
            prog.add_var(f"f@{line_key(case, idx)},k{k}")
        for g in gens:
            prog.add_var(f"p@g{g.bus},k{k}")
        for g in providers:
            prog.add_var(f"a@g{g.bus},k{k}", lb=0.0, ub=1.0)
            for u in unc.nodes:
                prog.add_var(f"au@g{g.bus},u{u},k{k}", lb=0.0, ub=1.0)

    res_fc = {r.bus: r.forecast for r in case.res_units}
    for k, state in enumerate(cont.states):
        s_k = _state_sigma(unc, state)
        incident: dict[int, list[tuple[str, float]]] = {b.id: [] for b in case.buses}
        for idx, l in enumerate(case.lines):
            fv = f"f@{line_key(case, idx)},k{k}"
            incident[l.from_bus].append((fv, -1.0))
            incident[l.to_bus].append((fv, 1.0))
        for b in case.buses:
            coeffs: dict[str, float] = {}
            if any(g.bus == b.id for g in gens):
                coeffs[f"p@g{b.id},k{k}"] = 1.0
            for fv, sgn in incident[b.id]:
                coeffs[fv] = coeffs.get(fv, 0.0) + sgn
            wind = res_fc.get(b.id, 0.0) * state.res_active(b.id)
            prog.add_eq(f"balance@{b.id},k{k}", coeffs, b.demand - wind)
        for idx, l in enumerate(case.lines):
            key = line_key(case, idx)
            tau = state.line_active(key)
            prog.add_eq(f"flowdef@{key},k{k}",
                        {f"f@{key},k{k}": 1.0,
                         f"th@{l.from_bus},k{k}": -tau / l.x,
                         f"th@{l.to_bus},k{k}": tau / l.x}, 0.0)
            prog.add_ineq(f"flowmax@{key},k{k}", {f"f@{key},k{k}": 1.0}, tau * l.f_max)
            prog.add_ineq(f"flowmin@{key},k{k}", {f"f@{key},k{k}": -1.0}, tau * l.f_max)
        prog.add_eq(f"refangle@k{k}", {f"th@{case.reference_bus},k{k}": 1.0}, 0.0)

        for u in unc.nodes:
            prog.add_eq(f"alphasum@u{u},k{k}",
                        {f"au@g{g.bus},u{u},k{k}": 1.0 for g in providers}, 1.0)
        prog.add_eq(f"gammasum@k{k}",
                    {f"a@g{g.bus},k{k}": 1.0 for g in providers}, 1.0)
        # Nodal decomposition alpha_i^k Omega^k = sum_u alpha_iu^k w_u^k in
        # covariance form against every in-service RES error.
        for vi, v in enumerate(unc.nodes):
            if not state.res_active(v):
                continue
            col = unc.nodal_covariance[:, vi]
            mask = np.array([state.res_active(u) for u in unc.nodes], dtype=float)
            col = col * mask
            total = float(col.sum())
            for g in providers:
                coeffs = {f"au@g{g.bus},u{u},k{k}": float(col[ui])
                          for ui, u in enumerate(unc.nodes) if col[ui] != 0.0}
                coeffs[f"a@g{g.bus},k{k}"] = coeffs.get(f"a@g{g.bus},k{k}", 0.0) - total
                prog.add_eq(f"kappa@g{g.bus},v{v},k{k}", coeffs, 0.0)

        for g in gens:
            tau_g = state.gen_active(g.bus)
            pv = f"p@g{g.bus},k{k}"
            if g.is_provider:
                av = f"a@g{g.bus},k{k}"
                prog.add_ineq(f"alphacap@g{g.bus},k{k}", {av: 1.0}, float(tau_g))
                z_i = unc.z_for(g.bus)
                prog.add_ineq(f"capmax@g{g.bus},k{k}",
                              {pv: 1.0, av: z_i * s_k}, tau_g * g.p_max)
                prog.add_ineq(f"capmin@g{g.bus},k{k}",
                              {pv: -1.0, av: z_i * s_k}, -tau_g * g.p_min)
            else:
                prog.add_ineq(f"capmax@g{g.bus},k{k}", {pv: 1.0}, tau_g * g.p_max)
                prog.add_ineq(f"capmin@g{g.bus},k{k}", {pv: -1.0}, -tau_g * g.p_min)
            if k > 0:
                p0 = f"p@g{g.bus},k0"
                if corrective:
                    prog.add_ineq(f"resup@g{g.bus},k{k}",
                                  {pv: 1.0, p0: -1.0, f"rup@g{g.bus}": -1.0}, 0.0)
                    prog.add_ineq(f"resdw@g{g.bus},k{k}",
                                  {pv: -1.0, p0: 1.0, f"rdw@g{g.bus}": -1.0}, 0.0)
                else:
                    prog.add_eq(f"fix@g{g.bus},k{k}", {pv: 1.0, p0: -1.0}, 0.0)

    # Expected cost at the base state plus reserve procurement.
    s_0 = _state_sigma(unc, cont.states[0])
    for g in gens:
        pv = f"p@g{g.bus},k0"
        prog.add_quad(pv, pv, g.c2)
        prog.add_lin(pv, g.c1)
        prog.add_const(g.c0)
        if g.is_provider:
            av = f"a@g{g.bus},k0"
            prog.add_quad(av, av, g.c2 * s_0 * s_0)
        if corrective:
            prog.add_lin(f"rup@g{g.bus}", g.c_up)
            prog.add_lin(f"rdw@g{g.bus}", g.c_dw)
    return prog


@dataclass
class ScPrices:
    pi_up: dict[int, float]
    pi_dw: dict[int, float]
    pi_sc: dict[int, float]
    pi_p: dict[int, float]
    pi_p_sc: dict[int, float]
    pi_sc_alt: dict[int, float]   # sum_k (delta+^k - delta-^k - lambda^k)
    mode: str


@dataclass
class ScopfResult:
    mode: str
    objective: float
    p: dict[tuple[int, int], float]        # (bus, k) -> MW
    alpha: dict[tuple[int, int], float]
    alpha_nodal: dict[tuple[int, int, int], float]  # (bus, u, k)
    f: dict[tuple[str, int], float]
    theta: dict[tuple[int, int], float]
    r_up: dict[int, float]
    r_dw: dict[int, float]
    lmbda: dict[tuple[int, int], float]
    prices: ScPrices
    state_labels: list[str] = field(default_factory=list)


def decode_scopf(case: GridCase, unc: UncertaintyModel, cont: ContingencySet,
                 solution: Solution) -> ScopfResult:
    if not solution.optimal:
        raise ValueError(f"cannot decode non-optimal SC solution ({solution.status})")
    gens = [g for g in case.generators if not (g.p_max == 0.0 and g.p_min == 0.0)]
    providers = [g for g in gens if g.is_provider]
    val = solution.primal
    corrective = cont.mode == "corrective"

    p = {(g.bus, k): val[f"p@g{g.bus},k{k}"]
         for g in gens for k in range(len(cont.states))}
    alpha = {(g.bus, k): val[f"a@g{g.bus},k{k}"]
             for g in providers for k in range(len(cont.states))}
    alpha_nodal = {(g.bus, u, k): val[f"au@g{g.bus},u{u},k{k}"]
                   for g in providers for u in unc.nodes
                   for k in range(len(cont.states))}
    f = {(line_key(case, i), k): val[f"f@{line_key(case, i)},k{k}"]
         for i, _ in enumerate(case.lines) for k in range(len(cont.states))}
    theta = {(b.id, k): val[f"th@{b.id},k{k}"]
             for b in case.buses for k in range(len(cont.states))}
    r_up = {g.bus: (val[f"rup@g{g.bus}"] if corrective else 0.0) for g in gens}
    r_dw = {g.bus: (val[f"rdw@g{g.bus}"] if corrective else 0.0) for g in gens}
    lmbda = {(b.id, k): solution.duals[f"balance@{b.id},k{k}"]
             for b in case.buses for k in range(len(cont.states))}

    for k, state in enumerate(cont.states):
        for g in gens:
            dev = p[(g.bus, k)] - p[(g.bus, 0)]
            if corrective:
                if dev > r_up[g.bus] + COUPLING_TOL or -dev > r_dw[g.bus] + COUPLING_TOL:
                    raise ValueError(f"reserve coupling violated at g{g.bus},k{k}")
            elif k > 0 and abs(dev) > COUPLING_TOL:
                raise ValueError(f"preventive schedule deviates at g{g.bus},k{k}")
        for g in providers:
            if alpha[(g.bus, k)] > state.gen_active(g.bus) + 1e-6:
                raise ValueError(f"alpha exceeds activity mask at g{g.bus},k{k}")

    return ScopfResult(mode=cont.mode, objective=solution.objective, p=p,
                       alpha=alpha, alpha_nodal=alpha_nodal, f=f, theta=theta,
                       r_up=r_up, r_dw=r_dw, lmbda=lmbda,
                       prices=sc_prices(case, cont, solution),
                       state_labels=[s.label for s in cont.states])


def sc_prices(case: GridCase, cont: ContingencySet, solution: Solution) -> ScPrices:
    """Reserve, security, and security-adjusted energy prices from duals."""
    gens = [g for g in case.generators if not (g.p_max == 0.0 and g.p_min == 0.0)]
    corrective = cont.mode == "corrective"
    ks = range(1, len(cont.states))
    pi_up, pi_dw, pi_sc, pi_p, pi_p_sc, pi_alt = {}, {}, {}, {}, {}, {}
    for g in gens:
        rho_up = sum(solution.duals[f"resup@g{g.bus},k{k}"] for k in ks) if corrective else 0.0
        rho_dw = sum(solution.duals[f"resdw@g{g.bus},k{k}"] for k in ks) if corrective else 0.0
        if corrective:
            pi_up[g.bus] = g.c_up - rho_up
            pi_dw[g.bus] = g.c_dw - rho_dw
        d_up0 = solution.duals[f"capmax@g{g.bus},k0"]
        d_dn0 = solution.duals[f"capmin@g{g.bus},k0"]
        p0 = solution.primal[f"p@g{g.bus},k0"]
        pi_p[g.bus] = 2.0 * g.c2 * p0 + g.c1 + d_up0 - d_dn0
        if corrective:
            pi_sc[g.bus] = rho_dw - rho_up
        else:
            pi_sc[g.bus] = sum(solution.duals[f"capmax@g{g.bus},k{k}"]
                               - solution.duals[f"capmin@g{g.bus},k{k}"]
                               - solution.duals[f"balance@{g.bus},k{k}"] for k in ks)
        pi_p_sc[g.bus] = pi_p[g.bus] + pi_sc[g.bus]
        pi_alt[g.bus] = sum(solution.duals[f"capmax@g{g.bus},k{k}"]
                            - solution.duals[f"capmin@g{g.bus},k{k}"]
                            - solution.duals[f"balance@{g.bus},k{k}"] for k in ks)
    return ScPrices(pi_up=pi_up, pi_dw=pi_dw, pi_sc=pi_sc, pi_p=pi_p,
                    pi_p_sc=pi_p_sc, pi_sc_alt=pi_alt, mode=cont.mode)
