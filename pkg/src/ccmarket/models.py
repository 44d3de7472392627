"""Market-clearing program construction and solution decoding.

`build_opf` turns a (case, uncertainty model) pair into a ConicProgram for
the requested balancing policy; `decode` maps an optimal solution back into
a DispatchResult.  Constraint names follow the registry scheme
balance@<bus>, flowdef@<a>-<b>, alphasum[-/+]@u<bus>, capmax@g<bus>, ...
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .conic import ConicProgram, Solution
from .grid import Generator, GridCase, validate_case
from .policies import Policy
from .uncertainty import UncertaintyModel

__all__ = ["DispatchResult", "expected_cost", "build_opf", "decode",
           "recourse", "alpha_components", "line_key"]

BALANCE_TOL = 1e-6
EPIGRAPH_TOL = 1e-7


def line_key(case: GridCase, idx: int) -> str:
    l = case.lines[idx]
    key = f"{l.from_bus}-{l.to_bus}"
    n_before = sum(1 for k in range(idx)
                   if (case.lines[k].from_bus, case.lines[k].to_bus) == (l.from_bus, l.to_bus))
    return key if n_before == 0 else f"{key}#{n_before}"


def alpha_components(policy, unc: UncertaintyModel) -> list[str]:
    """Suffixes of the participation variables, ordered to match unc.mean."""
    policy = Policy.parse(policy)
    nodes = unc.nodes if unc is not None else []
    if policy is Policy.DETERMINISTIC:
        return []
    if policy is Policy.SW_SB:
        return [""]
    if policy is Policy.N2N_SB:
        return [f"@u{u}" for u in nodes]
    if policy is Policy.SW_AB:
        return ["-", "+"]
    return [f"-@u{u}" for u in nodes] + [f"+@u{u}" for u in nodes]


def _alpha_name(bus: int, comp: str) -> str:
    if comp == "":
        return f"a@g{bus}"
    if comp in ("-", "+"):
        return f"a{comp}@g{bus}"
    # nodal components: "@u<bus>" or "-@u<bus>" / "+@u<bus>"
    if comp.startswith("@"):
        return f"a@g{bus},{comp[1:]}"
    return f"a{comp[0]}@g{bus},{comp[2:]}"


def expected_cost(gen: Generator, p: float, A_i, M, Sigma) -> float:
    """Expected quadratic production cost under the affine recourse policy.

    E[c(p - Omega . A)] = c(p) - (2 c2 p + c1)(M.A) + c2[(M.A)^2 + S^2]
    with S^2 = A' Sigma A; only the first two moments of Omega enter.
    """
    A_i = np.asarray(A_i, dtype=float)
    M = np.asarray(M, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    if A_i.shape != M.shape or Sigma.shape != (A_i.size, A_i.size):
        raise ValueError("inconsistent dimensions for A_i, M, Sigma")
    ma = float(M @ A_i)
    s2 = float(A_i @ Sigma @ A_i)
    return (gen.c2 * p * p + gen.c1 * p + gen.c0
            - (2.0 * gen.c2 * p + gen.c1) * ma
            + gen.c2 * (ma * ma + s2))


@dataclass
class DispatchResult:
    policy: Policy
    p: dict[int, float]                  # MW by generator bus
    A: dict[int, np.ndarray]             # participation row per provider bus
    f: dict[str, float]                  # MW by line key
    theta: dict[int, float]              # rad by bus
    S: dict[int, float]                  # ||A_i Sigma^{1/2}|| per provider
    cost_by_gen: dict[int, float]
    expected_cost: float
    objective: float
    ma: dict[int, float] = field(default_factory=dict)  # M . A_i per provider
    nodes: list[int] = field(default_factory=list)      # RES stacking order

    def participation_matrix(self, buses: list[int]) -> np.ndarray:
        return np.array([self.A[b] for b in buses])


def build_opf(policy, case: GridCase, unc: UncertaintyModel | None) -> ConicProgram:
    """Assemble the chance-constrained clearing program for one policy."""
    policy = Policy.parse(policy)
    if policy.stochastic:
        if unc is None:
            raise ValueError(f"policy {policy.value} needs an uncertainty model")
        if Policy.parse(unc.policy) is not policy:
            raise ValueError(f"uncertainty model was assembled for {unc.policy}, "
                             f"not {policy.value}")
    report = validate_case(case)
    if not report.ok:
        raise ValueError("invalid case: " + "; ".join(report.entries))

    prog = ConicProgram()
    comps = alpha_components(policy, unc)
    M = unc.mean if unc is not None else np.zeros(0)
    sqrt_sigma = unc.sqrt_covariance() if unc is not None else np.zeros((0, 0))
    s_total = unc.s_total if unc is not None else 0.0

    for b in case.buses:
        prog.add_var(f"th@{b.id}")
    for k, _ in enumerate(case.lines):
        prog.add_var(f"f@{line_key(case, k)}")

    gens = [g for g in case.generators if not (g.p_max == 0.0 and g.p_min == 0.0)]
    providers = [g for g in gens if g.is_provider]
    for g in gens:
        prog.add_var(f"p@g{g.bus}")
    for g in providers:
        if policy.stochastic:
            for comp in comps:
                prog.add_var(_alpha_name(g.bus, comp), lb=0.0, ub=1.0)
        if policy in (Policy.N2N_SB, Policy.N2N_AB, Policy.SW_AB):
            prog.add_var(f"t@g{g.bus}", lb=0.0)

    gen_at = {g.bus: g for g in gens}
    res_at: dict[int, float] = {}
    for r in case.res_units:
        res_at[r.bus] = res_at.get(r.bus, 0.0) + r.forecast

    # Nodal balance: p_i + w_i - D_i - sum(f out) = 0, rhs = D_i - w_i.
    incident: dict[int, list[tuple[str, float]]] = {b.id: [] for b in case.buses}
    for k, l in enumerate(case.lines):
        key = f"f@{line_key(case, k)}"
        incident[l.from_bus].append((key, -1.0))
        incident[l.to_bus].append((key, 1.0))
    for b in case.buses:
        coeffs: dict[str, float] = {}
        if b.id in gen_at:
            coeffs[f"p@g{b.id}"] = 1.0
        for key, sgn in incident[b.id]:
            coeffs[key] = coeffs.get(key, 0.0) + sgn
        prog.add_eq(f"balance@{b.id}", coeffs, b.demand - res_at.get(b.id, 0.0))

    # DC flow definition and the reference-angle pin.
    for k, l in enumerate(case.lines):
        key = line_key(case, k)
        prog.add_eq(f"flowdef@{key}",
                    {f"f@{key}": 1.0, f"th@{l.from_bus}": -1.0 / l.x,
                     f"th@{l.to_bus}": 1.0 / l.x}, 0.0)
        prog.add_ineq(f"flowmax@{key}", {f"f@{key}": 1.0}, l.f_max)
        prog.add_ineq(f"flowmin@{key}", {f"f@{key}": -1.0}, l.f_max)
    prog.add_eq("refangle", {f"th@{case.reference_bus}": 1.0}, 0.0)

    # Balancing adequacy rows.
    if policy is Policy.SW_SB:
        prog.add_eq("alphasum", {_alpha_name(g.bus, ""): 1.0 for g in providers}, 1.0)
    elif policy is Policy.SW_AB:
        prog.add_eq("alphasum-", {_alpha_name(g.bus, "-"): 1.0 for g in providers}, 1.0)
        prog.add_eq("alphasum+", {_alpha_name(g.bus, "+"): 1.0 for g in providers}, 1.0)
    elif policy is Policy.N2N_SB:
        for u in unc.nodes:
            prog.add_eq(f"alphasum@u{u}",
                        {f"a@g{g.bus},u{u}": 1.0 for g in providers}, 1.0)
    elif policy is Policy.N2N_AB:
        for sign in ("-", "+"):
            for u in unc.nodes:
                prog.add_eq(f"alphasum{sign}@u{u}",
                            {f"a{sign}@g{g.bus},u{u}": 1.0 for g in providers}, 1.0)

    # Objective and chance-constrained capacity rows.
    for g in gens:
        pv = f"p@g{g.bus}"
        prog.add_quad(pv, pv, g.c2)
        prog.add_lin(pv, g.c1)
        prog.add_const(g.c0)
        cap_up: dict[str, float] = {pv: 1.0}
        cap_dn: dict[str, float] = {pv: -1.0}
        if policy.stochastic and g.is_provider:
            z_i = unc.z_for(g.bus)
            a_names = [_alpha_name(g.bus, c) for c in comps]
            if policy is Policy.SW_SB:
                av = a_names[0]
                prog.add_quad(av, av, g.c2 * s_total ** 2)
                cap_up[av] = z_i * s_total
                cap_dn[av] = z_i * s_total
            else:
                tv = f"t@g{g.bus}"
                prog.add_quad(tv, tv, g.c2)
                rows = []
                for r in range(unc.dim):
                    coeffs = {a_names[c]: sqrt_sigma[r, c]
                              for c in range(unc.dim) if abs(sqrt_sigma[r, c]) > 1e-300}
                    rows.append((coeffs, 0.0))
                prog.add_soc(f"soc@g{g.bus}", tv, rows)
                cap_up[tv] = z_i
                cap_dn[tv] = z_i
                if policy.asymmetric:
                    for c, av in enumerate(a_names):
                        mc = float(M[c])
                        if mc == 0.0:
                            continue
                        prog.add_bilinear(pv, av, -2.0 * g.c2 * mc)
                        prog.add_lin(av, -g.c1 * mc)
                        cap_up[av] = cap_up.get(av, 0.0) - mc
                        cap_dn[av] = cap_dn.get(av, 0.0) + mc
                    for c in range(unc.dim):
                        for d in range(c, unc.dim):
                            coeff = g.c2 * M[c] * M[d] * (1.0 if c == d else 2.0)
                            if coeff != 0.0:
                                prog.add_quad(a_names[c], a_names[d], coeff)
        prog.add_ineq(f"capmax@g{g.bus}", cap_up, g.p_max)
        prog.add_ineq(f"capmin@g{g.bus}", cap_dn, -g.p_min)
    return prog


def decode(policy, case: GridCase, unc: UncertaintyModel | None,
           solution: Solution) -> DispatchResult:
    """Extract and re-validate a dispatch from an optimal solution."""
    if not solution.optimal:
        raise ValueError(f"cannot decode non-optimal solution (status {solution.status})")
    policy = Policy.parse(policy)
    comps = alpha_components(policy, unc)
    M = unc.mean if unc is not None else np.zeros(0)
    Sigma = unc.covariance if unc is not None else np.zeros((0, 0))
    sqrt_sigma = unc.sqrt_covariance() if unc is not None else np.zeros((0, 0))
    val = solution.primal

    gens = [g for g in case.generators if not (g.p_max == 0.0 and g.p_min == 0.0)]
    providers = [g for g in gens if g.is_provider]
    p = {g.bus: val[f"p@g{g.bus}"] for g in gens}
    theta = {b.id: val[f"th@{b.id}"] for b in case.buses}
    f = {line_key(case, k): val[f"f@{line_key(case, k)}"]
         for k in range(len(case.lines))}

    A: dict[int, np.ndarray] = {}
    S: dict[int, float] = {}
    ma: dict[int, float] = {}
    for g in providers:
        if policy.stochastic:
            a = np.array([val[_alpha_name(g.bus, c)] for c in comps])
        else:
            a = np.zeros(0)
        A[g.bus] = a
        S[g.bus] = float(np.linalg.norm(sqrt_sigma @ a)) if a.size else 0.0
        ma[g.bus] = float(M @ a) if a.size else 0.0
        if a.size and np.any((a < -1e-6) | (a > 1.0 + 1e-6)):
            raise ValueError(f"participation factors out of [0,1] at bus {g.bus}")
        tv = f"t@g{g.bus}"
        if tv in val:
            # Allow the solver's terminal complementarity slack on top of the
            # structural tolerance: minimizing c2*t^2 against a slack cone
            # leaves t ~ sqrt(gap/c2) at an S ~ 0 corner.  A genuinely loose
            # epigraph would be off at the scale of S itself.
            gap_abs = solution.rel_gap * max(1.0, abs(solution.objective))
            thr = (EPIGRAPH_TOL * max(1.0, S[g.bus]) + 10.0 * gap_abs
                   + 3.0 * math.sqrt(gap_abs / max(g.c2, 1e-12)))
            if abs(val[tv] - S[g.bus]) > thr:
                raise ValueError(f"epigraph/recomputed S mismatch at bus {g.bus}: "
                                 f"{val[tv]} vs {S[g.bus]}")

    # Adequacy and balance checks.
    if policy.stochastic and providers:
        sums = np.sum([A[g.bus] for g in providers], axis=0)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ValueError("adequacy columns do not sum to 1")
    max_d = max((b.demand for b in case.buses), default=1.0)
    res_at: dict[int, float] = {}
    for r in case.res_units:
        res_at[r.bus] = res_at.get(r.bus, 0.0) + r.forecast
    incident: dict[int, float] = {b.id: 0.0 for b in case.buses}
    for k, l in enumerate(case.lines):
        fv = f[line_key(case, k)]
        incident[l.from_bus] += fv
        incident[l.to_bus] -= fv
        if abs(fv) > l.f_max + 1e-6:
            raise ValueError(f"flow limit violated on line {line_key(case, k)}")
    for b in case.buses:
        resid = (p.get(b.id, 0.0) + res_at.get(b.id, 0.0) - b.demand
                 - incident[b.id])
        if abs(resid) > BALANCE_TOL * max(1.0, max_d):
            raise ValueError(f"power balance violated at bus {b.id} ({resid:.2e})")

    cost_by_gen = {}
    for g in gens:
        a = A.get(g.bus, np.zeros(len(comps)))
        if policy.stochastic:
            cost_by_gen[g.bus] = expected_cost(g, p[g.bus], a, M, Sigma)
        else:
            cost_by_gen[g.bus] = g.cost(p[g.bus])
    return DispatchResult(policy=policy, p=p, A=A, f=f, theta=theta, S=S,
                          cost_by_gen=cost_by_gen,
                          expected_cost=sum(cost_by_gen.values()),
                          objective=solution.objective, ma=ma,
                          nodes=list(unc.nodes) if unc is not None else [])


def recourse(policy, dispatch: DispatchResult, omega_stacked: np.ndarray,
             buses: list[int] | None = None) -> np.ndarray:
    """Realized generator outputs p_i(w) = p_i - Omega . A_i, vectorized.

    `omega_stacked` is (n_samples, dim) in the policy's stacking; returns
    (n_samples, n_generators) ordered by `buses` (default: dispatch order).
    """
    if buses is None:
        buses = sorted(dispatch.p)
    om = np.atleast_2d(np.asarray(omega_stacked, dtype=float))
    out = np.empty((om.shape[0], len(buses)))
    for j, b in enumerate(buses):
        a = dispatch.A.get(b)
        base = dispatch.p[b]
        out[:, j] = base - om @ a if a is not None and a.size else base
    return out
