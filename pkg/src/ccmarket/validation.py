"""Independent numerical verification of clearings.

Three orthogonal instruments: Monte-Carlo violation counting against the
chance-constraint targets, KKT residual audits of a solved program, and
finite-difference shadow prices re-deriving duals from objective
perturbations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conic import ConicProgram, Solution, shadow_price_fd, solve as conic_solve
from .models import DispatchResult, recourse
from .policies import Policy
from .uncertainty import UncertaintyModel, sample_nodal, stack_errors

__all__ = ["ViolationReport", "monte_carlo", "kkt_audit", "price_fd_oracle"]

DEFAULT_SAMPLES = 100_000


@dataclass
class ViolationReport:
    samples: int
    seed: int
    epsilon: dict[int, float]            # target per generator bus
    rate_above: dict[int, float]         # empirical P[p_i(w) > P_max]
    rate_below: dict[int, float]         # empirical P[p_i(w) < P_min]

    def worst(self) -> float:
        rates = list(self.rate_above.values()) + list(self.rate_below.values())
        return max(rates, default=0.0)

    def satisfied(self) -> bool:
        return all(self.rate_above[b] <= self.epsilon[b]
                   and self.rate_below[b] <= self.epsilon[b]
                   for b in self.epsilon)

    def to_dict(self) -> dict:
        return {"samples": self.samples, "seed": self.seed,
                "generators": [{"bus": b, "epsilon": self.epsilon[b],
                                "rate_above": self.rate_above[b],
                                "rate_below": self.rate_below[b]}
                               for b in sorted(self.epsilon)]}


def monte_carlo(dispatch: DispatchResult, unc: UncertaintyModel, case,
                n: int = DEFAULT_SAMPLES, seed: int = 0,
                shards: int = 4) -> ViolationReport:
    """Empirical capacity-violation rates of the recourse policy.

    Draws Gaussian nodal errors, applies the policy recourse to every sample,
    and counts exceedances of the capacity limits.  Sharded with per-shard
    derived seeds; the counting reduction is order-independent.
    """
    if n < 10_000:
        raise ValueError("need at least 1e4 samples for a meaningful rate")
    policy = Policy.parse(dispatch.policy)
    buses = sorted(dispatch.p)
    gens = {g.bus: g for g in case.generators}
    above = np.zeros(len(buses), dtype=np.int64)
    below = np.zeros(len(buses), dtype=np.int64)
    per = [n // shards + (1 if i < n % shards else 0) for i in range(shards)]
    done = 0
    for i, n_i in enumerate(per):
        if n_i == 0:
            continue
        omega = sample_nodal(unc, n_i, seed=(seed * 7919 + i))
        stacked = stack_errors(policy, omega)
        p_real = recourse(policy, dispatch, stacked, buses)
        for j, b in enumerate(buses):
            above[j] += int(np.sum(p_real[:, j] > gens[b].p_max + 1e-9))
            below[j] += int(np.sum(p_real[:, j] < gens[b].p_min - 1e-9))
        done += n_i
    eps = {b: unc.epsilon_for(b) for b in buses}
    return ViolationReport(samples=done, seed=seed, epsilon=eps,
                           rate_above={b: above[j] / done for j, b in enumerate(buses)},
                           rate_below={b: below[j] / done for j, b in enumerate(buses)})


@dataclass
class KktReport:
    stationarity: float          # max scaled residual over variables
    eq_feasibility: float
    ineq_feasibility: float      # max positive violation
    cone_feasibility: float
    complementarity: float       # max |dual * slack| over inequality rows
    by_constraint: dict[str, float] = field(default_factory=dict)

    def max_residual(self) -> float:
        return max(self.stationarity, self.eq_feasibility,
                   self.ineq_feasibility, self.cone_feasibility,
                   self.complementarity)


def kkt_audit(program: ConicProgram, solution: Solution,
              y_override: np.ndarray | None = None) -> KktReport:
    """First-order residuals of a solution against its compiled program.

    `y_override` substitutes the equality duals (internal sign) to support
    negative-control tests with corrupted dual vectors.
    """
    comp = solution.compiled if solution.compiled is not None else program.compile()
    res = solution.raw
    x = res.x
    y = res.y if y_override is None else np.asarray(y_override, dtype=float)
    z = res.z
    scale = max(1.0, float(np.abs(comp.q).max()) if comp.q.size else 1.0)
    stat = comp.P @ x + comp.q + comp.A.T @ y + comp.G.T @ z
    stationarity = float(np.max(np.abs(stat))) / scale
    eq = float(np.max(np.abs(comp.A @ x - comp.b))) if comp.b.size else 0.0
    eq /= max(1.0, float(np.abs(comp.b).max())) if comp.b.size else 1.0
    slack = comp.h - comp.G @ x
    lin = comp.dims.l
    ineq = float(np.max(-slack[:lin])) if lin else 0.0
    ineq = max(ineq, 0.0) / max(1.0, float(np.abs(comp.h).max()) if comp.h.size else 1.0)
    cone_res = 0.0
    start = lin
    for d in comp.dims.q:
        blk = slack[start:start + d]
        cone_res = max(cone_res, float(np.linalg.norm(blk[1:]) - blk[0]))
        start += d
    compl = 0.0
    by = {}
    for k, row in enumerate(program.ineq_rows):
        c = abs(float(z[k]) * float(slack[k])) if z.size else 0.0
        by[row.name] = c
        compl = max(compl, c)
    compl /= max(1.0, abs(res.pcost))
    return KktReport(stationarity=stationarity, eq_feasibility=eq,
                     ineq_feasibility=ineq, cone_feasibility=max(cone_res, 0.0),
                     complementarity=compl, by_constraint=by)


@dataclass
class FdComparison:
    name: str
    dual: float
    fd: float
    rel_err: float
    stable: bool
    ok: bool


def _binding_set(solution: Solution, tol: float = 1e-6) -> frozenset:
    comp = solution.compiled
    slack = comp.h - comp.G @ solution.raw.x
    names = [row.name for row in comp.program.ineq_rows]
    h_scale = max(1.0, float(np.abs(comp.h).max()) if comp.h.size else 1.0)
    return frozenset(n for k, n in enumerate(names)
                     if slack[k] <= tol * h_scale)


def price_fd_oracle(program: ConicProgram, solution: Solution,
                    targets: list[str], h: float = 1e-4,
                    tol: float = 1e-3, solve_tol: float = 1e-10) -> list[FdComparison]:
    """Compare named duals against central finite differences of re-solves.

    A target whose active set flips between the +h and -h solves is reported
    as unstable and not asserted (duals are subgradients at degeneracy).
    """
    out = []
    base_binding = _binding_set(solution)
    for name in targets:
        dual = solution.duals[name]
        base = program.get_rhs(name)
        objs = []
        bindings = []
        failed = False
        for sgn in (+1.0, -1.0):
            pert = program.copy()
            pert.set_rhs(name, base + sgn * h)
            sol = conic_solve(pert, tol=solve_tol)
            if not sol.optimal:
                failed = True
                break
            objs.append(sol.objective)
            bindings.append(_binding_set(sol))
        if failed:
            out.append(FdComparison(name, dual, float("nan"), float("inf"),
                                    stable=False, ok=False))
            continue
        fd = (objs[0] - objs[1]) / (2.0 * h)
        stable = bindings[0] == bindings[1] == base_binding
        kind, _ = program.registry[name]
        if kind == "ineq":
            # Tightening an inequality rhs lowers cost: dual = -d obj/d rhs.
            fd = -fd
        err = abs(dual - fd) / max(1.0, abs(dual))
        out.append(FdComparison(name, dual, fd, err, stable=stable,
                                ok=(not stable) or err <= tol))
    return out
