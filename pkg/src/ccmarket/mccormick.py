"""McCormick relaxation and sequential bound tightening.

The asymmetric policies carry objective products p_i * alpha between the
schedule and the participation entries with nonzero expected-error
coefficients.  `envelope` replaces each annotated product with a fresh
variable constrained by the four-row McCormick envelope over the current
box; `solve_sequential` shrinks the boxes around the incumbent until the
relative gap between the relaxed objective (lower bound) and the exact
objective of the incumbent (upper bound) closes.

Feasibility note: the relaxation only alters the objective, so every
incumbent is feasible for the original problem; boxes are clipped so the
physical region [P_min, P_max] x [0, 1] is never violated.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .conic import ConicProgram, Solution, solve as conic_solve
from .grid import GridCase
from .models import DispatchResult, build_opf, decode
from .policies import Policy
from .uncertainty import UncertaintyModel

__all__ = ["McCormickBounds", "ConvexifiedResult", "initial_bounds", "envelope",
           "true_objective", "solve_sequential", "trace_csv"]

DEFAULT_SHRINK = 0.5
DEFAULT_GAP_TOL = 0.01   # percent
DEFAULT_MAX_ITER = 30


@dataclass
class McCormickBounds:
    """Per-variable boxes for the product terms; always contain the incumbent."""

    lb: dict[str, float]
    ub: dict[str, float]
    shrink: float
    iteration: int = 0
    physical_lb: dict[str, float] = field(default_factory=dict)
    physical_ub: dict[str, float] = field(default_factory=dict)

    def contains(self, point: dict[str, float], tol: float = 1e-9) -> bool:
        return all(self.lb[v] - tol <= point[v] <= self.ub[v] + tol for v in self.lb)

    def tightened(self, center: dict[str, float]) -> "McCormickBounds":
        """Shrink half-widths around `center`, nested in the current box."""
        lb, ub = {}, {}
        for v in self.lb:
            hw = self.shrink * (self.ub[v] - self.lb[v]) / 2.0
            c = min(max(center[v], self.lb[v]), self.ub[v])
            lb[v] = max(self.lb[v], c - hw)
            ub[v] = min(self.ub[v], c + hw)
            if lb[v] > ub[v]:  # degenerate box collapses onto the center
                lb[v] = ub[v] = c
        return McCormickBounds(lb=lb, ub=ub, shrink=self.shrink,
                               iteration=self.iteration + 1,
                               physical_lb=self.physical_lb,
                               physical_ub=self.physical_ub)


@dataclass
class ConvexifiedResult:
    incumbent: DispatchResult
    lower: float            # relaxed optimum at the final box
    upper: float            # exact objective of the returned incumbent
    gap_percent: float
    trace: list[tuple[int, float, float, float]]
    status: str             # converged | max_iter | solver_failure
    iterations: int
    solution: Solution      # final relaxed solve (duals for pricing)
    bounds: McCormickBounds


def initial_bounds(program: ConicProgram, case: GridCase,
                   shrink: float = DEFAULT_SHRINK) -> McCormickBounds:
    """Physical boxes [P_min, P_max] x [0, 1] for every annotated product."""
    pmax = {f"p@g{g.bus}": g.p_max for g in case.generators}
    pmin = {f"p@g{g.bus}": g.p_min for g in case.generators}
    lb, ub = {}, {}
    for p_name, a_name, _ in program.bilinear:
        lb[p_name] = pmin[p_name]
        ub[p_name] = pmax[p_name]
        lb[a_name] = 0.0
        ub[a_name] = 1.0
    return McCormickBounds(lb=lb, ub=ub, shrink=shrink,
                           physical_lb=dict(lb), physical_ub=dict(ub))


def envelope(program: ConicProgram, bounds: McCormickBounds) -> ConicProgram:
    """Replace annotated products with envelope variables over `bounds`."""
    for v in bounds.lb:
        if bounds.lb[v] > bounds.ub[v] + 1e-12:
            raise ValueError(f"invalid box for {v}: [{bounds.lb[v]}, {bounds.ub[v]}]")
    relaxed = program.copy()
    for k, (p_name, a_name, coeff) in enumerate(program.bilinear):
        relaxed.drop_quad(p_name, a_name, coeff)
        psi = f"psi#{k}@{p_name}*{a_name}"
        relaxed.add_var(psi)
        relaxed.add_lin(psi, coeff)
        pl, pu = bounds.lb[p_name], bounds.ub[p_name]
        al, au = bounds.lb[a_name], bounds.ub[a_name]
        # psi >= pl*a + al*p - pl*al ; psi >= pu*a + au*p - pu*au  (under)
        relaxed.add_ineq(f"mc1#{k}", {psi: -1.0, a_name: pl, p_name: al}, pl * al)
        relaxed.add_ineq(f"mc2#{k}", {psi: -1.0, a_name: pu, p_name: au}, pu * au)
        # psi <= pu*a + al*p - pu*al ; psi <= pl*a + au*p - pl*au  (over)
        relaxed.add_ineq(f"mc3#{k}", {psi: 1.0, a_name: -pu, p_name: -al}, -pu * al)
        relaxed.add_ineq(f"mc4#{k}", {psi: 1.0, a_name: -pl, p_name: -au}, -pl * au)
    # Impose the (possibly tightened) boxes as variable bounds.
    for v in bounds.lb:
        idx = relaxed.var_index[v]
        relaxed.lb[idx] = max(relaxed.lb[idx], bounds.lb[v])
        relaxed.ub[idx] = min(relaxed.ub[idx], bounds.ub[v])
    relaxed.bilinear = []
    return relaxed


def true_objective(policy, case: GridCase, unc: UncertaintyModel | None,
                   dispatch: DispatchResult) -> float:
    """Exact expected-cost objective at a dispatch (no relaxation)."""
    _ = Policy.parse(policy)
    return dispatch.expected_cost


def solve_sequential(policy, case: GridCase, unc: UncertaintyModel,
                     shrink: float = DEFAULT_SHRINK,
                     gap_tol: float = DEFAULT_GAP_TOL,
                     max_iter: int = DEFAULT_MAX_ITER,
                     tol: float = 1e-12) -> ConvexifiedResult:
    """Relax, solve, tighten around the incumbent, repeat until the gap closes.

    Returns the best incumbent by exact objective.  `gap_tol` is in percent,
    matching the stopping rule 100*(upper/lower - 1) <= gap_tol.
    """
    policy = Policy.parse(policy)
    if not policy.asymmetric:
        raise ValueError("sequential convexification applies to asymmetric policies")
    if not (0.0 < shrink < 1.0):
        raise ValueError("shrink factor must lie in (0, 1)")
    if not (gap_tol > 0.0):
        raise ValueError("gap_tol must be positive")

    base = build_opf(policy, case, unc)
    bounds = initial_bounds(base, case, shrink)
    trace: list[tuple[int, float, float, float]] = []
    best: ConvexifiedResult | None = None
    status = "max_iter"
    for it in range(1, max_iter + 1):
        relaxed = envelope(base, bounds)
        sol = conic_solve(relaxed, tol=tol)
        if not sol.optimal:
            status = "solver_failure"
            break
        dispatch = decode(policy, case, unc, sol)
        lower = sol.objective
        upper = true_objective(policy, case, unc, dispatch)
        gap = 100.0 * (upper / lower - 1.0) if lower != 0 else float("inf")
        trace.append((it, lower, upper, gap))
        if best is None or upper < best.upper:
            best = ConvexifiedResult(incumbent=dispatch, lower=lower, upper=upper,
                                     gap_percent=gap, trace=trace, status="max_iter",
                                     iterations=it, solution=sol, bounds=bounds)
        if gap <= gap_tol:
            status = "converged"
            best = ConvexifiedResult(incumbent=dispatch, lower=lower, upper=upper,
                                     gap_percent=gap, trace=trace, status=status,
                                     iterations=it, solution=sol, bounds=bounds)
            break
        center = {v: dispatch_value(dispatch, v) for v in bounds.lb}
        bounds = bounds.tightened(center)
    if best is None:
        raise RuntimeError("sequential convexification failed at the first solve")
    best.status = status
    best.trace = trace
    return best


def dispatch_value(dispatch: DispatchResult, var: str) -> float:
    """Value of a schedule or participation variable in a DispatchResult."""
    if var.startswith("p@g"):
        return dispatch.p[int(var[3:])]
    # alpha names: a@g<bus>[,u<bus>] or a-@g... / a+@g...
    head, _, tail = var.partition("@g")
    sign = head[1:]  # "", "-", or "+"
    bus_part, _, u_part = tail.partition(",")
    a = dispatch.A[int(bus_part)]
    if not u_part:
        return float(a[0] if sign in ("", "-") else a[1])
    k = dispatch.nodes.index(int(u_part[1:]))
    if sign == "":
        return float(a[k])
    return float(a[k] if sign == "-" else a[a.size // 2 + k])


def trace_csv(result: ConvexifiedResult) -> str:
    """Tidy CSV of the tightening trace for plotting."""
    out = io.StringIO()
    out.write("iteration,lower,upper,gap_percent\n")
    for it, lo, up, gap in result.trace:
        out.write(f"{it},{lo:.12g},{up:.12g},{gap:.12g}\n")
    return out.getvalue()
