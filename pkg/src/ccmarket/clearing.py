"""High-level market clearing: build, solve, decode, price, settle.

Symmetric (and deterministic) policies solve their convex program directly;
asymmetric policies run the sequential McCormick loop by default, with the
exact convex solve available for cross-checks (`sequential=False`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import mccormick
from .conic import Solution, solve as conic_solve
from .grid import GridCase
from .models import DispatchResult, build_opf, decode
from .policies import Policy
from .pricing import PriceSet, Settlement, price_solution, settle
from .uncertainty import UncertaintyModel, assemble, stats_from_case

__all__ = ["MarketResult", "clear_market", "uncertainty_for"]

MARKET_TOL = 1e-12


@dataclass
class MarketResult:
    policy: Policy
    case: GridCase
    unc: UncertaintyModel | None
    solution: Solution
    dispatch: DispatchResult
    prices: PriceSet
    settlement: Settlement
    convexification: mccormick.ConvexifiedResult | None = None

    @property
    def objective(self) -> float:
        return self.dispatch.expected_cost

    @property
    def gap_trace(self):
        return self.convexification.trace if self.convexification else []


def uncertainty_for(case: GridCase, policy, epsilon: float = 0.01,
                    correlation=None) -> UncertaintyModel | None:
    policy = Policy.parse(policy)
    if policy is Policy.DETERMINISTIC:
        return None
    return assemble(policy, stats_from_case(case), correlation=correlation,
                    epsilon=epsilon)


def clear_market(case: GridCase, policy, epsilon: float = 0.01,
                 correlation=None, tol: float = MARKET_TOL,
                 sequential: bool = True, shrink: float = mccormick.DEFAULT_SHRINK,
                 gap_tol: float = mccormick.DEFAULT_GAP_TOL,
                 max_iter: int = mccormick.DEFAULT_MAX_ITER,
                 unc: UncertaintyModel | None = None) -> MarketResult:
    """Clear one market and derive prices and settlement.

    Raises RuntimeError with the solver status when the clearing is
    infeasible or otherwise fails; asymmetric runs that stop above gap_tol
    raise unless the incumbent converged.
    """
    policy = Policy.parse(policy)
    if unc is None:
        unc = uncertainty_for(case, policy, epsilon=epsilon, correlation=correlation)
    conv = None
    if policy.asymmetric and sequential:
        conv = mccormick.solve_sequential(policy, case, unc, shrink=shrink,
                                          gap_tol=gap_tol, max_iter=max_iter, tol=tol)
        if conv.status == "solver_failure":
            raise RuntimeError("market clearing failed: solver failure during "
                               "sequential convexification")
        solution = conv.solution
        dispatch = conv.incumbent
    else:
        program = build_opf(policy, case, unc)
        solution = conic_solve(program, tol=tol)
        if not solution.optimal:
            raise RuntimeError(f"market clearing failed: status {solution.status}")
        dispatch = decode(policy, case, unc, solution)
    prices = price_solution(policy, case, unc, dispatch, solution)
    settlement = settle(policy, case, prices, dispatch)
    return MarketResult(policy=policy, case=case, unc=unc, solution=solution,
                        dispatch=dispatch, prices=prices, settlement=settlement,
                        convexification=conv)
