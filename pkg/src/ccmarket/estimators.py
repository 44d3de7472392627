"""Estimator-style front ends so clearings compose with sklearn tooling.

`MarketClearing(policy=..., epsilon=...).fit(case)` solves one market and
exposes the results as fitted attributes; `predict(omega)` evaluates the
cleared recourse policy on nodal forecast-error samples.  Parameters follow
the sklearn get_params/set_params protocol, so grid search over policies or
risk levels works out of the box.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .clearing import clear_market
from .grid import GridCase, validate_case
from .models import recourse
from .policies import Policy
from .security import build_scopf, decode_scopf, enumerate_n1
from .conic import solve as conic_solve
from .uncertainty import assemble, stats_from_case, stack_errors

__all__ = ["MarketClearing", "ScopfClearing", "check_case"]


def check_case(case) -> GridCase:
    """Validate a GridCase input, raising with every violated invariant."""
    if not isinstance(case, GridCase):
        raise TypeError(f"expected a GridCase, got {type(case).__name__}")
    report = validate_case(case)
    if not report.ok:
        raise ValueError("invalid case: " + "; ".join(report.entries))
    return case


class MarketClearing(BaseEstimator):
    """Chance-constrained market clearing under one balancing policy.

    Parameters
    ----------
    policy : str, one of {"det", "sw-sb", "n2n-sb", "sw-ab", "n2n-ab"}
    epsilon : float
        Chance-constraint violation budget per generator.
    tol : float
        Solver relative-gap target.
    sequential : bool
        Solve asymmetric policies with the sequential McCormick loop
        (True, the reference procedure) or the one-shot exact program.
    shrink, gap_tol, max_iter :
        Sequential-tightening controls (gap_tol in percent).

    Attributes (after fit)
    ----------------------
    result_ : MarketResult
    dispatch_, prices_, settlement_ : decoded outputs
    objective_ : float, expected system cost
    """

    def __init__(self, policy="sw-sb", epsilon=0.01, tol=1e-12,
                 sequential=True, shrink=0.5, gap_tol=0.01, max_iter=30):
        self.policy = policy
        self.epsilon = epsilon
        self.tol = tol
        self.sequential = sequential
        self.shrink = shrink
        self.gap_tol = gap_tol
        self.max_iter = max_iter

    def fit(self, case, correlation=None):
        check_case(case)
        self.result_ = clear_market(case, self.policy, epsilon=self.epsilon,
                                    correlation=correlation, tol=self.tol,
                                    sequential=self.sequential, shrink=self.shrink,
                                    gap_tol=self.gap_tol, max_iter=self.max_iter)
        self.dispatch_ = self.result_.dispatch
        self.prices_ = self.result_.prices
        self.settlement_ = self.result_.settlement
        self.objective_ = self.result_.objective
        return self

    def predict(self, omega_nodal) -> np.ndarray:
        """Realized generator outputs for nodal error samples (n x U)."""
        if not hasattr(self, "result_"):
            raise RuntimeError("MarketClearing is not fitted; call fit(case) first")
        stacked = stack_errors(Policy.parse(self.policy), np.asarray(omega_nodal))
        return recourse(self.policy, self.dispatch_, stacked)


class ScopfClearing(BaseEstimator):
    """Security-constrained clearing over an N-1 contingency set.

    `contingencies` is "n1-lines", "n1-gens", "n1-all", or an explicit
    ContingencySet; `mode` selects preventive or corrective recourse.
    """

    def __init__(self, mode="corrective", contingencies="n1-lines",
                 epsilon=0.01, tol=1e-12):
        self.mode = mode
        self.contingencies = contingencies
        self.epsilon = epsilon
        self.tol = tol

    def fit(self, case):
        check_case(case)
        if isinstance(self.contingencies, str):
            classes = {"n1-lines": ("lines",), "n1-gens": ("gens",),
                       "n1-all": ("lines", "gens", "res")}[self.contingencies]
            cont = enumerate_n1(case, classes=classes, mode=self.mode)
        else:
            cont = self.contingencies
        unc = assemble("sw-sb", stats_from_case(case), epsilon=self.epsilon)
        program = build_scopf(case, unc, cont)
        solution = conic_solve(program, tol=self.tol)
        if not solution.optimal:
            raise RuntimeError(f"SC-OPF failed: status {solution.status}")
        self.contingency_set_ = cont
        self.solution_ = solution
        self.result_ = decode_scopf(case, unc, cont, solution)
        self.objective_ = self.result_.objective
        return self
