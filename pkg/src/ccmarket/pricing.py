"""Closed-form energy/balancing prices, settlements, and RES cost accounting.

Every price has two routes: the closed-form expression evaluated from the
dispatch and capacity duals, and the named solver dual itself;
`check_against_duals` compares them.  The nodal balancing price ratio
beta_u = chi_u / chi depends only on the covariance matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conic import ConicProgram, Solution, solve as conic_solve
from .grid import GridCase
from .models import DispatchResult, alpha_components, expected_cost
from .policies import Policy
from .uncertainty import UncertaintyModel

__all__ = ["PriceSet", "Settlement", "ResCostReport", "closed_form_prices",
           "price_solution", "check_against_duals", "beta", "res_balancing_cost",
           "res_marginal_cost", "settle", "best_response"]

S_GUARD = 1e-9  # MW; below this the z/S ratio is degenerate


@dataclass
class PriceSet:
    policy: Policy
    lmbda: dict[int, float]                 # $/MWh by bus (market prices)
    lmbda_closed: dict[int, float]          # closed form, generator buses only
    chi: dict[str, float]                   # keyed like the adequacy rows
    beta: dict[int, float]
    deltas: dict[int, tuple[float, float]]  # (delta_up, delta_dn) by gen bus
    degenerate: list[int] = field(default_factory=list)

    def chi_total(self) -> float:
        return sum(self.chi.values())


@dataclass
class Settlement:
    consumer_payment: float                    # lambda D
    res_energy_payment: float                  # lambda W
    res_balancing_charge: dict                 # C_u^alpha by RES bus (or "system")
    gen_energy_revenue: dict[int, float]
    gen_reserve_revenue: dict[int, float]
    gen_profit: dict[int, float]               # lambda p + reserve revenue - C_i
    congestion_rent: float
    adequacy_gap: float                        # conservation residual, ~0 when optimal


@dataclass
class ResCostReport:
    pi_p: dict[int, float]          # energy price paid to the RES
    marginal_cost: dict[int, float]  # c_u
    total_cost: dict[int, float]     # C_u^w = c_u w_u
    revenue: dict[int, float]        # R_u = (lambda_u - c_u) w_u


def _provider_data(case: GridCase):
    return [g for g in case.generators if g.is_provider]


def closed_form_prices(policy, case: GridCase, unc: UncertaintyModel | None,
                       dispatch: DispatchResult,
                       deltas: dict[int, tuple[float, float]],
                       balance_duals: dict[int, float] | None = None,
                       soc_duals: dict[str, np.ndarray] | None = None) -> PriceSet:
    """Evaluate the closed-form price expressions for one policy.

    `deltas` maps each generator bus to its (capmax, capmin) duals.  Buses
    without a generator take their LMP from `balance_duals` when given (no
    closed form exists there).  When S_i ~ 0 with active capacity duals the
    z/S ratio is undefined; those generators are flagged and their product
    term is recovered from the SOC dual vector instead.
    """
    policy = Policy.parse(policy)
    providers = _provider_data(case)
    n_g = len(providers)
    degenerate: list[int] = []

    lmbda_closed: dict[int, float] = {}
    for g in case.generators:
        if g.bus not in dispatch.p:
            continue
        dup, ddn = deltas.get(g.bus, (0.0, 0.0))
        ma = dispatch.ma.get(g.bus, 0.0)
        lmbda_closed[g.bus] = (2.0 * g.c2 * (dispatch.p[g.bus] - ma)
                               + g.c1 + dup - ddn)

    lmbda: dict[int, float] = dict(balance_duals or {})
    lmbda.update(lmbda_closed)

    chi: dict[str, float] = {}
    beta_map: dict[int, float] = {}
    if policy.stochastic and unc is not None and n_g:
        comps = alpha_components(policy, unc)
        Sigma = unc.covariance
        sqrt_sigma = unc.sqrt_covariance()

        def product_terms(g) -> np.ndarray:
            """(Sigma_row . A_i)(2 c2 + (z/S)(d_up + d_dn)) per component."""
            a = dispatch.A[g.bus]
            dup, ddn = deltas.get(g.bus, (0.0, 0.0))
            z_i = unc.z_for(g.bus)
            s_i = dispatch.S[g.bus]
            rows = Sigma @ a
            if s_i >= S_GUARD:
                return rows * (2.0 * g.c2 + z_i / s_i * (dup + ddn))
            if dup + ddn <= S_GUARD:
                return rows * (2.0 * g.c2)
            degenerate.append(g.bus)
            if soc_duals is not None and f"soc@g{g.bus}" in soc_duals:
                zc = soc_duals[f"soc@g{g.bus}"]
                return rows * (2.0 * g.c2) * 0.0 - sqrt_sigma.T @ zc[1:]
            return rows * (2.0 * g.c2)

        if policy is Policy.SW_SB:
            s = unc.s_total
            total = 0.0
            for g in providers:
                dup, ddn = deltas.get(g.bus, (0.0, 0.0))
                z_i = unc.z_for(g.bus)
                alpha_i = float(dispatch.A[g.bus][0])
                total += 2.0 * g.c2 * s * s * alpha_i + z_i * s * (dup + ddn)
            chi["alphasum"] = total / n_g
        elif policy is Policy.N2N_SB:
            terms = np.zeros(len(comps))
            for g in providers:
                terms += product_terms(g)
            for k, u in enumerate(unc.nodes):
                chi[f"alphasum@u{u}"] = float(terms[k]) / n_g
        else:
            mu = np.array([st.mu_trunc for st in unc.stats])
            nu = unc.nu
            terms = np.zeros(len(comps))
            lam_sum = 0.0
            for g in providers:
                terms += product_terms(g)
                lam_sum += lmbda_closed[g.bus]
            if policy is Policy.SW_AB:
                chi["alphasum-"] = float(nu * lam_sum + terms[0]) / n_g
                chi["alphasum+"] = float(-nu * lam_sum + terms[1]) / n_g
            else:
                n_u = len(unc.nodes)
                for k, u in enumerate(unc.nodes):
                    chi[f"alphasum-@u{u}"] = float(mu[k] * lam_sum + terms[k]) / n_g
                    chi[f"alphasum+@u{u}"] = float(-mu[k] * lam_sum + terms[n_u + k]) / n_g

        if unc.nodal_covariance.size:
            beta_map = dict(zip(unc.nodes, beta(unc.nodal_covariance)))

    return PriceSet(policy=policy, lmbda=lmbda, lmbda_closed=lmbda_closed,
                    chi=chi, beta=beta_map, deltas=dict(deltas),
                    degenerate=degenerate)


def price_solution(policy, case: GridCase, unc: UncertaintyModel | None,
                   dispatch: DispatchResult, solution: Solution) -> PriceSet:
    """Convenience wrapper extracting the duals a PriceSet needs."""
    deltas = {}
    for g in case.generators:
        up = solution.duals.get(f"capmax@g{g.bus}")
        dn = solution.duals.get(f"capmin@g{g.bus}")
        if up is not None:
            deltas[g.bus] = (up, dn or 0.0)
    balance = {b.id: solution.duals[f"balance@{b.id}"] for b in case.buses}
    return closed_form_prices(policy, case, unc, dispatch, deltas,
                              balance_duals=balance, soc_duals=solution.soc_duals)


def check_against_duals(price_set: PriceSet, solution: Solution,
                        tol: float = 1e-5) -> list[dict]:
    """Compare each closed-form price against its named solver dual.

    Returns one record per price with the relative error; `ok` is False
    where |closed - dual| / max(1, |dual|) exceeds tol.
    """
    report = []
    for bus, lam in sorted(price_set.lmbda_closed.items()):
        dual = solution.duals.get(f"balance@{bus}")
        if dual is None:
            continue
        err = abs(lam - dual) / max(1.0, abs(dual))
        report.append({"name": f"balance@{bus}", "closed": lam, "dual": dual,
                       "rel_err": err, "ok": err <= tol})
    for name, val in sorted(price_set.chi.items()):
        dual = solution.duals.get(name)
        if dual is None:
            continue
        err = abs(val - dual) / max(1.0, abs(dual))
        report.append({"name": name, "closed": val, "dual": dual,
                       "rel_err": err, "ok": err <= tol})
    return report


def beta(Sigma) -> np.ndarray:
    """Contribution shares beta_u = sum_v sigma_uv / sum_vw sigma_vw."""
    Sigma = np.asarray(Sigma, dtype=float)
    total = float(Sigma.sum())
    if total == 0.0:
        raise ZeroDivisionError("total covariance is zero; beta undefined")
    return Sigma.sum(axis=1) / total


def res_balancing_cost(chi_nodal: dict[int, float],
                       A: dict[int, np.ndarray],
                       nodes: list[int]) -> dict[int, float]:
    """Balancing charge C_u^alpha = chi_u * sum_i alpha_iu (= chi_u at adequacy)."""
    out = {}
    for k, u in enumerate(nodes):
        alpha_sum = sum(float(a[k]) for a in A.values()) if A else 0.0
        out[u] = chi_nodal[u] * alpha_sum
    return out


def res_marginal_cost(case: GridCase, unc: UncertaintyModel,
                      dispatch: DispatchResult, deltas: dict[int, tuple[float, float]],
                      lmbda: dict[int, float]) -> ResCostReport:
    """Marginal-cost route to RES operating costs (node-to-node symmetric).

    Requires sigma_u = kappa_u * w_u data; raises when kappa is absent for a
    RES with nonzero uncertainty.
    """
    if Policy.parse(unc.policy) is not Policy.N2N_SB:
        raise ValueError("marginal RES costs are defined for the n2n-sb policy")
    providers = _provider_data(case)
    nodes = unc.nodes
    sig = np.array([st.sigma for st in unc.stats])
    zeta = unc.correlation
    forecasts = {r.bus: r.forecast for r in case.res_units}

    pi_p, c_u, C_w, revenue = {}, {}, {}, {}
    for k, u in enumerate(nodes):
        st = unc.stats[k]
        if st.kappa is None:
            if st.sigma == 0.0:
                kappa = 0.0
            else:
                raise ValueError(f"kappa undefined for RES at bus {u} "
                                 "(zero forecast with nonzero sigma)")
        else:
            kappa = st.kappa
        total = 0.0
        for g in providers:
            a = dispatch.A[g.bus]
            s_i = dispatch.S[g.bus]
            dup, ddn = deltas.get(g.bus, (0.0, 0.0))
            z_i = unc.z_for(g.bus)
            inner = float(a[k]) * kappa * float(zeta[k, :] @ (a * sig))
            if s_i >= S_GUARD:
                total += inner / s_i * (2.0 * g.c2 * s_i + z_i * (dup + ddn))
            else:
                total += inner * 2.0 * g.c2  # a ~ 0 here; keep the finite part
        lam_u = lmbda[u]
        pi_p[u] = lam_u
        c_u[u] = total
        C_w[u] = total * forecasts.get(u, 0.0)
        revenue[u] = (lam_u - total) * forecasts.get(u, 0.0)
    return ResCostReport(pi_p=pi_p, marginal_cost=c_u, total_cost=C_w,
                         revenue=revenue)


def settle(policy, case: GridCase, prices: PriceSet,
           dispatch: DispatchResult) -> Settlement:
    """Payments, profits, and the conservation residual for one clearing.

    The exact identity checked by `adequacy_gap` is
        lambda D = lambda W + sum_i lambda_i p_i + congestion rent,
    with the rent computed as sum_l f_l (lambda_to - lambda_from); balancing
    reserve transfers net out between RES charges and generator revenue.
    """
    policy = Policy.parse(policy)
    lam = prices.lmbda
    consumer = sum(lam[b.id] * b.demand for b in case.buses)
    res_pay = sum(lam[r.bus] * r.forecast for r in case.res_units)

    gen_energy = {bus: lam[bus] * p for bus, p in dispatch.p.items()}
    gen_reserve: dict[int, float] = {}
    for g in _provider_data(case):
        a = dispatch.A.get(g.bus)
        if a is None or not a.size:
            gen_reserve[g.bus] = 0.0
            continue
        if policy is Policy.SW_SB:
            rev = prices.chi["alphasum"] * float(a[0])
        elif policy is Policy.SW_AB:
            rev = prices.chi["alphasum-"] * float(a[0]) + prices.chi["alphasum+"] * float(a[1])
        elif policy is Policy.N2N_SB:
            rev = sum(prices.chi[f"alphasum@u{u}"] * float(a[k])
                      for k, u in enumerate(sorted_nodes(prices)))
        else:
            nodes = sorted_nodes(prices)
            n_u = len(nodes)
            rev = sum(prices.chi[f"alphasum-@u{u}"] * float(a[k])
                      + prices.chi[f"alphasum+@u{u}"] * float(a[n_u + k])
                      for k, u in enumerate(nodes))
        gen_reserve[g.bus] = rev
    gen_profit = {bus: gen_energy[bus] + gen_reserve.get(bus, 0.0)
                  - dispatch.cost_by_gen[bus] for bus in dispatch.p}

    # RES balancing charges mirror the generators' reserve revenue.
    charges: dict = {}
    if policy is Policy.N2N_SB:
        for u in sorted_nodes(prices):
            charges[u] = prices.chi[f"alphasum@u{u}"]
    elif policy is Policy.N2N_AB:
        for u in sorted_nodes(prices):
            charges[u] = prices.chi[f"alphasum-@u{u}"] + prices.chi[f"alphasum+@u{u}"]
    elif policy.stochastic:
        charges["system"] = prices.chi_total()

    line_flow_terms = 0.0
    for key, f in dispatch.f.items():
        a_bus, b_bus = key.split("#")[0].split("-")
        line_flow_terms += f * (lam[int(b_bus)] - lam[int(a_bus)])
    gap = consumer - res_pay - sum(gen_energy.values()) - line_flow_terms
    return Settlement(consumer_payment=consumer, res_energy_payment=res_pay,
                      res_balancing_charge=charges, gen_energy_revenue=gen_energy,
                      gen_reserve_revenue=gen_reserve, gen_profit=gen_profit,
                      congestion_rent=line_flow_terms, adequacy_gap=gap)


def sorted_nodes(prices: PriceSet) -> list[int]:
    nodes = set()
    for name in prices.chi:
        if "@u" in name:
            nodes.add(int(name.split("@u")[1]))
    return sorted(nodes)


def best_response(gen, prices: PriceSet, unc: UncertaintyModel | None,
                  policy=None, tol: float = 1e-9) -> tuple[float, np.ndarray, float]:
    """Solve the single-generator profit-maximization at fixed prices.

    Maximizes lambda_i p + sum(chi . alpha) - C_i(p, A) subject to the
    generator's own chance-constrained capacity rows; returns
    (p, A, profit).  An unbounded status signals an invalid price vector.
    """
    policy = Policy.parse(policy if policy is not None else prices.policy)
    lam = prices.lmbda[gen.bus]
    prog = ConicProgram()
    prog.add_var("p")
    prog.add_quad("p", "p", gen.c2)
    prog.add_lin("p", gen.c1 - lam)
    prog.add_const(gen.c0)
    cap_up = {"p": 1.0}
    cap_dn = {"p": -1.0}
    a_names: list[str] = []
    if policy.stochastic and unc is not None:
        comps = alpha_components(policy, unc)
        M = unc.mean
        z_i = unc.z_for(gen.bus)
        chi_by_comp = _chi_vector(policy, prices, unc)
        a_names = [f"a{c}" if c else "a" for c in comps]
        for name, chi_c in zip(a_names, chi_by_comp):
            prog.add_var(name, lb=0.0, ub=1.0)
            prog.add_lin(name, -chi_c)
        if policy is Policy.SW_SB:
            s = unc.s_total
            prog.add_quad("a", "a", gen.c2 * s * s)
            cap_up["a"] = z_i * s
            cap_dn["a"] = z_i * s
        else:
            prog.add_var("t", lb=0.0)
            prog.add_quad("t", "t", gen.c2)
            sqrt_sigma = unc.sqrt_covariance()
            rows = []
            for r in range(unc.dim):
                coeffs = {a_names[c]: sqrt_sigma[r, c] for c in range(unc.dim)
                          if abs(sqrt_sigma[r, c]) > 1e-300}
                rows.append((coeffs, 0.0))
            prog.add_soc("soc", "t", rows)
            cap_up["t"] = z_i
            cap_dn["t"] = z_i
            if policy.asymmetric:
                for c, name in enumerate(a_names):
                    mc = float(M[c])
                    if mc == 0.0:
                        continue
                    prog.add_quad("p", name, -2.0 * gen.c2 * mc)
                    prog.add_lin(name, -gen.c1 * mc)
                    cap_up[name] = cap_up.get(name, 0.0) - mc
                    cap_dn[name] = cap_dn.get(name, 0.0) + mc
                for c in range(unc.dim):
                    for d2 in range(c, unc.dim):
                        coeff = gen.c2 * M[c] * M[d2] * (1.0 if c == d2 else 2.0)
                        if coeff != 0.0:
                            prog.add_quad(a_names[c], a_names[d2], coeff)
    prog.add_ineq("capmax", cap_up, gen.p_max)
    prog.add_ineq("capmin", cap_dn, -gen.p_min)
    sol = conic_solve(prog, tol=tol)
    if sol.status == "unbounded":
        raise RuntimeError("generator best response is unbounded: invalid prices")
    if not sol.optimal:
        raise RuntimeError(f"best response solve failed with status {sol.status}")
    p = sol.primal["p"]
    A = np.array([sol.primal[n] for n in a_names]) if a_names else np.zeros(0)
    return p, A, -sol.objective


def _chi_vector(policy: Policy, prices: PriceSet, unc: UncertaintyModel) -> np.ndarray:
    if policy is Policy.SW_SB:
        return np.array([prices.chi["alphasum"]])
    if policy is Policy.SW_AB:
        return np.array([prices.chi["alphasum-"], prices.chi["alphasum+"]])
    if policy is Policy.N2N_SB:
        return np.array([prices.chi[f"alphasum@u{u}"] for u in unc.nodes])
    return np.array([prices.chi[f"alphasum-@u{u}"] for u in unc.nodes]
                    + [prices.chi[f"alphasum+@u{u}"] for u in unc.nodes])
