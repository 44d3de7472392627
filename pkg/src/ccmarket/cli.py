"""Command-line front end: solve | sweep | scopf | validate | prices.

Outputs are schema-versioned JSON (sorted keys, floats at 12 significant
digits) so reruns with identical configuration and seed are byte-identical.
Exit codes: 0 optimal, 2 infeasible, 3 convexification gap tolerance unmet,
1 configuration or runtime error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import sys
from pathlib import Path

from . import __version__
from .clearing import clear_market
from .grid import load_case, scale_res
from .mccormick import trace_csv
from .policies import Policy
from .pricing import check_against_duals
from .security import build_scopf, contingencies_from_spec, decode_scopf, enumerate_n1
from .conic import solve as conic_solve
from .uncertainty import assemble, stats_from_case
from .validation import monte_carlo

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2
EXIT_GAP = 3


def _round12(obj):
    """Normalize floats to 12 significant digits for reproducible output."""
    if isinstance(obj, float):
        return float(f"{obj:.12g}")
    if isinstance(obj, dict):
        return {str(k): _round12(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round12(v) for v in obj]
    return obj


def write_json(path: Path, doc: dict) -> None:
    doc = dict(doc)
    doc["schema_version"] = SCHEMA_VERSION
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_round12(doc), fh, sort_keys=True, indent=1)
        fh.write("\n")


def read_result(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported result schema {doc.get('schema_version')!r}")
    return doc


def _result_doc(result) -> dict:
    d = result.dispatch
    pr = result.prices
    st = result.settlement
    doc = {
        "policy": result.policy.value,
        "objective": result.objective,
        "dispatch": {
            "p": {str(b): v for b, v in d.p.items()},
            "alpha": {str(b): list(map(float, a)) for b, a in d.A.items()},
            "flows": d.f,
            "theta": {str(b): v for b, v in d.theta.items()},
            "S": {str(b): v for b, v in d.S.items()},
            "nodes": d.nodes,
        },
        "prices": {
            "lambda": {str(b): v for b, v in pr.lmbda.items()},
            "chi": pr.chi,
            "beta": {str(u): v for u, v in pr.beta.items()},
            "deltas": {str(b): [du, dd] for b, (du, dd) in pr.deltas.items()},
            "degenerate": pr.degenerate,
        },
        "settlement": {
            "consumer_payment": st.consumer_payment,
            "res_energy_payment": st.res_energy_payment,
            "res_balancing_charge": {str(k): v for k, v in st.res_balancing_charge.items()},
            "gen_energy_revenue": {str(b): v for b, v in st.gen_energy_revenue.items()},
            "gen_reserve_revenue": {str(b): v for b, v in st.gen_reserve_revenue.items()},
            "gen_profit": {str(b): v for b, v in st.gen_profit.items()},
            "congestion_rent": st.congestion_rent,
            "adequacy_gap": st.adequacy_gap,
        },
        "solver": {
            "status": result.solution.status,
            "iterations": result.solution.iterations,
            "rel_gap": result.solution.rel_gap,
        },
    }
    if result.convexification is not None:
        conv = result.convexification
        doc["convexification"] = {
            "status": conv.status,
            "iterations": conv.iterations,
            "lower": conv.lower,
            "upper": conv.upper,
            "gap_percent": conv.gap_percent,
            "trace": [{"iteration": it, "lower": lo, "upper": up, "gap_percent": g}
                      for it, lo, up, g in conv.trace],
        }
    return doc


def cmd_solve(args) -> int:
    case = load_case(args.case)
    policy = Policy.parse(args.policy)
    out = Path(args.out)
    try:
        result = clear_market(case, policy, epsilon=args.epsilon, tol=args.tol,
                              shrink=args.shrink, gap_tol=args.gap_tol,
                              max_iter=args.max_iter)
    except RuntimeError as exc:
        print(f"solve failed: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    write_json(out / "result.json", _result_doc(result))
    if result.convexification is not None:
        (out / "gap_trace.csv").write_text(trace_csv(result.convexification),
                                           encoding="utf-8")
        if result.convexification.status != "converged":
            print(f"gap tolerance unmet: {result.convexification.gap_percent:.3e}%",
                  file=sys.stderr)
            return EXIT_GAP
    return EXIT_OK


def _sweep_cell(case, policy, scale, args):
    scaled = scale_res(case, scale)
    try:
        result = clear_market(scaled, policy, epsilon=args.epsilon, tol=args.tol,
                              shrink=args.shrink, gap_tol=args.gap_tol,
                              max_iter=args.max_iter)
    except Exception as exc:  # noqa: BLE001 - row-level failures recorded
        return {"policy": policy, "scale": scale, "status": f"error: {exc}"}
    st = result.settlement
    conv = result.convexification
    return {"policy": policy, "scale": scale, "status": "optimal",
            "objective": result.objective,
            "lambda_D": st.consumer_payment,
            "lambda_W": st.res_energy_payment,
            "profit_sum": sum(st.gen_profit.values()),
            "gap_percent": conv.gap_percent if conv else 0.0}


SYMMETRIC_BASELINE = {Policy.SW_AB.value: Policy.SW_SB.value,
                      Policy.N2N_AB.value: Policy.N2N_SB.value}


def cmd_sweep(args) -> int:
    case = load_case(args.case)
    scales = [float(s) for s in args.scales.split(",") if s]
    if not scales:
        print("sweep needs a non-empty --scales list", file=sys.stderr)
        return EXIT_ERROR
    policies = [Policy.parse(p).value for p in args.policies.split(",") if p]
    cells = [(p, s) for p in policies for s in scales]
    rows = {}
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        futs = {pool.submit(_sweep_cell, case, p, s, args): (p, s) for p, s in cells}
        for fut in concurrent.futures.as_completed(futs):
            p, s = futs[fut]
            rows[(p, s)] = fut.result()
    # Consumer-payment deltas against the matching symmetric baseline.
    for (p, s), row in rows.items():
        base = SYMMETRIC_BASELINE.get(p)
        row["delta_lambda_D_pct"] = ""
        if base and (base, s) in rows and row["status"] == "optimal" \
                and rows[(base, s)]["status"] == "optimal":
            lam0 = rows[(base, s)]["lambda_D"]
            row["delta_lambda_D_pct"] = 100.0 * (row["lambda_D"] - lam0) / lam0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["policy", "scale", "status", "objective", "lambda_D", "lambda_W",
            "profit_sum", "gap_percent", "delta_lambda_D_pct"]
    lines = [",".join(cols)]
    for p, s in cells:
        row = rows[(p, s)]
        lines.append(",".join(_csv_cell(row.get(c, "")) for c in cols))
    (out / "sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    n_fail = sum(1 for r in rows.values() if r["status"] != "optimal")
    return EXIT_OK if n_fail == 0 else EXIT_INFEASIBLE


def _csv_cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.12g}"
    return str(v)


def cmd_scopf(args) -> int:
    case = load_case(args.case)
    unc = assemble("sw-sb", stats_from_case(case), epsilon=args.epsilon)
    if args.contingencies in ("n1-lines", "n1-gens", "n1-all"):
        classes = {"n1-lines": ("lines",), "n1-gens": ("gens",),
                   "n1-all": ("lines", "gens", "res")}[args.contingencies]
        cont = enumerate_n1(case, classes=classes, mode=args.mode)
    else:
        with open(args.contingencies, "r", encoding="utf-8") as fh:
            cont = contingencies_from_spec(case, json.load(fh), mode=args.mode)
    program = build_scopf(case, unc, cont)
    solution = conic_solve(program, tol=args.tol)
    if not solution.optimal:
        print(f"scopf failed: status {solution.status}", file=sys.stderr)
        return EXIT_INFEASIBLE
    res = decode_scopf(case, unc, cont, solution)
    doc = {
        "mode": res.mode,
        "objective": res.objective,
        "states": res.state_labels,
        "p": {f"{b},k{k}": v for (b, k), v in res.p.items()},
        "alpha": {f"{b},k{k}": v for (b, k), v in res.alpha.items()},
        "flows": {f"{key},k{k}": v for (key, k), v in res.f.items()},
        "reserves": {"up": {str(b): v for b, v in res.r_up.items()},
                     "dw": {str(b): v for b, v in res.r_dw.items()}},
        "lambda": {f"{b},k{k}": v for (b, k), v in res.lmbda.items()},
        "prices": {
            "pi_up": {str(b): v for b, v in res.prices.pi_up.items()},
            "pi_dw": {str(b): v for b, v in res.prices.pi_dw.items()},
            "pi_sc": {str(b): v for b, v in res.prices.pi_sc.items()},
            "pi_p": {str(b): v for b, v in res.prices.pi_p.items()},
            "pi_p_sc": {str(b): v for b, v in res.prices.pi_p_sc.items()},
        },
        "solver": {"status": solution.status, "iterations": solution.iterations,
                   "rel_gap": solution.rel_gap},
    }
    write_json(Path(args.out) / "scopf.json", doc)
    return EXIT_OK


def cmd_validate(args) -> int:
    case = load_case(args.case)
    try:
        result = clear_market(case, args.policy, epsilon=args.epsilon, tol=args.tol,
                              shrink=args.shrink, gap_tol=args.gap_tol,
                              max_iter=args.max_iter)
    except RuntimeError as exc:
        print(f"validate failed: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    report = monte_carlo(result.dispatch, result.unc, case,
                         n=args.samples, seed=args.seed)
    doc = report.to_dict()
    doc["policy"] = Policy.parse(args.policy).value
    doc["satisfied"] = report.satisfied()
    write_json(Path(args.out) / "violations.json", doc)
    return EXIT_OK


def cmd_prices(args) -> int:
    case = load_case(args.case)
    try:
        result = clear_market(case, args.policy, epsilon=args.epsilon, tol=args.tol,
                              shrink=args.shrink, gap_tol=args.gap_tol,
                              max_iter=args.max_iter)
    except RuntimeError as exc:
        print(f"prices failed: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = _result_doc(result)
    dual_report = check_against_duals(result.prices, result.solution)
    doc["dual_check"] = dual_report
    write_json(out / "prices.json", doc)
    lines = ["bus,lambda"]
    for b in sorted(result.prices.lmbda):
        lines.append(f"{b},{result.prices.lmbda[b]:.12g}")
    (out / "lambda.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    lines = ["name,chi,beta"]
    for name in sorted(result.prices.chi):
        u = name.split("@u")[1] if "@u" in name else ""
        beta = result.prices.beta.get(int(u)) if u else ""
        lines.append(f"{name},{result.prices.chi[name]:.12g},"
                     + (f"{beta:.12g}" if beta != "" and beta is not None else ""))
    (out / "chi.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ccmarket",
        description="Chance-constrained electricity market clearing toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, policy=True):
        p.add_argument("--case", required=True, help="case JSON file")
        if policy:
            p.add_argument("--policy", default="sw-sb",
                           choices=[pol.value for pol in Policy])
        p.add_argument("--epsilon", type=float, default=0.01)
        p.add_argument("--tol", type=float, default=1e-12)
        p.add_argument("--shrink", type=float, default=0.5)
        p.add_argument("--gap-tol", dest="gap_tol", type=float, default=0.01)
        p.add_argument("--max-iter", dest="max_iter", type=int, default=30)
        p.add_argument("--out", default=".", help="output directory")

    p = sub.add_parser("solve", help="clear one market and write result.json")
    common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("sweep", help="scale x policy sweep, write sweep.csv")
    common(p, policy=False)
    p.add_argument("--policies", default="sw-sb,sw-ab",
                   help="comma-separated policy list")
    p.add_argument("--scales", default="0.5,1,2,4",
                   help="comma-separated RES capacity scales")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("scopf", help="security-constrained clearing")
    common(p, policy=False)
    p.add_argument("--contingencies", default="n1-lines",
                   help="n1-lines | n1-gens | n1-all | contingency JSON file")
    p.add_argument("--mode", choices=["preventive", "corrective"],
                   default="corrective")
    p.set_defaults(func=cmd_scopf)

    p = sub.add_parser("validate", help="Monte-Carlo chance-constraint check")
    common(p)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, required=True,
                   help="explicit RNG seed (no hidden entropy)")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("prices", help="price extraction and dual cross-check")
    common(p)
    p.set_defaults(func=cmd_prices)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
