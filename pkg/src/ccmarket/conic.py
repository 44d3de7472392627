"""Convex program container with a named-constraint registry.

A `ConicProgram` holds a convex quadratic objective, sparse linear
equality/inequality rows, and second-order cone constraints of the form
t >= ||W x + d||.  Every row is registered under a semantic name (e.g.
"balance@7", "alphasum-@u3", "capmax@g2") so duals can be extracted by name.

Dual sign convention (shadow prices): the dual of an equality row "a'x = b"
equals d(objective)/d(b); inequality duals are >= 0 with d(objective)/d(rhs)
= -dual.  This makes the dual of a nodal balance row the LMP that prices
demand.

The embedded interior-point solver lives in `ipm`; an alternative solver may
be plugged in through the `Solver` protocol as long as it returns duals under
the same convention.
"""

from __future__ import annotations

import copy
import io
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import scipy.sparse as sp

from .ipm import ConeDims, coneqp

__all__ = ["ConicProgram", "Solution", "Solver", "EmbeddedSolver",
           "solve", "shadow_price_fd", "dump_program"]

DEFAULT_TOL = 1e-8
MAX_ITER = 200


@dataclass
class _LinearRow:
    name: str
    coeffs: dict[int, float]
    rhs: float


@dataclass
class _SocRow:
    name: str
    t_var: int
    rows: list[tuple[dict[int, float], float]]  # each: (coeffs, constant)


class ConicProgram:
    """Mutable builder for one market-clearing (or generic conic QP) instance."""

    def __init__(self):
        self.var_names: list[str] = []
        self.var_index: dict[str, int] = {}
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.quad: dict[tuple[int, int], float] = {}
        self.lin: dict[int, float] = {}
        self.const: float = 0.0
        self.eq_rows: list[_LinearRow] = []
        self.ineq_rows: list[_LinearRow] = []
        self.soc_rows: list[_SocRow] = []
        self.registry: dict[str, tuple[str, int]] = {}
        # Objective products eligible for McCormick relaxation, as
        # (var_a, var_b, coeff) meaning coeff * x_a * x_b appears in the
        # objective (also present in `quad`; the relaxation removes it there).
        self.bilinear: list[tuple[str, str, float]] = []

    # -- variables ---------------------------------------------------------
    def add_var(self, name: str, lb: float = -np.inf, ub: float = np.inf) -> int:
        if name in self.var_index:
            raise ValueError(f"variable {name!r} already declared")
        idx = len(self.var_names)
        self.var_names.append(name)
        self.var_index[name] = idx
        self.lb.append(lb)
        self.ub.append(ub)
        return idx

    def _vid(self, name: str) -> int:
        try:
            return self.var_index[name]
        except KeyError:
            raise KeyError(f"unknown variable {name!r}") from None

    # -- objective ---------------------------------------------------------
    def add_quad(self, a: str, b: str, coeff: float) -> None:
        """Add coeff * x_a * x_b to the objective."""
        i, j = self._vid(a), self._vid(b)
        key = (i, j) if i <= j else (j, i)
        self.quad[key] = self.quad.get(key, 0.0) + coeff

    def add_lin(self, a: str, coeff: float) -> None:
        i = self._vid(a)
        self.lin[i] = self.lin.get(i, 0.0) + coeff

    def add_const(self, c: float) -> None:
        self.const += c

    def add_bilinear(self, a: str, b: str, coeff: float) -> None:
        """Register an objective product as relaxable and add it to `quad`."""
        self.add_quad(a, b, coeff)
        self.bilinear.append((a, b, coeff))

    def drop_quad(self, a: str, b: str, coeff: float) -> None:
        i, j = self._vid(a), self._vid(b)
        key = (i, j) if i <= j else (j, i)
        self.quad[key] = self.quad.get(key, 0.0) - coeff
        if abs(self.quad[key]) < 1e-300:
            del self.quad[key]

    # -- constraints -------------------------------------------------------
    def _register(self, name: str, kind: str, idx: int) -> None:
        if name in self.registry:
            raise ValueError(f"constraint name {name!r} already registered")
        self.registry[name] = (kind, idx)

    def add_eq(self, name: str, coeffs: dict[str, float], rhs: float) -> None:
        row = _LinearRow(name, {self._vid(v): c for v, c in coeffs.items()}, rhs)
        self._register(name, "eq", len(self.eq_rows))
        self.eq_rows.append(row)

    def add_ineq(self, name: str, coeffs: dict[str, float], rhs: float) -> None:
        """Add a row  sum coeffs[v]*x_v <= rhs."""
        row = _LinearRow(name, {self._vid(v): c for v, c in coeffs.items()}, rhs)
        self._register(name, "ineq", len(self.ineq_rows))
        self.ineq_rows.append(row)

    def add_soc(self, name: str, t_var: str,
                rows: list[tuple[dict[str, float], float]]) -> None:
        """Add  x_t >= || rows(x) ||  with rows given as (coeffs, constant)."""
        compiled = [({self._vid(v): c for v, c in coeffs.items()}, const)
                    for coeffs, const in rows]
        self._register(name, "soc", len(self.soc_rows))
        self.soc_rows.append(_SocRow(name, self._vid(t_var), compiled))

    def set_rhs(self, name: str, rhs: float) -> None:
        kind, idx = self.registry[name]
        if kind == "eq":
            self.eq_rows[idx].rhs = rhs
        elif kind == "ineq":
            self.ineq_rows[idx].rhs = rhs
        else:
            raise ValueError("cannot set the rhs of a SOC constraint")

    def get_rhs(self, name: str) -> float:
        kind, idx = self.registry[name]
        if kind == "eq":
            return self.eq_rows[idx].rhs
        if kind == "ineq":
            return self.ineq_rows[idx].rhs
        raise ValueError("SOC constraints have no scalar rhs")

    def copy(self) -> "ConicProgram":
        return copy.deepcopy(self)

    @property
    def n_vars(self) -> int:
        return len(self.var_names)

    # -- compilation -------------------------------------------------------
    def compile(self) -> "_Compiled":
        n = self.n_vars
        P = sp.dok_matrix((n, n))
        for (i, j), c in self.quad.items():
            if i == j:
                P[i, i] += 2.0 * c
            else:
                P[i, j] += c
                P[j, i] += c
        q = np.zeros(n)
        for i, c in self.lin.items():
            q[i] = c

        def rows_to_csr(rows: list[_LinearRow], ncols: int):
            data, ri, ci, rhs = [], [], [], []
            for k, row in enumerate(rows):
                for j, c in row.coeffs.items():
                    ri.append(k)
                    ci.append(j)
                    data.append(c)
                rhs.append(row.rhs)
            mat = sp.csr_matrix((data, (ri, ci)), shape=(len(rows), ncols))
            return mat, np.array(rhs, dtype=float)

        A, b = rows_to_csr(self.eq_rows, n)
        G_named, h_named = rows_to_csr(self.ineq_rows, n)

        # Finite variable bounds become unnamed linear cone rows.
        bound_rows, bound_rhs, bound_meta = [], [], []
        for i in range(n):
            if np.isfinite(self.ub[i]):
                bound_rows.append((i, 1.0))
                bound_rhs.append(self.ub[i])
                bound_meta.append(("ub", i))
            if np.isfinite(self.lb[i]):
                bound_rows.append((i, -1.0))
                bound_rhs.append(-self.lb[i])
                bound_meta.append(("lb", i))
        if bound_rows:
            data = [c for _, c in bound_rows]
            ri = list(range(len(bound_rows)))
            ci = [i for i, _ in bound_rows]
            G_bounds = sp.csr_matrix((data, (ri, ci)), shape=(len(bound_rows), n))
        else:
            G_bounds = sp.csr_matrix((0, n))

        soc_G, soc_h, soc_dims, soc_names = [], [], [], []
        for soc in self.soc_rows:
            dim = 1 + len(soc.rows)
            Gs = sp.dok_matrix((dim, n))
            hs = np.zeros(dim)
            Gs[0, soc.t_var] = -1.0  # s0 = t
            for r, (coeffs, const) in enumerate(soc.rows, start=1):
                for j, c in coeffs.items():
                    Gs[r, j] = -c     # s_r = coeffs', so G row is -coeffs
                hs[r] = const
            soc_G.append(Gs.tocsr())
            soc_h.append(hs)
            soc_dims.append(dim)
            soc_names.append(soc.name)

        G = sp.vstack([G_named, G_bounds] + soc_G, format="csc") if (
            G_named.shape[0] or G_bounds.shape[0] or soc_G) else sp.csc_matrix((0, n))
        h = np.concatenate([h_named, np.array(bound_rhs, dtype=float)] + soc_h) if G.shape[0] else np.zeros(0)
        dims = ConeDims(l=G_named.shape[0] + G_bounds.shape[0], q=tuple(soc_dims))
        return _Compiled(program=self, P=P.tocsc(), q=q, r=self.const,
                         A=A.tocsc(), b=b, G=G, h=h, dims=dims,
                         n_named_ineq=G_named.shape[0], bound_meta=bound_meta,
                         soc_names=soc_names)


@dataclass
class _Compiled:
    program: ConicProgram
    P: sp.csc_matrix
    q: np.ndarray
    r: float
    A: sp.csc_matrix
    b: np.ndarray
    G: sp.csc_matrix
    h: np.ndarray
    dims: ConeDims
    n_named_ineq: int
    bound_meta: list
    soc_names: list[str]


@dataclass
class Solution:
    status: str
    primal: dict[str, float]
    duals: dict[str, float]          # named eq and ineq rows
    soc_duals: dict[str, np.ndarray]
    objective: float
    rel_gap: float
    iterations: int
    compiled: _Compiled | None = None
    raw: object = None               # IpmResult
    bound_duals: dict[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"

    def value(self, var: str) -> float:
        return self.primal[var]

    def dual(self, name: str) -> float:
        return self.duals[name]


class Solver(Protocol):
    """Pluggable solver contract: must honor the shadow-price convention."""

    def solve(self, program: ConicProgram, tol: float) -> Solution: ...


class EmbeddedSolver:
    """Default solver backed by the native interior-point method."""

    def __init__(self, max_iter: int = MAX_ITER):
        self.max_iter = max_iter

    def solve(self, program: ConicProgram, tol: float = DEFAULT_TOL) -> Solution:
        comp = program.compile()
        res = coneqp(comp.P, comp.q, comp.G, comp.h, comp.dims,
                     comp.A, comp.b, tol=tol, max_iter=self.max_iter)
        primal = {name: float(res.x[i]) for i, name in enumerate(program.var_names)}
        duals: dict[str, float] = {}
        # Equality duals flipped to the shadow-price convention.
        for k, row in enumerate(program.eq_rows):
            duals[row.name] = -float(res.y[k])
        for k, row in enumerate(program.ineq_rows):
            duals[row.name] = float(res.z[k]) if res.z.size else 0.0
        bound_duals: dict[str, tuple[float, float]] = {}
        off = comp.n_named_ineq
        lbd = {i: 0.0 for i in range(program.n_vars)}
        ubd = {i: 0.0 for i in range(program.n_vars)}
        for k, (kind, i) in enumerate(comp.bound_meta):
            val = float(res.z[off + k]) if res.z.size else 0.0
            (ubd if kind == "ub" else lbd)[i] = val
        for i, name in enumerate(program.var_names):
            if lbd[i] or ubd[i]:
                bound_duals[name] = (lbd[i], ubd[i])
        soc_duals: dict[str, np.ndarray] = {}
        start = comp.dims.l
        for name, d in zip(comp.soc_names, comp.dims.q):
            soc_duals[name] = np.array(res.z[start:start + d]) if res.z.size else np.zeros(d)
            start += d
        return Solution(status=res.status, primal=primal, duals=duals,
                        soc_duals=soc_duals, objective=res.pcost + comp.r,
                        rel_gap=res.rel_gap, iterations=res.iterations,
                        compiled=comp, raw=res, bound_duals=bound_duals)


_DEFAULT_SOLVER = EmbeddedSolver()


def solve(program: ConicProgram, tol: float = DEFAULT_TOL,
          solver: Solver | None = None) -> Solution:
    """Solve a program to primal-dual optimality."""
    if not (tol > 0):
        raise ValueError("tol must be positive")
    return (solver or _DEFAULT_SOLVER).solve(program, tol=tol)


def shadow_price_fd(program: ConicProgram, constraint_name: str,
                    h: float = 1e-4, tol: float = DEFAULT_TOL,
                    solver: Solver | None = None) -> float:
    """Central finite difference of the optimal objective in a row's rhs."""
    if not (h > 0):
        raise ValueError("perturbation h must be positive")
    objs = []
    base = program.get_rhs(constraint_name)
    for sgn in (+1.0, -1.0):
        pert = program.copy()
        pert.set_rhs(constraint_name, base + sgn * h)
        sol = solve(pert, tol=tol, solver=solver)
        if not sol.optimal:
            raise RuntimeError(f"perturbed solve ({constraint_name} rhs {sgn:+}h) "
                               f"ended with status {sol.status}")
        objs.append(sol.objective)
    return (objs[0] - objs[1]) / (2.0 * h)


def dump_program(program: ConicProgram) -> str:
    """Sparse-triplet text dump (sections OBJ/EQ/INEQ/SOC) for cross-checks."""
    out = io.StringIO()
    out.write(f"VARS {program.n_vars}\n")
    for i, name in enumerate(program.var_names):
        out.write(f"{i} {name} {program.lb[i]:.17g} {program.ub[i]:.17g}\n")
    out.write("OBJ\n")
    out.write(f"const {program.const:.17g}\n")
    for i, c in sorted(program.lin.items()):
        out.write(f"lin {i} {c:.17g}\n")
    for (i, j), c in sorted(program.quad.items()):
        out.write(f"quad {i} {j} {c:.17g}\n")
    out.write("EQ\n")
    for row in program.eq_rows:
        terms = " ".join(f"{i}:{c:.17g}" for i, c in sorted(row.coeffs.items()))
        out.write(f"{row.name} {row.rhs:.17g} {terms}\n")
    out.write("INEQ\n")
    for row in program.ineq_rows:
        terms = " ".join(f"{i}:{c:.17g}" for i, c in sorted(row.coeffs.items()))
        out.write(f"{row.name} {row.rhs:.17g} {terms}\n")
    out.write("SOC\n")
    for soc in program.soc_rows:
        out.write(f"{soc.name} t={soc.t_var} rows={len(soc.rows)}\n")
        for coeffs, const in soc.rows:
            terms = " ".join(f"{i}:{c:.17g}" for i, c in sorted(coeffs.items()))
            out.write(f"  {const:.17g} {terms}\n")
    return out.getvalue()
