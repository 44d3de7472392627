"""Primal-dual interior-point method for convex quadratic cone programs.

Solves
    minimize    0.5 x'Px + q'x
    subject to  A x = b
                G x + s = h,   s in K
where K is a product of a nonnegative orthant and second-order cones.

Nesterov-Todd scaling with a Mehrotra predictor-corrector; the symmetric
indefinite KKT system is factorized sparsely (SuperLU) with static
regularization and iterative refinement.  Internally uses the convention
    Px + q + A'y + G'z = 0,
so the shadow price of an equality row (d obj / d b) is -y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = ["ConeDims", "IpmResult", "coneqp"]

STEP_FRACTION = 0.99
REFINEMENT_STEPS = 4


@dataclass(frozen=True)
class ConeDims:
    """Cone layout of the rows of G: `l` linear rows then SOC blocks."""

    l: int
    q: tuple[int, ...] = ()

    @property
    def total(self) -> int:
        return self.l + sum(self.q)

    @property
    def degree(self) -> int:
        return self.l + len(self.q)

    def blocks(self):
        """Yield (start, dim, is_soc) for each cone block."""
        if self.l:
            yield 0, self.l, False
        start = self.l
        for d in self.q:
            yield start, d, True
            start += d


@dataclass
class IpmResult:
    status: str                 # optimal | infeasible | unbounded | max_iter
    x: np.ndarray
    y: np.ndarray               # internal sign: Px + q + A'y + G'z = 0
    z: np.ndarray
    s: np.ndarray
    pcost: float
    dcost: float
    gap: float
    rel_gap: float
    pres: float
    dres: float
    iterations: int
    trace: list = field(default_factory=list)  # per-iteration (pcost, dcost, gap)


def _identity_e(dims: ConeDims) -> np.ndarray:
    e = np.zeros(dims.total)
    e[: dims.l] = 1.0
    start = dims.l
    for d in dims.q:
        e[start] = 1.0
        start += d
    return e


def _max_violation(u: np.ndarray, dims: ConeDims) -> float:
    """Smallest t such that u + t*e is in the cone interior boundary sense."""
    worst = -np.inf
    if dims.l:
        worst = max(worst, float(np.max(-u[: dims.l])) if dims.l else -np.inf)
    start = dims.l
    for d in dims.q:
        blk = u[start:start + d]
        worst = max(worst, float(np.linalg.norm(blk[1:]) - blk[0]))
        start += d
    return worst if worst != -np.inf else 0.0


def _step_to_boundary(u: np.ndarray, du: np.ndarray, dims: ConeDims) -> float:
    """sup{a >= 0 : u + a*du in K} for u strictly interior."""
    alpha = np.inf
    if dims.l:
        ul, dl = u[: dims.l], du[: dims.l]
        neg = dl < 0
        if np.any(neg):
            alpha = min(alpha, float(np.min(-ul[neg] / dl[neg])))
    start = dims.l
    for d in dims.q:
        u0, u1 = u[start], u[start + 1:start + d]
        d0, d1 = du[start], du[start + 1:start + d]
        a = d0 * d0 - float(d1 @ d1)
        b = 2.0 * (u0 * d0 - float(u1 @ d1))
        c = u0 * u0 - float(u1 @ u1)
        # c > 0 in the interior; find the smallest positive root of
        # a t^2 + b t + c = 0 (first exit through the cone boundary).
        root = np.inf
        disc = b * b - 4.0 * a * c
        if abs(a) < 1e-300:
            if b < 0:
                root = -c / b
        elif disc >= 0.0:
            sq = math.sqrt(disc)
            for r in ((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)):
                if r > 0:
                    root = min(root, r)
        if d0 < 0:
            root = min(root, -u0 / d0)
        alpha = min(alpha, root)
        start += d
    return alpha


class _Scaling:
    """Nesterov-Todd scaling point: W with W^{-T} s = W z = lambda."""

    def __init__(self, s: np.ndarray, z: np.ndarray, dims: ConeDims):
        self.dims = dims
        if dims.l:
            ratio = np.maximum(s[: dims.l], 1e-280) / np.maximum(z[: dims.l], 1e-280)
            self.w_lin = np.sqrt(ratio)
        else:
            self.w_lin = np.zeros(0)
        self.lmbda = np.empty(dims.total)
        self.lmbda[: dims.l] = np.sqrt(s[: dims.l] * z[: dims.l])
        self.soc_W: list[np.ndarray] = []
        self.soc_W2: list[np.ndarray] = []
        self.soc_Winv: list[np.ndarray] = []
        start = dims.l
        for d in dims.q:
            sb = s[start:start + d]
            zb = z[start:start + d]
            J = -np.eye(d)
            J[0, 0] = 1.0
            a = math.sqrt(max(sb[0] ** 2 - float(sb[1:] @ sb[1:]), 1e-300))
            bq = math.sqrt(max(zb[0] ** 2 - float(zb[1:] @ zb[1:]), 1e-300))
            st, zt = sb / a, zb / bq
            gamma = math.sqrt((1.0 + float(st @ zt)) / 2.0)
            # Hyperbolic Householder vector: normalize the scaling direction
            # (st + J zt)/(2 gamma), then map through v <- (v + e)/sqrt(2(v0+1)).
            v = (st + J @ zt) / (2.0 * gamma)
            v[0] += 1.0
            v /= math.sqrt(2.0 * v[0])
            beta = math.sqrt(a / bq)
            W = beta * (2.0 * np.outer(v, v) - J)
            Winv = (2.0 * np.outer(J @ v, J @ v) - J) / beta
            self.soc_W.append(W)
            self.soc_W2.append(W @ W)
            self.soc_Winv.append(Winv)
            # Closed form for lambda = W z = W^{-T} s.
            lam = np.empty(d)
            dd = 2.0 * gamma + st[0] + zt[0]
            lam[0] = gamma
            lam[1:] = ((gamma + zt[0]) * st[1:] + (gamma + st[0]) * zt[1:]) / dd
            lam *= math.sqrt(a * bq)
            self.lmbda[start:start + d] = lam
            start += d

    def mul_W(self, u: np.ndarray) -> np.ndarray:
        out = np.empty_like(u)
        out[: self.dims.l] = self.w_lin * u[: self.dims.l]
        start = self.dims.l
        for W, d in zip(self.soc_W, self.dims.q):
            out[start:start + d] = W @ u[start:start + d]
            start += d
        return out

    def mul_Winv_t(self, u: np.ndarray) -> np.ndarray:
        # W is symmetric for both block types, so W^{-T} = W^{-1}.
        out = np.empty_like(u)
        out[: self.dims.l] = u[: self.dims.l] / self.w_lin
        start = self.dims.l
        for Winv, d in zip(self.soc_Winv, self.dims.q):
            out[start:start + d] = Winv @ u[start:start + d]
            start += d
        return out

    mul_Wt = mul_W  # symmetric

    def wtw_matrix(self) -> sp.csc_matrix:
        blocks = []
        if self.dims.l:
            blocks.append(sp.diags(self.w_lin ** 2))
        for W2 in self.soc_W2:
            blocks.append(sp.csc_matrix(W2))
        if not blocks:
            return sp.csc_matrix((0, 0))
        return sp.block_diag(blocks, format="csc")


def _jmul(u: np.ndarray, v: np.ndarray, dims: ConeDims) -> np.ndarray:
    out = np.empty(dims.total)
    out[: dims.l] = u[: dims.l] * v[: dims.l]
    start = dims.l
    for d in dims.q:
        ub, vb = u[start:start + d], v[start:start + d]
        out[start] = float(ub @ vb)
        out[start + 1:start + d] = ub[0] * vb[1:] + vb[0] * ub[1:]
        start += d
    return out


def _jdiv(lmbda: np.ndarray, d_vec: np.ndarray, dims: ConeDims) -> np.ndarray:
    """Solve lambda o x = d for x."""
    out = np.empty(dims.total)
    out[: dims.l] = d_vec[: dims.l] / lmbda[: dims.l]
    start = dims.l
    for d in dims.q:
        lb = lmbda[start:start + d]
        db = d_vec[start:start + d]
        l0, l1 = lb[0], lb[1:]
        det = l0 * l0 - float(l1 @ l1)
        x0 = (l0 * db[0] - float(l1 @ db[1:])) / det
        out[start] = x0
        out[start + 1:start + d] = (db[1:] - x0 * l1) / l0
        start += d
    return out


class _KktSolver:
    """Regularized sparse LU of the 3x3 KKT system with refinement."""

    def __init__(self, P, A, G, reg: float):
        self.P, self.A, self.G = P, A, G
        self.n = P.shape[0]
        self.p = A.shape[0]
        self.m = G.shape[0]
        self.reg = reg
        self._signs = np.concatenate([np.ones(self.n),
                                      -np.ones(self.p + self.m)])

    def factor(self, wtw: sp.csc_matrix) -> None:
        K = sp.bmat([
            [self.P, self.A.T, self.G.T],
            [self.A, None, None],
            [self.G, None, -wtw],
        ], format="csc")
        self._K0 = K
        reg = self.reg
        for attempt in range(5):
            Kr = (K + sp.diags(self._signs * reg)).tocsc()
            try:
                self._lu = spla.splu(Kr)
                self._reg_used = reg
                return
            except RuntimeError:
                reg *= 100.0
        raise RuntimeError("KKT factorization failed")

    def solve(self, rx: np.ndarray, ry: np.ndarray, rz: np.ndarray):
        rhs = np.concatenate([rx, ry, rz])
        rhs_norm = max(1.0, float(np.linalg.norm(rhs)))
        sol = self._lu.solve(rhs)
        best, best_res = sol, np.inf
        for _ in range(REFINEMENT_STEPS):
            resid = rhs - self._K0 @ sol
            rn = float(np.linalg.norm(resid))
            if rn < best_res:
                best, best_res = sol, rn
            if rn <= 1e-12 * rhs_norm:
                break
            sol = sol + self._lu.solve(resid)
        rn = float(np.linalg.norm(rhs - self._K0 @ sol))
        if rn < best_res:
            best, best_res = sol, rn
        sol = best
        n, p = self.n, self.p
        return sol[:n], sol[n:n + p], sol[n + p:]


def coneqp(P, q, G, h, dims: ConeDims, A=None, b=None,
           tol: float = 1e-8, max_iter: int = 200) -> IpmResult:
    """Solve the cone QP; see the module docstring for conventions."""
    n = len(q)
    q = np.asarray(q, dtype=float)
    P = sp.csc_matrix(P, shape=(n, n))
    G = sp.csc_matrix(G, shape=(dims.total, n))
    h = np.asarray(h, dtype=float)
    if A is None:
        A = sp.csc_matrix((0, n))
        b = np.zeros(0)
    else:
        A = sp.csc_matrix(A)
        b = np.asarray(b, dtype=float)
    m = dims.total
    if m == 0:
        # Pure equality-constrained QP: solve the KKT system directly.
        return _solve_eqp(P, q, A, b)

    e = _identity_e(dims)
    scale = max(1.0, abs(P).max() if P.nnz else 0.0,
                abs(G).max() if G.nnz else 0.0,
                abs(A).max() if A.nnz else 0.0)
    kkt = _KktSolver(P, A, G, reg=1e-10 * scale)

    # Initial point: solve with W = I, then shift s and z into the interior.
    kkt.factor(sp.identity(m, format="csc"))
    x, y, z0 = kkt.solve(-q, b, h)
    s = -(G @ x - h)
    z = np.copy(z0)
    ts = _max_violation(-z0, dims)   # -z0 equals the natural slack estimate
    _ = ts
    for vec in (s, z):
        t = _max_violation(vec, dims)
        if t >= -1e-8 * max(1.0, float(np.linalg.norm(vec))):
            _shift(vec, 1.0 + t, dims)

    b_norm = max(1.0, float(np.linalg.norm(b)))
    h_norm = max(1.0, float(np.linalg.norm(h)))
    q_norm = max(1.0, float(np.linalg.norm(q)))

    status = "max_iter"
    trace = []
    best = None
    stall = 0
    best_merit = np.inf
    for it in range(max_iter):
        resx = P @ x + q + A.T @ y + G.T @ z
        resy = A @ x - b
        resz = G @ x + s - h
        gap = float(s @ z)
        pcost = 0.5 * float(x @ (P @ x)) + float(q @ x)
        dcost = pcost + float(y @ resy) + float(z @ resz) - gap
        relgap = gap / max(1.0, abs(pcost))
        pres = max(float(np.linalg.norm(resy)) / b_norm,
                   float(np.linalg.norm(resz)) / h_norm)
        dres = float(np.linalg.norm(resx)) / q_norm
        trace.append((pcost, dcost, gap))
        snapshot = IpmResult("max_iter", x.copy(), y.copy(), z.copy(), s.copy(),
                             pcost, dcost, gap, relgap, pres, dres, it, trace)
        if best is None or max(pres, dres) + relgap < max(best.pres, best.dres) + best.rel_gap:
            best = snapshot

        if pres <= tol and dres <= tol and (relgap <= tol or gap <= tol * 1e-2):
            status = "optimal"
            best = snapshot
            break
        inf_status = _certificates(x, y, z, P, q, A, b, G, h, dims, pcost)
        if inf_status:
            status = inf_status
            best = snapshot
            break
        merit = max(pres, dres, relgap)
        if merit < 0.9 * best_merit:
            best_merit, stall = merit, 0
        else:
            stall += 1
            if stall >= 20:
                break

        W = _Scaling(s, z, dims)
        lmbda = W.lmbda
        kkt.factor(W.wtw_matrix())
        mu = gap / dims.degree

        # Affine (predictor) direction.
        d_tilde = -lmbda
        dx_a, dy_a, dz_a = kkt.solve(-resx, -resy, -(resz + W.mul_Wt(d_tilde)))
        ds_a = W.mul_Wt(d_tilde - W.mul_W(dz_a))
        alpha_a = min(_step_to_boundary(s, ds_a, dims),
                      _step_to_boundary(z, dz_a, dims), 1.0)
        gap_a = float((s + alpha_a * ds_a) @ (z + alpha_a * dz_a))
        sigma = min(1.0, max(0.0, (gap_a / gap))) ** 3

        # Combined (corrector) direction with the Mehrotra cross term.
        gamma_corr = _jmul(W.mul_Winv_t(ds_a), W.mul_W(dz_a), dims)
        d_comb = -_jmul(lmbda, lmbda, dims) - gamma_corr + sigma * mu * e
        d_tilde = _jdiv(lmbda, d_comb, dims)
        dx, dy, dz = kkt.solve(-resx, -resy, -(resz + W.mul_Wt(d_tilde)))
        ds = W.mul_Wt(d_tilde - W.mul_W(dz))

        alpha = min(_step_to_boundary(s, ds, dims),
                    _step_to_boundary(z, dz, dims))
        alpha = min(1.0, STEP_FRACTION * alpha)
        if not np.isfinite(alpha) or alpha <= 1e-13:
            break
        # Safeguard against the known Mehrotra cycling mode: the exact gap
        # along the step is quadratic, gap(t) = gap + b t + c t^2; when the
        # full step would grow it, stop at the quadratic's minimizer.
        b_lin = float(s @ dz) + float(z @ ds)
        c_quad = float(ds @ dz)
        gap_pred = gap + alpha * b_lin + alpha * alpha * c_quad
        if gap_pred > (1.0 - 0.01 * alpha) * gap and c_quad > 0.0:
            t_star = -b_lin / (2.0 * c_quad)
            if 0.0 < t_star < alpha:
                alpha = max(t_star, 1e-3 * alpha)
        x += alpha * dx
        y += alpha * dy
        s += alpha * ds
        z += alpha * dz

    out = best
    out.status = status
    out.iterations = len(trace)
    return out


def _shift(vec: np.ndarray, t: float, dims: ConeDims) -> None:
    vec[: dims.l] += t
    start = dims.l
    for d in dims.q:
        vec[start] += t
        start += d


def _certificates(x, y, z, P, q, A, b, G, h, dims, pcost) -> str | None:
    xn = float(np.linalg.norm(x))
    ray_norm = float(np.linalg.norm(y)) + float(np.linalg.norm(z))
    # Primal infeasibility: diverging (y, z) with z in K*, A'y + G'z ~ 0,
    # and b'y + h'z < 0 form a Farkas certificate.
    if ray_norm > 1e4 * max(1.0, xn):
        obj_ray = (float(b @ y) + float(h @ z)) / ray_norm
        resid = float(np.linalg.norm(A.T @ y + G.T @ z)) / ray_norm
        if obj_ray < -1e-10 and resid <= 1e-4 * (-obj_ray):
            return "infeasible"
    # Dual infeasibility (primal unbounded): x ray with Px ~ 0, Ax ~ 0,
    # Gx in -K, q'x < 0.
    if xn > 1e6:
        ray = x / xn
        qdx = float(q @ ray)
        if qdx < -1e-10:
            ok = (np.linalg.norm(P @ ray) <= 1e-8
                  and (A.shape[0] == 0 or np.linalg.norm(A @ ray) <= 1e-8)
                  and _max_violation(-(G @ ray), dims) <= 1e-8)
            if ok:
                return "unbounded"
    if pcost < -1e100:
        return "unbounded"
    return None


def _solve_eqp(P, q, A, b) -> IpmResult:
    n = P.shape[0]
    p = A.shape[0]
    K = sp.bmat([[P, A.T], [A, None]], format="csc") if p else P.tocsc()
    rhs = np.concatenate([-q, b]) if p else -q
    reg = 1e-12 * max(1.0, abs(K).max())
    signs = np.concatenate([np.ones(n), -np.ones(p)])
    lu = spla.splu((K + sp.diags(signs * reg)).tocsc())
    sol = lu.solve(rhs)
    for _ in range(REFINEMENT_STEPS):
        sol = sol + lu.solve(rhs - K @ sol)
    x, y = sol[:n], sol[n:]
    pcost = 0.5 * float(x @ (P @ x)) + float(q @ x)
    resy = float(np.linalg.norm(A @ x - b)) if p else 0.0
    status = "optimal" if resy <= 1e-7 * max(1.0, float(np.linalg.norm(b))) else "infeasible"
    return IpmResult(status, x, y, np.zeros(0), np.zeros(0), pcost, pcost,
                     0.0, 0.0, resy, 0.0, 1, [(pcost, pcost, 0.0)])
