"""Stochastic data layer for the market models.

Per-node forecast-error statistics are split into truncated negative and
positive parts; `assemble` builds the policy-specific stacked mean vector M
and covariance matrix Sigma that the clearing programs consume.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .policies import Policy

__all__ = [
    "NodalErrorStats",
    "ForecastSeries",
    "UncertaintyModel",
    "split_truncated",
    "estimate_stats",
    "stats_from_case",
    "assemble",
    "chebyshev_z",
    "sample_errors",
    "read_forecast_csv",
    "read_correlation_csv",
]

log = logging.getLogger(__name__)

# Truncated-half parameters of a zero-mean normal: the retained half has
# mean sigma*sqrt(2/pi) and standard deviation sigma*sqrt((2*pi-4)/(2*pi)).
_MU_FACTOR = math.sqrt(2.0 / math.pi)
_SIGMA_FACTOR = math.sqrt((2.0 * math.pi - 4.0) / (2.0 * math.pi))

_PSD_RTOL = 1e-10


def split_truncated(sigma: float) -> tuple[float, float]:
    """Split a symmetric error of std `sigma` into truncated halves.

    Returns (mu_pm, sigma_pm): the common magnitude of the halves' means
    (E[w+] = -E[w-] = mu_pm) and their standard deviation.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    return sigma * _MU_FACTOR, sigma * _SIGMA_FACTOR


@dataclass(frozen=True)
class NodalErrorStats:
    node: int              # RES bus id
    sigma: float           # MW
    mu_trunc: float        # MW, E[w+] = -E[w-]
    sigma_minus: float     # MW
    sigma_plus: float      # MW
    kappa: float | None = None  # sigma / forecast; None when undefined

    @staticmethod
    def from_sigma(node: int, sigma: float, kappa: float | None = None) -> "NodalErrorStats":
        mu, s_pm = split_truncated(sigma)
        return NodalErrorStats(node=node, sigma=sigma, mu_trunc=mu,
                               sigma_minus=s_pm, sigma_plus=s_pm, kappa=kappa)


@dataclass(frozen=True)
class ForecastSeries:
    """Aligned forecast/actual samples for one RES node."""

    node: int
    forecast: np.ndarray
    actual: np.ndarray


def estimate_stats(series: ForecastSeries) -> NodalErrorStats:
    """Estimate nodal error statistics from a forecast/actual series.

    Sample standard deviation uses n-1 normalization.  kappa is reported as
    None (absent) when the mean forecast is zero.
    """
    f = np.asarray(series.forecast, dtype=float)
    a = np.asarray(series.actual, dtype=float)
    if f.shape != a.shape:
        raise ValueError("forecast and actual series have mismatched lengths")
    if f.size < 2:
        raise ValueError("need at least 2 samples to estimate error statistics")
    sigma = float(np.std(a - f, ddof=1))
    mean_forecast = float(np.mean(f))
    kappa = sigma / mean_forecast if mean_forecast != 0.0 else None
    return NodalErrorStats.from_sigma(series.node, sigma, kappa)


def stats_from_case(case) -> list[NodalErrorStats]:
    """Build per-RES stats directly from a case's (forecast, sigma) pairs."""
    out = []
    for r in case.res_units:
        kappa = r.sigma / r.forecast if r.forecast > 0 else None
        out.append(NodalErrorStats.from_sigma(r.bus, r.sigma, kappa))
    return out


def chebyshev_z(epsilon: float) -> float:
    """Chebyshev safety factor z = sqrt((1 - eps) / eps) for tail mass eps."""
    if not (0.0 < epsilon <= 0.5):
        raise ValueError(f"epsilon must lie in (0, 0.5], got {epsilon}")
    return math.sqrt((1.0 - epsilon) / epsilon)


@dataclass(frozen=True)
class UncertaintyModel:
    """Policy-specific first/second moments of the stacked error vector.

    Stacking per policy:
      n2n-ab  dim 2U, order [w_1^-, ..., w_U^-, w_1^+, ..., w_U^+]
      sw-ab   dim 2,  [Omega^-, Omega^+]
      n2n-sb  dim U,  nodal symmetric errors
      sw-sb   dim 1,  aggregate Omega
      det     dim 0
    """

    policy: Policy
    stats: tuple[NodalErrorStats, ...]
    correlation: np.ndarray        # U x U, zeta_uv
    mean: np.ndarray               # M, length = dim(policy)
    covariance: np.ndarray         # Sigma, dim x dim
    nodal_covariance: np.ndarray   # U x U symmetric-error covariance
    epsilon: float = 0.01
    epsilon_by_bus: dict = field(default_factory=dict)

    @property
    def nodes(self) -> list[int]:
        return [s.node for s in self.stats]

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    @property
    def s_total(self) -> float:
        """s = sqrt(e Sigma e^T) over the nodal covariance."""
        return math.sqrt(max(float(self.nodal_covariance.sum()), 0.0))

    @property
    def nu(self) -> float:
        return sum(s.mu_trunc for s in self.stats)

    def epsilon_for(self, bus: int) -> float:
        return self.epsilon_by_bus.get(bus, self.epsilon)

    def z_for(self, bus: int) -> float:
        return chebyshev_z(self.epsilon_for(bus))

    def sqrt_covariance(self) -> np.ndarray:
        """Symmetric PSD square root of the stacked covariance."""
        if self.dim == 0:
            return np.zeros((0, 0))
        w, v = np.linalg.eigh(self.covariance)
        w = np.clip(w, 0.0, None)
        return (v * np.sqrt(w)) @ v.T


def _check_correlation(corr: np.ndarray, n: int) -> np.ndarray:
    corr = np.asarray(corr, dtype=float)
    if corr.shape != (n, n):
        raise ValueError(f"correlation matrix must be {n}x{n}, got {corr.shape}")
    corr = 0.5 * (corr + corr.T)
    if not np.allclose(np.diag(corr), 1.0, atol=1e-9):
        raise ValueError("correlation matrix diagonal must be 1")
    if np.any(np.abs(corr) > 1.0 + 1e-9):
        raise ValueError("correlation entries must lie in [-1, 1]")
    _check_psd(corr, "correlation matrix")
    return corr


def _check_psd(mat: np.ndarray, what: str) -> None:
    if mat.size == 0:
        return
    w = np.linalg.eigvalsh(mat)
    floor = -_PSD_RTOL * max(float(np.trace(mat)), 1e-300)
    if w.min() < floor:
        raise ValueError(f"{what} is not positive semidefinite "
                         f"(min eigenvalue {w.min():.3e})")


def assemble(policy, stats, correlation=None, epsilon: float = 0.01,
             epsilon_by_bus: dict | None = None) -> UncertaintyModel:
    """Build the stacked (M, Sigma) for a policy from nodal statistics.

    Cross-covariance between truncated halves of the same node is zero
    (complementary events); across nodes it follows the symmetric
    correlation applied to the truncated sigmas.
    """
    policy = Policy.parse(policy)
    stats = tuple(stats)
    n = len(stats)
    if n == 0 and policy.stochastic:
        raise ValueError("stats must be non-empty for stochastic policies")
    if correlation is None:
        corr = np.eye(n)
    else:
        corr = _check_correlation(correlation, n)

    sig = np.array([s.sigma for s in stats])
    nodal_cov = corr * np.outer(sig, sig)
    nodal_cov = 0.5 * (nodal_cov + nodal_cov.T)

    sm = np.array([s.sigma_minus for s in stats])
    sp = np.array([s.sigma_plus for s in stats])
    mu = np.array([s.mu_trunc for s in stats])
    if np.any(sm**2 + sp**2 > sig**2 + 1e-12):
        log.debug("truncated split exceeds nodal variance: "
                  "sigma_-^2 + sigma_+^2 > sigma^2 for some node")

    if policy is Policy.DETERMINISTIC:
        mean = np.zeros(0)
        cov = np.zeros((0, 0))
    elif policy is Policy.SW_SB:
        mean = np.zeros(1)
        cov = np.array([[nodal_cov.sum()]])
    elif policy is Policy.N2N_SB:
        mean = np.zeros(n)
        cov = nodal_cov
    else:
        # Asymmetric block structure over [w^-; w^+].
        block_mm = corr * np.outer(sm, sm)
        block_pp = corr * np.outer(sp, sp)
        block_mp = corr * np.outer(sm, sp)
        np.fill_diagonal(block_mp, 0.0)  # cov(w_u^-, w_u^+) = 0
        cov2 = np.block([[block_mm, block_mp], [block_mp.T, block_pp]])
        cov2 = 0.5 * (cov2 + cov2.T)
        mean2 = np.concatenate([-mu, mu])
        if policy is Policy.N2N_AB:
            mean, cov = mean2, cov2
        else:  # SW_AB: aggregate the two halves
            e = np.zeros((2, 2 * n))
            e[0, :n] = 1.0
            e[1, n:] = 1.0
            mean = e @ mean2
            cov = e @ cov2 @ e.T
    _check_psd(cov, "stacked covariance")
    return UncertaintyModel(policy=policy, stats=stats, correlation=corr,
                            mean=mean, covariance=cov, nodal_covariance=nodal_cov,
                            epsilon=epsilon, epsilon_by_bus=dict(epsilon_by_bus or {}))


def sample_nodal(model: UncertaintyModel, n: int, seed: int) -> np.ndarray:
    """Draw n samples of the signed nodal error vector (n x U)."""
    if n < 1:
        raise ValueError("need n >= 1 samples")
    rng = np.random.default_rng(seed)
    k = len(model.stats)
    if k == 0:
        return np.zeros((n, 0))
    # Cholesky-free sampling through the symmetric PSD square root so that
    # zero-sigma nodes are handled without special cases.
    w, v = np.linalg.eigh(model.nodal_covariance)
    root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    return rng.standard_normal((n, k)) @ root.T


def stack_errors(policy, omega_nodal: np.ndarray) -> np.ndarray:
    """Map nodal error draws to the policy's stacked vector Omega."""
    policy = Policy.parse(policy)
    om = np.atleast_2d(np.asarray(omega_nodal, dtype=float))
    if policy is Policy.DETERMINISTIC:
        return np.zeros((om.shape[0], 0))
    if policy is Policy.N2N_SB:
        return om
    if policy is Policy.SW_SB:
        return om.sum(axis=1, keepdims=True)
    neg = np.minimum(om, 0.0)
    pos = np.maximum(om, 0.0)
    if policy is Policy.N2N_AB:
        return np.hstack([neg, pos])
    return np.hstack([neg.sum(axis=1, keepdims=True), pos.sum(axis=1, keepdims=True)])


def sample_errors(model: UncertaintyModel, n: int, seed: int) -> np.ndarray:
    """Draw n stacked error vectors for the model's policy.

    Symmetric policies draw multivariate normals; asymmetric policies draw
    the symmetric nodal error and split it into sign parts, so every sample
    satisfies w^- <= 0 <= w^+ and w^- * w^+ = 0 per node.
    """
    return stack_errors(model.policy, sample_nodal(model, n, seed))


def read_forecast_csv(path) -> list[ForecastSeries]:
    """Read `node,timestamp,forecast,actual` rows into per-node series."""
    rows: dict[int, list[tuple[str, float, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"node", "timestamp", "forecast", "actual"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"forecast CSV must have columns {sorted(required)}")
        for rec in reader:
            rows.setdefault(int(rec["node"]), []).append(
                (rec["timestamp"], float(rec["forecast"]), float(rec["actual"])))
    out = []
    for node in sorted(rows):
        entries = sorted(rows[node])
        out.append(ForecastSeries(node=node,
                                  forecast=np.array([e[1] for e in entries]),
                                  actual=np.array([e[2] for e in entries])))
    return out


def read_correlation_csv(path) -> tuple[list[int], np.ndarray]:
    """Read a square correlation CSV with a node-id header row/column."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError("empty correlation CSV")
    header = [int(v) for v in rows[0][1:]]
    mat = np.zeros((len(header), len(header)))
    for i, row in enumerate(rows[1:]):
        if int(row[0]) != header[i]:
            raise ValueError("correlation CSV row/column node order mismatch")
        mat[i, :] = [float(v) for v in row[1:]]
    return header, mat
