"""Estimators of theta = mu' inv(Sigma) mu built from moments and solved vectors."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .moments import DataError, MomentPair, as_dataset, pooled_moments, sample_cov, sample_moments
from .solver import QuadProblem, Solution, SolverConfig, solve_l0_exhaustive, solve_l1, solve_mcp

# condition numbers above this are treated as singular
MAX_COND = 1e13


class SingularCovarianceError(np.linalg.LinAlgError):
    pass


@dataclass
class FunctionalEstimate:
    value: float
    estimator_id: str
    tuning: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    inputs_hash: str = ""

    def __post_init__(self):
        self.value = float(self.value)
        if not math.isfinite(self.value):
            raise ValueError(f"{self.estimator_id}: estimate is not finite")

    def as_dict(self) -> dict:
        return {
            "estimator": self.estimator_id,
            "value": self.value,
            "tuning": dict(self.tuning),
            "diagnostics": dict(self.diagnostics),
            "inputs_hash": self.inputs_hash,
        }


def inputs_hash(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=np.float64)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


def solve_spd(cov: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve cov x = rhs by a factorization; refuses singular systems."""
    if cov.shape[0] == 0:
        return np.zeros(0)
    if np.linalg.cond(cov) > MAX_COND:
        raise SingularCovarianceError("covariance matrix is singular or numerically singular")
    try:
        c = scipy.linalg.cho_factor(cov)
        return scipy.linalg.cho_solve(c, rhs)
    except np.linalg.LinAlgError:
        return scipy.linalg.solve(cov, rhs, assume_a="sym")


def quad_form_inv(cov: np.ndarray, vec: np.ndarray) -> float:
    """vec' inv(cov) vec; zero for an empty vector."""
    if vec.shape[0] == 0:
        return 0.0
    return float(vec @ solve_spd(cov, vec))


# --- sparse-regime plug-ins -------------------------------------------------


def theta_plugin_family(moments: MomentPair, sol: Solution | np.ndarray, c: float,
                        estimator_id: str | None = None, tuning: dict | None = None) -> FunctionalEstimate:
    """c * m'a + (1 - c) * a'Ca for a solved vector a.

    c = 2 is the de-biased estimator, c = 1 the naive plug-in.
    """
    alpha = sol.alpha if isinstance(sol, Solution) else np.asarray(sol, dtype=float)
    lin = float(moments.mean @ alpha)
    quad = float(alpha @ moments.cov @ alpha)
    value = c * lin + (1.0 - c) * quad
    diag = {"l1_norm": float(np.abs(alpha).sum()), "gap": lin - quad, "mean_dot_alpha": lin, "quad": quad}
    if isinstance(sol, Solution):
        diag.update(kkt_residual=sol.kkt_residual, ball_active=sol.ball_active, iterations=sol.iterations)
    return FunctionalEstimate(
        value,
        estimator_id or f"plugin_c{c:g}",
        tuning=dict(tuning or {}, c=c),
        diagnostics=diag,
        inputs_hash=inputs_hash(moments.mean, moments.cov),
    )


def theta_debiased(moments: MomentPair, sol: Solution | np.ndarray, tuning: dict | None = None) -> FunctionalEstimate:
    """2 m'a - a'Ca; ``diagnostics['gap']`` holds m'a - a'Ca."""
    est = theta_plugin_family(moments, sol, 2.0, estimator_id="debiased", tuning=tuning)
    return est


def fit_debiased(moments: MomentPair, cfg: SolverConfig) -> tuple[FunctionalEstimate, Solution]:
    """Solve the l1 problem on ``moments`` and plug the result into the de-biased form."""
    sol = solve_l1(QuadProblem.from_moments(moments), cfg)
    est = theta_debiased(moments, sol, tuning=cfg.as_dict())
    est.diagnostics["converged"] = sol.converged
    return est, sol


def theta_l0(moments: MomentPair, s: int, gamma: float, c: float = 2.0) -> FunctionalEstimate:
    """Plug-in family evaluated at the exhaustive l0 solution."""
    sol = solve_l0_exhaustive(QuadProblem.from_moments(moments), s, gamma)
    return theta_plugin_family(moments, sol, c, estimator_id=f"l0_c{c:g}", tuning={"s": s, "gamma": gamma})


def alpha_plugin(moments: MomentPair) -> np.ndarray:
    return solve_spd(moments.cov, moments.mean)


def theta_benchmark_P(moments: MomentPair, n: int) -> FunctionalEstimate:
    """|m' inv(C) m - a| / b with a = p/(n-p), b = n/(n-p)."""
    p = moments.p
    if n <= p:
        raise DataError(f"benchmark estimator needs n > p (n={n}, p={p})")
    q = quad_form_inv(moments.cov, moments.mean)
    a = p / (n - p)
    b = n / (n - p)
    return FunctionalEstimate(
        abs(q - a) / b,
        "benchmark_P",
        tuning={"n": n},
        diagnostics={"plugin_quadratic": q},
        inputs_hash=inputs_hash(moments.mean, moments.cov),
    )


# --- dense regime -------------------------------------------------------------


def theta_gaussian_dense(data) -> FunctionalEstimate:
    """(n - p - 2)/n * m' inv(C) m - p/n with biased sample moments."""
    x = as_dataset(data)
    n, p = x.shape
    if n <= p + 2:
        raise DataError(f"gaussian dense estimator needs n > p + 2 (n={n}, p={p})")
    m = sample_moments(x)
    q = quad_form_inv(m.cov, m.mean)
    return FunctionalEstimate(
        (n - p - 2) / n * q - p / n,
        "gaussian_dense",
        diagnostics={"plugin_quadratic": q},
        inputs_hash=inputs_hash(x),
    )


def default_alpha_exponent(n: int, p: int) -> float:
    """log p / log n clamped to [0, 0.95]."""
    if p <= 1:
        return 0.0
    return float(min(max(math.log(p) / math.log(n), 0.0), 0.95))


def split_sizes(n: int, m: int) -> list[int]:
    """Sizes n - m*floor(n/(m+1)), then floor(n/(m+1)) repeated m times."""
    part = n // (m + 1)
    return [n - m * part] + [part] * m


def _sg_terms(mu0: np.ndarray, cov0_reg: np.ndarray, covs: list[np.ndarray]) -> list[float]:
    """Terms u' P_1 ... P_k u for k = 0..len(covs), where u = cov0^{-1/2} mu0
    and P_j = I - cov0^{-1/2} covs[j] cov0^{-1/2}."""
    d, v = np.linalg.eigh(cov0_reg)
    if d[0] <= 0:
        raise SingularCovarianceError("regularized covariance is not positive definite")
    root_inv = (v / np.sqrt(d)) @ v.T
    u = root_inv @ mu0
    terms = [float(u @ u)]
    left = u
    for cj in covs:
        # left' P_j = left - W cj W left, with W = root_inv symmetric
        left = left - root_inv @ (cj @ (root_inv @ left))
        terms.append(float(left @ u))
    return terms


def theta_subgaussian_dense(data, alpha_exponent: float | None = None, eps: float | None = None) -> FunctionalEstimate:
    """Sample-splitting bias-corrected estimator for sub-Gaussian data.

    Uses m = ceil(a / (1 - a)) correction terms with a = ``alpha_exponent``
    (default log p / log n, clamped) and ridge ``eps`` (default sqrt(p/n)).
    """
    x = as_dataset(data)
    n, p = x.shape
    a = default_alpha_exponent(n, p) if alpha_exponent is None else float(alpha_exponent)
    if not 0 <= a < 1:
        raise ValueError("alpha_exponent must lie in [0, 1)")
    m = math.ceil(a / (1 - a))
    sizes = split_sizes(n, m)
    if min(sizes) < 2:
        raise DataError(f"n={n} too small to split into {m + 1} parts of at least 2 rows")
    eps = math.sqrt(p / n) if eps is None else float(eps)
    bounds = np.cumsum([0] + sizes)
    parts = [x[bounds[i] : bounds[i + 1]] for i in range(m + 1)]
    mu0 = parts[0].mean(axis=0)
    cov0 = sample_cov(parts[0]) + eps * np.eye(p)
    covs = [sample_cov(part, unbiased=True) for part in parts[1:]]
    terms = _sg_terms(mu0, cov0, covs)
    value = sum(terms) - p * (m + 1) / n
    return FunctionalEstimate(
        value,
        "subgaussian_dense",
        tuning={"alpha_exponent": a, "m": m, "eps": eps},
        diagnostics={f"term_{k}": t for k, t in enumerate(terms)},
        inputs_hash=inputs_hash(x),
    )


def _check_partition(blocks, p: int) -> list[np.ndarray]:
    blocks = [np.asarray(b, dtype=int).ravel() for b in blocks]
    flat = np.concatenate(blocks) if blocks else np.zeros(0, dtype=int)
    if any(b.size == 0 for b in blocks) or flat.size != p or not np.array_equal(np.sort(flat), np.arange(p)):
        raise ValueError(f"blocks must partition 0..{p - 1}")
    return blocks


def theta_block(data, blocks) -> FunctionalEstimate:
    """Block-diagonal version of the Gaussian dense correction.

    ``blocks`` is a list of index lists partitioning the columns (0-based).
    """
    x = as_dataset(data)
    n, p = x.shape
    blocks = _check_partition(blocks, p)
    dmax = max(b.size for b in blocks)
    if n <= dmax + 2:
        raise DataError(f"block estimator needs n > max block size + 2 (n={n}, d={dmax})")
    m = sample_moments(x)
    total = 0.0
    for b in blocks:
        q = quad_form_inv(m.cov[np.ix_(b, b)], m.mean[b])
        total += (n - b.size - 2) / n * q
    return FunctionalEstimate(
        total - p / n,
        "block",
        tuning={"blocks": [b.tolist() for b in blocks]},
        inputs_hash=inputs_hash(x),
    )


def theta_support_recovery(data, cfg: SolverConfig) -> FunctionalEstimate:
    """Select a support with MCP on the first half, de-bias on the second half.

    Returns 0 when the selected support is larger than n/4.
    """
    x = as_dataset(data)
    n, p = x.shape
    if n < 4:
        raise DataError("support-recovery estimator needs n >= 4")
    n1 = n // 2
    n2 = n - n1
    d1, d2 = x[:n1], x[n1:]
    m1 = MomentPair(d1.mean(axis=0), sample_cov(d1, unbiased=True), n1)
    sol = solve_mcp(QuadProblem.from_moments(m1), cfg)
    supp = sol.support
    k = supp.size
    diag = {"support_size": k, "converged": sol.converged, "kkt_residual": sol.kkt_residual}
    if k > n / 4:
        value = 0.0
        diag["fallback"] = True
    else:
        m2 = sample_moments(d2)
        q = quad_form_inv(m2.cov[np.ix_(supp, supp)], m2.mean[supp])
        value = (n2 - k - 2) / n2 * q - k / n2
    est = FunctionalEstimate(value, "support_recovery", tuning=cfg.as_dict(), diagnostics=diag,
                             inputs_hash=inputs_hash(x))
    est.diagnostics["support"] = supp.tolist()
    return est


def theta_two_sample(data1, data2, cfg: SolverConfig) -> FunctionalEstimate:
    """De-biased estimate of (mu1 - mu2)' inv(Sigma) (mu1 - mu2) from pooled moments."""
    pooled = pooled_moments(data1, data2)
    est, _ = fit_debiased(pooled, cfg)
    est.estimator_id = "two_sample"
    return est
