"""Choice of the l1 level lambda and the l2-ball radius gamma."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .moments import as_dataset, sample_moments
from .solver import QuadProblem, SolverConfig, solve_l1

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OracleContext:
    """Population quantities of the parameter space (known only in simulation)."""

    tau: float
    s: int = 1
    nu: float = 1.0
    c_L: float = 1.0
    c_U: float = 1.0
    q: float | None = None
    R: float | None = None

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")
        if not 0 < self.c_L <= self.c_U:
            raise ValueError("need 0 < c_L <= c_U")
        if self.q is not None and not 0 < self.q <= 1:
            raise ValueError("q must lie in (0, 1]")
        if (self.q is None) != (self.R is None):
            raise ValueError("q and R must be given together")


class TheoryTuning(NamedTuple):
    lam: float
    gamma: float
    degenerate: bool = False
    tau_eff: float = 0.0
    R_eff: float | None = None


def theory_lambda_gamma(ctx: OracleContext, n: int, p: int, t: float = 1.0) -> TheoryTuning:
    """lambda = t nu sqrt((1 + tau) log p / n), gamma = 2 sqrt(tau / c_L).

    Under approximate sparsity (q, R set) tau is first capped at c_U R^(2/q).
    ``degenerate`` flags gamma == 0 (tau == 0), which no solver accepts.
    """
    if n < 2 or p < 2:
        raise ValueError("need n >= 2 and p >= 2")
    if t <= 0:
        raise ValueError("t must be positive")
    tau = ctx.tau
    R_eff = None
    if ctx.q is not None:
        R_eff = min(p ** (1 - ctx.q / 2) * ctx.c_L ** (-ctx.q / 2) * tau ** (ctx.q / 2), ctx.R)
        tau = min(ctx.c_U * ctx.R ** (2 / ctx.q), tau)
    lam = t * ctx.nu * math.sqrt((1 + tau) * math.log(p) / n)
    gamma = 2 * math.sqrt(tau / ctx.c_L)
    return TheoryTuning(lam, gamma, degenerate=gamma == 0.0, tau_eff=tau, R_eff=R_eff)


@dataclass(frozen=True)
class CvConfig:
    """K-fold / grid settings.

    Empty grids are filled per dataset: a 30-point log grid over
    [1e-3, 1] * ||mean||_inf for lambda, and
    {0.5, 1, 2, 4} * ||mean / diag(cov)||_2 for gamma.
    """

    folds: int = 5
    lambda_grid: tuple = ()
    gamma_grid: tuple = ()
    seed: int = 0
    n_lambda: int = 30

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("folds must be at least 2")
        for g in (self.lambda_grid, self.gamma_grid):
            if any(not v > 0 for v in g):
                raise ValueError("grid values must be positive")


def default_lambda_grid(mean: np.ndarray, n_points: int = 30) -> np.ndarray:
    top = float(np.max(np.abs(mean)))
    if top == 0:
        top = 1.0
    return np.geomspace(1e-3 * top, top, n_points)


def default_gamma_grid(mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    d = np.diag(cov).copy()
    d[d <= 0] = 1.0
    base = float(np.linalg.norm(mean / d))
    if base == 0:
        base = 1.0
    return base * np.array([0.5, 1.0, 2.0, 4.0])


def resolve_grid(data, cfg: CvConfig) -> list[tuple[float, float]]:
    """Grid points ordered by gamma, then lambda descending."""
    m = sample_moments(data)
    lams = np.asarray(cfg.lambda_grid, float) if len(cfg.lambda_grid) else default_lambda_grid(m.mean, cfg.n_lambda)
    gams = np.asarray(cfg.gamma_grid, float) if len(cfg.gamma_grid) else default_gamma_grid(m.mean, m.cov)
    lams = np.sort(lams)[::-1]
    return [(float(l), float(g)) for g in gams for l in lams]


def fold_indices(n: int, folds: int, seed: int) -> list[np.ndarray]:
    """Shuffle row indices with ``seed`` and cut into contiguous blocks."""
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(b) for b in np.array_split(perm, folds)]


@dataclass
class CvResult:
    lam: float
    gamma: float
    table: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        write_cv_table(self.table, path)


def write_cv_table(table, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "gamma", "mean_loss", "n_skipped"])
        for row in table:
            w.writerow([f"{row['lambda']:.17g}", f"{row['gamma']:.17g}", f"{row['mean_loss']:.17g}", row["n_skipped"]])


def _pick(points, losses):
    """Argmin with ties broken toward larger lambda; ``points`` are (lam, gamma)."""
    best = None
    for (lam, gam), loss in zip(points, losses):
        if not np.isfinite(loss):
            continue
        if best is None or loss < best[0] or (loss == best[0] and lam > best[1]):
            best = (loss, lam, gam)
    return best


def cv_tune(data, cfg: CvConfig, max_iter: int = 50_000, tol: float = 1e-8) -> CvResult:
    """K-fold cross-validation of the l1 fit under the held-out quadratic loss.

    The loss on fold j is 0.5 a'C_j a - m_j'a with (m_j, C_j) the biased
    moments of the fold and ``a`` fit on the other folds. A grid point with
    a non-converged fold is skipped.
    """
    x = as_dataset(data)
    n = x.shape[0]
    if n < 2 * cfg.folds:
        raise ValueError(f"need at least {2 * cfg.folds} rows for {cfg.folds}-fold cv")
    points = resolve_grid(x, cfg)
    folds = fold_indices(n, cfg.folds, cfg.seed)
    fold_moments = []
    for idx in folds:
        mask = np.ones(n, bool)
        mask[idx] = False
        fold_moments.append((sample_moments(x[mask]), sample_moments(x[idx])))

    table = []
    losses = []
    warm: dict = {}
    cache: dict = {}
    for lam, gam in points:
        fold_losses = []
        skipped = 0
        for j, (train, test) in enumerate(fold_moments):
            key = (j, lam, gam)
            if key not in cache:
                cache[key] = solve_l1(QuadProblem.from_moments(train),
                                      SolverConfig(lam, gam, max_iter=max_iter, tol=tol), x0=warm.get((j, gam)))
            sol = cache[key]
            warm[(j, gam)] = sol.alpha
            if not sol.converged:
                skipped += 1
                continue
            a = sol.alpha
            fold_losses.append(0.5 * a @ test.cov @ a - test.mean @ a)
        loss = float(np.mean(fold_losses)) if skipped == 0 else float("nan")
        table.append({"lambda": lam, "gamma": gam, "mean_loss": loss, "n_skipped": skipped})
        losses.append(loss)
    best = _pick(points, losses)
    if best is None:
        raise RuntimeError("cross-validation failed at every grid point")
    return CvResult(best[1], best[2], table)


def oracle_sweep(prob: QuadProblem, truth, points, max_iter: int = 50_000, tol: float = 1e-8):
    """Fit every grid point on ``prob`` and return the l2 errors to ``truth`` (NaN if unconverged)."""
    truth = np.asarray(truth, float)
    errors = []
    sols = []
    warm: dict = {}
    for lam, gam in points:
        sol = solve_l1(prob, SolverConfig(lam, gam, max_iter=max_iter, tol=tol), x0=warm.get(gam))
        warm[gam] = sol.alpha
        sols.append(sol)
        errors.append(float(np.linalg.norm(sol.alpha - truth)) if sol.converged else float("nan"))
    return errors, sols


def oracle_tune(data, truth_alpha, cfg: CvConfig, max_iter: int = 50_000, tol: float = 1e-8) -> tuple[float, float]:
    """Grid point minimizing ||alpha_hat - truth||_2 on the full data (ties to larger lambda)."""
    x = as_dataset(data)
    points = resolve_grid(x, cfg)
    errors, _ = oracle_sweep(QuadProblem.from_moments(sample_moments(x)), truth_alpha, points, max_iter, tol)
    best = _pick(points, errors)
    if best is None:
        raise RuntimeError("oracle tuning failed at every grid point")
    return best[1], best[2]
