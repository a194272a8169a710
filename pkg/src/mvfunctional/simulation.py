"""Synthetic scenarios, Monte Carlo replication and empirical rate fits."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .functionals import SingularCovarianceError, alpha_plugin, theta_benchmark_P, theta_gaussian_dense, theta_plugin_family
from .moments import MomentPair, sample_moments
from .solver import QuadProblem, SolverConfig, SolverError, solve_dantzig, solve_l1
from .tuning import CvConfig, OracleContext, _pick, cv_tune, default_lambda_grid, oracle_sweep, theory_lambda_gamma

log = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def rep_seed(seed: int, rep: int, n: int = 0) -> int:
    """Stream seed for replication ``rep`` at sample size ``n``."""
    return splitmix64(splitmix64((seed ^ rep) & MASK64) ^ n)


class Draw(NamedTuple):
    data: np.ndarray
    alpha: np.ndarray
    theta: float


class CalibratedDraw(NamedTuple):
    data: np.ndarray
    alpha: np.ndarray
    theta: float
    snr: float


def generate_gaussian(n: int, p: int, s: int, xi: float, eta: float, seed: int) -> Draw:
    """n draws of N(mu, eta I) with mu = xi * (1_s, 0); alpha = mu/eta, theta = s xi^2/eta."""
    if not 0 <= s <= p:
        raise ValueError(f"need 0 <= s <= p, got s={s}, p={p}")
    if not eta > 0:
        raise ValueError("eta must be positive")
    if n < 1:
        raise ValueError("n must be positive")
    mu = np.zeros(p)
    mu[:s] = xi
    rng = np.random.default_rng(seed)
    x = mu + math.sqrt(eta) * rng.standard_normal((n, p))
    return Draw(x, mu / eta, s * xi * xi / eta)


def generate_calibrated(p: int, n: int, seed: int, anchor: MomentPair, keep: int = 10) -> CalibratedDraw:
    """Gaussian draws whose alpha is the top-``keep`` hard-thresholded anchor inv(C) m.

    The mean is set to C alpha and the covariance to the anchor's C.
    """
    cov = np.asarray(anchor.cov, float)
    if cov.shape != (p, p):
        raise ValueError(f"anchor dimension {cov.shape} does not match p={p}")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError("anchor covariance is not positive definite") from exc
    full = np.linalg.solve(cov, anchor.mean)
    alpha = np.zeros(p)
    if keep > 0:
        top = np.argsort(-np.abs(full), kind="stable")[:keep]
        alpha[top] = full[top]
    mu = cov @ alpha
    rng = np.random.default_rng(seed)
    x = mu + rng.standard_normal((n, p)) @ chol.T
    snr = float(np.abs(mu).sum() / math.sqrt(np.trace(cov)))
    return CalibratedDraw(x, alpha, float(alpha @ cov @ alpha), snr)


# --- scenarios --------------------------------------------------------------

P_RULES = {
    "sqrt": lambda n: int(math.floor(0.5 * n**0.5)) + 8,
    "half": lambda n: int(math.floor(0.5 * n)),
}
S_RULES = {
    "n^0.24": lambda n: int(math.floor(n**0.24)),
}
XI_RULES = {
    "floor(n^0.24)^-0.5": lambda n: math.floor(n**0.24) ** -0.5,
    "3n^-0.45": lambda n: 3.0 * n**-0.45,
}


def reduced_grid() -> list[int]:
    return [int(math.floor(2**k)) for k in np.arange(10.5, 13.01, 0.5)]


def full_grid() -> list[int]:
    return [int(math.floor(2**k)) for k in np.arange(10.5, 15.01, 0.5)]


@dataclass(frozen=True)
class Scenario:
    """A Gaussian design mu = xi (1_s, 0), Sigma = eta I over a grid of n.

    ``p_rule``, ``s_rule`` and ``xi_rule`` are either numbers or tags from
    P_RULES / S_RULES / XI_RULES. ``tuning`` selects how the l1 and Dantzig
    levels are chosen: "oracle" (minimize alpha error over the grid),
    "theory" (known tau, s) or "cv".
    """

    name: str
    n_grid: tuple
    p_rule: object = "sqrt"
    s_rule: object = 2
    xi_rule: object = 1.0
    eta: float = 2.0
    reps: int = 100
    seed: int = 0
    tuning: str = "oracle"
    n_lambda: int = 30
    cv_folds: int = 5

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise ValueError("n_grid must be strictly increasing")
        if self.tuning not in ("oracle", "theory", "cv"):
            raise ValueError(f"unknown tuning mode {self.tuning!r}")

    def dims(self, n: int) -> tuple[int, int, float]:
        p = self.p_rule if isinstance(self.p_rule, int) else P_RULES[self.p_rule](n)
        s = self.s_rule if isinstance(self.s_rule, int) else S_RULES[self.s_rule](n)
        xi = float(self.xi_rule) if not isinstance(self.xi_rule, str) else XI_RULES[self.xi_rule](n)
        return p, s, xi


SETTINGS = {
    "s1": dict(s_rule=2, xi_rule=1.0),
    "s2": dict(s_rule="n^0.24", xi_rule="floor(n^0.24)^-0.5"),
    "s3": dict(s_rule="n^0.24", xi_rule="3n^-0.45"),
    "compare": dict(p_rule="half", s_rule=5, xi_rule=2.0, eta=1.0),
}


def make_setting(tag: str, reps: int = 100, seed: int = 0, full: bool = False, **overrides) -> Scenario:
    """Named scenarios: s1, s2, s3 (rate settings) and compare (n = 60..200)."""
    if tag not in SETTINGS:
        raise KeyError(f"unknown setting {tag!r}; valid: {', '.join(sorted(SETTINGS))}")
    if tag == "compare":
        grid = tuple(range(60, 201, 20))
    else:
        grid = tuple(full_grid() if full else reduced_grid())
    kw = dict(SETTINGS[tag], name=tag, n_grid=grid, reps=reps, seed=seed)
    kw.update(overrides)
    return Scenario(**kw)


# --- estimators ---------------------------------------------------------------

ESTIMATORS = (
    "zero",
    "debiased",
    "plugin0",
    "plugin1",
    "benchmark_P",
    "dantzig0",
    "dantzig1",
    "dantzig2",
    "gaussian_dense",
)
DEFAULT_ESTIMATORS = ("zero", "debiased", "plugin0", "plugin1")


class EstimatorFailure(RuntimeError):
    pass


def _tuned_l1(sc: Scenario, x, m: MomentPair, draw: Draw, p: int, s: int, rep_rng_seed: int):
    tau = draw.theta
    gamma = theory_lambda_gamma(OracleContext(tau=tau, s=s, c_L=sc.eta, c_U=sc.eta), x.shape[0], max(p, 2)).gamma
    if gamma <= 0:
        gamma = 1.0
    prob = QuadProblem.from_moments(m)
    if sc.tuning == "theory":
        tt = theory_lambda_gamma(OracleContext(tau=tau, s=s, nu=1.0, c_L=sc.eta, c_U=sc.eta), x.shape[0], max(p, 2))
        sol = solve_l1(prob, SolverConfig(tt.lam, gamma))
        return sol, tt.lam, gamma
    if sc.tuning == "cv":
        cv = cv_tune(x, CvConfig(folds=sc.cv_folds, gamma_grid=(gamma,), seed=rep_rng_seed & 0xFFFFFFFF,
                                 n_lambda=sc.n_lambda))
        return solve_l1(prob, SolverConfig(cv.lam, cv.gamma)), cv.lam, cv.gamma
    points = [(float(l), gamma) for l in default_lambda_grid(m.mean, sc.n_lambda)[::-1]]
    errors, sols = oracle_sweep(prob, draw.alpha, points)
    best = _pick(points, errors)
    if best is None:
        raise EstimatorFailure("l1 solver failed at every grid point")
    return sols[points.index((best[1], best[2]))], best[1], gamma


def _tuned_dantzig(sc: Scenario, m: MomentPair, draw: Draw):
    prob = QuadProblem.from_moments(m)
    lams = default_lambda_grid(m.mean, sc.n_lambda)[::-1]
    best = None
    for lam in lams:
        try:
            sol = solve_dantzig(prob, float(lam))
        except SolverError:
            continue
        err = float(np.linalg.norm(sol.alpha - draw.alpha))
        if best is None or err < best[0]:
            best = (err, sol, float(lam))
    if best is None:
        raise EstimatorFailure("Dantzig LP failed at every grid point")
    return best[1], best[2]


def run_replication(sc: Scenario, n: int, rep: int, estimators) -> list[dict]:
    """One draw at sample size ``n``; one record per estimator."""
    p, s, xi = sc.dims(n)
    seed = rep_seed(sc.seed, rep, n)
    draw = generate_gaussian(n, p, s, xi, sc.eta, seed)
    x = draw.data
    m = sample_moments(x)
    out = []

    def record(est_id, alpha_hat, theta_hat, **extra):
        a_err = float(np.sum((alpha_hat - draw.alpha) ** 2)) if alpha_hat is not None else float("nan")
        out.append(dict(n=n, p=p, rep=rep, estimator=est_id, alpha_err2=a_err,
                        theta_err=abs(float(theta_hat) - draw.theta), theta_hat=float(theta_hat),
                        theta=draw.theta, failed=False, **extra))

    def fail(est_id, exc):
        out.append(dict(n=n, p=p, rep=rep, estimator=est_id, alpha_err2=float("nan"),
                        theta_err=float("nan"), theta_hat=float("nan"), theta=draw.theta, failed=True,
                        error=str(exc)))

    l1 = None
    if any(e in estimators for e in ("debiased", "plugin0", "plugin1")):
        try:
            sol, lam, gamma = _tuned_l1(sc, x, m, draw, p, s, seed)
            if not sol.converged:
                raise EstimatorFailure(f"l1 solver did not converge (kkt={sol.kkt_residual:.3g})")
            l1 = (sol, lam, gamma)
        except (EstimatorFailure, ValueError, np.linalg.LinAlgError) as exc:
            l1 = exc
    dz = None
    if any(e.startswith("dantzig") for e in estimators):
        try:
            dz = _tuned_dantzig(sc, m, draw)
        except (EstimatorFailure, ValueError) as exc:
            dz = exc

    for est in estimators:
        try:
            if est == "zero":
                record(est, np.zeros(p), 0.0)
            elif est in ("debiased", "plugin0", "plugin1"):
                if isinstance(l1, Exception):
                    raise l1
                sol, lam, gamma = l1
                c = {"debiased": 2.0, "plugin0": 0.0, "plugin1": 1.0}[est]
                th = theta_plugin_family(m, sol, c).value
                record(est, sol.alpha, th, lam=lam, gamma=gamma)
            elif est.startswith("dantzig"):
                if isinstance(dz, Exception):
                    raise dz
                sol, lam = dz
                c = float(est[-1])
                record(est, sol.alpha, theta_plugin_family(m, sol, c).value, lam=lam)
            elif est == "benchmark_P":
                record(est, alpha_plugin(m), theta_benchmark_P(m, n).value)
            elif est == "gaussian_dense":
                record(est, None, theta_gaussian_dense(x).value)
            else:
                raise KeyError(f"unknown estimator {est!r}")
        except KeyError:
            raise
        except Exception as exc:  # noqa: BLE001 - failures are counted, not fatal
            fail(est, exc)
    return out


def _run_chunk(args):
    sc, n, reps, estimators = args
    rows = []
    for rep in reps:
        rows.extend(run_replication(sc, n, rep, estimators))
    return rows


class SimulationAborted(RuntimeError):
    pass


@dataclass
class ScenarioResult:
    table: list
    records: list = field(repr=False, default_factory=list)

    def rows(self, estimator: str) -> list[dict]:
        return [r for r in self.table if r["estimator"] == estimator]

    def write_csv(self, path) -> None:
        write_result_table(self.table, path)


TABLE_COLUMNS = ("n", "p", "estimator", "mean_alpha_err2", "se_alpha_err2", "mean_theta_err", "se_theta_err", "n_fail")


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def write_result_table(table, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for row in table:
            w.writerow([_fmt(row[c]) for c in TABLE_COLUMNS])


def _mean_se(vals):
    vals = np.asarray(vals, float)
    if vals.size == 0 or np.all(np.isnan(vals)):
        return float("nan"), float("nan")
    vals = vals[~np.isnan(vals)]
    # a constant column is reported exactly (summation rounding would perturb it)
    mean = float(vals[0]) if np.all(vals == vals[0]) else float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
    return mean, se


def aggregate(records, max_fail_frac: float = 0.01) -> list[dict]:
    """Per (n, estimator) means and Monte Carlo standard errors over successful reps."""
    groups: dict = {}
    for r in records:
        groups.setdefault((r["n"], r["estimator"]), []).append(r)
    table = []
    for (n, est), rows in groups.items():
        ok = [r for r in rows if not r["failed"]]
        n_fail = len(rows) - len(ok)
        if n_fail > max_fail_frac * len(rows):
            raise SimulationAborted(f"{est} failed in {n_fail}/{len(rows)} replications at n={n}")
        ma, sa = _mean_se([r["alpha_err2"] for r in ok])
        mt, st = _mean_se([r["theta_err"] for r in ok])
        table.append(dict(n=n, p=rows[0]["p"], estimator=est, mean_alpha_err2=ma, se_alpha_err2=sa,
                          mean_theta_err=mt, se_theta_err=st, n_fail=n_fail))
    return table


def run_scenario(sc: Scenario, estimators=DEFAULT_ESTIMATORS, threads: int = 1,
                 max_fail_frac: float = 0.01) -> ScenarioResult:
    """Replicate every estimator ``sc.reps`` times at each n and aggregate."""
    estimators = tuple(estimators)
    unknown = [e for e in estimators if e not in ESTIMATORS]
    if unknown:
        raise KeyError(f"unknown estimators {unknown}; valid: {', '.join(ESTIMATORS)}")
    jobs = []
    for n in sc.n_grid:
        reps = list(range(sc.reps))
        k = max(1, threads)
        for chunk in np.array_split(reps, min(k, len(reps))):
            jobs.append((sc, n, [int(r) for r in chunk], estimators))
    if threads <= 1:
        chunks = [_run_chunk(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(_run_chunk, jobs))
    records = [r for c in chunks for r in c]
    records.sort(key=lambda r: (r["n"], estimators.index(r["estimator"]), r["rep"]))
    return ScenarioResult(aggregate(records, max_fail_frac), records)


# --- rate fits --------------------------------------------------------------


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float
    model: str
    dropped: tuple = ()


def fit_rate_slope(points, model: str = "linear") -> RateFit:
    """Least squares of log2(error) on log2(n).

    ``points`` is a sequence of (n, error). With model="logcorrected" the
    fitted form is C + log2(log2 n) - beta * log2 n, i.e. log2 log2 n is
    subtracted before the line fit; the reported slope is -beta.
    """
    if model not in ("linear", "logcorrected"):
        raise ValueError(f"unknown model {model!r}")
    pts = [(float(n), float(e)) for n, e in points]
    dropped = tuple(n for n, e in pts if not (e > 0 and math.isfinite(e)))
    pts = [(n, e) for n, e in pts if e > 0 and math.isfinite(e)]
    if len(pts) < 3:
        raise ValueError("need at least 3 points with positive error")
    x = np.log2([n for n, _ in pts])
    y = np.log2([e for _, e in pts])
    if model == "logcorrected":
        y = y - np.log2(x)
    A = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ np.array([slope, intercept])
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(float(slope), float(intercept), float(min(max(r2, 0.0), 1.0)), model, dropped)


def table_points(table, estimator: str, column: str) -> list[tuple[int, float]]:
    return [(r["n"], r[column]) for r in table if r["estimator"] == estimator]
