"""Markowitz weights from (alpha, theta) estimates, market hedging and rolling backtests."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .functionals import theta_debiased
from .moments import DataError, sample_moments
from .solver import QuadProblem, SolverConfig, solve_l1
from .tuning import default_gamma_grid, default_lambda_grid

log = logging.getLogger(__name__)

MAX_SHORT_SINGLE = 0.25
MAX_SHORT_TOTAL = 0.5


@dataclass
class ReturnsTable:
    """Per-period simple excess returns of p assets plus the market."""

    dates: list
    tickers: list
    excess_returns: np.ndarray
    market: np.ndarray

    def __post_init__(self):
        self.excess_returns = np.asarray(self.excess_returns, dtype=np.float64)
        self.market = np.asarray(self.market, dtype=np.float64).ravel()
        self.dates = list(self.dates)
        self.tickers = list(self.tickers)
        T = len(self.dates)
        if self.excess_returns.ndim != 2 or self.excess_returns.shape != (T, len(self.tickers)):
            raise DataError(f"returns shape {self.excess_returns.shape} does not match "
                            f"{T} dates x {len(self.tickers)} tickers")
        if self.market.shape != (T,):
            raise DataError("market series length does not match dates")
        if not (np.all(np.isfinite(self.excess_returns)) and np.all(np.isfinite(self.market))):
            raise DataError("returns contain missing or non-finite entries")
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise DataError("dates must be strictly increasing")

    @property
    def T(self) -> int:
        return len(self.dates)

    @property
    def p(self) -> int:
        return len(self.tickers)


@dataclass(frozen=True)
class BacktestConfig:
    """Window lengths are in periods; ``rebalance`` defaults to ``test_periods``.

    The l1 level and ball radius are tuned on the validation window over
    ``lambda_grid`` x ``gamma_grid``; empty grids are filled per window with
    ``n_lambda`` log-spaced levels and the default radius grid.
    """

    train_periods: int = 21
    validate_periods: int = 3
    test_periods: int = 1
    sigma_target: float = 0.05
    rebalance: int | None = None
    periods_per_year: int = 12
    lambda_grid: tuple = ()
    gamma_grid: tuple = ()
    n_lambda: int = 10
    max_iter: int = 50_000
    tol: float = 1e-8

    def __post_init__(self):
        for name in ("train_periods", "validate_periods", "test_periods", "periods_per_year", "n_lambda"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.rebalance is not None and self.rebalance < 1:
            raise ValueError("rebalance must be at least 1")
        if not self.sigma_target >= 0:
            raise ValueError("sigma_target must be nonnegative")
        if self.train_periods < 2:
            raise ValueError("train_periods must be at least 2")
        for g in (self.lambda_grid, self.gamma_grid):
            if any(not v > 0 for v in g):
                raise ValueError("grid values must be positive")

    @property
    def step(self) -> int:
        return self.rebalance or self.test_periods

    def as_dict(self) -> dict:
        return {
            "train_periods": self.train_periods,
            "validate_periods": self.validate_periods,
            "test_periods": self.test_periods,
            "sigma_target": self.sigma_target,
            "rebalance": self.step,
            "periods_per_year": self.periods_per_year,
            "lambda_grid": list(self.lambda_grid),
            "gamma_grid": list(self.gamma_grid),
            "n_lambda": self.n_lambda,
            "max_iter": self.max_iter,
            "tol": self.tol,
        }


@dataclass
class PortfolioMetrics:
    annual_return: float
    volatility: float
    sharpe: float
    max_drawdown: float
    alpha: float
    beta: float
    flags: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "annual_return": self.annual_return,
            "volatility": self.volatility,
            "sharpe": self.sharpe,
            "max_drawdown": self.max_drawdown,
            "alpha": self.alpha,
            "beta": self.beta,
            "flags": list(self.flags),
        }


class Allocation(NamedTuple):
    weights: np.ndarray
    all_cash: bool


def optimal_weights(alpha, theta: float, sigma: float) -> Allocation:
    """w = sigma / sqrt(theta) * alpha; all cash (flagged) when theta <= 0."""
    a = np.asarray(alpha, dtype=np.float64)
    if not np.isfinite(theta) or theta <= 0:
        return Allocation(np.zeros_like(a), True)
    w = sigma / math.sqrt(theta) * a
    return Allocation(w, not np.any(w))


def _short_scale(w: np.ndarray) -> float:
    short = np.maximum(-w, 0.0)
    scale = 1.0
    if short.size and short.max() > MAX_SHORT_SINGLE:
        scale = MAX_SHORT_SINGLE / short.max()
    total = short.sum()
    if total > MAX_SHORT_TOTAL:
        scale = min(scale, MAX_SHORT_TOTAL / total)
    return scale


def apply_short_constraints(w) -> np.ndarray:
    """Rescale w so no single short exceeds 25% and total shorts stay within 50%."""
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    scale = _short_scale(w)
    if scale == 1.0:
        return w.copy()
    out = w * scale
    # rounding in the product can leave a binding short a hair past its limit
    for _ in range(4):
        fix = _short_scale(out)
        if fix == 1.0:
            break
        out = out * np.nextafter(fix, 0.0)
    return out


def _ols(y: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise OLS of y on [1, x]; returns (intercepts, slopes)."""
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx <= 1e-14 * max(1.0, float(x @ x)):
        raise DataError("market returns have zero variance in the window")
    yc = y - y.mean(axis=0)
    beta = xc @ yc / sxx
    return y.mean(axis=0) - beta * x.mean(), beta


def hedge_market(returns: ReturnsTable, window: slice | range) -> tuple[ReturnsTable, np.ndarray]:
    """Per-asset OLS (with intercept) of excess returns on the market over ``window``.

    Returns the residual table restricted to the window and the betas.
    """
    idx = np.arange(returns.T)[window if isinstance(window, slice) else slice(window.start, window.stop)]
    if idx.size < 3:
        raise DataError("hedging window needs at least 3 periods")
    y = returns.excess_returns[idx]
    m = returns.market[idx]
    icpt, beta = _ols(y, m)
    resid = y - icpt - np.outer(m, beta)
    return ReturnsTable([returns.dates[i] for i in idx], returns.tickers, resid, np.zeros(idx.size)), beta


def _sharpe(r: np.ndarray) -> float:
    sd = float(np.std(r, ddof=1)) if r.size > 1 else 0.0
    if sd <= 0:
        return -math.inf if float(np.mean(r)) < 0 else 0.0
    return float(np.mean(r)) / sd


def compute_metrics(period_returns, market, periods_per_year: int) -> PortfolioMetrics:
    """Annualized Table-2 style metrics.

    Volatility uses the sample standard deviation (divisor T - 1). Drawdown
    is measured on compounded wealth starting at 1. Alpha and beta come from
    OLS of the strategy on the market, alpha annualized.
    """
    r = np.asarray(period_returns, dtype=np.float64).ravel()
    mk = np.asarray(market, dtype=np.float64).ravel()
    if r.shape != mk.shape or r.size < 2:
        raise ValueError("need equal-length return and market series of length >= 2")
    flags = []
    ann = periods_per_year * float(r.mean())
    vol = math.sqrt(periods_per_year) * float(np.std(r, ddof=1))
    if vol > 0:
        sharpe = ann / vol
    else:
        sharpe = 0.0
        flags.append("sharpe_undefined")
    wealth = np.concatenate([[1.0], np.cumprod(1.0 + r)])
    dd = float(np.min(wealth / np.maximum.accumulate(wealth) - 1.0))
    try:
        icpt, beta = _ols(r[:, None], mk)
        alpha, beta = periods_per_year * float(icpt[0]), float(beta[0])
    except DataError:
        alpha, beta = ann, 0.0
        flags.append("beta_undefined")
    return PortfolioMetrics(ann, vol, sharpe, min(dd, 0.0), alpha, beta, flags)


@dataclass
class WindowRecord:
    start: object
    lam: float
    gamma: float
    theta: float
    weights: list
    all_cash: bool
    error: str = ""


@dataclass
class BacktestReport:
    dates: list
    strategy_returns: np.ndarray
    market: np.ndarray
    metrics: PortfolioMetrics
    windows: list
    config: dict

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", "strategy_return"])
            for d, r in zip(self.dates, self.strategy_returns):
                w.writerow([str(d), f"{r:.17g}"])


def _fit_weights(train: np.ndarray, lam: float, gamma: float, sigma: float, cfg: BacktestConfig, x0=None):
    m = sample_moments(train)
    sol = solve_l1(QuadProblem.from_moments(m), SolverConfig(lam, gamma, max_iter=cfg.max_iter, tol=cfg.tol), x0=x0)
    if not sol.converged:
        raise RuntimeError(f"l1 solver did not converge (lambda={lam:g})")
    theta = theta_debiased(m, sol).value
    w = apply_short_constraints(optimal_weights(sol.alpha, theta, sigma).weights)
    return w, theta, sol


def _grid(train: np.ndarray, cfg: BacktestConfig):
    m = sample_moments(train)
    lams = np.asarray(cfg.lambda_grid, float) if cfg.lambda_grid else default_lambda_grid(m.mean, cfg.n_lambda)
    gams = np.asarray(cfg.gamma_grid, float) if cfg.gamma_grid else default_gamma_grid(m.mean, m.cov)
    return np.sort(lams)[::-1], gams


def _tune_window(hedged: np.ndarray, cfg: BacktestConfig) -> tuple[float, float]:
    """Pick (lambda, gamma) with the best validation Sharpe; ties go to larger lambda."""
    train = hedged[: cfg.train_periods]
    val = hedged[cfg.train_periods:]
    lams, gams = _grid(train, cfg)
    best = None
    for gam in gams:
        warm = None
        for lam in lams:
            w, _, sol = _fit_weights(train, lam, gam, cfg.sigma_target, cfg, x0=warm)
            warm = sol.alpha
            score = _sharpe(val @ w)
            if best is None or score > best[0] or (score == best[0] and lam > best[1]):
                best = (score, float(lam), float(gam))
    return best[1], best[2]


def run_backtest(returns: ReturnsTable, cfg: BacktestConfig) -> BacktestReport:
    """Rolling train / validate / test backtest on market-hedged returns.

    In each cycle betas are estimated on train+validate, the l1 fit is run on
    hedged train returns for every grid point and scored by Sharpe on the
    validation window, and the chosen point is refit on train+validate.
    Test-period returns are w'(r - beta m), the rest held in cash.
    """
    hist = cfg.train_periods + cfg.validate_periods
    if returns.T < hist + cfg.test_periods:
        raise DataError(f"need at least {hist + cfg.test_periods} periods, got {returns.T}")
    dates, rets, mkt, windows = [], [], [], []
    t0 = 0
    while t0 + hist + cfg.test_periods <= returns.T:
        fit = slice(t0, t0 + hist)
        test = slice(t0 + hist, t0 + hist + cfg.test_periods)
        p = returns.p
        lam = gam = theta = float("nan")
        w = np.zeros(p)
        err = ""
        try:
            _, beta = hedge_market(returns, fit)
            # residuals keep their intercept: that is the signal being traded
            hedged = returns.excess_returns - np.outer(returns.market, beta)
            if cfg.sigma_target > 0:
                lam, gam = _tune_window(hedged[fit], cfg)
                w, theta, _ = _fit_weights(hedged[fit], lam, gam, cfg.sigma_target, cfg)
            test_ret = hedged[test] @ w
        except (DataError, RuntimeError, np.linalg.LinAlgError, ValueError) as exc:
            log.warning("window starting %s skipped to cash: %s", returns.dates[t0], exc)
            err = str(exc)
            w = np.zeros(p)
            test_ret = np.zeros(cfg.test_periods)
        windows.append(WindowRecord(returns.dates[fit.stop], lam, gam, theta, w.tolist(), not np.any(w), err))
        dates.extend(returns.dates[test])
        rets.extend(float(v) for v in test_ret)
        mkt.extend(float(v) for v in returns.market[test])
        t0 += cfg.step
    rets = np.asarray(rets)
    mkt = np.asarray(mkt)
    if rets.size >= 2:
        metrics = compute_metrics(rets, mkt, cfg.periods_per_year)
    else:
        metrics = PortfolioMetrics(cfg.periods_per_year * float(rets.sum()), 0.0, 0.0, min(0.0, float(rets.sum())),
                                   0.0, 0.0, ["too_few_periods"])
    return BacktestReport(dates, rets, mkt, metrics, windows, cfg.as_dict())


def equal_weight_returns(returns: ReturnsTable, dates) -> np.ndarray:
    """Unhedged 1/p portfolio returns on the given dates."""
    pos = {d: i for i, d in enumerate(returns.dates)}
    idx = [pos[d] for d in dates]
    return returns.excess_returns[idx].mean(axis=1)
