import datetime as dt
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mvfunctional.portfolio import ReturnsTable  # noqa: E402

DATA = Path(__file__).parent / "data"


def random_instance(rng, p, rank=None):
    """Random PSD covariance (possibly low rank) and mean."""
    k = p if rank is None else rank
    a = rng.standard_normal((p, k))
    cov = a @ a.T / k
    cov = (cov + cov.T) / 2
    mean = rng.standard_normal(p) * rng.uniform(0.1, 2.0)
    return cov, mean


def month_dates(T, start=(2000, 1)):
    y, m = start
    out = []
    for _ in range(T):
        out.append(dt.date(y, m, 1).isoformat())
        m += 1
        if m == 13:
            y, m = y + 1, 1
    return out


def planted_returns(seed, T=120, alpha=(0.01, 0.0, 0.0), betas=(1.0, 0.8, 1.2), resid_sd=0.015,
                    market_mean=0.005, market_sd=0.04):
    """Three assets r = a + beta m + e with one planted residual alpha."""
    rng = np.random.default_rng(seed)
    m = rng.normal(market_mean, market_sd, T)
    r = np.asarray(alpha) + np.outer(m, betas) + rng.normal(0, resid_sd, (T, len(betas)))
    return ReturnsTable(month_dates(T), ["A", "B", "C"], r, m)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    lines = sys.modules.get("test_acceptance")
    lines = getattr(lines, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
