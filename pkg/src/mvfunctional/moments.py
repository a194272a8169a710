"""Mean and covariance inputs for the functional estimators.

All routines take an ``(n, p)`` array of observation rows and return plain
numpy arrays, except :func:`pooled_moments` which returns a :class:`MomentPair`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_TRUNCATED_COV_ROWS = 2000


class DataError(ValueError):
    """Raised for malformed or too-small datasets."""


def as_dataset(data, min_rows: int = 1) -> np.ndarray:
    """Validate ``data`` and return it as a 2-D float64 array."""
    x = np.asarray(data, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise DataError(f"dataset must be 2-D, got shape {x.shape}")
    n, p = x.shape
    if p < 1:
        raise DataError("dataset has no columns")
    if n < min_rows:
        if n == 0:
            raise DataError("empty dataset")
        raise DataError(f"need at least {min_rows} rows, got {n}")
    if not np.all(np.isfinite(x)):
        raise DataError("dataset contains NaN or infinite entries")
    return x


@dataclass(frozen=True)
class TruncationConfig:
    """Tuning for the element-wise truncated estimators.

    ``mean_thresholds`` / ``cov_thresholds`` override the data-driven
    thresholds when given (length-p vector and p x p matrix).
    """

    mean_level: float = 1.0
    cov_confidence: float = 0.05
    mean_thresholds: np.ndarray | None = None
    cov_thresholds: np.ndarray | None = None

    def __post_init__(self):
        if not self.mean_level > 0:
            raise ValueError("mean_level must be positive")
        if not 0 < self.cov_confidence < 1:
            raise ValueError("cov_confidence must lie in (0, 1)")


@dataclass
class MomentPair:
    mean: np.ndarray
    cov: np.ndarray
    n_eff: int
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        p = self.mean.shape[0]
        if self.cov.shape != (p, p):
            raise DataError(f"cov shape {self.cov.shape} does not match mean length {p}")

    @property
    def p(self) -> int:
        return self.mean.shape[0]


def _symmetrize(a: np.ndarray) -> np.ndarray:
    return (a + a.T) / 2.0


def sample_mean(data) -> np.ndarray:
    x = as_dataset(data)
    return x.mean(axis=0)


def sample_cov(data, unbiased: bool = False) -> np.ndarray:
    """Sample covariance with divisor ``n`` (default) or ``n - 1``."""
    x = as_dataset(data, min_rows=2 if unbiased else 1)
    n = x.shape[0]
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (n - 1 if unbiased else n)
    return _symmetrize(cov)


def sample_moments(data, unbiased: bool = False) -> MomentPair:
    x = as_dataset(data, min_rows=2 if unbiased else 1)
    return MomentPair(sample_mean(x), sample_cov(x, unbiased=unbiased), x.shape[0])


def clip(u, tau):
    """phi_tau(u) = sign(u) * min(|u|, tau)."""
    return np.sign(u) * np.minimum(np.abs(u), tau)


def truncated_mean(data, cfg: TruncationConfig) -> np.ndarray:
    """Coordinate-wise truncated mean.

    Thresholds are ``2 * m2_j / mean_level`` with ``m2_j`` the sample second
    moment of column j, unless ``cfg.mean_thresholds`` is set.
    """
    x = as_dataset(data, min_rows=2)
    if cfg.mean_thresholds is not None:
        tau = np.broadcast_to(np.asarray(cfg.mean_thresholds, dtype=float), (x.shape[1],))
    else:
        tau = 2.0 * np.mean(x**2, axis=0) / cfg.mean_level
    return clip(x, tau).mean(axis=0)


def _pair_differences(x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    a, b = np.triu_indices(n, k=1)
    return x[a] - x[b]


def cov_thresholds(data, cfg: TruncationConfig) -> np.ndarray:
    """Data-driven thresholds for :func:`truncated_cov`.

    scale_kl * sqrt(n / (log p + log(1/delta))) where scale_kl is the median
    of |y_k y_l / 2| over all pairwise differences y.
    """
    x = as_dataset(data, min_rows=2)
    n, p = x.shape
    y = _pair_differences(x)
    scale = np.empty((p, p))
    for k in range(p):
        prod = np.abs(y[:, k : k + 1] * y[:, k:]) / 2.0
        scale[k, k:] = np.median(prod, axis=0)
        scale[k:, k] = scale[k, k:]
    denom = np.log(p) + np.log(1.0 / cfg.cov_confidence)
    return scale * np.sqrt(n / denom)


def truncated_cov(data, cfg: TruncationConfig) -> np.ndarray:
    """Element-wise truncated U-statistic covariance over all row pairs.

    The result may be indefinite; callers can check with :func:`is_psd`.
    """
    x = as_dataset(data, min_rows=2)
    n, p = x.shape
    if n > MAX_TRUNCATED_COV_ROWS:
        raise DataError(
            f"truncated_cov enumerates all row pairs; n={n} exceeds the cap of "
            f"{MAX_TRUNCATED_COV_ROWS}"
        )
    if cfg.cov_thresholds is not None:
        tau = np.broadcast_to(np.asarray(cfg.cov_thresholds, dtype=float), (p, p))
    else:
        tau = cov_thresholds(x, cfg)
    y = _pair_differences(x)
    out = np.empty((p, p))
    for k in range(p):
        prod = y[:, k : k + 1] * y[:, k:] / 2.0
        out[k, k:] = clip(prod, tau[k, k:]).mean(axis=0)
        out[k:, k] = out[k, k:]
    return out


def is_psd(cov: np.ndarray, slack: float = 1e-10) -> bool:
    eig = np.linalg.eigvalsh(cov)
    return bool(eig[0] >= -slack * max(1.0, float(np.trace(cov))))


def truncated_moments(data, cfg: TruncationConfig) -> MomentPair:
    x = as_dataset(data, min_rows=2)
    cov = truncated_cov(x, cfg)
    return MomentPair(
        truncated_mean(x, cfg), cov, x.shape[0], diagnostics={"psd": is_psd(cov)}
    )


def pooled_moments(data1, data2) -> MomentPair:
    """Difference of group means and pooled within-group scatter / (n1 + n2)."""
    x = as_dataset(data1)
    y = as_dataset(data2)
    if x.shape[1] != y.shape[1]:
        raise DataError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]} columns")
    n1, n2 = x.shape[0], y.shape[0]
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    cov = _symmetrize((xc.T @ xc + yc.T @ yc) / (n1 + n2))
    return MomentPair(x.mean(axis=0) - y.mean(axis=0), cov, n1 + n2)
