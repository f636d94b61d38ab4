"""Level corrections, variance estimates and the multilevel error decomposition."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError
from .model import Hierarchy
from .sampler import ChainRun, sync_rate


@dataclass
class LevelStats:
    level: int
    y_mean: float
    y_var_asymptotic: float
    n: int
    sync_rate: float
    cost_per_sample: float
    raw_y: Optional[np.ndarray] = None

    def summary(self) -> dict:
        return {
            "level": self.level,
            "n": self.n,
            "y_mean": self.y_mean,
            "sigma2": self.y_var_asymptotic,
            "sync_rate": self.sync_rate,
            "cost": self.cost_per_sample,
        }


@dataclass(frozen=True)
class ErrorReport:
    statistical: float
    bias_sq: float
    total: float
    tol: float
    converged: bool


def y_series(run: ChainRun, h: Hierarchy, level: int) -> np.ndarray:
    """Per-step level correction; ``Y_0`` is the level-0 QoI itself."""
    if run.level != level:
        raise DomainError(f"run is for level {run.level}, asked for level {level}")
    h.target(level)
    if level == 0:
        return np.asarray(run.qoi_fine, float)
    return np.asarray(run.qoi_fine, float) - np.asarray(run.qoi_coarse, float)


def batched_means_var(series, batch_size: Optional[int] = None) -> float:
    """Asymptotic variance ``N * Var(mean)`` from non-overlapping batch means.

    A trailing partial batch is dropped.
    """
    x = np.asarray(series, float)
    n = x.size
    m = int(math.isqrt(n)) if batch_size is None else int(batch_size)
    if m < 1:
        raise DomainError("batch size must be >= 1")
    b = n // m
    if b < 2:
        raise DomainError(f"need at least 2 batches, got {b} (N={n}, m={m})")
    means = x[: b * m].reshape(b, m).mean(axis=1)
    return float(m * np.sum((means - means.mean()) ** 2) / (b - 1))


def autocorrelation(series) -> np.ndarray:
    """Normalised empirical autocorrelation at all lags (FFT, biased estimator)."""
    x = np.asarray(series, float)
    n = x.size
    r = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(r, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n]
    if acov[0] <= 0:
        return np.zeros(n)
    return acov / acov[0]


def iact(series, max_lag: Optional[int] = None) -> float:
    """``1 + 2 sum rho_k``, truncated at the first non-positive ``rho_k``; at least 1."""
    x = np.asarray(series, float)
    n = x.size
    lag_cap = max(1, n // 50) if max_lag is None else int(max_lag)
    if n <= lag_cap:
        raise DomainError(f"series length {n} must exceed max_lag {lag_cap}")
    if np.ptp(x) == 0:
        return 1.0
    rho = autocorrelation(x)[1 : lag_cap + 1]
    stop = np.flatnonzero(rho <= 0)
    if stop.size:
        rho = rho[: stop[0]]
    return max(1.0, 1.0 + 2.0 * float(np.sum(rho)))


def level_stats(run: ChainRun, h: Hierarchy, batch_size: Optional[int] = None, keep_raw: bool = True) -> LevelStats:
    y = y_series(run, h, run.level)
    n = y.size
    if n == 1:
        var = 0.0
    elif n < 4:
        # too short for batching; fall back to the plain sample variance
        var = float(np.var(y, ddof=1))
    else:
        var = batched_means_var(y, batch_size)
    return LevelStats(
        level=run.level,
        y_mean=float(np.mean(y)),
        y_var_asymptotic=var,
        n=n,
        sync_rate=sync_rate(run) if run.level > 0 else 1.0,
        cost_per_sample=h.cost_per_sample(run.level),
        raw_y=y if keep_raw else None,
    )


def _check_contiguous(stats: Sequence[LevelStats]):
    if len(stats) == 0:
        raise DomainError("no levels given")
    for k, s in enumerate(stats):
        if s.level != k:
            raise DomainError(f"levels must be contiguous from 0; position {k} holds level {s.level}")


def ml_estimate(stats: Sequence[LevelStats]) -> float:
    _check_contiguous(stats)
    return math.fsum(s.y_mean for s in stats)


def statistical_error(stats: Sequence[LevelStats]) -> float:
    L = len(stats) - 1
    return 2.0 * (L + 1) * math.fsum(s.y_var_asymptotic / s.n for s in stats)


def error_report(stats: Sequence[LevelStats], alpha_w: float, s: float, tol: float) -> ErrorReport:
    """Total-error check with the bias extrapolated from the finest correction."""
    _check_contiguous(stats)
    if not alpha_w > 0:
        raise DomainError(f"alpha_w must be positive, got {alpha_w}")
    if not tol > 0:
        raise DomainError("tol must be positive")
    stat = statistical_error(stats)
    bias_sq = 2.0 * (abs(stats[-1].y_mean) / (1.0 - s ** (-alpha_w))) ** 2
    total = stat + bias_sq
    return ErrorReport(stat, bias_sq, total, tol, total <= tol * tol)


def summary_json(stats: Sequence[LevelStats], report: Optional[ErrorReport] = None, **extra) -> str:
    doc = dict(extra)
    doc["levels"] = [s.summary() for s in stats]
    if report is not None:
        doc["report"] = asdict(report)
    return json.dumps(doc, indent=2)
