"""Error metrics against exact conditional truth, and Oracle selection."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np
from scipy import stats

from .simgen import TrueConditional
from .tuning import argbest


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class QuantileMetrics:
    coverage_bias: float
    coverage_mse: float
    quantile_bias: float
    quantile_mse: float
    n_defined: int
    n_total: int

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class IntervalMetrics:
    coverage: float
    mean_width: float
    median_width: float
    sd_width: float
    n_defined: int
    n_total: int

    def as_dict(self) -> dict:
        return asdict(self)


def quantile_metrics(estimates, truth: TrueConditional, tau: float) -> QuantileMetrics:
    """Coverage and quantile bias/MSE over rows whose estimate is defined (not NaN)."""
    q = np.asarray(estimates, float)
    if q.shape != (truth.n,):
        raise MetricsError("estimates must align with the test rows")
    ok = ~np.isnan(q)
    if not ok.any():
        raise MetricsError("every quantile estimate is undefined")
    rows = np.flatnonzero(ok)
    dev = truth.cdf(q[ok], rows) - tau
    qdev = q[ok] - truth.quantile(tau, rows)
    return QuantileMetrics(
        float(dev.mean()), float(np.mean(dev ** 2)),
        float(qdev.mean()), float(np.mean(qdev ** 2)),
        int(ok.sum()), int(q.size),
    )


def interval_metrics(lower, upper, truth: TrueConditional) -> IntervalMetrics:
    """Mean of F(upper|x) - F(lower|x) plus width summaries; NaN endpoints are dropped."""
    lo = np.asarray(lower, float)
    hi = np.asarray(upper, float)
    if lo.shape != (truth.n,) or hi.shape != (truth.n,):
        raise MetricsError("endpoints must align with the test rows")
    ok = ~(np.isnan(lo) | np.isnan(hi))
    if not ok.any():
        raise MetricsError("every interval has an undefined endpoint")
    rows = np.flatnonzero(ok)
    cov = np.clip(truth.cdf(hi[ok], rows) - truth.cdf(lo[ok], rows), 0.0, 1.0)
    w = hi[ok] - lo[ok]
    if np.isinf(w).any():
        sd = np.inf
    else:
        sd = float(w.std(ddof=1)) if w.size > 1 else 0.0
    return IntervalMetrics(
        float(cov.mean()), float(w.mean()), float(np.median(w)), sd,
        int(ok.sum()), int(lo.size),
    )


ORACLE_METRICS = ("abs_coverage_bias", "coverage_mse", "abs_quantile_bias", "quantile_mse")


def oracle_score(m: QuantileMetrics, metric: str) -> float:
    if metric == "abs_coverage_bias":
        return abs(m.coverage_bias)
    if metric == "coverage_mse":
        return m.coverage_mse
    if metric == "abs_quantile_bias":
        return abs(m.quantile_bias)
    if metric == "quantile_mse":
        return m.quantile_mse
    raise ValueError(f"unknown oracle metric {metric!r}")


def oracle_select(estimates: Mapping[tuple, np.ndarray], truth: TrueConditional, tau: float,
                  metric: str = "abs_coverage_bias"):
    """Grid point whose test-set metric is smallest.

    ``estimates`` maps theta -> test-row quantile estimates. Ties go to
    the smallest theta, as in grid tuning. Thetas whose estimates are all
    undefined are skipped. Returns (theta, {theta: QuantileMetrics}).
    """
    table = {}
    for th, q in estimates.items():
        try:
            table[th] = quantile_metrics(q, truth, tau)
        except MetricsError:
            continue
    if not table:
        raise MetricsError("no grid point has a defined quantile")
    best, _ = argbest([(th, oracle_score(m, metric)) for th, m in table.items()])
    return best, table


def t_interval(values, level: float = 0.95) -> tuple[float, float, float]:
    """(mean, lower, upper) t-based confidence interval for the mean."""
    v = np.asarray(values, float)
    v = v[~np.isnan(v)]
    if v.size == 0:
        return (np.nan, np.nan, np.nan)
    m = float(v.mean())
    if v.size < 2:
        return (m, np.nan, np.nan)
    half = stats.t.ppf(0.5 + level / 2, v.size - 1) * v.std(ddof=1) / np.sqrt(v.size)
    return (m, float(m - half), float(m + half))
