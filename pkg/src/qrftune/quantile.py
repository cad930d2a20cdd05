"""Quantiles and plateau levels of step CDFs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import PROB_EPS, StepCDF, check_tau


@dataclass(frozen=True)
class QuantileEstimate:
    value: float | None
    defined: bool
    tau_star: float


def quantile_from_cdf(cdf: StepCDF, tau: float) -> QuantileEstimate:
    """inf{t : F(t) >= tau}; undefined when tau exceeds the plateau tau_star."""
    tau = check_tau(tau)
    ts = cdf.tau_star
    if tau > ts + PROB_EPS:
        return QuantileEstimate(None, False, ts)
    k = int(np.argmax(cdf.prob >= tau - PROB_EPS))
    return QuantileEstimate(float(cdf.support[k]), True, ts)


def quantile_monotone_check(cdf: StepCDF, tau1: float, tau2: float) -> bool:
    if not tau1 < tau2:
        raise ValueError("need tau1 < tau2")
    q1 = quantile_from_cdf(cdf, tau1)
    q2 = quantile_from_cdf(cdf, tau2)
    if not (q1.defined and q2.defined):
        raise ValueError("both quantiles must be defined")
    return q1.value <= q2.value


def quantiles(cdf_matrix: np.ndarray, support: np.ndarray, tau: float):
    """Row-wise quantiles of a matrix of CDF values on a shared support.

    Returns (values, defined, tau_star); undefined rows (and rows that are
    entirely NaN) carry NaN values.
    """
    tau = check_tau(tau)
    cdf = np.asarray(cdf_matrix)
    tau_star = cdf[:, -1]
    with np.errstate(invalid="ignore"):
        hit = cdf >= tau - PROB_EPS
        defined = tau <= tau_star + PROB_EPS
    k = np.argmax(hit, axis=1)
    values = np.where(defined, support[k], np.nan)
    return values, defined, tau_star


def plateau_quantile(cdf: StepCDF) -> float:
    """q_{tau*}: where the CDF first reaches its final value (-inf if that is 0)."""
    ts = cdf.tau_star
    if ts <= PROB_EPS:
        return -np.inf
    return float(cdf.support[np.argmax(cdf.prob >= ts - PROB_EPS)])


def plateau_quantiles(cdf_matrix: np.ndarray, support: np.ndarray) -> np.ndarray:
    """Per-row q_{tau*}: first support point where the CDF reaches its plateau.

    Rows whose CDF is identically zero get -inf.
    """
    cdf = np.asarray(cdf_matrix)
    tau_star = cdf[:, -1]
    with np.errstate(invalid="ignore"):
        hit = cdf >= (tau_star - PROB_EPS)[:, None]
    k = np.argmax(hit, axis=1)
    out = support[k].astype(float)
    out[tau_star <= PROB_EPS] = -np.inf
    return out


def evaluate_rows(cdf_matrix: np.ndarray, support: np.ndarray, t: np.ndarray) -> np.ndarray:
    """F_i(t_i) for each row i (right-continuous step evaluation)."""
    k = np.searchsorted(support, t, side="right") - 1
    rows = np.arange(cdf_matrix.shape[0])
    vals = cdf_matrix[rows, np.maximum(k, 0)]
    return np.where(k >= 0, vals, 0.0)
