"""Out-of-bag loss functions and grid tuning over (mtry, nodesize).

QCL is |estimated marginal coverage - tau|, where marginal coverage is the
fraction of training rows whose response lies at or below its own OOB
quantile estimate. Censored rows need one of two corrections: QCL-C fills
in unevaluable indicators with conditional probabilities from the OOB CDF,
QCL-IPCW reweights the evaluable ones by inverse censoring survival.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import PROB_EPS, Dataset, ForestParams, StepCDF, check_tau
from .forest import Forest, fit_forest, theta_seed
from .quantile import evaluate_rows, plateau_quantile, plateau_quantiles, quantile_from_cdf, quantiles

log = logging.getLogger(__name__)

QCL_LOSSES = ("qcl", "qcl-c", "qcl-ipcw")
LOSSES = QCL_LOSSES + ("mspe", "cindex")

NODESIZES_UNCENSORED = (1, 5, 10, 25, 40)
NODESIZES_CENSORED = (3, 8, 15, 30)

# case labels of the censored coverage table
CASE_I, CASE_II, CASE_III, CASE_IV = 1, 2, 3, 4


@dataclass(frozen=True)
class CoverageEstimate:
    tau: float
    tau_tilde_hat: float
    per_obs: np.ndarray
    n_used: int

    @property
    def bias(self) -> float:
        return self.tau_tilde_hat - self.tau


def qcl_loss(cov: CoverageEstimate) -> float:
    return abs(cov.tau_tilde_hat - cov.tau)


# -- uncensored ---------------------------------------------------------------


def _require_oob(forest: Forest):
    forest._check_oob()
    return forest.oob_cdf_matrix()


def indicator_coverage(cdf_matrix, support, y, tau) -> CoverageEstimate:
    """Mean of 1(y_i <= q_tau(x_i)) with quantiles read off ``cdf_matrix``."""
    tau = check_tau(tau)
    q, defined, _ = quantiles(cdf_matrix, support, tau)
    if not np.all(defined):
        raise ValueError("indicator coverage needs every quantile to be defined")
    per = (np.asarray(y) <= q).astype(float)
    return CoverageEstimate(tau, float(per.mean()), per, per.size)


def coverage_uncensored(forest: Forest, data: Dataset, tau: float) -> CoverageEstimate:
    if forest.task != "regression":
        raise ValueError("coverage_uncensored needs a regression forest")
    cdf = _require_oob(forest)
    return indicator_coverage(cdf, forest.support, data.response, tau)


# -- QCL-C ----------------------------------------------------------------------


def _tail_coverage(tau, F_y):
    denom = 1.0 - F_y
    with np.errstate(divide="ignore", invalid="ignore"):
        v = 1.0 - (1.0 - tau) / denom
    # F(y) >= tau would make the ratio exceed one
    return np.clip(np.where(denom > 0, v, 0.0), 0.0, 1.0)


def qclc_contribution(obs: tuple[float, int], cdf: StepCDF, tau: float) -> float:
    """Estimated F(q_tau(x_i) | x_i) for one observation (y_i, delta_i)."""
    return qclc_case(obs, cdf, tau)[0]


def qclc_case(obs: tuple[float, int], cdf: StepCDF, tau: float) -> tuple[float, int]:
    y, delta = float(obs[0]), int(obs[1])
    tau = check_tau(tau)
    q = quantile_from_cdf(cdf, tau)
    ts = q.tau_star
    if q.defined:
        if delta == 1:
            return float(y <= q.value), CASE_I
        if y >= q.value:
            return 0.0, CASE_II
        return float(_tail_coverage(tau, cdf(y))), CASE_II
    if delta == 1:
        return 1.0, CASE_III
    assert tau > ts, "Case IV requires tau > tau_star"
    if y > plateau_quantile(cdf):
        return (tau - ts) / (1.0 - ts), CASE_IV
    return float(_tail_coverage(tau, cdf(y))), CASE_IV


def qclc_contributions(cdf_matrix, support, y, delta, tau):
    """Vectorized QCL-C contributions and their case labels."""
    tau = check_tau(tau)
    y = np.asarray(y, float)
    delta = np.asarray(delta)
    q, defined, ts = quantiles(cdf_matrix, support, tau)
    q_star = plateau_quantiles(cdf_matrix, support)
    F_y = evaluate_rows(cdf_matrix, support, y)
    ev = delta == 1
    out = np.empty(y.size)
    case = np.empty(y.size, np.int8)

    m = defined & ev
    out[m] = (y[m] <= q[m])
    case[m] = CASE_I

    m = defined & ~ev
    above = m & (y >= np.where(defined, q, np.inf))
    out[above] = 0.0
    below = m & ~above
    out[below] = _tail_coverage(tau, F_y[below])
    case[m] = CASE_II

    m = ~defined & ev
    out[m] = 1.0
    case[m] = CASE_III

    m = ~defined & ~ev
    past = m & (y > q_star)
    with np.errstate(divide="ignore", invalid="ignore"):
        out[past] = (tau - ts[past]) / (1.0 - ts[past])
    inside = m & ~past
    out[inside] = _tail_coverage(tau, F_y[inside])
    case[m] = CASE_IV
    return out, case


def coverage_qclc(forest: Forest, data: Dataset, tau: float) -> CoverageEstimate:
    if forest.task != "survival":
        raise ValueError("QCL-C needs a survival forest")
    cdf = _require_oob(forest)
    per, _ = qclc_contributions(cdf, forest.support, data.response, data.events, tau)
    return CoverageEstimate(tau, float(per.mean()), per, per.size)


# -- QCL-IPCW -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class KMCurve:
    """Product-limit survival curve S(t), right-continuous.

    At tied times every observation with time >= t is in the risk set, so
    events are processed before censorings.
    """

    times: np.ndarray
    surv: np.ndarray

    def __call__(self, t):
        k = np.searchsorted(self.times, t, side="right") - 1
        out = np.where(k >= 0, self.surv[np.maximum(k, 0)], 1.0)
        return float(out) if np.ndim(out) == 0 else out

    @property
    def cdf(self) -> StepCDF:
        return StepCDF(self.times, 1.0 - self.surv)


def kaplan_meier(times, events) -> KMCurve:
    times = np.asarray(times, float)
    events = np.asarray(events).astype(bool)
    ut, inv = np.unique(times, return_inverse=True)
    d = np.bincount(inv, weights=events.astype(float), minlength=ut.size)
    n_at = np.bincount(inv, minlength=ut.size).astype(float)
    at_risk = n_at[::-1].cumsum()[::-1]
    keep = d > 0
    if not keep.any():
        return KMCurve(np.array([ut[-1]]), np.array([1.0]))
    s = np.cumprod(1.0 - d[keep] / at_risk[keep])
    return KMCurve(ut[keep], s)


def km_censoring(data: Dataset) -> KMCurve:
    """Kaplan-Meier estimate of G(t) = P(C > t), censorings as the events."""
    if not data.censored:
        raise ValueError("km_censoring needs censored data")
    return kaplan_meier(data.response, 1 - data.events)


def ipcw_terms(cdf_matrix, support, y, delta, tau, G: KMCurve):
    """Per-row Psi_i * 1(t_i <= q_i) / G(t_i)."""
    tau = check_tau(tau)
    y = np.asarray(y, float)
    ev = np.asarray(delta) == 1
    q, defined, _ = quantiles(cdf_matrix, support, tau)
    qq = np.where(defined, q, -np.inf)
    psi = defined & (ev | (y >= qq))
    hit = psi & ev & (y <= qq)
    g = np.asarray(G(y), float)
    pos = G.surv[G.surv > 0]
    floor = pos.min() if pos.size else 1.0
    g = np.where(g > 0, g, floor)
    return np.where(hit, 1.0 / g, 0.0), psi


def coverage_ipcw(forest: Forest, data: Dataset, tau: float) -> CoverageEstimate:
    """IPCW marginal coverage; the mean is clipped to [0, 1]."""
    if forest.task != "survival":
        raise ValueError("QCL-IPCW needs a survival forest")
    cdf = _require_oob(forest)
    terms, _ = ipcw_terms(cdf, forest.support, data.response, data.events, tau, km_censoring(data))
    return CoverageEstimate(tau, float(min(1.0, terms.mean())), terms, terms.size)


# -- conventional losses ----------------------------------------------------------


def mspe_oob(forest: Forest, data: Dataset) -> float:
    pred = forest.oob_mean_predictions()
    return float(np.mean((data.response - pred) ** 2))


def harrell_cindex(times, events, risk) -> float:
    """Harrell's concordance; higher risk should mean earlier failure.

    Pair (i, j) is comparable when i is an event and either t_i < t_j, or
    t_i == t_j with j censored. Risk ties count one half.
    """
    t = np.asarray(times, float)
    e = np.asarray(events).astype(bool)
    r = np.asarray(risk, float)
    num = 0.0
    den = 0.0
    for i in np.flatnonzero(e):
        comp = (t > t[i]) | ((t == t[i]) & ~e)
        if not comp.any():
            continue
        rj = r[comp]
        num += np.sum(r[i] > rj) + 0.5 * np.sum(r[i] == rj)
        den += comp.sum()
    if den == 0:
        raise ValueError("no comparable pairs")
    return float(num / den)


def oob_risk_scores(forest: Forest, data: Dataset) -> np.ndarray:
    """Ensemble cumulative hazard -log(1 - F) at the median observed time."""
    cdf = _require_oob(forest)
    t_med = float(np.median(data.response))
    F = evaluate_rows(cdf, forest.support, np.full(forest.n, t_med))
    with np.errstate(divide="ignore"):
        return -np.log(np.clip(1.0 - F, 1e-300, 1.0))


def cindex_oob(forest: Forest, data: Dataset) -> float:
    if forest.task != "survival":
        raise ValueError("C-index needs a survival forest")
    return harrell_cindex(data.response, data.events, oob_risk_scores(forest, data))


# -- grid tuning ----------------------------------------------------------------


@dataclass(frozen=True)
class GridFit:
    theta: tuple[int, int]
    forest: Forest | None
    error: str | None = None


@dataclass(frozen=True)
class TuneResult:
    candidates: list[tuple[tuple[int, int], float]]
    chosen: tuple[int, int]
    loss_kind: str
    tau: float | None = None
    tied: tuple[tuple[int, int], ...] = ()
    coverage: dict = field(default_factory=dict)  # theta -> tau_tilde_hat (QCL family)
    excluded: dict = field(default_factory=dict)  # theta -> error message
    fallback: bool = False

    @property
    def loss(self) -> float:
        return dict(self.candidates)[self.chosen]


def default_grid(p: int, censored: bool) -> list[tuple[int, int]]:
    sizes = NODESIZES_CENSORED if censored else NODESIZES_UNCENSORED
    return [(m, s) for m in range(1, p + 1) for s in sizes]


def default_theta(p: int, censored: bool) -> tuple[int, int]:
    if censored:
        return (min(p, math.ceil(math.sqrt(p))), 15)
    return (min(p, math.ceil(p / 3)), 5)


def fit_grid(data: Dataset, grid: Sequence[tuple[int, int]], seed: int = 0,
             n_trees: int = 500, n_jobs: int = 1, exclude_pure: bool = False) -> list[GridFit]:
    """One forest per grid point; failures are kept as error records."""
    if not grid:
        raise ValueError("empty grid")
    out = []
    for mtry, nodesize in grid:
        try:
            params = ForestParams(mtry, nodesize, n_trees, theta_seed(seed, mtry, nodesize),
                                  exclude_pure=exclude_pure)
            out.append(GridFit((mtry, nodesize), fit_forest(data, params, n_jobs=n_jobs)))
        except (ValueError, RuntimeError) as exc:
            log.warning("fit failed for theta=%s: %s", (mtry, nodesize), exc)
            out.append(GridFit((mtry, nodesize), None, str(exc)))
    return out


def coverage_estimate(forest: Forest, data: Dataset, loss: str, tau: float) -> CoverageEstimate:
    if loss == "qcl":
        return coverage_uncensored(forest, data, tau)
    if loss == "qcl-c":
        return coverage_qclc(forest, data, tau)
    if loss == "qcl-ipcw":
        return coverage_ipcw(forest, data, tau)
    raise ValueError(f"{loss} is not a coverage loss")


def _check_loss(loss: str, data: Dataset, tau):
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}")
    if loss in ("qcl", "mspe") and data.censored:
        raise ValueError(f"{loss} needs uncensored data")
    if loss in ("qcl-c", "qcl-ipcw", "cindex") and not data.censored:
        raise ValueError(f"{loss} needs censored data")
    if loss in QCL_LOSSES:
        if tau is None:
            raise ValueError(f"{loss} needs tau")
        check_tau(tau)


def argbest(candidates, maximize=False):
    """Winner and ties; ties go to lower mtry, then lower nodesize."""
    valid = [(th, v) for th, v in candidates if v is not None and not math.isnan(v)]
    if not valid:
        raise ValueError("no grid point produced a loss")
    sign = -1.0 if maximize else 1.0
    best = min(sign * v for _, v in valid)
    tied = sorted(th for th, v in valid if sign * v == best)
    return tied[0], tuple(tied)


def tune_fitted(fits: Sequence[GridFit], data: Dataset, loss: str, tau: float | None = None) -> TuneResult:
    _check_loss(loss, data, tau)
    cands = []
    cov = {}
    excluded = {f.theta: f.error for f in fits if f.forest is None}
    for f in fits:
        if f.forest is None:
            continue
        try:
            if loss in QCL_LOSSES:
                c = coverage_estimate(f.forest, data, loss, tau)
                cov[f.theta] = c.tau_tilde_hat
                cands.append((f.theta, qcl_loss(c)))
            elif loss == "mspe":
                cands.append((f.theta, mspe_oob(f.forest, data)))
            else:
                cands.append((f.theta, cindex_oob(f.forest, data)))
        except (ValueError, RuntimeError) as exc:
            excluded[f.theta] = str(exc)
    chosen, tied = argbest(cands, maximize=(loss == "cindex"))
    return TuneResult(cands, chosen, loss, tau, tied, cov, excluded)


def grid_tune(data: Dataset, grid: Sequence[tuple[int, int]], loss: str, tau: float | None = None,
              seed: int = 0, n_trees: int = 500, n_jobs: int = 1) -> TuneResult:
    _check_loss(loss, data, tau)
    return tune_fitted(fit_grid(data, grid, seed, n_trees, n_jobs), data, loss, tau)
