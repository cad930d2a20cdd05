"""Prediction intervals: QCL endpoint pairing, untuned QRF, Res-OOB, Res-SC."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset, ForestParams
from .forest import Forest, fit_forest, theta_seed
from .quantile import quantiles
from .tuning import (
    GridFit,
    TuneResult,
    argbest,
    coverage_estimate,
    default_theta,
    km_censoring,
    qclc_contributions,
    ipcw_terms,
)

SIDES = ("two", "upper", "lower")


@dataclass(frozen=True)
class IntervalSpec:
    alpha: float
    sidedness: str = "two"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.sidedness not in SIDES:
            raise ValueError(f"sidedness must be one of {SIDES}")

    @property
    def taus(self) -> tuple[float | None, float | None]:
        a = self.alpha
        if self.sidedness == "two":
            return a / 2, 1 - a / 2
        if self.sidedness == "upper":
            return None, 1 - a
        return a, None


def empirical_quantile(values, tau: float) -> float:
    """inf{v : EDF(v) >= tau}."""
    v = np.sort(np.asarray(values, float))
    if v.size == 0:
        raise ValueError("empty sample")
    k = max(int(math.ceil(tau * v.size - 1e-10)), 1)
    return float(v[k - 1])


@dataclass(eq=False)
class IntervalModel:
    """Fitted interval rule.

    Quantile-based methods hold one forest per endpoint; residual methods
    hold a mean forest and the two offsets added to its prediction.
    """

    method: str
    spec: IntervalSpec
    lower_forest: Forest | None = None
    upper_forest: Forest | None = None
    lower_tau: float | None = None
    upper_tau: float | None = None
    mean_forest: Forest | None = None
    lower_offset: float | None = None
    upper_offset: float | None = None
    calibration: dict = field(default_factory=dict)

    def predict(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Endpoints for each row of X; undefined quantiles give NaN."""
        X = np.atleast_2d(np.asarray(X, float))
        m = X.shape[0]
        if self.mean_forest is not None:
            t_hat = self.mean_forest.predict_mean(X)
            lo = t_hat + self.lower_offset if self.lower_offset is not None else np.full(m, -np.inf)
            hi = t_hat + self.upper_offset if self.upper_offset is not None else np.full(m, np.inf)
            return lo, hi
        lo = np.full(m, -np.inf)
        hi = np.full(m, np.inf)
        if self.lower_forest is not None:
            f = self.lower_forest
            lo = quantiles(f.predict_cdf_matrix(X), f.support, self.lower_tau)[0]
        if self.upper_forest is not None:
            f = self.upper_forest
            hi = quantiles(f.predict_cdf_matrix(X), f.support, self.upper_tau)[0]
        return lo, hi

    @property
    def lower_theta(self):
        return None if self.lower_forest is None else self.lower_forest.params.theta

    @property
    def upper_theta(self):
        return None if self.upper_forest is None else self.upper_forest.params.theta


# -- QCL pairing ------------------------------------------------------------------


def _oob_endpoint(forest: Forest, tau: float):
    return quantiles(forest.oob_cdf_matrix(), forest.support, tau)[:2]


def _censored_endpoint_coverage(forest, data, tau, estimator):
    # per-row contributions to the marginal coverage estimate of one endpoint
    y, d = data.response, data.events
    if estimator == "qcl-c":
        return qclc_contributions(forest.oob_cdf_matrix(), forest.support, y, d, tau)[0]
    return ipcw_terms(forest.oob_cdf_matrix(), forest.support, y, d, tau, km_censoring(data))[0]


def _pair_key(row):
    # (mtry_L, nodesize_L, mtry_U, nodesize_U); ties go to the lexicographically smallest
    return row[0][0] + row[0][1]


def qcl_pair_interval(
    lower_fits: Sequence[GridFit],
    upper_fits: Sequence[GridFit],
    data: Dataset,
    alpha: float,
    estimator: str | None = None,
) -> IntervalModel:
    """Choose the (theta_L, theta_U) pair with the narrowest OOB interval
    among those whose OOB coverage is at least 1 - alpha.

    If no pair reaches the floor, the pair with the highest coverage is
    returned and ``calibration['fallback']`` is set.
    """
    spec = IntervalSpec(alpha)
    lo_tau, hi_tau = spec.taus
    if estimator is None:
        estimator = "qcl-c" if data.censored else "qcl"
    lows = [f for f in lower_fits if f.forest is not None]
    highs = [f for f in upper_fits if f.forest is not None]
    if not lows or not highs:
        raise ValueError("need at least one fitted forest per endpoint")
    lo_q = {f.theta: _oob_endpoint(f.forest, lo_tau) for f in lows}
    hi_q = {f.theta: _oob_endpoint(f.forest, hi_tau) for f in highs}
    if data.censored:
        lo_c = {f.theta: _censored_endpoint_coverage(f.forest, data, lo_tau, estimator) for f in lows}
        hi_c = {f.theta: _censored_endpoint_coverage(f.forest, data, hi_tau, estimator) for f in highs}
    y = data.response
    rows = []
    for fl in lows:
        ql, dl = lo_q[fl.theta]
        for fh in highs:
            qh, dh = hi_q[fh.theta]
            ok = dl & dh
            if ok.mean() < 0.5:
                continue
            width = qh[ok] - ql[ok]
            if not data.censored:
                cov = float(np.mean((ql[ok] <= y[ok]) & (y[ok] <= qh[ok])))
            else:
                # P(q_lo < T <= q_hi) as a difference of endpoint coverage estimates
                cov = float(np.clip(hi_c[fh.theta][ok].mean() - lo_c[fl.theta][ok].mean(), 0.0, 1.0))
            rows.append(((fl.theta, fh.theta), cov, float(width.mean()), int(ok.sum())))
    if not rows:
        raise ValueError("every pair had more than half of its upper quantiles undefined")
    target = 1.0 - alpha
    # float-safe floor: a coverage of k/n that equals 1 - alpha qualifies
    ok_rows = [r for r in rows if r[1] >= target - 1e-12]
    fallback = not ok_rows
    if fallback:
        pick, _ = argbest([(_pair_key(r), r[1]) for r in rows], maximize=True)
    else:
        pick, _ = argbest([(_pair_key(r), r[2]) for r in ok_rows])
    chosen = next(r for r in rows if _pair_key(r) == pick)
    (th_l, th_u), cov, width, n_used = chosen
    lf = next(f.forest for f in lows if f.theta == th_l)
    uf = next(f.forest for f in highs if f.theta == th_u)
    return IntervalModel(
        "qcl", spec, lower_forest=lf, upper_forest=uf, lower_tau=lo_tau, upper_tau=hi_tau,
        calibration={
            "oob_coverage": cov, "mean_width": width, "n_used": n_used, "fallback": fallback,
            "pairs": [(r[0], r[1], r[2]) for r in rows],
        },
    )


def one_sided_qcl_tune(fits: Sequence[GridFit], data: Dataset, tau: float, direction: str,
                       loss: str | None = None) -> TuneResult:
    """Minimize |bias| subject to bias >= 0 (upper endpoints) or <= 0 (lower)."""
    if direction not in ("upper", "lower"):
        raise ValueError("direction must be 'upper' or 'lower'")
    if not fits:
        raise ValueError("empty grid")
    if loss is None:
        loss = "qcl-c" if data.censored else "qcl"
    biases = []
    excluded = {}
    for f in fits:
        if f.forest is None:
            excluded[f.theta] = f.error
            continue
        biases.append((f.theta, coverage_estimate(f.forest, data, loss, tau).tau_tilde_hat - tau))
    return one_sided_from_biases(biases, tau, direction, loss, excluded)


def one_sided_from_biases(biases, tau, direction, loss="qcl", excluded=None) -> TuneResult:
    if not biases:
        raise ValueError("empty grid")
    sign = 1.0 if direction == "upper" else -1.0
    allowed = [(th, abs(b)) for th, b in biases if sign * b >= 0]
    fallback = not allowed
    pool = allowed if allowed else [(th, abs(b)) for th, b in biases]
    chosen, tied = argbest(pool)
    return TuneResult(
        [(th, abs(b)) for th, b in biases], chosen, loss, tau, tied,
        coverage={th: tau + b for th, b in biases}, excluded=excluded or {}, fallback=fallback,
    )


# -- untuned QRF ---------------------------------------------------------------------


def default_params(data: Dataset, seed: int = 0, n_trees: int = 500) -> ForestParams:
    mtry, nodesize = default_theta(data.p, data.censored)
    return ForestParams(mtry, nodesize, n_trees, theta_seed(seed, mtry, nodesize))


def default_qrf_interval(data: Dataset, alpha: float, forest: Forest | None = None, seed: int = 0,
                         n_trees: int = 500, sidedness: str = "two") -> IntervalModel:
    spec = IntervalSpec(alpha, sidedness)
    if forest is None:
        forest = fit_forest(data, default_params(data, seed, n_trees))
    lo_tau, hi_tau = spec.taus
    return IntervalModel(
        "qrf-default", spec,
        lower_forest=forest if lo_tau is not None else None,
        upper_forest=forest if hi_tau is not None else None,
        lower_tau=lo_tau, upper_tau=hi_tau,
        calibration={"theta": forest.params.theta},
    )


# -- residual methods -------------------------------------------------------------------


def res_oob_interval(forest: Forest, data: Dataset, alpha: float, symmetric: bool = True,
                     sidedness: str = "two") -> IntervalModel:
    """Intervals t_hat + residual quantiles from the OOB residual EDF."""
    if forest.task != "regression":
        raise ValueError("Res-OOB needs a regression forest")
    spec = IntervalSpec(alpha, sidedness)
    pred = forest.oob_mean_predictions(strict=False)
    ok = forest.oob_tree_counts() > 0
    if not ok.any():
        raise ValueError("no row is ever out of bag")
    r = data.response[ok] - pred[ok]
    lo_tau, hi_tau = spec.taus
    if symmetric and sidedness == "two":
        h = empirical_quantile(np.abs(r), 1 - alpha)
        lo_off, hi_off = -h, h
    else:
        lo_off = empirical_quantile(r, lo_tau) if lo_tau is not None else None
        hi_off = empirical_quantile(r, hi_tau) if hi_tau is not None else None
    return IntervalModel(
        "res-oob", spec, mean_forest=forest, lower_offset=lo_off, upper_offset=hi_off,
        calibration={"n_residuals": int(ok.sum()), "symmetric": symmetric},
    )


def conformal_quantile(scores, alpha: float) -> float:
    """ceil((m + 1)(1 - alpha))-th smallest score; +inf if that exceeds m."""
    s = np.sort(np.asarray(scores, float))
    m = s.size
    k = int(math.ceil((m + 1) * (1 - alpha) - 1e-10))
    if k > m:
        return math.inf
    return float(s[max(k, 1) - 1])


def res_sc_interval(data: Dataset, params: ForestParams | None, alpha: float,
                    split_seed: int = 0) -> IntervalModel:
    """Split-conformal interval: fit on one random half, calibrate |residuals| on the other."""
    if data.censored:
        raise ValueError("Res-SC needs uncensored data")
    if data.n < 4:
        raise ValueError("need at least 4 rows to split")
    spec = IntervalSpec(alpha)
    rng = np.random.default_rng(np.random.SeedSequence([split_seed, 0x5C]))
    perm = rng.permutation(data.n)
    half = data.n // 2
    fit_rows, cal_rows = np.sort(perm[:half]), np.sort(perm[half:])
    train = data.subset(fit_rows)
    if params is None:
        params = default_params(train, split_seed)
    params.check(train.p)
    forest = fit_forest(train, params)
    cal = data.subset(cal_rows)
    d = np.abs(cal.response - forest.predict_mean(cal.covariates))
    D = conformal_quantile(d, alpha)
    return IntervalModel(
        "res-sc", spec, mean_forest=forest, lower_offset=-D, upper_offset=D,
        calibration={"n_calibration": int(cal_rows.size), "half_width": D},
    )
