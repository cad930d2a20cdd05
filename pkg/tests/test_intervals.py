import numpy as np
import pytest

from qrftune.data import Dataset, ForestParams, continuous_columns
from qrftune.forest import fit_forest
from qrftune.intervals import (
    IntervalModel,
    IntervalSpec,
    conformal_quantile,
    default_params,
    default_qrf_interval,
    empirical_quantile,
    one_sided_from_biases,
    one_sided_qcl_tune,
    qcl_pair_interval,
    res_oob_interval,
    res_sc_interval,
)
from qrftune.quantile import quantiles
from qrftune.tuning import GridFit, fit_grid

from conftest import make_regression, make_survival


class StubForest:
    """OOB CDFs that put all mass on one value per row (NaN value = never reaches tau)."""

    def __init__(self, theta, values, support):
        self.support = np.asarray(support, float)
        self.params = ForestParams(theta[0], theta[1], 1)
        v = np.asarray(values, float)
        M = (self.support[None, :] >= v[:, None]).astype(float)
        M[np.isnan(v)] = 0.0
        self._M = M

    def oob_cdf_matrix(self):
        return self._M


SUPPORT = np.array([-2.0, 0.0, 1.0, 2.5, 2.8, 3.0, 10.0])


def _data(y):
    y = np.asarray(y, float)
    return Dataset(np.zeros((y.size, 1)), y, continuous_columns(1))


def _fit(theta, v, n):
    return GridFit(theta, StubForest(theta, np.full(n, v) if np.isscalar(v) else v, SUPPORT))


Y = np.array([1.0] * 79 + [2.8] * 3 + [10.0] * 18)


def test_spec_taus():
    assert IntervalSpec(0.2).taus == pytest.approx((0.1, 0.9))
    assert IntervalSpec(0.2, "upper").taus == (None, 0.8)
    assert IntervalSpec(0.2, "lower").taus == (0.2, None)
    for bad in (0.0, 1.0):
        with pytest.raises(ValueError):
            IntervalSpec(bad)
    with pytest.raises(ValueError):
        IntervalSpec(0.1, "both")


def test_pairing_rule_example():
    lows = [_fit((1, 1), 0.0, 100)]
    highs = [_fit((1, 1), 3.0, 100), _fit((1, 5), 2.5, 100)]
    m = qcl_pair_interval(lows, highs, _data(Y), 0.2)
    pairs = {p[0][1]: (p[1], p[2]) for p in m.calibration["pairs"]}
    assert pairs[(1, 1)] == pytest.approx((0.82, 3.0))
    assert pairs[(1, 5)] == pytest.approx((0.79, 2.5))
    assert m.upper_theta == (1, 1)
    assert not m.calibration["fallback"]


def test_pairing_picks_narrowest_qualifying():
    lows = [_fit((1, 1), 0.0, 100), _fit((2, 1), -2.0, 100)]
    highs = [_fit((1, 1), 3.0, 100), _fit((2, 1), 10.0, 100)]
    m = qcl_pair_interval(lows, highs, _data(Y), 0.2)
    assert (m.lower_theta, m.upper_theta) == ((1, 1), (1, 1))
    assert m.calibration["mean_width"] == 3.0


def test_pairing_single_pair_reports_coverage_and_width():
    m = qcl_pair_interval([_fit((1, 1), 0.0, 100)], [_fit((1, 1), 2.5, 100)], _data(Y), 0.2)
    assert m.calibration["oob_coverage"] == pytest.approx(0.79)
    assert m.calibration["mean_width"] == 2.5
    assert m.calibration["fallback"]


def test_pairing_fallback_takes_max_coverage():
    highs = [_fit((1, 1), 0.0, 100), _fit((1, 5), 2.5, 100)]
    m = qcl_pair_interval([_fit((1, 1), 0.0, 100)], highs, _data(Y), 0.2)
    assert m.calibration["fallback"]
    assert m.upper_theta == (1, 5)


def test_pairing_exact_floor_qualifies():
    y = np.array([1.0] * 8 + [10.0] * 2)
    m = qcl_pair_interval([_fit((1, 1), 0.0, 10)], [_fit((1, 1), 3.0, 10)], _data(y), 0.2)
    assert not m.calibration["fallback"]


def test_pairing_drops_mostly_undefined_pairs():
    n = 100
    half_nan = np.where(np.arange(n) < 51, np.nan, 3.0)
    highs = [_fit((1, 1), half_nan, n), _fit((1, 5), 10.0, n)]
    m = qcl_pair_interval([_fit((1, 1), 0.0, n)], highs, _data(Y), 0.2)
    assert [p[0][1] for p in m.calibration["pairs"]] == [(1, 5)]
    with pytest.raises(ValueError, match="undefined"):
        qcl_pair_interval([_fit((1, 1), 0.0, n)], highs[:1], _data(Y), 0.2)


def test_pairing_partly_undefined_rows_dropped():
    n = 100
    some_nan = np.where(np.arange(n) < 10, np.nan, 3.0)
    m = qcl_pair_interval([_fit((1, 1), 0.0, n)], [_fit((1, 1), some_nan, n)], _data(Y), 0.2)
    assert m.calibration["n_used"] == 90


def test_pairing_exhaustive_on_real_grid(reg_data):
    fits = fit_grid(reg_data, [(1, 1), (1, 10), (4, 5)], seed=2, n_trees=40)
    m = qcl_pair_interval(fits, fits, reg_data, 0.2)
    y = reg_data.response
    rows = []
    for fl in fits:
        ql = quantiles(fl.forest.oob_cdf_matrix(), fl.forest.support, 0.1)[0]
        for fh in fits:
            qh = quantiles(fh.forest.oob_cdf_matrix(), fh.forest.support, 0.9)[0]
            rows.append(((fl.theta, fh.theta), np.mean((ql <= y) & (y <= qh)), np.mean(qh - ql)))
    ok = [r for r in rows if r[1] >= 0.8]
    assert len(rows) == 9
    if ok:
        best = min(ok, key=lambda r: (r[2], r[0]))
        assert (m.lower_theta, m.upper_theta) == best[0]
        assert m.calibration["oob_coverage"] >= 0.8
    else:
        assert m.calibration["fallback"]
    lo, hi = m.predict(reg_data.covariates[:50])
    assert np.all(lo <= hi)


def test_censored_pairing_runs(surv_data):
    fits = fit_grid(surv_data, [(1, 3), (2, 8)], seed=0, n_trees=40)
    for est in ("qcl-c", "qcl-ipcw"):
        m = qcl_pair_interval(fits, fits, surv_data, 0.2, estimator=est)
        assert 0.0 <= m.calibration["oob_coverage"] <= 1.0
        lo, hi = m.predict(surv_data.covariates[:30])
        ok = ~np.isnan(hi)
        assert np.all(lo[ok] <= hi[ok])


# -- one-sided ---------------------------------------------------------------------------


def test_one_sided_examples():
    r = one_sided_from_biases([((1, 1), 0.02), ((1, 5), -0.01)], 0.9, "upper")
    assert r.chosen == (1, 1) and not r.fallback
    r = one_sided_from_biases([((1, 1), -0.02), ((1, 5), -0.01)], 0.9, "upper")
    assert r.fallback and r.chosen == (1, 5)
    r = one_sided_from_biases([((1, 1), 0.02), ((1, 5), -0.03)], 0.1, "lower")
    assert r.chosen == (1, 5)
    with pytest.raises(ValueError):
        one_sided_from_biases([], 0.1, "upper")


def test_one_sided_sign_property():
    rng = np.random.default_rng(0)
    for _ in range(300):
        k = int(rng.integers(1, 8))
        biases = [((i + 1, 5), float(b)) for i, b in enumerate(rng.normal(0, 0.05, k))]
        direction = str(rng.choice(["upper", "lower"]))
        r = one_sided_from_biases(biases, 0.5, direction)
        b = dict(biases)[r.chosen]
        sign = 1 if direction == "upper" else -1
        if any(sign * v >= 0 for _, v in biases):
            assert sign * b >= 0 and not r.fallback
            assert abs(b) == min(abs(v) for _, v in biases if sign * v >= 0)


def test_one_sided_qcl_tune_on_forests(reg_data):
    fits = fit_grid(reg_data, [(1, 1), (2, 25)], seed=0, n_trees=30)
    r = one_sided_qcl_tune(fits, reg_data, 0.9, "upper")
    if not r.fallback:
        assert r.coverage[r.chosen] >= 0.9
    with pytest.raises(ValueError):
        one_sided_qcl_tune(fits, reg_data, 0.9, "sideways")


# -- untuned QRF -------------------------------------------------------------------------


def test_default_params():
    assert default_params(make_regression(n=30, p=4)).theta == (2, 5)
    assert default_params(make_survival(n=60, p=10)).theta == (4, 15)


def test_default_qrf_interval(reg_data):
    m = default_qrf_interval(reg_data, 0.2, n_trees=40)
    assert m.calibration["theta"] == (2, 5)
    lo, hi = m.predict(np.random.default_rng(0).uniform(size=(200, 4)))
    assert np.all(lo <= hi)
    up = default_qrf_interval(reg_data, 0.2, forest=m.lower_forest, sidedness="upper")
    lo1, hi1 = up.predict(reg_data.covariates[:5])
    assert np.all(np.isneginf(lo1)) and np.all(np.isfinite(hi1))


# -- residual methods --------------------------------------------------------------------


def test_empirical_quantile_convention():
    assert empirical_quantile(np.arange(1, 11), 0.8) == 8
    assert empirical_quantile(np.arange(1, 11), 0.81) == 9
    assert empirical_quantile([5.0], 0.3) == 5.0
    with pytest.raises(ValueError):
        empirical_quantile([], 0.5)


def test_res_oob_symmetric(reg_forest, reg_data):
    m = res_oob_interval(reg_forest, reg_data, 0.2)
    r = reg_data.response - reg_forest.oob_mean_predictions()
    h = empirical_quantile(np.abs(r), 0.8)
    assert m.upper_offset == h and m.lower_offset == -h
    X = np.random.default_rng(1).uniform(size=(1000, 4))
    lo, hi = m.predict(X)
    np.testing.assert_allclose(hi - lo, 2 * h)


def test_res_oob_asymmetric(reg_forest, reg_data):
    m = res_oob_interval(reg_forest, reg_data, 0.2, symmetric=False)
    r = reg_data.response - reg_forest.oob_mean_predictions()
    assert m.lower_offset == empirical_quantile(r, 0.1) < 0
    assert m.upper_offset == empirical_quantile(r, 0.9) > 0
    up = res_oob_interval(reg_forest, reg_data, 0.2, sidedness="upper")
    assert up.lower_offset is None and up.upper_offset == empirical_quantile(r, 0.8)


def test_res_oob_zero_residuals():
    d = Dataset(np.random.default_rng(0).uniform(size=(20, 2)), np.full(20, 4.0), continuous_columns(2))
    f = fit_forest(d, ForestParams(1, 1, 30, seed=0))
    lo, hi = res_oob_interval(f, d, 0.2).predict(d.covariates)
    assert np.all(lo == 4.0) and np.all(hi == 4.0)


def test_res_oob_rejects_survival(surv_forest, surv_data):
    with pytest.raises(ValueError):
        res_oob_interval(surv_forest, surv_data, 0.2)


def test_conformal_quantile():
    assert conformal_quantile(np.full(9, 1.7), 0.2) == 1.7
    assert conformal_quantile(np.arange(1.0, 10.0), 0.2) == 8.0  # ceil(10 * 0.8) = 8
    assert conformal_quantile([1.0, 2.0, 3.0], 0.2) == np.inf


def test_res_sc_reproducible_and_half_split(reg_data):
    params = ForestParams(2, 5, 30, seed=1)
    a = res_sc_interval(reg_data, params, 0.2, split_seed=4)
    b = res_sc_interval(reg_data, params, 0.2, split_seed=4)
    assert a.calibration == b.calibration
    assert a.calibration["n_calibration"] == reg_data.n - reg_data.n // 2
    X = reg_data.covariates[:20]
    np.testing.assert_array_equal(a.predict(X)[0], b.predict(X)[0])
    c = res_sc_interval(reg_data, params, 0.2, split_seed=5)
    assert c.calibration["half_width"] != a.calibration["half_width"]


def test_res_sc_errors(surv_data):
    with pytest.raises(ValueError):
        res_sc_interval(surv_data, None, 0.2)
    with pytest.raises(ValueError):
        res_sc_interval(make_regression(n=3), None, 0.2)


def test_res_sc_marginal_coverage_monte_carlo():
    rng = np.random.default_rng(2024)
    hits = []
    params = ForestParams(1, 5, 15, seed=0)
    for rep in range(500):
        n = 40
        X = rng.uniform(size=(n + 10, 1))
        y = 2 * X[:, 0] + rng.normal(size=n + 10)
        d = Dataset(X[:n], y[:n], continuous_columns(1))
        m = res_sc_interval(d, params, 0.2, split_seed=rep)
        lo, hi = m.predict(X[n:])
        hits.append(np.mean((lo <= y[n:]) & (y[n:] <= hi)))
    assert np.mean(hits) >= 0.78


def test_interval_model_residual_predict_shapes(reg_forest):
    m = IntervalModel("res-oob", IntervalSpec(0.2), mean_forest=reg_forest, lower_offset=-1.0, upper_offset=2.0)
    lo, hi = m.predict(np.zeros(4))
    assert lo.shape == hi.shape == (1,)
    assert hi[0] - lo[0] == pytest.approx(3.0)


def test_res_oob_excludes_never_oob_rows():
    d = make_regression(n=50, p=2, seed=0)
    f = fit_forest(d, ForestParams(1, 5, 2, seed=0))
    never = f.never_oob()
    assert never.size > 0
    m = res_oob_interval(f, d, 0.2)
    assert m.calibration["n_residuals"] == d.n - never.size
    assert np.isfinite(m.upper_offset)
