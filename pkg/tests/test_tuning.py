import itertools

import numpy as np
import pytest

from qrftune.data import Dataset, ForestParams, StepCDF, continuous_columns
from qrftune.forest import NeverOOBError, fit_forest
from qrftune.intervals import default_params
from qrftune.quantile import quantiles
from qrftune.simgen import generate, get_flc
from qrftune.tuning import (
    CASE_I,
    CASE_II,
    CASE_III,
    CASE_IV,
    CoverageEstimate,
    GridFit,
    argbest,
    cindex_oob,
    coverage_ipcw,
    coverage_qclc,
    coverage_uncensored,
    default_grid,
    default_theta,
    fit_grid,
    grid_tune,
    harrell_cindex,
    indicator_coverage,
    ipcw_terms,
    kaplan_meier,
    km_censoring,
    mspe_oob,
    qcl_loss,
    qclc_case,
    qclc_contribution,
    qclc_contributions,
    tune_fitted,
)

from conftest import make_regression, make_survival

# -- QCL -----------------------------------------------------------------------------


@pytest.mark.parametrize("tau,hat,loss", [(0.1, 0.15, 0.05), (0.3, 0.3, 0.0), (0.9, 0.82, 0.08)])
def test_qcl_loss_arithmetic(tau, hat, loss):
    assert qcl_loss(CoverageEstimate(tau, hat, np.array([hat]), 1)) == pytest.approx(loss, abs=1e-15)


def test_indicator_coverage_examples():
    support = np.array([1.0, 2.0, 3.0])
    M = np.tile([0.2, 0.6, 1.0], (4, 1))  # median = 2 for every row
    est = indicator_coverage(M, support, np.array([1.0, 3.0, 2.5, 2.0]), 0.5)
    np.testing.assert_array_equal(est.per_obs, [1, 0, 0, 1])
    assert est.tau_tilde_hat == 0.5
    assert indicator_coverage(M, support, np.zeros(4), 0.5).tau_tilde_hat == 1.0


def test_coverage_uncensored_matches_external_recomputation():
    cfg = get_flc("1")
    train, _, _ = generate(cfg, seed=5)
    f = fit_forest(train, default_params(train, 0, 100))
    est = coverage_uncensored(f, train, 0.1)
    # recompute from exported per-row quantiles
    q = np.array([f.oob_cdf(i).support[np.argmax(f.oob_cdf(i).prob >= 0.1 - 1e-10)] for i in range(train.n)])
    assert est.tau_tilde_hat == np.mean(train.response <= q)
    assert est.n_used == train.n


def test_coverage_uncensored_needs_every_row_oob():
    d = make_regression(n=30, seed=1)
    f = fit_forest(d, ForestParams(1, 5, 2, seed=0))
    with pytest.raises(NeverOOBError):
        coverage_uncensored(f, d, 0.5)


# -- QCL-C --------------------------------------------------------------------------


def test_qclc_case_i():
    cdf = StepCDF([1.0, 2.0, 3.0], [0.2, 0.5, 0.9])
    assert qclc_case((1.5, 1), cdf, 0.5) == (1.0, CASE_I)
    assert qclc_case((2.5, 1), cdf, 0.5) == (0.0, CASE_I)


def test_qclc_case_ii_tail_formula():
    cdf = StepCDF([1.0, 2.0, 3.0], [0.2, 0.5, 0.95])  # q_0.9 = 3
    v, case = qclc_case((2.0, 0), cdf, 0.9)
    assert case == CASE_II
    assert v == pytest.approx(1 - 0.1 / 0.5)
    assert qclc_case((3.0, 0), cdf, 0.9) == (0.0, CASE_II)
    assert qclc_case((7.0, 0), cdf, 0.9) == (0.0, CASE_II)


def test_qclc_case_ii_clips_negative_tail_formula():
    cdf = StepCDF([1.0, 2.0, 3.0], [0.2, 0.5, 0.95])
    # F(y)=0.5 >= tau=0.3 would give 1 - 0.7/0.5 < 0
    v, case = qclc_case((2.5, 0), cdf, 0.3)
    assert (v, case) == (0.0, CASE_II)


def test_qclc_case_iii():
    cdf = StepCDF([1.0, 2.0], [0.3, 0.8])
    assert qclc_case((1.0, 1), cdf, 0.9) == (1.0, CASE_III)


def test_qclc_case_iv():
    cdf = StepCDF([1.0, 2.0, 5.0], [0.3, 0.8, 0.8])  # q_tau* = 2
    v, case = qclc_case((6.0, 0), cdf, 0.9)
    assert case == CASE_IV and v == pytest.approx(0.5)
    v, case = qclc_case((1.5, 0), cdf, 0.9)
    assert case == CASE_IV and v == pytest.approx(1 - 0.1 / 0.7)
    v, case = qclc_case((2.0, 0), cdf, 0.9)  # y == q_tau*: conditional-probability branch with F=0.8
    assert case == CASE_IV and v == pytest.approx(0.5)


def test_qclc_vectorized_matches_scalar():
    rng = np.random.default_rng(3)
    support = np.arange(1.0, 7.0)
    for _ in range(50):
        n = 20
        jumps = rng.dirichlet(np.ones(7), n)[:, :6] * rng.uniform(0.3, 1.0, (n, 1))
        M = np.cumsum(jumps, axis=1)
        M[rng.random(n) < 0.2] = 0.0
        y = rng.integers(0, 9, n) + rng.choice([0.0, 0.5], n)
        d = rng.integers(0, 2, n)
        tau = float(rng.choice([0.1, 0.3, 0.5, 0.9]))
        vals, cases = qclc_contributions(M, support, y, d, tau)
        for i in range(n):
            v, c = qclc_case((y[i], d[i]), StepCDF(support, M[i]), tau)
            assert cases[i] == c
            assert vals[i] == pytest.approx(v, abs=1e-12)
            assert qclc_contribution((y[i], d[i]), StepCDF(support, M[i]), tau) == v
        assert np.all((vals >= 0) & (vals <= 1))


def test_coverage_qclc_on_forest(surv_forest, surv_data, reg_forest, reg_data):
    est = coverage_qclc(surv_forest, surv_data, 0.5)
    assert 0.0 <= est.tau_tilde_hat <= 1.0
    assert est.tau_tilde_hat == pytest.approx(est.per_obs.mean())
    with pytest.raises(ValueError):
        coverage_qclc(reg_forest, reg_data, 0.5)


# -- Kaplan-Meier -------------------------------------------------------------------


def km_reference(times, events, t):
    s = 1.0
    for u in sorted(set(times)):
        if u > t:
            break
        d = sum(1 for a, e in zip(times, events) if a == u and e)
        r = sum(1 for a in times if a >= u)
        s *= 1 - d / r
    return s


def test_kaplan_meier_bruteforce_small_samples():
    vals = (1.0, 2.0, 3.0)
    checked = 0
    for n in range(1, 6):
        for times in itertools.product(vals, repeat=n):
            for events in itertools.product((0, 1), repeat=n):
                km = kaplan_meier(times, events)
                for t in (0.5, 1.0, 1.5, 2.0, 3.0, 4.0):
                    assert km(t) == pytest.approx(km_reference(times, events, t), abs=1e-12)
                checked += 1
    assert checked == sum(6 ** n for n in range(1, 6))


def test_km_censoring_examples():
    X = np.zeros((3, 1))
    d = Dataset(X, np.array([1.0, 2.0, 3.0]), continuous_columns(1), events=np.array([0, 1, 0]))
    G = km_censoring(d)
    assert G(0.5) == 1.0
    assert G(1.0) == pytest.approx(2 / 3)
    assert G(2.5) == pytest.approx(2 / 3)
    assert G(3.0) == 0.0


def test_km_censoring_no_censoring_is_flat():
    d = Dataset(np.zeros((3, 1)), np.array([1.0, 2.0, 3.0]), continuous_columns(1), events=np.ones(3, int))
    G = km_censoring(d)
    assert np.all(G(np.array([0.0, 1.0, 2.9, 3.0])) == 1.0)


def test_km_tie_convention_is_permutation_stable():
    rng = np.random.default_rng(0)
    t = np.array([1.0, 2.0, 2.0, 2.0, 3.0, 3.0])
    e = np.array([1, 1, 0, 1, 0, 1])
    base = kaplan_meier(t, e)
    for _ in range(20):
        p = rng.permutation(6)
        km = kaplan_meier(t[p], e[p])
        np.testing.assert_array_equal(km.times, base.times)
        np.testing.assert_array_equal(km.surv, base.surv)
    # risk set at t=2 holds every row with time >= 2 (5 rows), two events there
    assert base(2.0) == pytest.approx((5 / 6) * (3 / 5))


def test_km_censoring_requires_censored_data(reg_data):
    with pytest.raises(ValueError):
        km_censoring(reg_data)


# -- QCL-IPCW -------------------------------------------------------------------------


def test_ipcw_degenerates_without_censoring():
    d = make_survival(n=150, cens_scale=1e9, seed=2)
    assert d.events.all()
    f = fit_forest(d, ForestParams(2, 5, 60, seed=1))
    for tau in (0.1, 0.5, 0.9):
        M = f.oob_cdf_matrix()
        assert quantiles(M, f.support, tau)[1].all()
        ref = indicator_coverage(M, f.support, d.response, tau)
        got = coverage_ipcw(f, d, tau)
        assert got.tau_tilde_hat == ref.tau_tilde_hat
        np.testing.assert_array_equal(got.per_obs, ref.per_obs)


def test_ipcw_single_observation_weight_and_clip():
    support = np.array([1.0, 2.0])
    M = np.array([[0.5, 1.0]])
    G = kaplan_meier([0.5, 3.0], [1, 0])  # G(1) = 0.5
    terms, psi = ipcw_terms(M, support, np.array([1.0]), np.array([1]), 0.5, G)
    assert psi[0] and terms[0] == pytest.approx(2.0)
    assert min(1.0, terms.mean()) == 1.0


def test_ipcw_all_psi_zero():
    support = np.array([1.0, 2.0])
    M = np.array([[0.1, 0.3], [0.2, 0.4]])  # tau=0.5 undefined everywhere
    G = kaplan_meier([1.0, 2.0], [0, 0])
    terms, psi = ipcw_terms(M, support, np.array([1.0, 2.0]), np.array([1, 0]), 0.5, G)
    assert not psi.any() and terms.sum() == 0.0


def test_ipcw_censored_below_quantile_is_not_evaluable():
    support = np.array([1.0, 2.0, 3.0])
    M = np.array([[0.2, 0.6, 1.0]] * 3)  # q_0.5 = 2
    G = kaplan_meier([1.0, 5.0], [1, 1])
    _, psi = ipcw_terms(M, support, np.array([1.0, 2.5, 1.0]), np.array([0, 0, 1]), 0.5, G)
    np.testing.assert_array_equal(psi, [False, True, True])


def test_ipcw_zero_weight_floor():
    support = np.array([1.0, 2.0, 3.0])
    M = np.array([[0.2, 0.6, 1.0]] * 3)
    G = kaplan_meier([1.0, 2.0, 3.0], [0, 0, 0])  # G hits 0 at t=3
    terms, _ = ipcw_terms(M, support, np.array([3.0, 3.0, 1.0]), np.array([1, 1, 1]), 0.9, G)
    assert np.all(np.isfinite(terms))
    assert terms[0] == pytest.approx(1 / G.surv[G.surv > 0].min())


def test_coverage_ipcw_forest(surv_forest, surv_data):
    est = coverage_ipcw(surv_forest, surv_data, 0.5)
    assert 0 <= est.tau_tilde_hat <= 1
    assert est.tau_tilde_hat == pytest.approx(min(1.0, est.per_obs.mean()))


# -- conventional losses ---------------------------------------------------------------


def test_mspe_matches_external_recomputation(reg_forest, reg_data):
    pred = np.array([reg_forest.oob_mean_prediction(i) for i in range(reg_data.n)])
    assert mspe_oob(reg_forest, reg_data) == pytest.approx(np.mean((reg_data.response - pred) ** 2))


def test_mspe_perfect_fit_is_zero():
    d = Dataset(np.random.default_rng(0).uniform(size=(20, 2)), np.full(20, 1.0), continuous_columns(2))
    f = fit_forest(d, ForestParams(1, 1, 50, seed=0))
    assert mspe_oob(f, d) == 0.0


def test_cindex_examples():
    t = np.arange(1.0, 11.0)
    e = np.ones(10)
    assert harrell_cindex(t, e, -t) == 1.0
    assert harrell_cindex(t, e, t) == 0.0
    assert harrell_cindex(t, e, np.zeros(10)) == 0.5
    rng = np.random.default_rng(1)
    n = 2000
    assert abs(harrell_cindex(rng.exponential(size=n), rng.integers(0, 2, n), rng.normal(size=n)) - 0.5) < 0.05
    with pytest.raises(ValueError, match="comparable"):
        harrell_cindex([1.0, 2.0], [0, 0], [0.1, 0.2])


def test_cindex_comparable_pair_rules():
    # (1, event) vs (1, censored) is comparable; (1, event) vs (1, event) is not
    assert harrell_cindex([1.0, 1.0], [1, 0], [2.0, 1.0]) == 1.0
    with pytest.raises(ValueError):
        harrell_cindex([1.0, 1.0], [1, 1], [2.0, 1.0])
    # a censored row earlier than an event is not comparable
    assert harrell_cindex([1.0, 2.0, 3.0], [0, 1, 1], [9.0, 1.0, 0.0]) == 1.0


def test_cindex_oob_range(surv_forest, surv_data):
    c = cindex_oob(surv_forest, surv_data)
    assert 0.5 < c <= 1.0


# -- grid tuning ----------------------------------------------------------------------


def test_default_theta_and_grid():
    assert default_theta(4, False) == (2, 5)
    assert default_theta(10, False) == (4, 5)
    assert default_theta(10, True) == (4, 15)
    assert default_theta(4, True) == (2, 15)
    assert len(default_grid(4, False)) == 20
    assert len(default_grid(10, True)) == 40


def test_argbest_tie_break():
    assert argbest([((2, 1), 0.1), ((1, 5), 0.1), ((1, 1), 0.2)]) == ((1, 5), ((1, 5), (2, 1)))
    assert argbest([((1, 5), 0.3), ((1, 1), 0.3)], maximize=True)[0] == (1, 1)
    assert argbest([((1, 1), float("nan")), ((3, 3), 0.4)])[0] == (3, 3)
    with pytest.raises(ValueError):
        argbest([])


def test_single_point_grid(reg_data):
    res = grid_tune(reg_data, [(2, 5)], "qcl", 0.1, n_trees=30)
    assert res.chosen == (2, 5) and res.tau == 0.1


def test_grid_tune_argmin_and_determinism(reg_data):
    grid = [(m, s) for m in (1, 2, 4) for s in (1, 10)]
    a = grid_tune(reg_data, grid, "qcl", 0.1, seed=3, n_trees=40)
    b = grid_tune(reg_data, list(reversed(grid)), "qcl", 0.1, seed=3, n_trees=40)
    assert a.chosen == b.chosen
    assert dict(a.candidates) == dict(b.candidates)
    assert all(a.loss <= v for _, v in a.candidates)
    assert a.chosen in a.tied
    assert a.coverage[a.chosen] == pytest.approx(0.1 + (1 if a.coverage[a.chosen] > 0.1 else -1) * a.loss)


def test_one_fit_serves_every_tau(reg_data):
    fits = fit_grid(reg_data, [(1, 5), (2, 5)], seed=0, n_trees=30)
    r1 = tune_fitted(fits, reg_data, "qcl", 0.1)
    r9 = tune_fitted(fits, reg_data, "qcl", 0.9)
    for th, _ in r1.candidates:
        f = next(g.forest for g in fits if g.theta == th)
        assert r9.coverage[th] == coverage_uncensored(f, reg_data, 0.9).tau_tilde_hat


def test_cindex_tuning_maximizes(surv_data):
    res = grid_tune(surv_data, [(1, 3), (2, 8), (4, 15)], "cindex", n_trees=30)
    assert all(res.loss >= v for _, v in res.candidates)


def test_failed_fit_is_excluded(reg_data):
    res = grid_tune(reg_data, [(9, 5), (1, 5)], "qcl", 0.5, n_trees=20)
    assert res.chosen == (1, 5)
    assert (9, 5) in res.excluded


def test_loss_task_compatibility(reg_data, surv_data):
    with pytest.raises(ValueError):
        grid_tune(reg_data, [(1, 5)], "qcl-c", 0.1)
    with pytest.raises(ValueError):
        grid_tune(surv_data, [(1, 5)], "mspe")
    with pytest.raises(ValueError):
        grid_tune(reg_data, [(1, 5)], "qcl")
    with pytest.raises(ValueError):
        grid_tune(reg_data, [], "mspe")


def test_tuned_qcl_beats_default_on_flc1_replica():
    train, _, _ = generate(get_flc("1"), seed=0)
    fits = fit_grid(train, default_grid(train.p, False), seed=1, n_trees=100)
    res = tune_fitted(fits, train, "qcl", 0.1)
    assert res.loss <= dict(res.candidates)[default_theta(train.p, False)]
