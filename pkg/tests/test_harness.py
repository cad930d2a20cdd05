import filecmp

import numpy as np
import pandas as pd
import pytest

from qrftune.harness import (
    ExperimentSettings,
    cell_seeds,
    flc_key,
    mtry_trend_summary,
    plotdata,
    run_experiment,
    summarize,
)
from qrftune.metrics import oracle_score

FAST = ExperimentSettings(n_trees=20, grid_nodesizes=(5, 25))


def test_seeds():
    assert flc_key("37") == 37 and flc_key("c5") == 1005
    assert cell_seeds(0, "1", 0) == cell_seeds(0, "1", 0)
    assert len({cell_seeds(0, "1", r) for r in range(5)}) == 5
    assert cell_seeds(0, "1", 0) != cell_seeds(0, "c1", 0)


def test_settings_reject_unknown_method():
    with pytest.raises(ValueError):
        ExperimentSettings(methods=("qcl", "magic"))


def test_defaults_only_single_row():
    s = ExperimentSettings(taus=(0.1,), alpha=None, methods=("default",), n_trees=20, grid_nodesizes=(5,))
    frames = run_experiment(["1"], 1, settings=s)
    assert len(frames["metrics"]) == 1
    row = frames["metrics"].iloc[0]
    assert (row["method"], row["mtry"], row["nodesize"]) == ("default", 2, 5)
    assert frames["intervals"].empty and frames["errors"].empty


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    frames = run_experiment(["1", "c1"], 2, out, FAST)
    return out, frames


def test_report_contents(run_dir):
    out, frames = run_dir
    m = frames["metrics"]
    assert frames["errors"].empty
    assert set(m[m.flc == "1"].method) == {"qcl", "mspe", "default", "oracle"}
    assert set(m[m.flc == "c1"].method) == {"qcl-c", "qcl-ipcw", "cindex", "default", "oracle"}
    assert len(m) == 2 * 3 * 4 + 2 * 3 * 5
    iv = frames["intervals"]
    assert set(iv[iv.flc == "1"].method) == {"qcl-pair", "qrf-default", "res-oob", "res-sc"}
    assert iv["coverage"].between(0, 1).all()
    assert m["n_defined"].le(m["n_total"]).all()
    for name in ("metrics.csv", "chosen_params.csv", "intervals.csv", "grid.csv", "errors.csv"):
        assert (out / name).exists()


def test_oracle_dominates_every_method(run_dir):
    _, frames = run_dir
    m = frames["metrics"].dropna(subset=["coverage_bias"])
    for (_, _, _), g in m.groupby(["flc", "rep", "tau"]):
        oracle = abs(g[g.method == "oracle"].coverage_bias.iloc[0])
        assert (g.coverage_bias.abs() >= oracle).all()


def test_grid_rows_cover_grid(run_dir):
    _, frames = run_dir
    g = frames["grid"]
    one = g[(g.flc == "1") & (g.rep == 0) & (g.tau == 0.1)]
    assert len(one) == 4 * 2
    assert "oob_tau_hat_ipcw" in g.columns


def test_rerun_is_byte_identical(run_dir, tmp_path):
    out, _ = run_dir
    run_experiment(["1", "c1"], 2, tmp_path, FAST, resume=False)
    for name in ("metrics.csv", "chosen_params.csv", "intervals.csv", "grid.csv"):
        assert filecmp.cmp(out / name, tmp_path / name, shallow=False), name


def test_resume_uses_cached_cells(run_dir, monkeypatch):
    out, frames = run_dir
    import qrftune.harness as h

    def boom(*a, **k):
        raise AssertionError("cell recomputed")

    monkeypatch.setattr(h, "run_cell", boom)
    again = run_experiment(["1", "c1"], 2, out, FAST)
    pd.testing.assert_frame_equal(again["metrics"], frames["metrics"], check_dtype=False)


def test_resume_ignores_cells_from_other_settings(run_dir, tmp_path):
    out, _ = run_dir
    other = ExperimentSettings(n_trees=21, grid_nodesizes=(5, 25), taus=(0.5,), alpha=None,
                               methods=("default",))
    import shutil
    shutil.copytree(out / "cells", tmp_path / "cells")
    frames = run_experiment(["1"], 1, tmp_path, other)
    assert set(frames["metrics"].tau) == {0.5}


def test_failed_cell_is_reported(tmp_path, monkeypatch):
    import qrftune.harness as h

    def boom(cfg, rep, settings):
        raise RuntimeError("synthetic failure")

    monkeypatch.setattr(h, "run_cell", boom)
    frames = run_experiment(["1"], 2, tmp_path, FAST)
    assert len(frames["errors"]) == 2
    assert "synthetic failure" in frames["errors"].error.iloc[0]


def test_threads_match_serial(run_dir, tmp_path):
    out, frames = run_dir
    par = run_experiment(["1", "c1"], 2, tmp_path, FAST, threads=3, resume=False)
    pd.testing.assert_frame_equal(par["metrics"], frames["metrics"])


def test_plotdata(run_dir, tmp_path):
    out, _ = run_dir
    paths = plotdata(out, tmp_path)
    names = {p.name for p in paths}
    for expect in ("fig1_bias_by_flc_mspe_default.csv", "fig2_coverage_bias_by_method.csv",
                   "fig5_interval_coverage.csv", "fig6_censored_bias_mse_by_method.csv",
                   "fig8_mean_mtry.csv", "fig9_bias_vs_mtry.csv", "table_interval_summary.csv"):
        assert expect in names
    f8 = pd.read_csv(tmp_path / "fig8_mean_mtry.csv")
    assert {"method", "snr", "cov_type", "p", "mean_mtry", "cells"} <= set(f8.columns)


def test_mtry_trend_summary_examples():
    chosen = pd.DataFrame({
        "method": ["oracle"] * 4, "snr": ["high", "high", "low", "low"], "cov_type": ["continuous"] * 4,
        "p": [4] * 4, "mtry": [2, 2, 2, 2], "tau": [0.1] * 4,
    })
    t = mtry_trend_summary(chosen)
    assert (t.mean_mtry == 2).all()
    assert t.cells.sum() == len(chosen)


def test_summarize_t_interval():
    df = pd.DataFrame({"flc": ["1"] * 3, "method": ["qcl"] * 3, "tau": [0.1] * 3,
                       "coverage_bias": [0.0, 0.01, -0.01]})
    s = summarize(df)
    assert s["mean"].iloc[0] == pytest.approx(0.0)
    assert s.ci_low.iloc[0] < 0 < s.ci_high.iloc[0]
    assert s.reps.iloc[0] == 3
