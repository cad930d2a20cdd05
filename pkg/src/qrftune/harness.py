"""Simulation workflow: generate -> grid fits -> tuning -> metrics -> CSV reports.

Each (FLC, replicate) cell is computed independently from its own seed and
cached as JSON under ``out_dir/cells`` so interrupted runs can resume.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .data import ForestParams
from .forest import fit_forest, theta_seed
from .intervals import (
    qcl_pair_interval,
    res_oob_interval,
    res_sc_interval,
)
from .metrics import (
    MetricsError,
    interval_metrics,
    oracle_select,
    quantile_metrics,
    t_interval,
)
from .quantile import quantiles
from .simgen import FLCConfig, generate, get_flc, truth_for
from .tuning import (
    coverage_estimate,
    default_grid,
    default_theta,
    fit_grid,
    tune_fitted,
)

log = logging.getLogger(__name__)

UNCENSORED_METHODS = ("qcl", "mspe", "default", "oracle")
CENSORED_METHODS = ("qcl-c", "qcl-ipcw", "cindex", "default", "oracle")
UNCENSORED_INTERVALS = ("qcl-pair", "qrf-default", "res-oob", "res-sc")
CENSORED_INTERVALS = ("qcl-pair", "qcl-pair-ipcw", "qrf-default")
ALL_METHODS = tuple(dict.fromkeys(
    UNCENSORED_METHODS + CENSORED_METHODS + UNCENSORED_INTERVALS + CENSORED_INTERVALS))
CELL_VERSION = 1


@dataclass(frozen=True)
class ExperimentSettings:
    taus: tuple[float, ...] = (0.1, 0.5, 0.9)
    alpha: float | None = 0.2
    methods: tuple[str, ...] = ALL_METHODS
    n_trees: int = 500
    seed: int = 0
    grid_nodesizes: tuple[int, ...] | None = None

    def __post_init__(self):
        bad = set(self.methods) - set(ALL_METHODS)
        if bad:
            raise ValueError(f"unknown methods: {sorted(bad)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["taus"] = list(self.taus)
        d["methods"] = list(self.methods)
        d["grid_nodesizes"] = None if self.grid_nodesizes is None else list(self.grid_nodesizes)
        return d


@dataclass
class CellResult:
    flc: str
    rep: int
    metrics: list = field(default_factory=list)
    chosen: list = field(default_factory=list)
    intervals: list = field(default_factory=list)
    grid: list = field(default_factory=list)
    seconds: float = 0.0


def flc_key(label: str) -> int:
    """Integer used in seeding: 1..108 uncensored, 1001.. censored."""
    s = str(label).lower()
    return 1000 + int(s[1:]) if s.startswith("c") else int(s)


def cell_seeds(seed: int, label: str, rep: int) -> tuple[int, int, int]:
    """(data, forest, split) seeds for one cell."""
    ss = np.random.SeedSequence([int(seed), flc_key(label), int(rep)])
    return tuple(int(v) for v in ss.generate_state(3, np.uint32))


def _config_cols(cfg: FLCConfig) -> dict:
    return {"flc": cfg.label, "n": cfg.n, "p": cfg.p, "cov_type": cfg.cov_type, "snr": cfg.snr,
            "signal": cfg.signal, "censoring": cfg.censoring}


def _grid_for(cfg: FLCConfig, settings: ExperimentSettings):
    if settings.grid_nodesizes is None:
        return default_grid(cfg.p, cfg.censored)
    return [(m, s) for m in range(1, cfg.p + 1) for s in settings.grid_nodesizes]


def _oob_coverage(forest, train, loss, tau) -> float:
    # NaN when some training row is never out of bag
    try:
        return coverage_estimate(forest, train, loss, tau).tau_tilde_hat
    except (ValueError, RuntimeError):
        return np.nan


def run_cell(cfg: FLCConfig, rep: int, settings: ExperimentSettings) -> CellResult:
    t0 = time.perf_counter()
    data_seed, forest_seed, split_seed = cell_seeds(settings.seed, cfg.label, rep)
    train, test, truth = generate(cfg, data_seed)
    train_truth = truth_for(cfg, train.covariates)
    grid = _grid_for(cfg, settings)
    fits = fit_grid(train, grid, seed=forest_seed, n_trees=settings.n_trees)
    fitted = {f.theta: f.forest for f in fits if f.forest is not None}
    dflt = default_theta(cfg.p, cfg.censored)
    if dflt not in fitted:
        params = ForestParams(*dflt, settings.n_trees, theta_seed(forest_seed, *dflt))
        fitted[dflt] = fit_forest(train, params)
    test_cdf = {th: f.predict_cdf_matrix(test.covariates) for th, f in fitted.items()}
    base = _config_cols(cfg) | {"rep": rep}
    res = CellResult(cfg.label, rep)
    wanted = set(settings.methods)
    qmethods = [m for m in (CENSORED_METHODS if cfg.censored else UNCENSORED_METHODS) if m in wanted]
    own_loss = "qcl-c" if cfg.censored else "qcl"

    def test_q(th, tau):
        return quantiles(test_cdf[th], fitted[th].support, tau)[0]

    conventional = None
    if "mspe" in qmethods or "cindex" in qmethods:
        conventional = tune_fitted(fits, train, "cindex" if cfg.censored else "mspe")

    for tau in settings.taus:
        est = {th: test_q(th, tau) for th in sorted(fitted)}
        oracle_th, table = oracle_select(est, truth, tau)
        oob_hat = {}
        for th in sorted(fitted):
            oob_hat[th] = _oob_coverage(fitted[th], train, own_loss, tau)
            m = table.get(th)
            row = base | {"tau": tau, "mtry": th[0], "nodesize": th[1], "oob_tau_hat": oob_hat[th]}
            if cfg.censored:
                row["oob_tau_hat_ipcw"] = _oob_coverage(fitted[th], train, "qcl-ipcw", tau)
            row |= ({"test_coverage_bias": m.coverage_bias, "test_coverage_mse": m.coverage_mse,
                     "n_defined": m.n_defined} if m else
                    {"test_coverage_bias": np.nan, "test_coverage_mse": np.nan, "n_defined": 0})
            res.grid.append(row)
        for method in qmethods:
            tied = ()
            if method in ("qcl", "qcl-c", "qcl-ipcw"):
                tr = tune_fitted(fits, train, method, tau)
                th, loss, tied = tr.chosen, tr.loss, tr.tied
            elif method in ("mspe", "cindex"):
                th, loss, tied = conventional.chosen, conventional.loss, conventional.tied
            elif method == "default":
                th, loss = dflt, np.nan
            else:
                th, loss = oracle_th, abs(table[oracle_th].coverage_bias)
            res.chosen.append(base | {"method": method, "tau": tau, "mtry": th[0], "nodesize": th[1],
                                      "loss": loss, "n_tied": len(tied)})
            row = base | {"method": method, "tau": tau, "mtry": th[0], "nodesize": th[1]}
            try:
                row |= quantile_metrics(est[th], truth, tau).as_dict()
            except MetricsError:
                row |= {"coverage_bias": np.nan, "coverage_mse": np.nan, "quantile_bias": np.nan,
                        "quantile_mse": np.nan, "n_defined": 0, "n_total": test.n}
            # training-set view: OOB coverage estimate and true coverage of the OOB quantiles
            f = fitted[th]
            if method == "qcl-ipcw":
                row["train_tau_hat"] = tr.coverage[th]
            else:
                row["train_tau_hat"] = oob_hat[th]
            q_oob = quantiles(f.oob_cdf_matrix(), f.support, tau)[0]
            ok = ~np.isnan(q_oob)
            row["train_true_coverage"] = (
                float(train_truth.cdf(q_oob[ok], np.flatnonzero(ok)).mean()) if ok.any() else np.nan)
            res.metrics.append(row)

    if settings.alpha is not None:
        alpha = settings.alpha
        imethods = [m for m in (CENSORED_INTERVALS if cfg.censored else UNCENSORED_INTERVALS)
                    if m in wanted]
        fit_list = [f for f in fits if f.forest is not None]
        for method in imethods:
            lo_th = hi_th = None
            try:
                if method in ("qcl-pair", "qcl-pair-ipcw"):
                    est_name = "qcl-ipcw" if method == "qcl-pair-ipcw" else None
                    model = qcl_pair_interval(fit_list, fit_list, train, alpha, estimator=est_name)
                    lo_th, hi_th = model.lower_theta[:2], model.upper_theta[:2]
                    lo, hi = test_q(lo_th, alpha / 2), test_q(hi_th, 1 - alpha / 2)
                elif method == "qrf-default":
                    lo_th = hi_th = dflt
                    lo, hi = test_q(dflt, alpha / 2), test_q(dflt, 1 - alpha / 2)
                elif method == "res-oob":
                    lo_th = hi_th = dflt
                    model = res_oob_interval(fitted[dflt], train, alpha)
                    lo, hi = model.predict(test.covariates)
                else:
                    params = ForestParams(*dflt, settings.n_trees, theta_seed(split_seed, *dflt))
                    model = res_sc_interval(train, params, alpha, split_seed)
                    lo_th = hi_th = dflt
                    lo, hi = model.predict(test.covariates)
                im = interval_metrics(lo, hi, truth).as_dict()
            except (MetricsError, ValueError) as exc:
                log.warning("interval %s failed on FLC %s rep %d: %s", method, cfg.label, rep, exc)
                im = {"coverage": np.nan, "mean_width": np.nan, "median_width": np.nan,
                      "sd_width": np.nan, "n_defined": 0, "n_total": test.n}
            res.intervals.append(base | {
                "method": method, "alpha": alpha,
                "lower_mtry": lo_th[0] if lo_th else None, "lower_nodesize": lo_th[1] if lo_th else None,
                "upper_mtry": hi_th[0] if hi_th else None, "upper_nodesize": hi_th[1] if hi_th else None,
            } | im)
    res.seconds = time.perf_counter() - t0
    return res


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        return None if np.isnan(v) else float(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


def _cell_path(out_dir: Path, label: str, rep: int) -> Path:
    return out_dir / "cells" / f"flc{label}_r{rep}.json"


def _save_cell(path: Path, res: CellResult, settings: ExperimentSettings):
    blob = {"version": CELL_VERSION, "settings": settings.to_dict(), "flc": res.flc, "rep": res.rep,
            "seconds": res.seconds}
    for part in ("metrics", "chosen", "intervals", "grid"):
        blob[part] = [{k: _jsonable(v) for k, v in r.items()} for r in getattr(res, part)]
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(blob))
    tmp.replace(path)


def _load_cell(path: Path, settings: ExperimentSettings) -> CellResult | None:
    try:
        blob = json.loads(path.read_text())
    except (OSError, ValueError):
        return None
    if blob.get("version") != CELL_VERSION or blob.get("settings") != settings.to_dict():
        return None
    return CellResult(blob["flc"], blob["rep"], blob["metrics"], blob["chosen"], blob["intervals"],
                      blob["grid"], blob["seconds"])


def _resolve(flcs) -> list[FLCConfig]:
    return [f if isinstance(f, FLCConfig) else get_flc(f) for f in flcs]


def run_experiment(flcs: Sequence, replicates: int, out_dir=None, settings: ExperimentSettings | None = None,
                   threads: int = 1, resume: bool = True) -> dict[str, pd.DataFrame]:
    """Run every (FLC, replicate) cell and return the report tables.

    When ``out_dir`` is given the tables are also written as
    metrics.csv, chosen_params.csv, intervals.csv, grid.csv and errors.csv.
    Cell failures are logged and recorded in the errors table.
    """
    settings = settings or ExperimentSettings()
    configs = _resolve(flcs)
    out = Path(out_dir) if out_dir is not None else None
    cells = [(cfg, r) for cfg in configs for r in range(replicates)]

    def work(item):
        cfg, rep = item
        path = _cell_path(out, cfg.label, rep) if out is not None else None
        if path is not None and resume and path.exists():
            cached = _load_cell(path, settings)
            if cached is not None:
                return cached, None
        try:
            res = run_cell(cfg, rep, settings)
        except Exception as exc:  # keep going; the failure is reported
            log.exception("cell FLC %s rep %d failed", cfg.label, rep)
            return None, {"flc": cfg.label, "rep": rep, "error": f"{type(exc).__name__}: {exc}"}
        if path is not None:
            _save_cell(path, res, settings)
        log.info("FLC %s rep %d done in %.1fs", cfg.label, rep, res.seconds)
        return res, None

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(work, cells))
    else:
        results = [work(c) for c in cells]

    tables = {k: [] for k in ("metrics", "chosen", "intervals", "grid")}
    errors = []
    for res, err in results:
        if err is not None:
            errors.append(err)
            continue
        for k in tables:
            tables[k].extend(getattr(res, k))
    frames = {k: pd.DataFrame(v) for k, v in tables.items()}
    frames["errors"] = pd.DataFrame(errors, columns=["flc", "rep", "error"])
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        names = {"metrics": "metrics.csv", "chosen": "chosen_params.csv", "intervals": "intervals.csv",
                 "grid": "grid.csv", "errors": "errors.csv"}
        for k, name in names.items():
            frames[k].to_csv(out / name, index=False)
    return frames


# -- summaries ------------------------------------------------------------------------------


def summarize(metrics: pd.DataFrame, value: str = "coverage_bias",
              by: Sequence[str] = ("flc", "method", "tau")) -> pd.DataFrame:
    """Mean over replicates with a t-based 95% interval."""
    rows = []
    for key, g in metrics.groupby(list(by), sort=False):
        m, lo, hi = t_interval(g[value].to_numpy(float))
        rows.append(dict(zip(by, key)) | {"mean": m, "ci_low": lo, "ci_high": hi, "reps": len(g)})
    return pd.DataFrame(rows)


def mtry_trend_summary(chosen: pd.DataFrame, tau: float | None = 0.1) -> pd.DataFrame:
    """Mean chosen mtry by (method, SNR, covariate type, p)."""
    df = chosen if tau is None else chosen[np.isclose(chosen["tau"], tau)]
    g = df.groupby(["method", "snr", "cov_type", "p"], sort=True)["mtry"]
    return g.agg(mean_mtry="mean", cells="size").reset_index()


def _flc_order(labels) -> list:
    return sorted(set(labels), key=flc_key)


def plotdata(out_dir, dest=None) -> list[Path]:
    """Write per-figure CSVs from the report tables in ``out_dir``."""
    src = Path(out_dir)
    dest = Path(dest) if dest is not None else src / "plotdata"
    dest.mkdir(parents=True, exist_ok=True)
    metrics = pd.read_csv(src / "metrics.csv", dtype={"flc": str})
    chosen = pd.read_csv(src / "chosen_params.csv", dtype={"flc": str})
    intervals = pd.read_csv(src / "intervals.csv", dtype={"flc": str})
    grid = pd.read_csv(src / "grid.csv", dtype={"flc": str})
    written = []

    def emit(name, df):
        path = dest / name
        df.to_csv(path, index=False)
        written.append(path)

    unc = metrics[metrics["censoring"] == 0]
    cen = metrics[metrics["censoring"] > 0]

    # 1: MSPE and default bias per FLC at tau=0.1, ordered by MSPE (descending, stable)
    if not unc.empty:
        s = summarize(unc[np.isclose(unc["tau"], 0.1) & unc["method"].isin(["mspe", "default"])])
        if not s.empty:
            order = (s[s["method"] == "mspe"].sort_values("mean", ascending=False, kind="stable")["flc"]
                     .tolist())
            s["order"] = s["flc"].map({f: i for i, f in enumerate(order)})
            emit("fig1_bias_by_flc_mspe_default.csv", s.sort_values(["order", "method"], kind="stable"))
        # 2, 3: per-FLC means by method and tau (distributions across FLCs)
        emit("fig2_coverage_bias_by_method.csv", summarize(unc))
        emit("fig3_coverage_mse_by_method.csv", summarize(unc, "coverage_mse"))
        # 4: bias by FLC for each method at tau=0.1
        s4 = summarize(unc[np.isclose(unc["tau"], 0.1)])
        s4["flc_rank"] = s4["flc"].map({f: i for i, f in enumerate(_flc_order(s4["flc"]))})
        emit("fig4_bias_by_flc.csv", s4.sort_values(["flc_rank", "method"], kind="stable"))
    # 5: interval coverage rates per FLC and method, split by censoring
    if not intervals.empty:
        emit("fig5_interval_coverage.csv",
             summarize(intervals, "coverage", by=("censoring", "flc", "method")))
        emit("table_interval_summary.csv",
             intervals.groupby(["censoring", "method"], sort=True)
             .agg(coverage_mean=("coverage", "mean"), coverage_sd=("coverage", "std"),
                  width_mean=("mean_width", "mean"), width_sd=("mean_width", "std"))
             .reset_index())
    if not cen.empty:
        emit("fig6_censored_bias_mse_by_method.csv",
             summarize(cen, by=("censoring", "flc", "method", "tau"))
             .merge(summarize(cen, "coverage_mse", by=("censoring", "flc", "method", "tau")),
                    on=["censoring", "flc", "method", "tau"], suffixes=("_bias", "_mse")))
        emit("fig7_censored_bias_by_flc.csv",
             summarize(cen, by=("censoring", "flc", "method", "tau")))
    # 8: mean chosen mtry at tau=0.1
    emit("fig8_mean_mtry.csv", mtry_trend_summary(chosen))
    # 9: test bias against mtry for each nodesize at tau=0.1, plus the QCL choice
    g9 = grid[np.isclose(grid["tau"], 0.1)]
    s9 = (g9.groupby(["flc", "mtry", "nodesize"], sort=True)
          .agg(test_coverage_bias=("test_coverage_bias", "mean"), oob_tau_hat=("oob_tau_hat", "mean"))
          .reset_index())
    emit("fig9_bias_vs_mtry.csv", s9)
    return written
