"""Command-line entry point: ``qrftune <command> ...``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import DataError, ForestParams, read_covariates_csv, read_csv, write_schema
from .forest import Forest, fit_forest
from .harness import ALL_METHODS, ExperimentSettings, plotdata, run_experiment
from .intervals import (
    IntervalModel,
    IntervalSpec,
    default_params,
    default_qrf_interval,
    one_sided_qcl_tune,
    qcl_pair_interval,
    res_oob_interval,
    res_sc_interval,
)
from .quantile import quantiles
from .simgen import FLCConfig, generate, get_flc
from .tuning import LOSSES, NODESIZES_CENSORED, NODESIZES_UNCENSORED, fit_grid, tune_fitted

log = logging.getLogger("qrftune")


def _int_list(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v.strip()]


def _float_list(s: str) -> list[float]:
    return [float(v) for v in s.split(",") if v.strip()]


def _grid(p: int, censored: bool, nodesizes):
    sizes = nodesizes or (NODESIZES_CENSORED if censored else NODESIZES_UNCENSORED)
    return [(m, s) for m in range(1, p + 1) for s in sizes]


@contextlib.contextmanager
def _csv_out(path):
    if path is None:
        yield csv.writer(sys.stdout)
        return
    with open(path, "w", newline="") as fh:
        yield csv.writer(fh)


def _fmt(v) -> str:
    return "NA" if v is None or not np.isfinite(v) else repr(float(v))


def cmd_fit(args) -> int:
    data = read_csv(args.data, args.schema)
    params = ForestParams(args.mtry, args.nodesize, args.trees, args.seed)
    params.check(data.p)
    forest = fit_forest(data, params, n_jobs=args.threads)
    forest.save(args.out)
    log.info("saved %s forest with %d trees to %s", forest.task, forest.n_trees, args.out)
    return 0


def cmd_quantile(args) -> int:
    forest = Forest.load(args.forest)
    X = read_covariates_csv(args.data, forest.columns)
    cdf = forest.predict_cdf_matrix(X)
    with _csv_out(args.out) as w:
        w.writerow(["row", "tau", "value", "tau_star"])
        for tau in args.tau:
            vals, _, ts = quantiles(cdf, forest.support, tau)
            for i in range(X.shape[0]):
                w.writerow([i, tau, _fmt(vals[i]), repr(float(ts[i]))])
    return 0


def cmd_tune(args) -> int:
    data = read_csv(args.data, args.schema)
    grid = _grid(data.p, data.censored, args.grid_nodesize)
    fits = fit_grid(data, grid, seed=args.seed, n_trees=args.trees, n_jobs=args.threads)
    res = tune_fitted(fits, data, args.loss, args.tau)
    with _csv_out(args.out) as w:
        w.writerow(["mtry", "nodesize", "loss", "chosen"])
        for th, v in res.candidates:
            w.writerow([th[0], th[1], repr(float(v)), int(th == res.chosen)])
        for th, err in res.excluded.items():
            w.writerow([th[0], th[1], "NA", 0])
            log.warning("theta %s excluded: %s", th, err)
    return 0


def _interval_model(args, data) -> IntervalModel:
    spec = IntervalSpec(args.alpha, args.sided)
    if args.method == "qrf-default":
        return default_qrf_interval(data, args.alpha, seed=args.seed, n_trees=args.trees, sidedness=args.sided)
    if args.method == "res-oob":
        forest = fit_forest(data, default_params(data, args.seed, args.trees))
        return res_oob_interval(forest, data, args.alpha, sidedness=args.sided)
    if args.method == "res-sc":
        if args.sided != "two":
            raise ValueError("res-sc intervals are two-sided")
        params = default_params(data, args.seed, args.trees)
        return res_sc_interval(data, params, args.alpha, args.seed)
    fits = fit_grid(data, _grid(data.p, data.censored, None), seed=args.seed, n_trees=args.trees,
                    n_jobs=args.threads)
    if args.sided == "two":
        return qcl_pair_interval(fits, fits, data, args.alpha)
    lo_tau, hi_tau = spec.taus
    tau = hi_tau if args.sided == "upper" else lo_tau
    tr = one_sided_qcl_tune(fits, data, tau, args.sided)
    forest = next(f.forest for f in fits if f.theta == tr.chosen)
    if args.sided == "upper":
        return IntervalModel("qcl", spec, upper_forest=forest, upper_tau=tau)
    return IntervalModel("qcl", spec, lower_forest=forest, lower_tau=tau)


def cmd_interval(args) -> int:
    data = read_csv(args.data, args.schema)
    model = _interval_model(args, data)
    X = read_covariates_csv(args.test, data.columns) if args.test else data.covariates
    lo, hi = model.predict(X)
    with _csv_out(args.out) as w:
        w.writerow(["row", "lower", "upper", "width"])
        for i in range(X.shape[0]):
            width = hi[i] - lo[i] if np.isfinite(lo[i]) and np.isfinite(hi[i]) else np.nan
            w.writerow([i, "-Inf" if np.isneginf(lo[i]) else _fmt(lo[i]),
                        "Inf" if np.isposinf(hi[i]) else _fmt(hi[i]), _fmt(width)])
    return 0


def _load_flc(token: str) -> FLCConfig:
    p = Path(token)
    if p.suffix == ".json" and p.exists():
        return FLCConfig.from_dict(json.loads(p.read_text()))
    return get_flc(token)


def cmd_simulate(args) -> int:
    cfg = _load_flc(args.flc)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_schema(out / "schema.json", cfg.columns)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    for r in range(args.replicates):
        seed = int(np.random.SeedSequence([args.seed, r]).generate_state(1)[0])
        train, test, truth = generate(cfg, seed)
        train.to_csv(out / f"train_{r}.csv")
        test.to_csv(out / f"test_{r}.csv")
        (out / f"truth_{r}.json").write_text(json.dumps(truth.to_dict()))
    log.info("wrote %d replicate(s) of FLC %s to %s", args.replicates, cfg.label, out)
    return 0


def cmd_experiment(args) -> int:
    settings = ExperimentSettings(
        taus=tuple(args.taus), alpha=args.alpha, methods=tuple(args.methods or ALL_METHODS),
        n_trees=args.trees, seed=args.seed,
        grid_nodesizes=tuple(args.grid_nodesize) if args.grid_nodesize else None,
    )
    frames = run_experiment(args.flc_list, args.replicates, args.out_dir, settings, threads=args.threads,
                            resume=not args.no_resume)
    n_err = len(frames["errors"])
    log.info("finished: %d metric rows, %d failed cells", len(frames["metrics"]), n_err)
    return 1 if n_err else 0


def cmd_plotdata(args) -> int:
    for p in plotdata(args.out_dir, args.dest):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qrftune", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit one forest and save it")
    p.add_argument("--data", required=True)
    p.add_argument("--schema")
    p.add_argument("--mtry", type=int, required=True)
    p.add_argument("--nodesize", type=int, required=True)
    p.add_argument("--trees", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("quantile", help="conditional quantiles from a saved forest")
    p.add_argument("--forest", required=True)
    p.add_argument("--data", required=True, help="CSV of covariates")
    p.add_argument("--tau", type=_float_list, required=True, help="comma list")
    p.add_argument("--out")
    p.set_defaults(func=cmd_quantile)

    p = sub.add_parser("tune", help="grid-tune (mtry, nodesize)")
    p.add_argument("--data", required=True)
    p.add_argument("--schema")
    p.add_argument("--loss", choices=LOSSES, required=True)
    p.add_argument("--tau", type=float)
    p.add_argument("--grid-nodesize", type=_int_list)
    p.add_argument("--trees", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("interval", help="prediction intervals")
    p.add_argument("--method", choices=("qcl", "qrf-default", "res-oob", "res-sc"), required=True)
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--sided", choices=("two", "upper", "lower"), default="two")
    p.add_argument("--data", required=True)
    p.add_argument("--schema")
    p.add_argument("--test", help="CSV of covariates (default: training rows)")
    p.add_argument("--trees", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_interval)

    p = sub.add_parser("simulate", help="write simulated train/test data for one FLC")
    p.add_argument("--flc", required=True, help="FLC label (e.g. 37, c5) or config JSON")
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("experiment", help="run the simulation workflow")
    p.add_argument("--flc-list", type=lambda s: [v.strip() for v in s.split(",") if v.strip()], required=True)
    p.add_argument("--replicates", type=int, default=10)
    p.add_argument("--methods", type=lambda s: [v.strip() for v in s.split(",") if v.strip()])
    p.add_argument("--taus", type=_float_list, default=[0.1, 0.5, 0.9])
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--trees", type=int, default=500)
    p.add_argument("--grid-nodesize", type=_int_list)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-resume", action="store_true")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("plotdata", help="per-figure CSVs from an experiment directory")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--dest")
    p.set_defaults(func=cmd_plotdata)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DataError, ValueError, KeyError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
