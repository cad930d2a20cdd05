"""Run a preset simulation suite and print per-FLC summaries.

    python3 scripts/run_suite.py uncensored --out-dir runs/unc
    python3 scripts/run_suite.py censored --reps 5 --trees 300
    python3 scripts/run_suite.py trend
    python3 scripts/run_suite.py custom --flcs 1,2,3 --taus 0.1,0.9
"""

import argparse
import logging

import numpy as np
import pandas as pd

from qrftune.harness import ExperimentSettings, plotdata, run_experiment, summarize

PRESETS = {
    "uncensored": dict(flcs=["1", "19", "37", "55"], taus=(0.1, 0.5), alpha=0.2, methods=None),
    "censored": dict(flcs=["c1", "c25"], taus=(0.1, 0.9), alpha=0.2, methods=None),
    "trend": dict(flcs=["40", "52"], taus=(0.1,), alpha=None, methods=("oracle", "qcl", "mspe")),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("preset", choices=list(PRESETS) + ["custom"])
    ap.add_argument("--flcs", help="comma list (custom preset)")
    ap.add_argument("--taus", default="0.1,0.5,0.9", help="comma list (custom preset)")
    ap.add_argument("--reps", type=int, default=10)
    ap.add_argument("--trees", type=int, default=500)
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out-dir", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    if args.preset == "custom":
        if not args.flcs:
            ap.error("--flcs is required for the custom preset")
        p = dict(flcs=args.flcs.split(","), taus=tuple(float(t) for t in args.taus.split(",")),
                 alpha=0.2, methods=None)
    else:
        p = PRESETS[args.preset]
    kw = dict(taus=p["taus"], alpha=p["alpha"], n_trees=args.trees, seed=args.seed)
    if p["methods"]:
        kw["methods"] = p["methods"]
    out = args.out_dir or f"runs/{args.preset}"
    frames = run_experiment(p["flcs"], args.reps, out, ExperimentSettings(**kw), threads=args.threads)

    m = frames["metrics"].copy()
    m["abs_bias"] = m.coverage_bias.abs()
    pd.set_option("display.width", 160)
    print("\nmean |coverage bias| by FLC, tau and method")
    print(m.pivot_table(index=["flc", "tau"], columns="method", values="abs_bias", aggfunc="mean").round(4))
    print("\nmean coverage bias with t-based 95% CI")
    print(summarize(m).round(4).to_string(index=False))
    if not frames["intervals"].empty:
        iv = frames["intervals"]
        print("\ninterval coverage and width")
        print(iv.groupby("method").agg(coverage=("coverage", "mean"), coverage_sd=("coverage", "std"),
                                       width=("mean_width", "mean"), width_sd=("mean_width", "std")).round(4))
    ch = frames["chosen"]
    print("\nmean chosen mtry at the first tau")
    first = ch[np.isclose(ch.tau, p["taus"][0])]
    print(first.pivot_table(index="flc", columns="method", values="mtry", aggfunc="mean").round(2))
    for path in plotdata(out):
        logging.info("wrote %s", path)


if __name__ == "__main__":
    main()
