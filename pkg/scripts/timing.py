"""Time one full-grid cell for a few FLCs (fits + tuning + metrics)."""

import argparse
import time

from qrftune.harness import ExperimentSettings, run_cell
from qrftune.simgen import get_flc


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--flcs", default="1,40,c1")
    ap.add_argument("--trees", type=int, default=500)
    args = ap.parse_args()
    s = ExperimentSettings(n_trees=args.trees)
    for label in args.flcs.split(","):
        t0 = time.perf_counter()
        run_cell(get_flc(label), 0, s)
        print(f"FLC {label}: {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
