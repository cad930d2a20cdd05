"""Print achieved R^2 and censoring proportions for every built-in setting."""

import argparse

import pandas as pd

from qrftune.simgen import builtin_flc_table, calibrate_censoring, censoring_proportion, implied_r2


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--draws", type=int, default=10**6)
    ap.add_argument("--out", help="optional CSV path")
    args = ap.parse_args()
    rows = []
    seen = set()
    for c in builtin_flc_table():
        key = (c.family, c.cov_type, c.signal, c.p, c.snr, c.censoring)
        if key in seen:
            continue
        seen.add(key)
        r2 = implied_r2(c, draws=args.draws)
        row = dict(label=c.label, family=c.family, cov_type=c.cov_type, signal=c.signal, p=c.p, snr=c.snr,
                   r2=r2, r2_target=c.r2_target, beta_scale=c.beta_scale)
        if c.censored:
            rate = calibrate_censoring(c)
            row |= dict(censoring_target=c.censoring, rate=rate, censoring=censoring_proportion(c, rate))
        rows.append(row)
    df = pd.DataFrame(rows)
    pd.set_option("display.width", 160)
    print(df.round(4).to_string(index=False))
    print(f"\nmax |R^2 - target| = {(df.r2 - df.r2_target).abs().max():.4f}")
    cens = df.dropna(subset=["rate"]) if "rate" in df else df.iloc[:0]
    if len(cens):
        print(f"max |censoring - target| = {(cens.censoring - cens.censoring_target).abs().max():.4f}")
    if args.out:
        df.to_csv(args.out, index=False)


if __name__ == "__main__":
    main()
