#!/usr/bin/env python3
"""Recompute a summary row from a trace CSV, independently of the C++ code.

usage: recompute_summary.py TRACE N ELL [--burn-in B] [--check SUMMARY]

Floating-point operations follow the same order as the library so the
result matches bit for bit. With --check the recomputed row is compared
against the first data row of SUMMARY and the exit status reports a match.
"""

import argparse
import csv
import math
import sys


def mean_of(x):
    s = 0.0
    for v in x:
        s += v
    return s / len(x)


def autocovariance(x, m, lag):
    s = 0.0
    for t in range(len(x) - lag):
        s += (x[t] - m) * (x[t + lag] - m)
    return s / len(x)


def acf(x, lag):
    m = mean_of(x)
    return autocovariance(x, m, lag) / autocovariance(x, m, 0)


def ess(x):
    n = len(x)
    m = mean_of(x)
    c0 = autocovariance(x, m, 0)
    pair_sum = 0.0
    k = 0
    while 2 * k + 1 < n:
        gamma = autocovariance(x, m, 2 * k) / c0 + autocovariance(x, m, 2 * k + 1) / c0
        if not gamma > 0.0:
            break
        pair_sum += gamma
        k += 1
    tau = max(-1.0 + 2.0 * pair_sum, 1.0 / n)
    return n / tau


def summarize(path, n, ell, burn_in):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    rows = [r for r in rows if int(r["iter"]) >= burn_in]
    if not rows:
        raise SystemExit("no rows after burn-in")
    thetas = sorted((k for k in rows[0] if k.startswith("theta_")), key=lambda k: int(k[6:]))
    outputs = loops = time = 0.0
    for r in rows:
        outputs += float(int(r["leaf_outputs"]))
        loops += float(int(r["leaf_loops"]))
        time += float(int(r["time_ns"]))
    count = len(rows)
    col = [float(r[thetas[-1]]) for r in rows]
    out = {
        "n": n,
        "ell": ell,
        "omega_hat": outputs / count,
        "phi_hat": loops / count,
        "acf1": math.nan,
        "acf4": math.nan,
        "acf16": math.nan,
        "ess": math.nan,
        "mean_time_ns": time / count,
    }
    if autocovariance(col, mean_of(col), 0) > 0.0:
        for lag in (1, 4, 16):
            if len(col) >= 10 * lag:
                out["acf%d" % lag] = acf(col, lag)
        out["ess"] = ess(col)
    return out


def same(a, b):
    return (math.isnan(a) and math.isnan(b)) or a == b


def main():
    p = argparse.ArgumentParser()
    p.add_argument("trace")
    p.add_argument("n", type=int)
    p.add_argument("ell", type=int)
    p.add_argument("--burn-in", type=int, default=0)
    p.add_argument("--check")
    a = p.parse_args()
    row = summarize(a.trace, a.n, a.ell, a.burn_in)
    print(",".join(row))
    print(",".join(repr(v) for v in row.values()))
    if a.check:
        with open(a.check, newline="") as f:
            emitted = next(csv.DictReader(f))
        bad = [k for k, v in row.items() if not same(float(v), float(emitted[k]))]
        if bad:
            for k in bad:
                print("mismatch %s: recomputed %r emitted %s" % (k, row[k], emitted[k]), file=sys.stderr)
            return 1
        print("match")
    return 0


if __name__ == "__main__":
    sys.exit(main())
