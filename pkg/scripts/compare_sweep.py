#!/usr/bin/env python3
"""Sweep seeds of the planted-outlier benchmark and tabulate output-change MSE per method.

Example:
    python3 scripts/compare_sweep.py --kind post_ln_ffn --residual --seeds 20
"""
import argparse

import numpy as np

from osplus.benchmark import CANONICAL_SEED, make_benchmark
from osplus.blocks import KINDS
from osplus.methods import METHODS, run_method
from osplus.quantizer import activation_spec, weight_spec


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--kind", choices=KINDS, default="linear_chain")
    p.add_argument("--residual", action="store_true")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--first-seed", type=int, default=CANONICAL_SEED)
    p.add_argument("--bits", type=int, choices=(4, 6, 8), default=6)
    p.add_argument("--methods", default=",".join(METHODS))
    args = p.parse_args()

    methods = sorted(args.methods.split(","))
    act, wgt = activation_spec(args.bits, "tensor"), weight_spec(args.bits, "channel")
    errs = {m: [] for m in methods}
    for seed in range(args.first_seed, args.first_seed + args.seeds):
        bm = make_benchmark(seed, args.kind, residual=args.residual)
        for m in methods:
            errs[m].append(run_method(m, bm.block, bm.x_calib, act, wgt).output_change_mse)

    best = np.argmin(np.array([errs[m] for m in methods]), axis=0)
    print(f"{args.kind} residual={args.residual} bits={args.bits} seeds={args.seeds}")
    print(f"{'method':<20}{'median':>14}{'mean':>14}{'best on':>10}")
    for i, m in enumerate(methods):
        e = np.array(errs[m])
        print(f"{m:<20}{np.median(e):>14.5g}{e.mean():>14.5g}{int(np.sum(best == i)):>10}")
    if "osplus" in errs:
        ours = np.array(errs["osplus"])
        for m in methods:
            if m != "osplus":
                print(f"osplus < {m}: {int(np.sum(ours < np.array(errs[m])))}/{args.seeds}")


if __name__ == "__main__":
    main()
