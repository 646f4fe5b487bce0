"""Primal/dual agreement over random instances; prints the worst gap."""

import argparse
import time

from frpo_lab import dual


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--rho", type=float, default=None)
    args = ap.parse_args()

    t0 = time.perf_counter()
    worst = (0.0, None)
    for seed in range(args.n):
        inst = dual.random_instance(seed, args.rho)
        gap = dual.duality_gap(inst)
        if gap >= worst[0]:
            worst = (gap, seed)
    print(f"{args.n} instances in {time.perf_counter() - t0:.1f}s; max gap {worst[0]:.2e} (seed {worst[1]})")


if __name__ == "__main__":
    main()
