"""Jackknife bias study at one lambda, with the fitted log-log slopes."""

import argparse

from frpo_lab.lab import bias_sweep, committed_bias_instance


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--lam", type=float, default=0.3)
    ap.add_argument("--n-mc", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    policy, reward, prompt = committed_bias_instance()
    rep = bias_sweep(policy, reward, args.lam, [3, 4, 6, 8, 12, 16, 24, 32], args.n_mc, args.seed, prompt)
    print(f"{'G':>3} {'plain bias':>12} {'se':>9} {'jackknife':>12} {'se':>9}")
    for k, G in enumerate(rep.G):
        print(f"{G:>3} {rep.plain_bias[k]:12.3e} {rep.plain_se[k]:9.1e} "
              f"{rep.jackknife_bias[k]:12.3e} {rep.jackknife_se[k]:9.1e}")
    print(f"slopes: plain {rep.plain_slope:.3f}, jackknife {rep.jackknife_slope:.3f}")


if __name__ == "__main__":
    main()
