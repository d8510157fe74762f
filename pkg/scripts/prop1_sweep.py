"""Print the exact vs Monte-Carlo gradient-direction table.

Usage: python scripts/prop1_sweep.py [--n-max 10] [--samples 100000]
"""

import argparse

import numpy as np

from mplab.analysis import prop1_sweep


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n-min", type=int, default=1)
    ap.add_argument("--n-max", type=int, default=10)
    ap.add_argument("--samples", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rows = prop1_sweep(range(args.n_min, args.n_max + 1), args.samples,
                       np.random.default_rng(args.seed))
    print(f"{'N':>3} {'exact_p':>12} {'mc_p':>10} {'stderr':>10} "
          f"{'E[R]':>12} {'snr':>8}")
    for r in rows:
        print(f"{r['n_agents']:>3} {r['exact_p']:>12.8f} {r['mc_p']:>10.6f} "
              f"{r['stderr']:>10.6f} {r['exact_e_reward']:>12.8f} "
              f"{r['snr']:>8.4f}")


if __name__ == "__main__":
    main()
