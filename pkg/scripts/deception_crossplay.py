"""Physical-deception cross-play: centralized vs decentralized critics.

Trains both algorithms over several seeds, then evaluates every
(agent-side, adversary-side) pairing and prints the success-rate deltas.
"""

import argparse
import time

import numpy as np

from mplab.analysis import crossplay
from mplab.scenarios import make_scenario
from mplab.trainer import TrainConfig, policies_from_trainer, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--episodes", type=int, default=6000)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--eval-episodes", type=int, default=250)
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]

    sc = make_scenario("physical_deception")
    sets, labels = [], []
    t0 = time.time()
    for algo in ("maddpg", "ddpg"):
        for seed in seeds:
            cfg = TrainConfig(episodes=args.episodes, seed=seed, modes=algo)
            trainer, _ = train(sc, cfg)
            sets.append(policies_from_trainer(trainer))
            labels.append(f"{algo}_s{seed}")
            print(f"[{time.time()-t0:6.0f}s] trained {labels[-1]}", flush=True)

    result = crossplay(sc, sets, sets, episodes=args.eval_episodes, seed=777,
                       agent_labels=labels, adversary_labels=labels)
    print("\nagent-side delta succ % (rows: agents, cols: adversaries)")
    header = " ".join(f"{l:>12}" for l in labels)
    print(f"{'':>12} {header}")
    for i, row_label in enumerate(labels):
        cells = " ".join(f"{result.raw[i, j]:>12.1f}"
                         for j in range(len(labels)))
        print(f"{row_label:>12} {cells}")


if __name__ == "__main__":
    main()
