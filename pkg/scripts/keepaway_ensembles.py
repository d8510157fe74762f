"""Keep-away with policy ensembles vs single policies.

Trains an ensemble population and a single-policy population, then
cross-evaluates the four role pairings and prints the adversary
goal-occupancy table.
"""

import argparse
import time

import numpy as np

from mplab.analysis import evaluate
from mplab.extensions import policies_from_ensemble, train_ensemble
from mplab.scenarios import make_scenario
from mplab.trainer import TrainConfig, policies_from_trainer, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--episodes", type=int, default=4000)
    ap.add_argument("--k", type=int, default=3)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--eval-episodes", type=int, default=250)
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]

    sc = make_scenario("keep_away")
    singles, ensembles = [], []
    t0 = time.time()
    for seed in seeds:
        cfg = TrainConfig(episodes=args.episodes, seed=seed)
        trainer, _ = train(sc, cfg)
        singles.append(policies_from_trainer(trainer))
        print(f"[{time.time()-t0:6.0f}s] single seed {seed}", flush=True)
        ens, _ = train_ensemble(sc, cfg, k=args.k)
        ensembles.append(policies_from_ensemble(ens))
        print(f"[{time.time()-t0:6.0f}s] ensemble seed {seed}", flush=True)

    table = {}
    for a_label, a_sets in (("single", singles), ("ensemble", ensembles)):
        for b_label, b_sets in (("single", singles), ("ensemble", ensembles)):
            vals = []
            for s in range(len(seeds)):
                joint = [a_sets[s][0], b_sets[s][1]]
                rep = evaluate(sc, joint, args.eval_episodes,
                               np.random.default_rng([55, s]))
                vals.append(rep.metrics["adv_occupancy_frames"])
            table[(a_label, b_label)] = float(np.median(vals))

    print("\nadversary goal-occupancy frames (lower is better for agents)")
    corner = "agents / adv"
    print(f"{corner:>14} {'single':>10} {'ensemble':>10}")
    for a_label in ("single", "ensemble"):
        print(f"{a_label:>14} {table[(a_label, 'single')]:>10.2f} "
              f"{table[(a_label, 'ensemble')]:>10.2f}")


if __name__ == "__main__":
    main()
