"""Train all four algorithms on cooperative communication and print a
target-reach comparison table.

Desk scale by default (8000 episodes, 3 seeds); pass --episodes 25000 and
--seeds 0,1,2,...,9 for a full-scale table. Expect hours at full scale.
"""

import argparse
import time

import numpy as np

from mplab.analysis import evaluate
from mplab.baselines import policies_from_baseline, train_baseline
from mplab.scenarios import make_scenario
from mplab.trainer import TrainConfig, policies_from_trainer, train

ALGOS = ("maddpg", "ddpg", "reinforce", "iac")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--episodes", type=int, default=8000)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--eval-episodes", type=int, default=500)
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]

    sc = make_scenario("coop_comm")
    results: dict[str, list] = {a: [] for a in ALGOS}
    t0 = time.time()
    for algo in ALGOS:
        for seed in seeds:
            cfg = TrainConfig(episodes=args.episodes, seed=seed,
                              modes=algo if algo in ("maddpg", "ddpg")
                              else "maddpg")
            if algo in ("maddpg", "ddpg"):
                trainer, _ = train(sc, cfg)
                pols = policies_from_trainer(trainer)
            else:
                state, _ = train_baseline(sc, cfg, algo)
                pols = policies_from_baseline(state)
            rep = evaluate(sc, pols, args.eval_episodes,
                           np.random.default_rng([seed, 1000]))
            results[algo].append(rep.metrics)
            print(f"[{time.time()-t0:7.0f}s] {algo} seed {seed}: "
                  f"reach {rep.metrics['target_reach_pct']:.1f}% "
                  f"dist {rep.metrics['avg_final_distance']:.3f}", flush=True)

    print(f"\n{'algorithm':>10} {'median reach %':>15} {'median dist':>12}")
    for algo in ALGOS:
        reach = np.median([m["target_reach_pct"] for m in results[algo]])
        dist = np.median([m["avg_final_distance"] for m in results[algo]])
        print(f"{algo:>10} {reach:>15.1f} {dist:>12.3f}")


if __name__ == "__main__":
    main()
