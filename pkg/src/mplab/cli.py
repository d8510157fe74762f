"""Command-line entry point: train, eval, crossplay, prop1, export.

Every artifact-producing command writes a manifest (config, seeds, tool
version) sufficient to reproduce it, never touches a previous run's
directory, and exits 0 on success, 2 on configuration errors, 3 on runtime
failures. The output root honors the MPLAB_OUT environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, world
from .analysis import (
    crossplay,
    evaluate,
    export_trajectories,
    prop1_sweep,
)
from .baselines import (
    load_baseline_policies,
    policies_from_baseline,
    save_baseline,
    train_baseline,
)
from .config import (
    ALGOS,
    ConfigError,
    RunConfig,
    config_from_dict,
    load_config_file,
)
from .extensions import (
    load_ensemble_policies,
    policies_from_ensemble,
    save_ensemble,
    train_ensemble,
    train_with_opponent_models,
)
from .nets import load_checkpoint
from .scenarios import make_scenario
from .trainer import (
    MODES,
    load_policies,
    policies_from_trainer,
    save_trainer,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def output_root(cli_out: Optional[str], cfg_out: str = "runs") -> Path:
    """Precedence: explicit --out flag, then MPLAB_OUT, then the config."""
    if cli_out:
        return Path(cli_out)
    env = os.environ.get("MPLAB_OUT")
    if env:
        return Path(env)
    return Path(cfg_out)


def fresh_dir(path: Path) -> Path:
    """Create ``path``; refuse to reuse a non-empty existing directory."""
    if path.exists() and any(path.iterdir()):
        raise ConfigError(f"output directory {path} already holds a run")
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(path: Path, payload: dict) -> None:
    payload = dict(payload)
    payload["tool_version"] = __version__
    payload["argv"] = sys.argv[1:]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_metrics_csv(path: Path, metrics: list[dict]) -> None:
    if not metrics:
        path.write_text("episode\n", encoding="utf-8")
        return
    cols = list(metrics[0].keys())
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in metrics:
            writer.writerow([repr(row[c]) if isinstance(row[c], float)
                             else row[c] for c in cols])


def load_any_policies(path: str):
    """Policies plus scenario identity from any checkpoint bundle kind."""
    _, _, extra = load_checkpoint(path)
    kind = extra.get("kind")
    if kind == "trainer":
        return load_policies(path)
    if kind == "baseline":
        return load_baseline_policies(path)
    if kind == "ensemble":
        return load_ensemble_policies(path)
    raise ConfigError(f"checkpoint {path} has unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def run_one_seed(cfg: RunConfig, seed: int, seed_dir: Path) -> dict:
    scenario = make_scenario(cfg.scenario, **cfg.scenario_kwargs())
    tc = cfg.train_config(seed)
    ckpt_dir = seed_dir / "ckpt"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    eval_rows: dict[int, dict] = {}

    def episode_hook_for(policies_of, save_fn=None):
        def hook(state, ep, ret):
            if save_fn and cfg.ckpt_every and (ep + 1) % cfg.ckpt_every == 0:
                save_fn(state, str(ckpt_dir / f"ep{ep + 1:07d}"))
            if cfg.eval_every and (ep + 1) % cfg.eval_every == 0:
                rep = evaluate(scenario, policies_of(state),
                               max(cfg.eval_episodes // 10, 10),
                               np.random.default_rng([seed, ep]))
                eval_rows[ep] = {f"eval_{k}": v
                                 for k, v in rep.metrics.items()}
        return hook

    extra_files: dict[str, str] = {}
    if cfg.algo in MODES and cfg.ensemble_k:
        ens, metrics = train_ensemble(scenario, tc, k=cfg.ensemble_k,
                                      tie_teams=cfg.ensemble_tie)
        ckpt = save_ensemble(ens, str(ckpt_dir / "final"),
                             scenario_kwargs=cfg.scenario_kwargs())
        policies = policies_from_ensemble(ens)
    elif cfg.algo in MODES and cfg.opponent_models:
        trainer, metrics, models, kl_log = train_with_opponent_models(
            scenario, tc, sigma=cfg.opponent_sigma, lam=cfg.opponent_lambda,
            model_lr=cfg.opponent_model_lr)
        ckpt = save_trainer(trainer, str(ckpt_dir / "final"),
                            scenario_kwargs=cfg.scenario_kwargs(),
                            opponent_models=models)
        policies = policies_from_trainer(trainer)
        kl_path = seed_dir / "opponent_kl.csv"
        write_metrics_csv(kl_path, kl_log)
        extra_files["opponent_kl"] = kl_path.name
    elif cfg.algo in MODES:
        hook = episode_hook_for(
            policies_from_trainer,
            lambda state, p: save_trainer(state, p,
                                          scenario_kwargs=cfg.scenario_kwargs()))
        trainer, metrics = train(scenario, tc, episode_hook=hook)
        ckpt = save_trainer(trainer, str(ckpt_dir / "final"),
                            scenario_kwargs=cfg.scenario_kwargs())
        policies = policies_from_trainer(trainer)
    else:
        algos = cfg.algo_per_agent if cfg.algo_per_agent else cfg.algo
        state, metrics = train_baseline(scenario, tc, algos)
        ckpt = save_baseline(state, str(ckpt_dir / "final"),
                             scenario_kwargs=cfg.scenario_kwargs())
        policies = policies_from_baseline(state)

    if eval_rows:
        eval_cols = sorted({c for row in eval_rows.values() for c in row})
        for m in metrics:
            snapshot = eval_rows.get(m["episode"], {})
            for c in eval_cols:
                m[c] = snapshot.get(c, "")
    write_metrics_csv(seed_dir / "metrics.csv", metrics)

    summary: dict = {"seed": seed, "checkpoint": ckpt}
    if cfg.eval_episodes:
        report = evaluate(scenario, policies, cfg.eval_episodes,
                          np.random.default_rng([seed, 60602]))
        eval_dir = seed_dir / "eval"
        eval_dir.mkdir(exist_ok=True)
        with open(eval_dir / "report.json", "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        summary["eval"] = report.metrics
    summary.update(extra_files)
    return summary


def cmd_train(args: argparse.Namespace) -> int:
    doc = load_config_file(args.config) if args.config else {}
    doc.update(_train_flag_overrides(args))
    cfg = config_from_dict(doc)
    root = output_root(args.out, cfg.out)
    run_dir = root / cfg.effective_run_name
    summaries = []
    for seed in cfg.effective_seeds:
        seed_dir = fresh_dir(run_dir / str(seed))
        write_manifest(seed_dir / "manifest.json", {
            "command": "train",
            "config": cfg.to_dict(),
            "seed": seed,
        })
        summaries.append(run_one_seed(cfg, seed, seed_dir))
        print(f"seed {seed}: done -> {seed_dir}")
    print(json.dumps({"run": str(run_dir),
                      "seeds": [s["seed"] for s in summaries]}))
    return EXIT_OK


def _train_flag_overrides(args: argparse.Namespace) -> dict:
    doc: dict = {}
    simple = ("scenario", "scenario_variant", "covert_horizon", "algo",
              "episodes", "lr", "tau", "gamma", "buffer_capacity",
              "update_every", "batch_size", "hidden_units",
              "gs_temperature", "actor_logit_reg", "noise_sigma",
              "noise_anneal_frac", "noise_floor", "run_name", "opponent_lambda",
              "opponent_sigma", "opponent_model_lr", "ensemble_k", "ckpt_every",
              "eval_every", "eval_episodes")
    for name in simple:
        val = getattr(args, name, None)
        if val is not None:
            doc[name] = val
    if args.seeds is not None:
        doc["seeds"] = [int(s) for s in args.seeds.split(",") if s]
    if args.algo_per_agent is not None:
        doc["algo_per_agent"] = [a for a in args.algo_per_agent.split(",") if a]
    if args.opponent_models:
        doc["opponent_models"] = True
    if args.ensemble_tie is not None:
        doc["ensemble_tie"] = args.ensemble_tie
    if args.gs_hard:
        doc["gs_hard"] = True
    if args.no_gs_in_updates:
        doc["gs_in_updates"] = False
    return doc


# ---------------------------------------------------------------------------
# eval / crossplay
# ---------------------------------------------------------------------------

def cmd_eval(args: argparse.Namespace) -> int:
    pols, scenario_name, scenario_kwargs = load_any_policies(args.ckpt)
    scenario = make_scenario(scenario_name, **scenario_kwargs)
    report = evaluate(scenario, pols, args.episodes,
                      np.random.default_rng(args.seed),
                      policy_names=[args.ckpt] * scenario.n_agents)
    out = Path(args.out) if args.out else None
    payload = report.to_dict()
    if out:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.json", "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
        with open(out / "report.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            for k, v in report.metrics.items():
                writer.writerow([k, repr(v)])
            writer.writerow(["normalized_score", repr(report.normalized_score)])
    print(json.dumps(payload))
    return EXIT_OK


def cmd_crossplay(args: argparse.Namespace) -> int:
    agent_paths = [p for p in args.agent_ckpts.split(",") if p]
    adv_paths = [p for p in args.adversary_ckpts.split(",") if p]
    if not agent_paths or not adv_paths:
        raise ConfigError("agent_ckpts/adversary_ckpts: need at least one each")
    scenario = None
    agent_sets, adversary_sets = [], []
    for path in agent_paths:
        pols, name, kwargs = load_any_policies(path)
        scenario = scenario or make_scenario(name, **kwargs)
        if scenario.name != name:
            raise ConfigError(f"checkpoint {path} is for scenario {name}, "
                              f"expected {scenario.name}")
        agent_sets.append(pols)
    for path in adv_paths:
        pols, name, kwargs = load_any_policies(path)
        if scenario.name != name:
            raise ConfigError(f"checkpoint {path} is for scenario {name}, "
                              f"expected {scenario.name}")
        adversary_sets.append(pols)
    result = crossplay(scenario, agent_sets, adversary_sets,
                       episodes=args.episodes, seed=args.seed,
                       agent_labels=agent_paths, adversary_labels=adv_paths)
    rows = result.to_rows()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "crossplay.csv", "w", encoding="utf-8",
                  newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
        with open(out / "crossplay.json", "w", encoding="utf-8") as fh:
            json.dump({"scenario": result.scenario, "cells": rows},
                      fh, indent=2, sort_keys=True)
    print(json.dumps(rows))
    return EXIT_OK


# ---------------------------------------------------------------------------
# prop1 / export
# ---------------------------------------------------------------------------

def cmd_prop1(args: argparse.Namespace) -> int:
    if args.samples < 1:
        raise ConfigError("samples: must be positive")
    if args.n_min < 1 or args.n_max < args.n_min:
        raise ConfigError("n_min/n_max: need 1 <= n_min <= n_max")
    if args.n_max > 20:
        raise ConfigError("n_max: exact enumeration is limited to 20 agents")
    rng = np.random.default_rng(args.seed)
    rows = prop1_sweep(range(args.n_min, args.n_max + 1), args.samples, rng)
    cols = ["n_agents", "exact_p", "mc_p", "stderr", "exact_e_reward", "snr"]
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(repr(r[c]) if isinstance(r[c], float)
                              else str(r[c]) for c in cols))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    pols, scenario_name, scenario_kwargs = load_any_policies(args.ckpt)
    scenario = make_scenario(scenario_name, **scenario_kwargs)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    summaries = export_trajectories(scenario, pols, args.episodes,
                                    np.random.default_rng(args.seed),
                                    str(out_path))
    summary_path = out_path.with_suffix(out_path.suffix + ".summary.json")
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump({"scenario": scenario.name, "episodes": args.episodes,
                   "per_episode": summaries}, fh, indent=2, sort_keys=True)
    print(json.dumps({"trajectories": str(out_path),
                      "summary": str(summary_path)}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mplab",
        description="Multi-agent particle-world lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train policies on a scenario")
    p_train.add_argument("--config", help="JSON run-config file")
    p_train.add_argument("--scenario")
    p_train.add_argument("--scenario-variant", dest="scenario_variant")
    p_train.add_argument("--covert-horizon", dest="covert_horizon", type=int)
    p_train.add_argument("--algo", choices=ALGOS)
    p_train.add_argument("--algo-per-agent", dest="algo_per_agent",
                         help="comma list, one algorithm per agent")
    p_train.add_argument("--episodes", type=int)
    p_train.add_argument("--seeds", help="comma list of integer seeds")
    p_train.add_argument("--out", help="output root (default runs/ or MPLAB_OUT)")
    p_train.add_argument("--run-name", dest="run_name")
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--tau", type=float)
    p_train.add_argument("--gamma", type=float)
    p_train.add_argument("--buffer-capacity", dest="buffer_capacity", type=int)
    p_train.add_argument("--update-every", dest="update_every", type=int)
    p_train.add_argument("--batch-size", dest="batch_size", type=int)
    p_train.add_argument("--hidden-units", dest="hidden_units", type=int)
    p_train.add_argument("--gs-temperature", dest="gs_temperature", type=float)
    p_train.add_argument("--gs-hard", dest="gs_hard", action="store_true")
    p_train.add_argument("--no-gs-in-updates", dest="no_gs_in_updates",
                         action="store_true")
    p_train.add_argument("--actor-logit-reg", dest="actor_logit_reg",
                         type=float)
    p_train.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p_train.add_argument("--noise-anneal-frac", dest="noise_anneal_frac",
                         type=float)
    p_train.add_argument("--noise-floor", dest="noise_floor", type=float)
    p_train.add_argument("--opponent-models", dest="opponent_models",
                         action="store_true")
    p_train.add_argument("--opponent-lambda", dest="opponent_lambda",
                         type=float)
    p_train.add_argument("--opponent-sigma", dest="opponent_sigma", type=float)
    p_train.add_argument("--opponent-model-lr", dest="opponent_model_lr",
                         type=float)
    p_train.add_argument("--ensemble-k", dest="ensemble_k", type=int)
    tie = p_train.add_mutually_exclusive_group()
    tie.add_argument("--ensemble-tie", dest="ensemble_tie",
                     action="store_true", default=None)
    tie.add_argument("--no-ensemble-tie", dest="ensemble_tie",
                     action="store_false", default=None)
    p_train.add_argument("--ckpt-every", dest="ckpt_every", type=int)
    p_train.add_argument("--eval-every", dest="eval_every", type=int)
    p_train.add_argument("--eval-episodes", dest="eval_episodes", type=int)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--episodes", type=int, default=1000)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--out")
    p_eval.set_defaults(func=cmd_eval)

    p_cross = sub.add_parser("crossplay",
                             help="pit policy sets against each other")
    p_cross.add_argument("--agent-ckpts", dest="agent_ckpts", required=True)
    p_cross.add_argument("--adversary-ckpts", dest="adversary_ckpts",
                         required=True)
    p_cross.add_argument("--episodes", type=int, default=200)
    p_cross.add_argument("--seed", type=int, default=0)
    p_cross.add_argument("--out")
    p_cross.set_defaults(func=cmd_crossplay)

    p_prop = sub.add_parser("prop1",
                            help="gradient-direction probability sweep")
    p_prop.add_argument("--n-min", dest="n_min", type=int, default=1)
    p_prop.add_argument("--n-max", dest="n_max", type=int, default=6)
    p_prop.add_argument("--samples", type=int, default=100_000)
    p_prop.add_argument("--seed", type=int, default=0)
    p_prop.add_argument("--out")
    p_prop.set_defaults(func=cmd_prop1)

    p_exp = sub.add_parser("export", help="export rollout trajectories")
    p_exp.add_argument("--ckpt", required=True)
    p_exp.add_argument("--episodes", type=int, default=10)
    p_exp.add_argument("--seed", type=int, default=0)
    p_exp.add_argument("--out", required=True, help="JSONL output path")
    p_exp.set_defaults(func=cmd_export)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:   # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
