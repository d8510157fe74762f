"""Run-level configuration: one validated document per command invocation.

A run config comes from an optional JSON file plus command-line overrides;
unknown keys are rejected before anything executes. Defaults follow the
lab-wide standard hyperparameters.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from .scenarios import SCENARIO_NAMES
from .trainer import MODES, TrainConfig

ALGOS = ("maddpg", "ddpg", "reinforce", "iac")

# Scenarios with stark success/fail outcomes get the larger default seed
# count; the rest get three.
TEN_SEED_SCENARIOS = ("coop_comm", "physical_deception", "covert_comm")


class ConfigError(ValueError):
    """Invalid run configuration; maps to exit code 2."""


def default_seeds(scenario: str) -> tuple[int, ...]:
    n = 10 if scenario in TEN_SEED_SCENARIOS else 3
    return tuple(range(n))


@dataclass
class RunConfig:
    """Everything one training invocation needs."""

    scenario: str = "coop_comm"
    scenario_variant: Optional[str] = None     # predator_prey: pp1 | pp2
    covert_horizon: Optional[int] = None       # covert_comm horizon override
    algo: str = "maddpg"
    algo_per_agent: Optional[tuple[str, ...]] = None
    episodes: int = 25000
    lr: float = 0.01
    tau: float = 0.01
    gamma: float = 0.95
    buffer_capacity: int = 1_000_000
    update_every: int = 100
    batch_size: int = 1024
    hidden_units: Optional[int] = None
    gs_temperature: float = 1.0
    gs_hard: bool = False
    gs_in_updates: bool = True
    actor_logit_reg: float = 1e-3
    noise_sigma: float = 0.3
    noise_anneal_frac: float = 0.6
    noise_floor: float = 0.05
    seeds: Optional[tuple[int, ...]] = None    # None: scenario default
    out: str = "runs"
    run_name: Optional[str] = None
    opponent_models: bool = False
    opponent_lambda: float = 0.001
    opponent_sigma: float = 0.1
    opponent_model_lr: float = 0.03
    ensemble_k: int = 0                        # 0: ensembles off
    ensemble_tie: bool = True
    ckpt_every: int = 0                        # 0: final checkpoint only
    eval_every: int = 0                        # 0: no mid-run evaluations
    eval_episodes: int = 1000

    def validate(self) -> None:
        if self.scenario not in SCENARIO_NAMES:
            raise ConfigError(
                f"scenario: unknown scenario {self.scenario!r}; "
                f"expected one of {SCENARIO_NAMES}"
            )
        if self.scenario_variant is not None:
            if self.scenario != "predator_prey":
                raise ConfigError("scenario_variant: only predator_prey has variants")
            if self.scenario_variant not in ("pp1", "pp2"):
                raise ConfigError("scenario_variant: must be pp1 or pp2")
        if self.covert_horizon is not None and self.scenario != "covert_comm":
            raise ConfigError("covert_horizon: only valid for covert_comm")
        if self.algo not in ALGOS:
            raise ConfigError(f"algo: unknown algorithm {self.algo!r}; "
                              f"expected one of {ALGOS}")
        if self.algo_per_agent is not None:
            kinds = set()
            for a in self.algo_per_agent:
                if a not in ALGOS:
                    raise ConfigError(f"algo_per_agent: unknown algorithm {a!r}")
                kinds.add("offpolicy" if a in MODES else "onpolicy")
            if len(kinds) > 1:
                raise ConfigError(
                    "algo_per_agent: cannot mix replay-based (maddpg/ddpg) "
                    "and on-policy (reinforce/iac) agents in one run"
                )
        if self.episodes < 0:
            raise ConfigError("episodes: must be non-negative")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma: must lie in (0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("tau: must lie in (0, 1]")
        if self.lr <= 0:
            raise ConfigError("lr: must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be positive")
        if self.update_every < 1:
            raise ConfigError("update_every: must be positive")
        if self.ensemble_k < 0:
            raise ConfigError("ensemble_k: must be non-negative")
        if self.ensemble_k and self.opponent_models:
            raise ConfigError(
                "ensemble_k/opponent_models: the two extensions cannot be "
                "combined in one run"
            )
        if self.ensemble_k and self.algo not in MODES:
            raise ConfigError("ensemble_k: ensembles require maddpg or ddpg")
        if self.opponent_models and self.algo not in MODES:
            raise ConfigError("opponent_models: requires maddpg or ddpg")
        if self.eval_episodes < 0 or self.ckpt_every < 0 or self.eval_every < 0:
            raise ConfigError(
                "eval_episodes/ckpt_every/eval_every: must be non-negative")

    @property
    def effective_seeds(self) -> tuple[int, ...]:
        return self.seeds if self.seeds is not None else \
            default_seeds(self.scenario)

    @property
    def effective_run_name(self) -> str:
        if self.run_name:
            return self.run_name
        tag = self.algo
        if self.opponent_models:
            tag += "_om"
        if self.ensemble_k:
            tag += f"_ens{self.ensemble_k}"
        return f"{self.scenario}_{tag}"

    def scenario_kwargs(self) -> dict:
        kw: dict = {}
        if self.scenario == "predator_prey" and self.scenario_variant:
            kw["variant"] = self.scenario_variant
        if self.scenario == "covert_comm" and self.covert_horizon:
            kw["horizon"] = self.covert_horizon
        return kw

    def train_config(self, seed: int) -> TrainConfig:
        modes: tuple[str, ...] | str
        if self.algo_per_agent is not None:
            modes = self.algo_per_agent
        else:
            modes = self.algo
        if isinstance(modes, str) and modes not in MODES:
            modes = "maddpg"   # baselines ignore trainer modes
        return TrainConfig(
            episodes=self.episodes, lr=self.lr, tau=self.tau,
            gamma=self.gamma, buffer_capacity=self.buffer_capacity,
            update_every=self.update_every, batch_size=self.batch_size,
            hidden_units=self.hidden_units, seed=seed, modes=modes,
            gs_temperature=self.gs_temperature, gs_hard=self.gs_hard,
            gs_in_updates=self.gs_in_updates,
            actor_logit_reg=self.actor_logit_reg,
            noise_sigma=self.noise_sigma,
            noise_anneal_frac=self.noise_anneal_frac,
            noise_floor=self.noise_floor,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("algo_per_agent", "seeds"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d


_FIELD_NAMES = {f.name for f in fields(RunConfig)}
_TUPLE_FIELDS = ("algo_per_agent", "seeds")


def config_from_dict(doc: dict) -> RunConfig:
    """Build and validate a RunConfig, rejecting unknown keys by name."""
    unknown = sorted(set(doc) - _FIELD_NAMES)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    clean = dict(doc)
    for key in _TUPLE_FIELDS:
        if clean.get(key) is not None:
            clean[key] = tuple(clean[key])
    cfg = RunConfig(**clean)
    cfg.validate()
    return cfg


def load_config_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    return doc
