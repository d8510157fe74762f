"""Decentralized stochastic policy-gradient baselines.

REINFORCE and an independent TD(0) actor-critic, both strictly local: every
network only ever sees its own agent's observations and actions. Policies
are Gaussian (learned mean and log-std, clamped) on the physical slice and
categorical on the message slice; message actions are one-hot draws.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import world
from .nets import (
    AdamState,
    Mlp,
    adam_init,
    adam_step,
    backward,
    forward,
    forward_cached,
    init_mlp,
    save_checkpoint,
    load_checkpoint,
    softmax,
)
from .scenarios import Scenario, default_hidden_units
from .trainer import TrainConfig
from .world import AgentAction

Array = np.ndarray

LOGSTD_MIN = -5.0
LOGSTD_MAX = 1.0

BASELINE_ALGOS = ("reinforce", "iac")


@dataclass
class StochasticPolicy:
    """Distribution head over one agent's action space.

    The network output is laid out as [mean (2) | log-std (2) | logits (c)].
    """

    net: Mlp
    comm_dim: int

    @property
    def obs_dim(self) -> int:
        return self.net.in_dim


def make_stochastic_policy(obs_dim: int, comm_dim: int, hidden: int,
                           rng: np.random.Generator) -> StochasticPolicy:
    net = init_mlp([obs_dim, hidden, hidden, 4 + comm_dim], rng)
    return StochasticPolicy(net=net, comm_dim=comm_dim)


def _dist_params(policy: StochasticPolicy, out: Array):
    mean = out[..., 0:2]
    logstd = np.clip(out[..., 2:4], LOGSTD_MIN, LOGSTD_MAX)
    logits = out[..., 4:] if policy.comm_dim else None
    return mean, logstd, out[..., 2:4], logits


def sample_and_logprob(policy: StochasticPolicy, obs: Array,
                       rng: np.random.Generator):
    """Draw an action and return it with its exact log-density.

    Returns ``(action, logprob)`` where the message part of the action is a
    one-hot draw from the categorical head.
    """
    out = forward(policy.net, obs)
    mean, logstd, _, logits = _dist_params(policy, out)
    std = np.exp(logstd)
    phys = mean + std * rng.standard_normal(2)
    logp = float(np.sum(-0.5 * ((phys - mean) / std) ** 2
                        - logstd - 0.5 * np.log(2 * np.pi)))
    comm = None
    comm_idx = -1
    if policy.comm_dim:
        p = softmax(logits)
        comm_idx = int(rng.choice(policy.comm_dim, p=p))
        comm = np.zeros(policy.comm_dim)
        comm[comm_idx] = 1.0
        logp += float(np.log(p[comm_idx]))
    return AgentAction(physical=phys, comm=comm), logp, comm_idx


def logprob_output_gradient(policy: StochasticPolicy, out: Array,
                            phys: Array, comm_idx: Array) -> Array:
    """d log pi(a|o) / d(network output), batched.

    Gaussian slice: d/dmean = (a - mean)/std^2, d/dlogstd = z^2 - 1 with
    z = (a - mean)/std (zeroed where the clamp is active). Categorical
    slice: one-hot minus softmax.
    """
    mean, logstd, raw_logstd, logits = _dist_params(policy, out)
    std = np.exp(logstd)
    z = (phys - mean) / std
    g = np.zeros_like(out)
    g[..., 0:2] = z / std
    pass_through = (raw_logstd > LOGSTD_MIN) & (raw_logstd < LOGSTD_MAX)
    g[..., 2:4] = (z * z - 1.0) * pass_through
    if policy.comm_dim:
        p = softmax(logits, axis=-1)
        onehot = np.zeros_like(p)
        rows = np.arange(out.shape[0])
        onehot[rows, comm_idx] = 1.0
        g[..., 4:] = onehot - p
    return g


def logprob_of(policy: StochasticPolicy, obs: Array, phys: Array,
               comm_idx: Array) -> Array:
    """Batched exact log-density of stored actions under current params."""
    out = forward(policy.net, obs)
    mean, logstd, _, logits = _dist_params(policy, out)
    std = np.exp(logstd)
    logp = np.sum(-0.5 * ((phys - mean) / std) ** 2
                  - logstd - 0.5 * np.log(2 * np.pi), axis=-1)
    if policy.comm_dim:
        zmax = logits.max(axis=-1, keepdims=True)
        log_softmax = logits - zmax - np.log(
            np.sum(np.exp(logits - zmax), axis=-1, keepdims=True))
        logp = logp + log_softmax[np.arange(len(comm_idx)), comm_idx]
    return logp


@dataclass
class EpisodeTrace:
    """Per-agent on-policy record of one episode."""

    obs: list
    phys: list
    comm_idx: list
    rewards: list

    def arrays(self):
        return (np.stack(self.obs), np.stack(self.phys),
                np.asarray(self.comm_idx, dtype=int),
                np.asarray(self.rewards, dtype=float))


def discounted_returns(rewards: Array, gamma: float) -> Array:
    out = np.zeros_like(rewards)
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def score_gradient(policy: StochasticPolicy, obs: Array, phys: Array,
                   comm_idx: Array, weights: Array):
    """Gradient of -sum_t weights_t * log pi(a_t|o_t) w.r.t. policy params.

    An Adam step on the result ascends the weighted log-likelihood, which is
    the score-function policy-gradient estimator for the given weights.
    """
    out, cache = forward_cached(policy.net, obs)
    g_logp = logprob_output_gradient(policy, out, phys, comm_idx)
    upstream = -weights[:, None] * g_logp
    return backward(policy.net, cache, upstream)[0]


def reinforce_update(policy: StochasticPolicy, opt: AdamState,
                     trace: EpisodeTrace, gamma: float) -> float:
    """One ascent step on sum_t log pi(a_t|o_t) * R_t over a full episode.

    No baseline is subtracted. Returns the (negated-objective) loss value.
    """
    obs, phys, comm_idx, rewards = trace.arrays()
    returns = discounted_returns(rewards, gamma)
    grads = score_gradient(policy, obs, phys, comm_idx, returns)
    adam_step(policy.net, grads, opt)
    logp = logprob_of(policy, obs, phys, comm_idx)
    return float(-np.sum(logp * returns))


def independent_ac_update(policy: StochasticPolicy, value_net: Mlp,
                          policy_opt: AdamState, value_opt: AdamState,
                          trace: EpisodeTrace, gamma: float,
                          terminal_last: bool = True) -> tuple[float, float]:
    """TD(0) critic on own observations, then an advantage-weighted policy
    step. Returns (critic loss, policy loss)."""
    obs, phys, comm_idx, rewards = trace.arrays()
    T = len(rewards)
    v = forward(value_net, obs)[:, 0]
    v_next = np.empty(T)
    v_next[:-1] = v[1:]
    v_next[-1] = 0.0 if terminal_last else v[-1]
    targets = rewards + gamma * v_next
    if terminal_last:
        targets[-1] = rewards[-1]
    adv = targets - v

    out_v, cache_v = forward_cached(value_net, obs)
    err = out_v[:, 0] - targets
    critic_loss = float(np.mean(err * err))
    upstream_v = (2.0 / T) * err[:, None]
    grads_v, _ = backward(value_net, cache_v, upstream_v)
    adam_step(value_net, grads_v, value_opt)

    grads_p = score_gradient(policy, obs, phys, comm_idx, adv)
    adam_step(policy.net, grads_p, policy_opt)
    logp = logprob_of(policy, obs, phys, comm_idx)
    return critic_loss, float(-np.sum(logp * adv))


@dataclass
class BaselineState:
    scenario: Scenario
    config: TrainConfig
    algos: tuple[str, ...]
    policies: list[StochasticPolicy]
    policy_opts: list[AdamState]
    value_nets: list[Optional[Mlp]]
    value_opts: list[Optional[AdamState]]
    rng: np.random.Generator
    episodes_done: int = 0


def make_baseline(scenario: Scenario, config: TrainConfig,
                  algos: Sequence[str] | str,
                  rng: Optional[np.random.Generator] = None) -> BaselineState:
    config.validate()
    if isinstance(algos, str):
        algos = (algos,) * scenario.n_agents
    algos = tuple(algos)
    if len(algos) != scenario.n_agents:
        raise ValueError(f"need {scenario.n_agents} algo entries")
    for a in algos:
        if a not in BASELINE_ALGOS:
            raise ValueError(f"unknown baseline algo {a!r}")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    hidden = config.hidden_units or default_hidden_units(scenario.name)
    policies, p_opts, v_nets, v_opts = [], [], [], []
    for i in range(scenario.n_agents):
        pol = make_stochastic_policy(scenario.obs_dims[i],
                                     scenario.comm_dims[i], hidden, rng)
        policies.append(pol)
        p_opts.append(adam_init(pol.net, lr=config.lr))
        if algos[i] == "iac":
            vn = init_mlp([scenario.obs_dims[i], hidden, hidden, 1], rng)
            v_nets.append(vn)
            v_opts.append(adam_init(vn, lr=config.lr))
        else:
            v_nets.append(None)
            v_opts.append(None)
    return BaselineState(scenario=scenario, config=config, algos=algos,
                         policies=policies, policy_opts=p_opts,
                         value_nets=v_nets, value_opts=v_opts, rng=rng)


def train_baseline(scenario: Scenario, config: TrainConfig,
                   algos: Sequence[str] | str,
                   rng: Optional[np.random.Generator] = None,
                   ) -> tuple[BaselineState, list[dict]]:
    """Full on-policy loop: one update per agent per finished episode."""
    state = make_baseline(scenario, config, algos, rng)
    metrics: list[dict] = []
    for ep in range(config.episodes):
        wstate, obs = scenario.reset(state.rng)
        traces = [EpisodeTrace([], [], [], []) for _ in range(scenario.n_agents)]
        done = False
        ep_return = np.zeros(scenario.n_agents)
        while not done:
            actions = []
            for i, pol in enumerate(state.policies):
                a, _, k = sample_and_logprob(pol, obs[i], state.rng)
                traces[i].obs.append(obs[i])
                traces[i].phys.append(a.physical)
                traces[i].comm_idx.append(k)
                actions.append(a)
            wstate, rewards, obs, done = world.step(wstate, actions, scenario)
            for i in range(scenario.n_agents):
                traces[i].rewards.append(rewards[i])
            ep_return += rewards
        for i in range(scenario.n_agents):
            if state.algos[i] == "reinforce":
                reinforce_update(state.policies[i], state.policy_opts[i],
                                 traces[i], config.gamma)
            else:
                independent_ac_update(
                    state.policies[i], state.value_nets[i],
                    state.policy_opts[i], state.value_opts[i],
                    traces[i], config.gamma)
        state.episodes_done += 1
        row = {"episode": ep}
        for i in range(scenario.n_agents):
            row[f"return_{i}"] = float(ep_return[i])
        metrics.append(row)
    return state, metrics


class StochasticEvalPolicy:
    """Deterministic evaluation wrapper: Gaussian mean (clamped) and arg-max
    one-hot message."""

    def __init__(self, policy: StochasticPolicy) -> None:
        self.policy = policy

    def begin_episode(self, rng: np.random.Generator) -> None:
        pass

    def act(self, obs: Array) -> AgentAction:
        out = forward(self.policy.net, obs)
        mean, _, _, logits = _dist_params(self.policy, out)
        comm = None
        if self.policy.comm_dim:
            comm = np.zeros(self.policy.comm_dim)
            comm[int(np.argmax(logits))] = 1.0
        return AgentAction(physical=np.clip(mean, -1.0, 1.0), comm=comm)


def policies_from_baseline(state: BaselineState) -> list[StochasticEvalPolicy]:
    return [StochasticEvalPolicy(p) for p in state.policies]


def save_baseline(state: BaselineState, path: str,
                  scenario_kwargs: Optional[dict] = None) -> str:
    nets, opts = {}, {}
    for i, pol in enumerate(state.policies):
        nets[f"agent{i}/policy"] = pol.net
        opts[f"agent{i}/policy"] = state.policy_opts[i]
        if state.value_nets[i] is not None:
            nets[f"agent{i}/value"] = state.value_nets[i]
            opts[f"agent{i}/value"] = state.value_opts[i]
    cfg = dict(state.config.__dict__)
    if isinstance(cfg["modes"], tuple):
        cfg["modes"] = list(cfg["modes"])
    extra = {
        "kind": "baseline",
        "scenario": state.scenario.name,
        "scenario_kwargs": scenario_kwargs or {},
        "algos": list(state.algos),
        "config": cfg,
        "comm_dims": list(state.scenario.comm_dims),
        "episodes_done": state.episodes_done,
        "rng_state": state.rng.bit_generator.state,
    }
    return save_checkpoint(path, nets, opts, extra)


def load_baseline_policies(path: str) -> tuple[list[StochasticEvalPolicy], str, dict]:
    nets, _, extra = load_checkpoint(path)
    if extra.get("kind") != "baseline":
        raise ValueError(f"checkpoint at {path} is not a baseline bundle")
    comm_dims = extra["comm_dims"]
    pols = [StochasticEvalPolicy(StochasticPolicy(nets[f"agent{i}/policy"],
                                                  comm_dims[i]))
            for i in range(len(comm_dims))]
    return pols, extra["scenario"], extra.get("scenario_kwargs", {})
