"""Centralized-critic deterministic policy-gradient training.

Each agent owns an actor over its private observation and a critic over
whatever its mode grants: a ``maddpg`` agent's critic sees the joint
observation plus every agent's action, a ``ddpg`` agent's critic sees only
its own observation/action pair. Both modes share target networks, a joint
replay buffer, Gumbel-Softmax message sampling, and Gaussian exploration
noise whose scale anneals linearly to zero over the first part of training.
Execution is decentralized throughout: action selection only ever touches
the calling agent's own observation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import world
from .nets import (
    AdamState,
    Head,
    Mlp,
    adam_init,
    adam_step,
    backward,
    forward,
    forward_cached,
    forward_raw,
    gaussian_noise,
    gumbel_softmax,
    gumbel_softmax_grad,
    init_mlp,
    load_checkpoint,
    save_checkpoint,
    soft_update,
    softmax,
)
from .replay import Batch, ReplayBuffer, Transition, TransitionLayout
from .scenarios import Scenario, default_hidden_units, make_scenario
from .world import AgentAction

Array = np.ndarray

MODES = ("maddpg", "ddpg")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters; defaults are the lab-wide standard settings."""

    episodes: int
    lr: float = 0.01
    tau: float = 0.01
    gamma: float = 0.95
    buffer_capacity: int = 1_000_000
    update_every: int = 100          # env samples between update rounds
    batch_size: int = 1024
    hidden_units: Optional[int] = None   # None: scenario default (64 or 128)
    seed: int = 0
    modes: tuple[str, ...] | str = "maddpg"
    gs_temperature: float = 1.0
    gs_hard: bool = False
    gs_in_updates: bool = True       # sample messages inside update targets
    actor_logit_reg: float = 1e-3    # L2 pull on raw actor outputs
    noise_sigma: float = 0.3
    noise_anneal_frac: float = 0.6   # fraction of episodes to reach the floor
    noise_floor: float = 0.05        # residual exploration after the anneal

    def validate(self) -> None:
        if self.episodes < 0:
            raise ValueError("episodes must be non-negative")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.update_every < 1:
            raise ValueError("batch_size and update_every must be positive")
        if self.gs_temperature <= 0:
            raise ValueError("gs_temperature must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.noise_floor < 0:
            raise ValueError("noise_floor must be non-negative")
        modes = self.modes if isinstance(self.modes, str) else list(self.modes)
        for m in ([modes] if isinstance(modes, str) else modes):
            if m not in MODES:
                raise ValueError(f"unknown mode {m!r}; expected one of {MODES}")

    def mode_of(self, i: int, n_agents: int) -> str:
        if isinstance(self.modes, str):
            return self.modes
        if len(self.modes) != n_agents:
            raise ValueError(
                f"modes tuple has {len(self.modes)} entries for {n_agents} agents"
            )
        return self.modes[i]


def actor_head(comm_dim: int) -> Head:
    slices: tuple[tuple[str, int], ...] = (("tanh", 2),)
    if comm_dim:
        slices += (("softmax", comm_dim),)
    return Head("per_slice", slices)


@dataclass
class AgentLearner:
    actor: Mlp
    critic: Mlp
    target_actor: Mlp
    target_critic: Mlp
    actor_opt: AdamState
    critic_opt: AdamState
    mode: str


@dataclass
class TrainerState:
    scenario: Scenario
    config: TrainConfig
    agents: list[AgentLearner]
    buffer: ReplayBuffer
    layout: TransitionLayout
    rng: np.random.Generator
    env_steps: int = 0
    episodes_done: int = 0

    @property
    def n_agents(self) -> int:
        return len(self.agents)


def critic_input_dim(layout: TransitionLayout, i: int, mode: str) -> int:
    if mode == "maddpg":
        return layout.x_dim + layout.a_dim
    return layout.obs_dims[i] + layout.act_dims[i]


def make_trainer(scenario: Scenario, config: TrainConfig,
                 rng: Optional[np.random.Generator] = None) -> TrainerState:
    config.validate()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    hidden = config.hidden_units or default_hidden_units(scenario.name)
    layout = TransitionLayout(obs_dims=scenario.obs_dims,
                              act_dims=scenario.act_dims)
    agents: list[AgentLearner] = []
    for i in range(scenario.n_agents):
        mode = config.mode_of(i, scenario.n_agents)
        obs_dim = scenario.obs_dims[i]
        act_dim = scenario.act_dims[i]
        actor = init_mlp([obs_dim, hidden, hidden, act_dim], rng,
                         head=actor_head(scenario.comm_dims[i]))
        critic = init_mlp(
            [critic_input_dim(layout, i, mode), hidden, hidden, 1], rng)
        agents.append(AgentLearner(
            actor=actor,
            critic=critic,
            target_actor=actor.copy(),
            target_critic=critic.copy(),
            actor_opt=adam_init(actor, lr=config.lr),
            critic_opt=adam_init(critic, lr=config.lr),
            mode=mode,
        ))
    buffer = ReplayBuffer(config.buffer_capacity, layout)
    return TrainerState(scenario=scenario, config=config, agents=agents,
                        buffer=buffer, layout=layout, rng=rng)


def set_mode(trainer: TrainerState, i: int, mode: str) -> None:
    """Switch agent ``i``'s critic layout; only legal before any training."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if trainer.env_steps > 0:
        raise RuntimeError("cannot change agent mode after training started")
    ag = trainer.agents[i]
    if ag.mode == mode:
        return
    ag.mode = mode
    hidden = ag.critic.dims[1]
    critic = init_mlp(
        [critic_input_dim(trainer.layout, i, mode), hidden, hidden, 1],
        trainer.rng)
    ag.critic = critic
    ag.target_critic = critic.copy()
    ag.critic_opt = adam_init(critic, lr=trainer.config.lr)


def exploration_sigma(config: TrainConfig, episode: int) -> float:
    """Gaussian noise scale: linear anneal over the first
    ``noise_anneal_frac`` of the episode budget, down to ``noise_floor``
    (a residual that keeps the replay distribution from collapsing onto
    deterministic self-play late in training)."""
    if config.episodes <= 0 or config.noise_anneal_frac <= 0:
        return config.noise_sigma
    horizon = config.noise_anneal_frac * config.episodes
    sigma = config.noise_sigma * max(0.0, 1.0 - episode / horizon)
    return max(sigma, min(config.noise_floor, config.noise_sigma))


def act(trainer: TrainerState, observations: Sequence[Array], explore: bool,
        rng: np.random.Generator) -> list[AgentAction]:
    """Decentralized action selection from each agent's own observation.

    Physical slices come from the tanh head, plus Gaussian noise (clamped
    back into [-1, 1]) when exploring. Message slices are Gumbel-Softmax
    samples when exploring and plain softmax otherwise.
    """
    sc = trainer.scenario
    cfg = trainer.config
    sigma = exploration_sigma(cfg, trainer.episodes_done) if explore else 0.0
    out: list[AgentAction] = []
    for i, ag in enumerate(trainer.agents):
        obs = observations[i]
        if obs.shape != (sc.obs_dims[i],):
            raise ValueError(
                f"agent {i} observation shape {obs.shape} != ({sc.obs_dims[i]},)"
            )
        raw = forward_raw(ag.actor, obs)
        phys = np.tanh(raw[:2])
        if explore and sigma > 0:
            phys = np.clip(phys + gaussian_noise(2, sigma, rng), -1.0, 1.0)
        comm = None
        if sc.comm_dims[i]:
            logits = raw[2:]
            if explore:
                comm = gumbel_softmax(logits, cfg.gs_temperature, rng,
                                      hard=cfg.gs_hard)
            else:
                comm = softmax(logits)
        out.append(AgentAction(physical=phys, comm=comm))
    return out


def flat_action(action: AgentAction) -> Array:
    if action.comm is None:
        return np.asarray(action.physical, dtype=float)
    return np.concatenate([action.physical, action.comm])


def _critic_x(trainer: TrainerState, i: int, x: Array, acts: Array) -> Array:
    ag = trainer.agents[i]
    if ag.mode == "maddpg":
        return np.hstack([x, acts])
    lay = trainer.layout
    return np.hstack([x[:, lay.obs_slice(i)], acts[:, lay.act_slice(i)]])


def train_time_action(net: Mlp, obs: Array, comm_dim: int, cfg: TrainConfig,
                      rng: np.random.Generator) -> Array:
    """Batched headed action for update paths: tanh on the physical slice,
    and, when ``gs_in_updates`` is set, a fresh soft Gumbel-Softmax draw per
    row on the message slice (the relaxed-sampling gradient estimator);
    otherwise the deterministic softmax relaxation."""
    raw = forward_raw(net, obs)
    phys = np.tanh(raw[:, :2])
    if not comm_dim:
        return phys
    logits = raw[:, 2:]
    if cfg.gs_in_updates:
        comm = gumbel_softmax(logits, cfg.gs_temperature, rng)
    else:
        comm = softmax(logits, axis=-1)
    return np.hstack([phys, comm])


def target_actions(trainer: TrainerState, x_next: Array,
                   rng: Optional[np.random.Generator] = None) -> Array:
    """Next-step actions of every agent from its target actor, batched."""
    lay = trainer.layout
    rng = rng if rng is not None else trainer.rng
    cols = [train_time_action(ag.target_actor, x_next[:, lay.obs_slice(j)],
                              trainer.scenario.comm_dims[j], trainer.config,
                              rng)
            for j, ag in enumerate(trainer.agents)]
    return np.hstack(cols)


def critic_target(trainer: TrainerState, i: int, batch: Batch,
                  next_acts: Optional[Array] = None,
                  rng: Optional[np.random.Generator] = None) -> Array:
    """Bootstrap regression target: r_i + gamma * Q'_i at the target-actor
    next actions; terminal records drop the bootstrap term."""
    if next_acts is None:
        next_acts = target_actions(trainer, batch.x_next, rng)
    ag = trainer.agents[i]
    xq = _critic_x(trainer, i, batch.x_next, next_acts)
    qn = forward(ag.target_critic, xq)[:, 0]
    keep = 1.0 - batch.terminal.astype(float)
    return batch.rew[:, i] + trainer.config.gamma * keep * qn


def critic_update(trainer: TrainerState, i: int, batch: Batch,
                  y: Optional[Array] = None) -> float:
    """One Adam step on the mean squared error against a fixed target y.

    Returns the pre-step loss. The target never carries gradient; a
    non-finite loss aborts before any parameter is touched.
    """
    if y is None:
        y = critic_target(trainer, i, batch)
    ag = trainer.agents[i]
    xq = _critic_x(trainer, i, batch.x, batch.acts)
    q, cache = forward_cached(ag.critic, xq)
    err = q[:, 0] - y
    loss = float(np.mean(err * err))
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite critic loss for agent {i}")
    upstream = (2.0 / len(batch)) * err[:, None]
    grads, _ = backward(ag.critic, cache, upstream)
    adam_step(ag.critic, grads, ag.critic_opt)
    return loss


def actor_gradient(trainer: TrainerState, i: int, batch: Batch,
                   actor: Optional[Mlp] = None,
                   rng: Optional[np.random.Generator] = None):
    """Gradient of the negated mean critic value w.r.t. agent i's actor.

    Agent i's stored action in each sample is replaced by the actor's
    current output (message slices resampled through Gumbel-Softmax when
    ``gs_in_updates`` is set, with the gradient flowing through the sample);
    the other agents' actions stay as stored. The critic's action-input
    gradient flows back into the actor, plus, when ``actor_logit_reg`` is
    positive, a small L2 pull on the raw pre-head outputs that keeps message
    logits from saturating the simplex head into a zero-gradient corner.
    Returns ``(grads, objective)`` where ``objective`` is the mean critic
    value, so an Adam step on ``grads`` is gradient ascent on the objective.
    """
    ag = trainer.agents[i]
    cfg = trainer.config
    net = actor if actor is not None else ag.actor
    rng = rng if rng is not None else trainer.rng
    if net.head != actor_head(trainer.scenario.comm_dims[i]):
        raise ValueError(
            f"agent {i} actor head {net.head} does not match the scenario's "
            "action layout"
        )
    lay = trainer.layout
    comm_dim = trainer.scenario.comm_dims[i]
    use_gs = cfg.gs_in_updates and comm_dim > 0
    obs_i = batch.x[:, lay.obs_slice(i)]
    y_det, a_cache = forward_cached(net, obs_i)
    raw = a_cache.pre[-1]
    phys = y_det[:, :2]
    comm = None
    if comm_dim:
        comm = (gumbel_softmax(raw[:, 2:], cfg.gs_temperature, rng)
                if use_gs else y_det[:, 2:])
        a_i = np.hstack([phys, comm])
    else:
        a_i = phys
    if ag.mode == "maddpg":
        acts = batch.acts.copy()
        acts[:, lay.act_slice(i)] = a_i
        xq = np.hstack([batch.x, acts])
        sl = lay.act_slice(i)
        col = slice(lay.x_dim + sl.start, lay.x_dim + sl.stop)
    else:
        xq = np.hstack([obs_i, a_i])
        col = slice(lay.obs_dims[i], lay.obs_dims[i] + lay.act_dims[i])
    q, c_cache = forward_cached(ag.critic, xq)
    objective = float(np.mean(q))
    upstream = np.full((len(batch), 1), -1.0 / len(batch))
    _, dxq = backward(ag.critic, c_cache, upstream, need_params=False)
    da = dxq[:, col]
    dz = np.empty_like(raw)
    dz[:, :2] = da[:, :2] * (1.0 - phys * phys)
    if comm_dim:
        temp = cfg.gs_temperature if use_gs else 1.0
        dz[:, 2:] = gumbel_softmax_grad(comm, da[:, 2:], temp)
    if cfg.actor_logit_reg > 0:
        dz += (2.0 * cfg.actor_logit_reg / len(batch)) * raw
    grads, _ = backward(net, a_cache, dz, from_raw=True)
    return grads, objective


def actor_update(trainer: TrainerState, i: int, batch: Batch,
                 grad_scale: float = 1.0,
                 actor: Optional[Mlp] = None,
                 actor_opt: Optional[AdamState] = None) -> float:
    """One ascent step on agent i's actor through its own critic.

    Returns the mean critic value before the step. ``grad_scale`` rescales
    the actor gradient (used by ensemble sub-policy updates); ``actor`` and
    ``actor_opt`` substitute the network being updated without touching the
    critic wiring.
    """
    ag = trainer.agents[i]
    net = actor if actor is not None else ag.actor
    opt = actor_opt if actor_opt is not None else ag.actor_opt
    grads, objective = actor_gradient(trainer, i, batch, actor=net)
    if grad_scale != 1.0:
        grads.scale(grad_scale)
    adam_step(net, grads, opt)
    return objective


TargetFn = Callable[[TrainerState, int, Batch], Array]
RoundHook = Callable[[TrainerState], None]


def update_round(trainer: TrainerState, target_fn: Optional[TargetFn] = None,
                 ) -> dict[int, tuple[float, float]]:
    """One full update round: per agent, critic then actor step on an
    independently sampled batch, followed by soft target updates."""
    cfg = trainer.config
    losses: dict[int, tuple[float, float]] = {}
    for i in range(trainer.n_agents):
        batch = trainer.buffer.sample(cfg.batch_size, trainer.rng)
        y = (target_fn or critic_target)(trainer, i, batch)
        c_loss = critic_update(trainer, i, batch, y)
        a_obj = actor_update(trainer, i, batch)
        losses[i] = (c_loss, a_obj)
    for ag in trainer.agents:
        soft_update(ag.target_actor, ag.actor, cfg.tau)
        soft_update(ag.target_critic, ag.critic, cfg.tau)
    return losses


def train(
    scenario: Scenario,
    config: TrainConfig,
    rng: Optional[np.random.Generator] = None,
    target_fn: Optional[TargetFn] = None,
    round_hook: Optional[RoundHook] = None,
    episode_hook: Optional[Callable[[TrainerState, int, Array], None]] = None,
    trainer: Optional[TrainerState] = None,
) -> tuple[TrainerState, list[dict]]:
    """Run the full training loop and return per-episode return metrics.

    Each environment step stores one joint transition; every
    ``update_every`` stored samples (once the buffer holds a full batch)
    every agent takes one critic and one actor step on its own sampled
    batch and all targets are soft-updated. Hooks let extensions swap the
    bootstrap target or act once per update round; a pre-built trainer may
    be supplied when the caller holds references into it.
    """
    if trainer is None:
        trainer = make_trainer(scenario, config, rng)
    metrics: list[dict] = []
    for ep in range(config.episodes):
        state, obs = scenario.reset(trainer.rng)
        ep_return = np.zeros(scenario.n_agents)
        done = False
        while not done:
            actions = act(trainer, obs, explore=True, rng=trainer.rng)
            x = np.concatenate(obs)
            state, rewards, obs, done = world.step(state, actions, scenario)
            trainer.buffer.push(Transition(
                x=x,
                actions=[flat_action(a) for a in actions],
                rewards=rewards,
                x_next=np.concatenate(obs),
                terminal=done,
            ))
            trainer.env_steps += 1
            ep_return += rewards
            if (trainer.env_steps % config.update_every == 0
                    and trainer.buffer.size >= config.batch_size):
                if round_hook is not None:
                    round_hook(trainer)
                update_round(trainer, target_fn)
        trainer.episodes_done += 1
        row = {"episode": ep}
        for i in range(scenario.n_agents):
            row[f"return_{i}"] = float(ep_return[i])
        metrics.append(row)
        if episode_hook is not None:
            episode_hook(trainer, ep, ep_return)
    return trainer, metrics


# ---------------------------------------------------------------------------
# Deterministic evaluation policies and trainer checkpoints
# ---------------------------------------------------------------------------

class ActorPolicy:
    """Noise-free policy wrapper around a trained actor network."""

    def __init__(self, actor: Mlp, comm_dim: int) -> None:
        self.actor = actor
        self.comm_dim = comm_dim

    def begin_episode(self, rng: np.random.Generator) -> None:
        pass

    def act(self, obs: Array) -> AgentAction:
        raw = forward_raw(self.actor, obs)
        comm = softmax(raw[2:]) if self.comm_dim else None
        return AgentAction(physical=np.tanh(raw[:2]), comm=comm)


def policies_from_trainer(trainer: TrainerState) -> list[ActorPolicy]:
    return [ActorPolicy(ag.actor, trainer.scenario.comm_dims[i])
            for i, ag in enumerate(trainer.agents)]


def _config_to_dict(config: TrainConfig) -> dict:
    d = dict(config.__dict__)
    if isinstance(d["modes"], tuple):
        d["modes"] = list(d["modes"])
    return d


def _config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    if isinstance(d.get("modes"), list):
        d["modes"] = tuple(d["modes"])
    return TrainConfig(**d)


def save_trainer(trainer: TrainerState, path: str,
                 scenario_kwargs: Optional[dict] = None,
                 opponent_models=None) -> str:
    """Checkpoint every network, optimizer state, counters, and the RNG
    stream, enough to evaluate or continue training exactly. When the run
    used opponent-policy inference, each agent's models ride along in the
    same bundle."""
    nets: dict[str, Mlp] = {}
    opts: dict[str, AdamState] = {}
    modes = []
    for i, ag in enumerate(trainer.agents):
        nets[f"agent{i}/actor"] = ag.actor
        nets[f"agent{i}/critic"] = ag.critic
        nets[f"agent{i}/target_actor"] = ag.target_actor
        nets[f"agent{i}/target_critic"] = ag.target_critic
        opts[f"agent{i}/actor"] = ag.actor_opt
        opts[f"agent{i}/critic"] = ag.critic_opt
        modes.append(ag.mode)
    if opponent_models:
        for i, models in opponent_models.items():
            for j, net in models.nets.items():
                nets[f"agent{i}/oppmodel{j}"] = net
                nets[f"agent{i}/oppmodel{j}_target"] = models.targets[j]
                opts[f"agent{i}/oppmodel{j}"] = models.opts[j]
    extra = {
        "kind": "trainer",
        "scenario": trainer.scenario.name,
        "scenario_kwargs": scenario_kwargs or {},
        "config": _config_to_dict(trainer.config),
        "modes": modes,
        "env_steps": trainer.env_steps,
        "episodes_done": trainer.episodes_done,
        "rng_state": trainer.rng.bit_generator.state,
    }
    return save_checkpoint(path, nets, opts, extra)


def load_trainer(path: str) -> TrainerState:
    nets, opts, extra = load_checkpoint(path)
    if extra.get("kind") != "trainer":
        raise ValueError(f"checkpoint at {path} is not a trainer bundle")
    scenario = make_scenario(extra["scenario"], **extra.get("scenario_kwargs", {}))
    config = _config_from_dict(extra["config"])
    layout = TransitionLayout(obs_dims=scenario.obs_dims,
                              act_dims=scenario.act_dims)
    agents = []
    for i, mode in enumerate(extra["modes"]):
        agents.append(AgentLearner(
            actor=nets[f"agent{i}/actor"],
            critic=nets[f"agent{i}/critic"],
            target_actor=nets[f"agent{i}/target_actor"],
            target_critic=nets[f"agent{i}/target_critic"],
            actor_opt=opts[f"agent{i}/actor"],
            critic_opt=opts[f"agent{i}/critic"],
            mode=mode,
        ))
    rng = np.random.default_rng()
    rng.bit_generator.state = extra["rng_state"]
    trainer = TrainerState(
        scenario=scenario, config=config, agents=agents,
        buffer=ReplayBuffer(config.buffer_capacity, layout), layout=layout,
        rng=rng, env_steps=extra["env_steps"],
        episodes_done=extra["episodes_done"],
    )
    return trainer


def load_policies(path: str) -> tuple[list[ActorPolicy], str, dict]:
    """Evaluation policies plus scenario identity from a trainer bundle."""
    nets, _, extra = load_checkpoint(path)
    if extra.get("kind") == "trainer":
        scenario = make_scenario(extra["scenario"],
                                 **extra.get("scenario_kwargs", {}))
        pols = [ActorPolicy(nets[f"agent{i}/actor"], scenario.comm_dims[i])
                for i in range(scenario.n_agents)]
        return pols, extra["scenario"], extra.get("scenario_kwargs", {})
    raise ValueError(f"checkpoint at {path} is not a trainer bundle")
