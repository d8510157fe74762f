"""Two trainer extensions: online opponent-policy inference and policy
ensembles.

Opponent models let each agent learn, by maximum likelihood with an entropy
bonus, what every other agent does given that agent's observation, and use
the learned (target) models instead of the true target policies when
bootstrapping its centralized critic. Policy ensembles give every agent K
sub-policies, one drawn uniformly per episode, each fed by its own replay
buffer, with actor gradients scaled by 1/K.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

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
    forward_raw,
    init_mlp,
    save_checkpoint,
    load_checkpoint,
    soft_update,
    softmax,
)
from .replay import Batch, ReplayBuffer, Transition
from .scenarios import Scenario, default_hidden_units
from .trainer import (
    TrainConfig,
    TrainerState,
    act,
    actor_update,
    critic_target,
    critic_update,
    flat_action,
    make_trainer,
    train,
    train_time_action,
)
from .world import AgentAction

Array = np.ndarray

_LOG2PI = np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# Opponent-policy inference
# ---------------------------------------------------------------------------

@dataclass
class OpponentModels:
    """Agent ``owner``'s learned approximations of every other agent.

    Each model maps agent j's observation to [Gaussian mean (2) | message
    logits (c_j)]; the physical slice has a fixed standard deviation and
    only its mean is learned.
    """

    owner: int
    nets: dict[int, Mlp]
    targets: dict[int, Mlp]
    opts: dict[int, AdamState]
    sigma: float = 0.1
    lam: float = 0.001


def make_opponent_models(scenario: Scenario, owner: int,
                         rng: np.random.Generator, lr: float,
                         sigma: float = 0.1, lam: float = 0.001,
                         hidden: Optional[int] = None) -> OpponentModels:
    hidden = hidden or default_hidden_units(scenario.name)
    nets, targets, opts = {}, {}, {}
    for j in range(scenario.n_agents):
        if j == owner:
            continue
        net = init_mlp([scenario.obs_dims[j], hidden, hidden,
                        2 + scenario.comm_dims[j]], rng)
        nets[j] = net
        targets[j] = net.copy()
        opts[j] = adam_init(net, lr=lr)
    return OpponentModels(owner=owner, nets=nets, targets=targets, opts=opts,
                          sigma=sigma, lam=lam)


def _model_loss_upstream(models: OpponentModels, comm_dim: int, out: Array,
                         a_phys: Array, a_comm: Optional[Array]):
    """Loss value and d(loss)/d(model output) for one opponent's batch.

    Loss = -mean[log p(a|o) + lam * H(p)]. The Gaussian slice contributes an
    exact log-density with fixed sigma (its entropy is constant, so only the
    likelihood term carries gradient); the message slice scores the stored
    simplex action linearly against the log-probabilities, which reduces to
    the categorical log-likelihood for one-hot actions.
    """
    B = out.shape[0]
    sigma2 = models.sigma * models.sigma
    mean = out[:, 0:2]
    diff = a_phys - mean
    logp = (-0.5 * np.sum(diff * diff, axis=1) / sigma2
            - 2.0 * np.log(models.sigma) - _LOG2PI)
    d_out = np.zeros_like(out)
    d_out[:, 0:2] = -(diff / sigma2) / B
    entropy = np.zeros(B)
    if comm_dim:
        logits = out[:, 2:]
        p = softmax(logits, axis=-1)
        logq = np.log(np.clip(p, 1e-12, None))
        logp = logp + np.sum(a_comm * logq, axis=1)
        entropy = -np.sum(p * logq, axis=1)
        d_like = a_comm - p
        d_ent = -p * (logq + entropy[:, None])
        d_out[:, 2:] = -(d_like + models.lam * d_ent) / B
    loss = float(np.mean(-(logp + models.lam * entropy)))
    return loss, d_out


def opponent_model_update(models: OpponentModels, trainer: TrainerState,
                          window: Batch) -> dict[int, float]:
    """One maximum-likelihood step per modeled agent on the freshest
    transitions, followed by a soft target blend. Strictly online: exactly
    one gradient step per model per call."""
    if len(window) == 0:
        raise ValueError("opponent model update needs a non-empty window")
    lay = trainer.layout
    sc = trainer.scenario
    losses: dict[int, float] = {}
    for j, net in models.nets.items():
        obs_j = window.x[:, lay.obs_slice(j)]
        acts_j = window.acts[:, lay.act_slice(j)]
        a_phys = acts_j[:, 0:2]
        a_comm = acts_j[:, 2:] if sc.comm_dims[j] else None
        out, cache = forward_cached(net, obs_j)
        loss, d_out = _model_loss_upstream(models, sc.comm_dims[j], out,
                                           a_phys, a_comm)
        grads, _ = backward(net, cache, d_out)
        adam_step(net, grads, models.opts[j])
        soft_update(models.targets[j], net, trainer.config.tau)
        losses[j] = loss
    return losses


def model_mode_action(models: OpponentModels, j: int, obs_j: Array,
                      comm_dim: int, use_target: bool = True) -> Array:
    """The model's distribution mode as a flat action: clamped Gaussian mean
    on the physical slice, the full probability vector (expected simplex
    action) on the message slice."""
    net = models.targets[j] if use_target else models.nets[j]
    out = forward(net, obs_j)
    phys = np.clip(out[..., 0:2], -1.0, 1.0)
    if comm_dim:
        return np.concatenate([phys, softmax(out[..., 2:], axis=-1)], axis=-1)
    return phys


def approx_critic_target(trainer: TrainerState, i: int, batch: Batch,
                         models: OpponentModels) -> Array:
    """Bootstrap target with inferred next actions: agent i uses its own
    target actor, everyone else the owner's target opponent model."""
    lay = trainer.layout
    sc = trainer.scenario
    cols = []
    for j in range(trainer.n_agents):
        obs_j = batch.x_next[:, lay.obs_slice(j)]
        if j == i:
            cols.append(train_time_action(trainer.agents[j].target_actor,
                                          obs_j, sc.comm_dims[j],
                                          trainer.config, trainer.rng))
        else:
            cols.append(model_mode_action(models, j, obs_j, sc.comm_dims[j]))
    next_acts = np.hstack(cols)
    return critic_target(trainer, i, batch, next_acts=next_acts)


def model_kl_to_true(trainer: TrainerState, models: OpponentModels,
                     window: Batch) -> dict[int, float]:
    """Mean KL from each true (current actor) policy to its model over the
    window's observations: categorical KL on message slices plus the
    fixed-sigma Gaussian gap ||mu_true - mu_model||^2 / (2 sigma^2)."""
    lay = trainer.layout
    sc = trainer.scenario
    out: dict[int, float] = {}
    sigma2 = models.sigma * models.sigma
    for j, net in models.nets.items():
        obs_j = window.x[:, lay.obs_slice(j)]
        raw_true = forward_raw(trainer.agents[j].actor, obs_j)
        mu_true = np.tanh(raw_true[:, 0:2])
        pred = forward(net, obs_j)
        mu_model = np.clip(pred[:, 0:2], -1.0, 1.0)
        kl = np.sum((mu_true - mu_model) ** 2, axis=1) / (2.0 * sigma2)
        if sc.comm_dims[j]:
            p = softmax(raw_true[:, 2:], axis=-1)
            q = softmax(pred[:, 2:], axis=-1)
            kl = kl + np.sum(p * (np.log(np.clip(p, 1e-12, None))
                                  - np.log(np.clip(q, 1e-12, None))), axis=1)
        out[j] = float(np.mean(kl))
    return out


def train_with_opponent_models(
    scenario: Scenario,
    config: TrainConfig,
    rng: Optional[np.random.Generator] = None,
    sigma: float = 0.1,
    lam: float = 0.001,
    model_lr: float = 0.03,
    kl_every: int = 50,
) -> tuple[TrainerState, list[dict], dict[int, OpponentModels], list[dict]]:
    """Full training loop where every critic bootstraps through learned
    opponent models instead of the true target policies.

    Before each update round, every agent's models take one gradient step on
    the latest ``update_every`` transitions. The models learn faster than
    the policies they chase (``model_lr``, default 3x the policy rate) so
    tracking keeps up with nonstationary targets. Returns the trainer,
    episode metrics, the models, and a KL-trend log (one row per
    ``kl_every`` rounds).
    """
    trainer = make_trainer(scenario, config, rng)
    model_sets = {
        i: make_opponent_models(scenario, i, trainer.rng, lr=model_lr,
                                sigma=sigma, lam=lam,
                                hidden=config.hidden_units)
        for i in range(scenario.n_agents)
    }
    kl_log: list[dict] = []
    round_counter = [0]

    def round_hook(tr: TrainerState) -> None:
        window = tr.buffer.latest(tr.config.update_every)
        for i in range(tr.n_agents):
            opponent_model_update(model_sets[i], tr, window)
        if round_counter[0] % kl_every == 0:
            row: dict = {"round": round_counter[0],
                         "env_steps": tr.env_steps}
            total, count = 0.0, 0
            for i in range(tr.n_agents):
                for j, kl in model_kl_to_true(tr, model_sets[i],
                                              window).items():
                    row[f"kl_{i}_{j}"] = kl
                    total += kl
                    count += 1
            row["kl_mean"] = total / max(count, 1)
            kl_log.append(row)
        round_counter[0] += 1

    def target_fn(tr: TrainerState, i: int, batch: Batch) -> Array:
        return approx_critic_target(tr, i, batch, model_sets[i])

    trainer, metrics = train(scenario, config, target_fn=target_fn,
                             round_hook=round_hook, trainer=trainer)
    return trainer, metrics, model_sets, kl_log


# ---------------------------------------------------------------------------
# Policy ensembles
# ---------------------------------------------------------------------------

class SubPolicyPicker:
    """Per-team uniform sub-policy selector, drawn once per episode."""

    def __init__(self, k: int) -> None:
        self.k = k
        self.current = 0

    def draw(self, rng: np.random.Generator) -> int:
        self.current = int(rng.integers(self.k))
        return self.current


@dataclass
class EnsembleState:
    """K sub-policies per agent on top of a shared per-agent critic."""

    trainer: TrainerState
    k: int
    tie_teams: bool
    actors: list[list[Mlp]]
    target_actors: list[list[Mlp]]
    actor_opts: list[list[AdamState]]
    buffers: list[list[ReplayBuffer]]
    active: list[int] = field(default_factory=list)

    @property
    def scenario(self) -> Scenario:
        return self.trainer.scenario

    @property
    def config(self) -> TrainConfig:
        return self.trainer.config


def make_ensemble(scenario: Scenario, config: TrainConfig, k: int,
                  tie_teams: bool = True,
                  rng: Optional[np.random.Generator] = None) -> EnsembleState:
    if k < 1:
        raise ValueError("ensemble size must be at least 1")
    trainer = make_trainer(scenario, config, rng)
    hidden = config.hidden_units or default_hidden_units(scenario.name)
    actors, t_actors, opts, buffers = [], [], [], []
    for i in range(scenario.n_agents):
        row_a, row_t, row_o, row_b = [], [], [], []
        for _ in range(k):
            net = init_mlp([scenario.obs_dims[i], hidden, hidden,
                            scenario.act_dims[i]], trainer.rng,
                           head=trainer.agents[i].actor.head)
            row_a.append(net)
            row_t.append(net.copy())
            row_o.append(adam_init(net, lr=config.lr))
            row_b.append(ReplayBuffer(config.buffer_capacity, trainer.layout,
                                      track_active=True))
        actors.append(row_a)
        t_actors.append(row_t)
        opts.append(row_o)
        buffers.append(row_b)
    ens = EnsembleState(trainer=trainer, k=k, tie_teams=tie_teams,
                        actors=actors, target_actors=t_actors,
                        actor_opts=opts, buffers=buffers,
                        active=[0] * scenario.n_agents)
    _point_active(ens)
    return ens


def _point_active(ens: EnsembleState) -> None:
    for i, k_i in enumerate(ens.active):
        ens.trainer.agents[i].actor = ens.actors[i][k_i]
        ens.trainer.agents[i].target_actor = ens.target_actors[i][k_i]


def ensemble_begin_episode(ens: EnsembleState,
                           rng: np.random.Generator) -> list[int]:
    """Draw each agent's active sub-policy uniformly; with team tying every
    cooperating group shares one draw."""
    sc = ens.scenario
    if ens.tie_teams:
        active = [0] * sc.n_agents
        for team in sc.teams:
            k_team = int(rng.integers(ens.k))
            for i in team:
                active[i] = k_team
    else:
        active = [int(rng.integers(ens.k)) for _ in range(sc.n_agents)]
    ens.active = active
    _point_active(ens)
    return active


def ensemble_target_actions(ens: EnsembleState, batch: Batch) -> Array:
    """Next actions from the target sub-policies that actually generated
    each sample, per the stored provenance tags."""
    if batch.active is None:
        raise ValueError("batch carries no sub-policy provenance tags")
    tr = ens.trainer
    lay = tr.layout
    cols = []
    for j in range(tr.n_agents):
        obs_j = batch.x_next[:, lay.obs_slice(j)]
        out = np.zeros((len(batch), lay.act_dims[j]))
        for k in range(ens.k):
            mask = batch.active[:, j] == k
            if mask.any():
                out[mask] = train_time_action(
                    ens.target_actors[j][k], obs_j[mask],
                    tr.scenario.comm_dims[j], tr.config, tr.rng)
        cols.append(out)
    return np.hstack(cols)


def ensemble_update(ens: EnsembleState, i: int, k: int) -> tuple[float, float]:
    """Critic and sub-policy-k actor step on a batch from D_i^(k) only.

    The actor gradient is scaled by 1/K. Skips (returning NaNs) when the
    sub-policy's buffer cannot fill a batch yet.
    """
    tr = ens.trainer
    cfg = tr.config
    buf = ens.buffers[i][k]
    if buf.size < cfg.batch_size:
        return float("nan"), float("nan")
    batch = buf.sample(cfg.batch_size, tr.rng)
    y = critic_target(tr, i, batch, next_acts=ensemble_target_actions(ens, batch))
    c_loss = critic_update(tr, i, batch, y=y)
    a_obj = actor_update(tr, i, batch, grad_scale=1.0 / ens.k,
                         actor=ens.actors[i][k],
                         actor_opt=ens.actor_opts[i][k])
    return c_loss, a_obj


def train_ensemble(scenario: Scenario, config: TrainConfig, k: int,
                   tie_teams: bool = True,
                   rng: Optional[np.random.Generator] = None,
                   ) -> tuple[EnsembleState, list[dict]]:
    """Ensemble training loop: per episode one active sub-policy per agent;
    every transition lands in each agent's active sub-policy buffer with
    full provenance tags; update rounds sweep every sub-policy whose buffer
    holds a batch, then soft-update critics and all sub-policy targets."""
    ens = make_ensemble(scenario, config, k, tie_teams, rng)
    tr = ens.trainer
    metrics: list[dict] = []
    for ep in range(config.episodes):
        ensemble_begin_episode(ens, tr.rng)
        state, obs = scenario.reset(tr.rng)
        ep_return = np.zeros(scenario.n_agents)
        done = False
        while not done:
            actions = act(tr, obs, explore=True, rng=tr.rng)
            x = np.concatenate(obs)
            state, rewards, obs, done = world.step(state, actions, scenario)
            transition = Transition(
                x=x,
                actions=[flat_action(a) for a in actions],
                rewards=rewards,
                x_next=np.concatenate(obs),
                terminal=done,
                active=tuple(ens.active),
            )
            for i in range(scenario.n_agents):
                ens.buffers[i][ens.active[i]].push(transition)
            tr.env_steps += 1
            ep_return += rewards
            if tr.env_steps % config.update_every == 0:
                for i in range(scenario.n_agents):
                    for kk in range(ens.k):
                        ensemble_update(ens, i, kk)
                for i, ag in enumerate(tr.agents):
                    soft_update(ag.target_critic, ag.critic, config.tau)
                    for kk in range(ens.k):
                        soft_update(ens.target_actors[i][kk],
                                    ens.actors[i][kk], config.tau)
        tr.episodes_done += 1
        row = {"episode": ep}
        for i in range(scenario.n_agents):
            row[f"return_{i}"] = float(ep_return[i])
        metrics.append(row)
    return ens, metrics


class EnsemblePolicy:
    """Evaluation policy that plays the picker's current sub-policy."""

    def __init__(self, actors: list[Mlp], comm_dim: int,
                 picker: SubPolicyPicker) -> None:
        self.actors = actors
        self.comm_dim = comm_dim
        self.picker = picker

    def begin_episode(self, rng: np.random.Generator) -> None:
        self.picker.draw(rng)

    def act(self, obs: Array) -> AgentAction:
        raw = forward_raw(self.actors[self.picker.current], obs)
        comm = softmax(raw[2:]) if self.comm_dim else None
        return AgentAction(physical=np.tanh(raw[:2]), comm=comm)


def policies_from_ensemble(ens: EnsembleState) -> list[EnsemblePolicy]:
    sc = ens.scenario
    if ens.tie_teams:
        pickers: dict[int, SubPolicyPicker] = {}
        for team in sc.teams:
            picker = SubPolicyPicker(ens.k)
            for i in team:
                pickers[i] = picker
    else:
        pickers = {i: SubPolicyPicker(ens.k) for i in range(sc.n_agents)}
    return [EnsemblePolicy(ens.actors[i], sc.comm_dims[i], pickers[i])
            for i in range(sc.n_agents)]


def save_ensemble(ens: EnsembleState, path: str,
                  scenario_kwargs: Optional[dict] = None) -> str:
    nets: dict[str, Mlp] = {}
    for i in range(ens.scenario.n_agents):
        for k in range(ens.k):
            nets[f"agent{i}/actor{k}"] = ens.actors[i][k]
            nets[f"agent{i}/target_actor{k}"] = ens.target_actors[i][k]
        nets[f"agent{i}/critic"] = ens.trainer.agents[i].critic
        nets[f"agent{i}/target_critic"] = ens.trainer.agents[i].target_critic
    cfg = dict(ens.config.__dict__)
    if isinstance(cfg["modes"], tuple):
        cfg["modes"] = list(cfg["modes"])
    extra = {
        "kind": "ensemble",
        "scenario": ens.scenario.name,
        "scenario_kwargs": scenario_kwargs or {},
        "k": ens.k,
        "tie_teams": ens.tie_teams,
        "config": cfg,
        "comm_dims": list(ens.scenario.comm_dims),
        "env_steps": ens.trainer.env_steps,
        "rng_state": ens.trainer.rng.bit_generator.state,
    }
    return save_checkpoint(path, nets, {}, extra)


def load_ensemble_policies(path: str) -> tuple[list[EnsemblePolicy], str, dict]:
    from .scenarios import make_scenario

    nets, _, extra = load_checkpoint(path)
    if extra.get("kind") != "ensemble":
        raise ValueError(f"checkpoint at {path} is not an ensemble bundle")
    sc = make_scenario(extra["scenario"], **extra.get("scenario_kwargs", {}))
    k = extra["k"]
    pickers: dict[int, SubPolicyPicker] = {}
    for team in sc.teams:
        picker = SubPolicyPicker(k)
        for i in team:
            pickers[i] = picker
    if not extra["tie_teams"]:
        pickers = {i: SubPolicyPicker(k) for i in range(sc.n_agents)}
    pols = []
    for i in range(sc.n_agents):
        actors = [nets[f"agent{i}/actor{kk}"] for kk in range(k)]
        pols.append(EnsemblePolicy(actors, sc.comm_dims[i], pickers[i]))
    return pols, extra["scenario"], extra.get("scenario_kwargs", {})
