"""Gradient-direction analysis, evaluation metrics, and cross-play.

The binary coordination game quantifies how often a single-sample score
estimator points within 90 degrees of the true gradient as the agent count
grows, both by exact enumeration and Monte Carlo. The evaluation harness
runs deterministic rollouts and reports per-scenario metrics; cross-play
pits policy sets trained under different algorithms against each other and
min-max normalizes the agent-side metric across the pairing matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import world
from .scenarios import REACH_THRESHOLD, Scenario

Array = np.ndarray

ENUM_LIMIT = 20


# ---------------------------------------------------------------------------
# Binary coordination game
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BinaryCoordGame:
    """N agents flip independent biased coins; payoff 1 iff every coin is 1."""

    n_agents: int
    theta: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.n_agents < 1:
            raise ValueError("need at least one agent")
        if len(self.theta) != self.n_agents:
            raise ValueError("theta length must match agent count")
        for t in self.theta:
            if not 0.0 < t < 1.0:
                raise ValueError("theta entries must lie strictly in (0, 1)")

    @staticmethod
    def uninformed(n_agents: int) -> "BinaryCoordGame":
        return BinaryCoordGame(n_agents, (0.5,) * n_agents)


def reward_all_ones(actions: Array) -> Array:
    """1 where every agent played 1, else 0; works on (N,) or (B, N)."""
    return np.all(np.asarray(actions) == 1, axis=-1).astype(float)


def sample_gradient(game: BinaryCoordGame, actions: Array,
                    reward: float) -> Array:
    """Single-sample score estimator R * (a_i/theta_i - (1-a_i)/(1-theta_i))."""
    a = np.asarray(actions, dtype=float)
    th = np.asarray(game.theta)
    return reward * (a / th - (1.0 - a) / (1.0 - th))


def uninformed_sample_gradient(actions: Array, reward) -> Array:
    """The reduced estimator R * (2 a_i - 1) for the uninformed theta = 0.5
    initialization; all closed-form direction/variance results quoted by the
    analysis harness are for this form."""
    a = np.asarray(actions, dtype=float)
    reward = np.asarray(reward, dtype=float)
    if reward.ndim:
        return reward[..., None] * (2.0 * a - 1.0)
    return float(reward) * (2.0 * a - 1.0)


@dataclass(frozen=True)
class Prop1Exact:
    """Exact enumeration results for the uninformed game."""

    n_agents: int
    e_reward: float
    gradient: Array            # E[ĝ] per coordinate
    variance: Array            # V[ĝ] per coordinate
    direction_prob: float      # P(<ĝ, E ĝ> > 0)

    @property
    def snr(self) -> float:
        return float(self.gradient[0] / np.sqrt(self.variance[0]))


def _enumerate_profiles(n: int) -> Array:
    masks = np.arange(2 ** n, dtype=np.int64)
    return ((masks[:, None] >> np.arange(n)) & 1).astype(float)


def exact_uninformed_stats(n_agents: int) -> Prop1Exact:
    """Exact enumeration over all 2^N joint actions at theta = 0.5 with the
    reduced estimator. Everything here is a (sum of) exact powers of two, so
    results are bit-exact for N well past 16."""
    if n_agents > ENUM_LIMIT:
        raise ValueError(f"enumeration limited to N <= {ENUM_LIMIT}")
    profiles = _enumerate_profiles(n_agents)
    probs = np.full(len(profiles), 0.5 ** n_agents)
    rewards = reward_all_ones(profiles)
    ghat = uninformed_sample_gradient(profiles, rewards)
    grad = probs @ ghat
    second = probs @ (ghat * ghat)
    variance = second - grad * grad
    inner = ghat @ grad
    direction_prob = float(np.sum(probs[inner > 0.0]))
    return Prop1Exact(
        n_agents=n_agents,
        e_reward=float(probs @ rewards),
        gradient=grad,
        variance=variance,
        direction_prob=direction_prob,
    )


def exact_gradient_and_prob(game: BinaryCoordGame):
    """General-theta enumeration: true gradient, expected reward, and the
    probability that the single-sample score estimator has positive inner
    product with the true gradient."""
    n = game.n_agents
    if n > ENUM_LIMIT:
        raise ValueError(f"enumeration limited to N <= {ENUM_LIMIT}")
    profiles = _enumerate_profiles(n)
    th = np.asarray(game.theta)
    probs = np.prod(np.where(profiles == 1.0, th, 1.0 - th), axis=1)
    rewards = reward_all_ones(profiles)
    score = profiles / th - (1.0 - profiles) / (1.0 - th)
    ghat = rewards[:, None] * score
    grad = probs @ ghat      # unbiased: equals the true gradient of E[R]
    inner = ghat @ grad
    direction_prob = float(np.sum(probs[inner > 0.0]))
    return grad, float(probs @ rewards), direction_prob


def mc_direction_prob(game: BinaryCoordGame, samples: int,
                      rng: np.random.Generator) -> tuple[float, float]:
    """Monte-Carlo estimate of the positive-inner-product probability with
    its binomial standard error."""
    if samples < 1:
        raise ValueError("samples must be positive")
    th = np.asarray(game.theta)
    actions = (rng.random((samples, game.n_agents)) < th).astype(float)
    rewards = reward_all_ones(actions)
    if all(t == 0.5 for t in game.theta):
        ghat = uninformed_sample_gradient(actions, rewards)
        grad = exact_uninformed_stats(game.n_agents).gradient
    else:
        score = actions / th - (1.0 - actions) / (1.0 - th)
        ghat = rewards[:, None] * score
        grad, _, _ = exact_gradient_and_prob(game)
    hits = (ghat @ grad) > 0.0
    p_hat = float(np.mean(hits))
    stderr = float(np.sqrt(max(p_hat * (1.0 - p_hat), 1e-300) / samples))
    return p_hat, stderr


def prop1_sweep(n_values: Sequence[int], samples: int,
                rng: np.random.Generator) -> list[dict]:
    """Per-N rows of exact and Monte-Carlo direction statistics."""
    rows = []
    for n in n_values:
        exact = exact_uninformed_stats(n)
        mc_p, stderr = mc_direction_prob(BinaryCoordGame.uninformed(n),
                                         samples, rng)
        rows.append({
            "n_agents": n,
            "exact_p": exact.direction_prob,
            "mc_p": mc_p,
            "stderr": stderr,
            "exact_e_reward": exact.e_reward,
            "snr": exact.snr,
        })
    return rows


# ---------------------------------------------------------------------------
# Deterministic evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    scenario: str
    episodes: int
    policy_names: tuple[str, ...]
    metrics: dict[str, float]
    normalized_score: float

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "episodes": self.episodes,
            "policy_names": list(self.policy_names),
            "metrics": self.metrics,
            "normalized_score": self.normalized_score,
        }


def _begin_episode(policies, rng: np.random.Generator) -> None:
    # Policies sharing a sub-policy picker (team-tied ensembles) must draw
    # exactly once per episode.
    seen: set[int] = set()
    for p in policies:
        picker = getattr(p, "picker", None)
        key = id(picker) if picker is not None else id(p)
        if key in seen:
            continue
        seen.add(key)
        p.begin_episode(rng)


def rollout_episode(scenario: Scenario, policies, rng: np.random.Generator):
    """One deterministic episode; returns (states, actions_seq, rewards_seq)
    with states[0] being the reset state."""
    _begin_episode(policies, rng)
    state, obs = scenario.reset(rng)
    states = [state]
    actions_seq = []
    rewards_seq = []
    done = False
    while not done:
        acts = [p.act(o) for p, o in zip(policies, obs)]
        state, rew, obs, done = world.step(state, acts, scenario)
        states.append(state)
        actions_seq.append(acts)
        rewards_seq.append(rew)
    return states, actions_seq, rewards_seq


def _episode_metrics(scenario: Scenario, states, actions_seq,
                     rewards_seq) -> dict[str, float]:
    name = scenario.name
    final = states[-1]
    out: dict[str, float] = {}
    if name == "coop_comm":
        goal = scenario.landmark_pos(final, final.meta["goal"])
        d = float(np.linalg.norm(final.pos[1] - goal))
        out["final_distance"] = d
        out["target_reach"] = float(d < REACH_THRESHOLD)
    elif name == "coop_nav":
        dists, collisions = [], 0
        for st in states[1:]:
            step_sum = 0.0
            for j in range(scenario.n_landmarks):
                lm = scenario.landmark_pos(st, j)
                step_sum += float(
                    np.linalg.norm(st.pos[:scenario.n_agents] - lm,
                                   axis=1).min())
            dists.append(step_sum)
            collisions += len(world.collision_pairs(scenario, st))
        out["avg_dist"] = float(np.mean(dists))
        out["collisions"] = float(collisions)
    elif name == "keep_away":
        frames = 0
        for st in states[1:]:
            goal = scenario.landmark_pos(st, st.meta["goal"])
            if float(np.linalg.norm(st.pos[1] - goal)) < REACH_THRESHOLD:
                frames += 1
        out["adv_occupancy_frames"] = float(frames)
    elif name == "physical_deception":
        goal = scenario.landmark_pos(final, final.meta["goal"])
        coop_d = float(np.linalg.norm(final.pos[0:2] - goal, axis=1).min())
        adv_d = float(np.linalg.norm(final.pos[2] - goal))
        out["agent_success"] = float(coop_d < REACH_THRESHOLD)
        out["adversary_success"] = float(adv_d < REACH_THRESHOLD)
    elif name == "predator_prey":
        out["touches"] = float(sum(scenario.touches(st) for st in states[1:]))
    elif name == "covert_comm":
        msg = final.meta["message"]
        bob = actions_seq[-1][1].comm
        eve = actions_seq[-1][2].comm
        out["bob_success"] = float(int(np.argmax(bob)) == msg)
        out["eve_success"] = float(int(np.argmax(eve)) == msg)
    else:
        raise ValueError(f"no evaluation metrics for scenario {name!r}")
    out["return_agent"] = float(
        np.sum([r[scenario.cooperator_indices[0]] for r in rewards_seq]))
    if scenario.adversary_indices:
        out["return_adversary"] = float(
            np.sum([r[scenario.adversary_indices[0]] for r in rewards_seq]))
    return out


def _summarize(scenario: Scenario, rows: list[dict]) -> tuple[dict, float]:
    name = scenario.name
    agg = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
    metrics: dict[str, float] = {}
    if name == "coop_comm":
        metrics["target_reach_pct"] = 100.0 * agg["target_reach"]
        metrics["avg_final_distance"] = agg["final_distance"]
        score = agg["target_reach"]
    elif name == "coop_nav":
        metrics["avg_dist"] = agg["avg_dist"]
        metrics["collisions_per_episode"] = agg["collisions"]
        score = 1.0 / (1.0 + agg["avg_dist"])
    elif name == "keep_away":
        metrics["adv_occupancy_frames"] = agg["adv_occupancy_frames"]
        score = 1.0 - agg["adv_occupancy_frames"] / scenario.horizon
    elif name == "physical_deception":
        metrics["agent_succ_pct"] = 100.0 * agg["agent_success"]
        metrics["adv_succ_pct"] = 100.0 * agg["adversary_success"]
        metrics["delta_succ_pct"] = (metrics["agent_succ_pct"]
                                     - metrics["adv_succ_pct"])
        score = (metrics["delta_succ_pct"] + 100.0) / 200.0
    elif name == "predator_prey":
        metrics["touches_per_episode"] = agg["touches"]
        score = agg["touches"] / (1.0 + agg["touches"])
    else:  # covert_comm
        metrics["bob_succ_pct"] = 100.0 * agg["bob_success"]
        metrics["eve_succ_pct"] = 100.0 * agg["eve_success"]
        metrics["delta_succ_pct"] = (metrics["bob_succ_pct"]
                                     - metrics["eve_succ_pct"])
        score = (metrics["delta_succ_pct"] + 100.0) / 200.0
    metrics["mean_return_agent"] = agg["return_agent"]
    if "return_adversary" in agg:
        metrics["mean_return_adversary"] = agg["return_adversary"]
    return metrics, float(np.clip(score, 0.0, 1.0))


def agent_side_metric(scenario_name: str, metrics: dict[str, float]) -> float:
    """The cooperator-side headline number used for cross-play scoring
    (higher is always better for the agent side)."""
    if scenario_name == "coop_comm":
        return metrics["target_reach_pct"]
    if scenario_name == "coop_nav":
        return -metrics["avg_dist"]
    if scenario_name == "keep_away":
        return -metrics["adv_occupancy_frames"]
    if scenario_name == "physical_deception":
        return metrics["delta_succ_pct"]
    if scenario_name == "predator_prey":
        return metrics["touches_per_episode"]
    if scenario_name == "covert_comm":
        return metrics["delta_succ_pct"]
    raise ValueError(f"no agent-side metric for {scenario_name!r}")


def evaluate(scenario: Scenario, policies, episodes: int,
             rng: np.random.Generator,
             policy_names: Optional[Sequence[str]] = None) -> EvalReport:
    """Noise-free rollouts; averages the scenario's metrics over episodes."""
    if len(policies) != scenario.n_agents:
        raise ValueError(
            f"{scenario.name} needs {scenario.n_agents} policies, "
            f"got {len(policies)}"
        )
    rows = []
    for _ in range(episodes):
        states, acts, rews = rollout_episode(scenario, policies, rng)
        rows.append(_episode_metrics(scenario, states, acts, rews))
    metrics, score = _summarize(scenario, rows)
    names = tuple(policy_names) if policy_names else \
        tuple(type(p).__name__ for p in policies)
    return EvalReport(scenario=scenario.name, episodes=episodes,
                      policy_names=names, metrics=metrics,
                      normalized_score=score)


# ---------------------------------------------------------------------------
# Cross-play
# ---------------------------------------------------------------------------

@dataclass
class CrossplayResult:
    scenario: str
    agent_labels: tuple[str, ...]
    adversary_labels: tuple[str, ...]
    raw: Array           # agent-side metric, rows = agent sets
    normalized: Array    # min-max normalized into [0, 1]
    reports: list[list[EvalReport]]

    def to_rows(self) -> list[dict]:
        rows = []
        for ai, a_label in enumerate(self.agent_labels):
            for bi, b_label in enumerate(self.adversary_labels):
                rows.append({
                    "agent_policy": a_label,
                    "adversary_policy": b_label,
                    "raw_metric": float(self.raw[ai, bi]),
                    "normalized_score": float(self.normalized[ai, bi]),
                })
        return rows


def crossplay(scenario: Scenario, agent_sets, adversary_sets, episodes: int,
              seed: int,
              agent_labels: Optional[Sequence[str]] = None,
              adversary_labels: Optional[Sequence[str]] = None,
              ) -> CrossplayResult:
    """Evaluate every (agent-side, adversary-side) pairing.

    ``agent_sets`` and ``adversary_sets`` are lists of full per-agent policy
    lists; each pairing takes cooperator slots from the agent set and
    adversary slots from the adversary set. Every cell runs on its own seed
    stream so the matrix is order-independent and reproducible.
    """
    if not scenario.adversary_indices:
        raise ValueError(f"{scenario.name} has no adversaries to cross-play")
    if not agent_sets or not adversary_sets:
        raise ValueError("need at least one policy set per side")
    raw = np.zeros((len(agent_sets), len(adversary_sets)))
    reports: list[list[EvalReport]] = []
    for ai, a_set in enumerate(agent_sets):
        row = []
        for bi, b_set in enumerate(adversary_sets):
            joint = list(a_set)
            for idx in scenario.adversary_indices:
                joint[idx] = b_set[idx]
            rng = np.random.default_rng([seed, ai, bi])
            rep = evaluate(scenario, joint, episodes, rng)
            raw[ai, bi] = agent_side_metric(scenario.name, rep.metrics)
            row.append(rep)
        reports.append(row)
    lo, hi = float(raw.min()), float(raw.max())
    if hi - lo < 1e-12:
        normalized = np.full_like(raw, 0.5)
    else:
        normalized = (raw - lo) / (hi - lo)
    return CrossplayResult(
        scenario=scenario.name,
        agent_labels=tuple(agent_labels or
                           [f"agents_{i}" for i in range(len(agent_sets))]),
        adversary_labels=tuple(adversary_labels or
                               [f"adv_{i}" for i in range(len(adversary_sets))]),
        raw=raw,
        normalized=normalized,
        reports=reports,
    )


# ---------------------------------------------------------------------------
# Trajectory export
# ---------------------------------------------------------------------------

def trajectory_records(scenario: Scenario, states, actions_seq, rewards_seq,
                       episode: int) -> list[dict]:
    """JSON-able per-step records; the reset state appears as tick 0 with
    null actions and rewards."""
    records = []
    for t, st in enumerate(states):
        rec = {
            "episode": episode,
            "tick": int(st.tick),
            "positions": st.pos.tolist(),
            "velocities": st.vel.tolist(),
            "comms": [c.tolist() for c in st.comms],
            "actions": None,
            "rewards": None,
        }
        if t > 0:
            acts = actions_seq[t - 1]
            rec["actions"] = [{
                "physical": a.physical.tolist(),
                "comm": None if a.comm is None else a.comm.tolist(),
            } for a in acts]
            rec["rewards"] = [float(r) for r in rewards_seq[t - 1]]
        records.append(rec)
    return records


def export_trajectories(scenario: Scenario, policies, episodes: int,
                        rng: np.random.Generator, path: str) -> list[dict]:
    """Write JSONL rollout records and return per-episode metric summaries."""
    summaries = []
    with open(path, "w", encoding="utf-8") as fh:
        for ep in range(episodes):
            states, acts, rews = rollout_episode(scenario, policies, rng)
            for rec in trajectory_records(scenario, states, acts, rews, ep):
                fh.write(json.dumps(rec) + "\n")
            row = _episode_metrics(scenario, states, acts, rews)
            row["episode"] = ep
            summaries.append(row)
    return summaries
