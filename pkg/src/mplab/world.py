"""Deterministic 2D particle world: continuous space, discrete time.

Entities are circles with mass and optional speed caps. Movable entities
integrate with a semi-implicit Euler step under per-agent force commands,
soft contact repulsion between collidable pairs, and a quadratic soft wall
that keeps runaways near the arena. The engine is pure state-in/state-out;
scenario logic (resets, observations, rewards) lives in ``scenarios``.

Dynamic state is kept as (n_entities, 2) position/velocity arrays ordered
agents-first then landmarks; static per-entity properties (radius, mass,
speed cap, flags) live on the scenario's entity roster.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

Array = np.ndarray

# Frozen physics constants. Chosen so a full-throttle agent crosses the arena
# in a handful of steps, leaving time for multi-step maneuvers within a
# 25-step episode.
DT = 0.1
DAMPING = 0.25
FORCE_GAIN = 5.0
CONTACT_GAIN = 100.0
CONTACT_MARGIN = 0.25
CONTACT_EPS = 1e-9          # softplus tail below this is treated as zero
ARENA_HALF_WIDTH = 1.0
BOUNDARY_GAIN = 50.0        # quadratic wall outside the arena, zero inside


@dataclass(frozen=True)
class Entity:
    """Static description of one circle in the world."""

    radius: float
    mass: float = 1.0
    max_speed: Optional[float] = None
    movable: bool = True
    collidable: bool = False
    color_tag: int = 0

    def __post_init__(self) -> None:
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.mass <= 0:
            raise ValueError("mass must be positive")


@dataclass
class WorldState:
    """Dynamic world snapshot: rows are agents first, landmarks after."""

    pos: Array                      # (n_entities, 2)
    vel: Array                      # (n_entities, 2)
    comms: list[Array]              # latest broadcast per agent ((0,) if silent)
    tick: int = 0
    meta: dict = field(default_factory=dict)

    def copy(self) -> "WorldState":
        return WorldState(
            pos=self.pos.copy(),
            vel=self.vel.copy(),
            comms=[c.copy() for c in self.comms],
            tick=self.tick,
            meta=dict(self.meta),
        )


@dataclass
class AgentAction:
    """One agent's command: a force in [-1, 1]^2 plus an optional simplex
    message."""

    physical: Array
    comm: Optional[Array] = None


JointAction = Sequence[AgentAction]


def softplus(x: Array) -> Array:
    # Overflow-safe: softplus(x) = max(x, 0) + log1p(exp(-|x|))
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def contact_force(delta: Array, dist: float, r_sum: float) -> Array:
    """Repulsive force on the first entity of an overlapping pair.

    Softplus penetration model: the force magnitude is
    CONTACT_GAIN * CONTACT_MARGIN * softplus((r_sum - dist) / CONTACT_MARGIN)
    directed along ``delta`` (first minus second position). Coincident
    centers push along +x to break the singularity deterministically.
    """
    penetration = CONTACT_MARGIN * softplus((r_sum - dist) / CONTACT_MARGIN)
    if penetration < CONTACT_EPS:
        return np.zeros(2)
    if dist < 1e-12:
        direction = np.array([1.0, 0.0])
    else:
        direction = delta / dist
    return CONTACT_GAIN * penetration * direction


def contact_force_between(scenario, state: WorldState, i: int, j: int) -> Array:
    """Force on entity ``i`` from entity ``j`` (both must be collidable)."""
    ents = scenario.entities
    if not (ents[i].collidable and ents[j].collidable):
        raise ValueError("contact force requires two collidable entities")
    delta = state.pos[i] - state.pos[j]
    dist = float(np.hypot(delta[0], delta[1]))
    return contact_force(delta, dist, ents[i].radius + ents[j].radius)


def boundary_force(pos: Array) -> Array:
    """Quadratic restoring force outside the arena; exactly zero inside."""
    overshoot = np.maximum(np.abs(pos) - ARENA_HALF_WIDTH, 0.0)
    return -np.sign(pos) * BOUNDARY_GAIN * overshoot * overshoot


def collision_pairs(scenario, state: WorldState) -> list[tuple[int, int]]:
    """Collidable entity pairs whose centers are closer than the radius sum."""
    ents = scenario.entities
    idx = [k for k, e in enumerate(ents) if e.collidable]
    out = []
    for a in range(len(idx)):
        for b in range(a + 1, len(idx)):
            i, j = idx[a], idx[b]
            d = float(np.hypot(*(state.pos[i] - state.pos[j])))
            if d < ents[i].radius + ents[j].radius:
                out.append((i, j))
    return out


def step(state: WorldState, actions: JointAction, scenario):
    """Advance the world one tick.

    Returns ``(next_state, rewards, observations, done)``. Rewards and the
    collision bookkeeping are evaluated at the post-step state. Raises on
    NaN/Inf action entries; physical commands are clamped into [-1, 1]^2.
    """
    n_agents = scenario.n_agents
    if len(actions) != n_agents:
        raise ValueError(f"expected {n_agents} actions, got {len(actions)}")
    for i, act in enumerate(actions):
        if not np.isfinite(act.physical).all():
            raise ValueError(f"non-finite physical action for agent {i}")
        if act.comm is not None and not np.isfinite(act.comm).all():
            raise ValueError(f"non-finite comm action for agent {i}")
        want = scenario.comm_dims[i]
        got = 0 if act.comm is None else len(act.comm)
        if got != want:
            raise ValueError(f"agent {i} comm dim {got} != {want}")

    ents = scenario.entities
    new = state.copy()

    if scenario.has_physics:
        n_ent = len(ents)
        forces = np.zeros((n_ent, 2))
        for i in range(n_agents):
            if ents[i].movable:
                forces[i] = FORCE_GAIN * np.clip(actions[i].physical, -1.0, 1.0)
        collidable = [k for k, e in enumerate(ents) if e.collidable]
        for a in range(len(collidable)):
            for b in range(a + 1, len(collidable)):
                i, j = collidable[a], collidable[b]
                if not (ents[i].movable or ents[j].movable):
                    continue
                delta = state.pos[i] - state.pos[j]
                dist = float(np.hypot(delta[0], delta[1]))
                f = contact_force(delta, dist, ents[i].radius + ents[j].radius)
                forces[i] += f
                forces[j] -= f
        for k, e in enumerate(ents):
            if not e.movable:
                continue
            f = forces[k] + boundary_force(state.pos[k])
            v = (1.0 - DAMPING) * state.vel[k] + (f / e.mass) * DT
            if e.max_speed is not None:
                speed = float(np.hypot(v[0], v[1]))
                if speed > e.max_speed:
                    v = v * (e.max_speed / speed)
            new.vel[k] = v
            new.pos[k] = state.pos[k] + v * DT

    for i in range(n_agents):
        if scenario.comm_dims[i] > 0:
            new.comms[i] = np.asarray(actions[i].comm, dtype=float).copy()

    new.tick = state.tick + 1
    rewards = scenario.rewards(new, actions)
    obs = [scenario.observe(new, i) for i in range(n_agents)]
    done = new.tick >= scenario.horizon
    return new, rewards, obs, done
