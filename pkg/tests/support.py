"""Tiny synthetic scenarios used across the test suite."""

from __future__ import annotations

import numpy as np

from mplab.scenarios import Scenario
from mplab.world import ARENA_HALF_WIDTH, AgentAction, Entity, WorldState


class SingleMover(Scenario):
    """One movable, non-collidable agent; zero rewards; obs = [pos, vel]."""

    name = "single_mover"
    horizon = 10

    def __init__(self, horizon: int = 10, max_speed=None) -> None:
        self.horizon = horizon
        self.agents = (Entity(radius=0.1, max_speed=max_speed),)
        self.landmarks = ()
        self.comm_dims = (0,)
        self.is_adversary = (False,)
        self.teams = ((0,),)
        self.obs_dims = (4,)

    def _reset_state(self, rng):
        return self._blank_state(rng)

    def observe(self, state, i):
        return np.concatenate([state.pos[0], state.vel[0]])

    def rewards(self, state, actions):
        return np.zeros(1)


class TwoColliders(Scenario):
    """Two collidable agents, no landmarks, zero rewards."""

    name = "two_colliders"
    horizon = 10

    def __init__(self, radius: float = 0.2) -> None:
        self.agents = (Entity(radius=radius, collidable=True),
                       Entity(radius=radius, collidable=True))
        self.landmarks = ()
        self.comm_dims = (0, 0)
        self.is_adversary = (False, False)
        self.teams = ((0, 1),)
        self.obs_dims = (4, 4)

    def _reset_state(self, rng):
        return self._blank_state(rng)

    def observe(self, state, i):
        return np.concatenate([state.pos[i], state.vel[i]])

    def rewards(self, state, actions):
        return np.zeros(2)


def make_state(scenario: Scenario, positions, velocities=None, comms=None,
               tick: int = 0, meta=None) -> WorldState:
    pos = np.asarray(positions, dtype=float)
    vel = (np.zeros_like(pos) if velocities is None
           else np.asarray(velocities, dtype=float))
    return WorldState(
        pos=pos,
        vel=vel,
        comms=(comms if comms is not None
               else [np.zeros(c) for c in scenario.comm_dims]),
        tick=tick,
        meta=dict(meta or {}),
    )


def still_actions(scenario: Scenario):
    return [
        AgentAction(physical=np.zeros(2),
                    comm=(np.full(c, 1.0 / c) if c else None))
        for c in scenario.comm_dims
    ]


class OracleSpeaker:
    """Scripted speaker: broadcast the observed goal one-hot."""

    def begin_episode(self, rng):
        pass

    def act(self, obs):
        return AgentAction(physical=np.zeros(2), comm=obs.astype(float))


class PDListener:
    """Scripted listener: PD control toward the landmark named by the
    loudest message slot."""

    def __init__(self, kp: float = 3.0, kd: float = 1.5) -> None:
        self.kp = kp
        self.kd = kd

    def begin_episode(self, rng):
        pass

    def act(self, obs):
        vel, rel, comm = obs[:2], obs[2:8].reshape(3, 2), obs[8:]
        k = int(np.argmax(comm))
        force = np.clip(self.kp * rel[k] - self.kd * vel, -1.0, 1.0)
        return AgentAction(physical=force)


class RandomPolicy:
    """Uniform random actions, driven by the evaluation seed stream."""

    def __init__(self, comm_dim: int) -> None:
        self.comm_dim = comm_dim
        self._rng = np.random.default_rng(0)

    def begin_episode(self, rng):
        self._rng = rng

    def act(self, obs):
        comm = None
        if self.comm_dim:
            raw = self._rng.random(self.comm_dim)
            comm = raw / raw.sum()
        return AgentAction(physical=self._rng.uniform(-1, 1, 2), comm=comm)
