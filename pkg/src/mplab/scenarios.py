"""The six particle-world scenarios.

Each scenario fixes its entity roster, reset distribution, per-agent
observation layout, reward rule, and episode horizon. Observation layouts
are frozen here and documented per class (the slice order is arbitrary but
must never change once runs exist).

Agent ordering convention: cooperating agents first, adversaries last.
Landmark rows follow all agent rows in the world state arrays.
"""

from __future__ import annotations

import numpy as np

from .world import ARENA_HALF_WIDTH, Entity, WorldState, collision_pairs

Array = np.ndarray

SCENARIO_NAMES = (
    "coop_comm",
    "coop_nav",
    "keep_away",
    "physical_deception",
    "predator_prey",
    "covert_comm",
)

# Distance under which an agent counts as having reached / occupying a
# landmark in evaluation metrics.
REACH_THRESHOLD = 0.15

_LOG_CLIP = 1e-10


def _one_hot(idx: int, n: int) -> Array:
    v = np.zeros(n)
    v[idx] = 1.0
    return v


def _uniform_positions(rng: np.random.Generator, n: int) -> Array:
    return rng.uniform(-ARENA_HALF_WIDTH, ARENA_HALF_WIDTH, size=(n, 2))


class Scenario:
    """Shared plumbing: rosters, dimension bookkeeping, reset helpers."""

    name: str
    horizon: int
    has_physics: bool = True
    agents: tuple[Entity, ...]
    landmarks: tuple[Entity, ...]
    comm_dims: tuple[int, ...]
    is_adversary: tuple[bool, ...]
    teams: tuple[tuple[int, ...], ...]
    obs_dims: tuple[int, ...]

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def n_landmarks(self) -> int:
        return len(self.landmarks)

    @property
    def entities(self) -> tuple[Entity, ...]:
        return self.agents + self.landmarks

    @property
    def act_dims(self) -> tuple[int, ...]:
        return tuple(2 + c for c in self.comm_dims)

    @property
    def cooperator_indices(self) -> tuple[int, ...]:
        return tuple(i for i, adv in enumerate(self.is_adversary) if not adv)

    @property
    def adversary_indices(self) -> tuple[int, ...]:
        return tuple(i for i, adv in enumerate(self.is_adversary) if adv)

    def landmark_pos(self, state: WorldState, j: int) -> Array:
        return state.pos[self.n_agents + j]

    def _blank_state(self, rng: np.random.Generator) -> WorldState:
        n = len(self.entities)
        return WorldState(
            pos=_uniform_positions(rng, n),
            vel=np.zeros((n, 2)),
            comms=[np.zeros(c) for c in self.comm_dims],
            tick=0,
            meta={},
        )

    def reset(self, rng: np.random.Generator) -> tuple[WorldState, list[Array]]:
        state = self._reset_state(rng)
        return state, [self.observe(state, i) for i in range(self.n_agents)]

    def _reset_state(self, rng: np.random.Generator) -> WorldState:
        raise NotImplementedError

    def observe(self, state: WorldState, i: int) -> Array:
        raise NotImplementedError

    def rewards(self, state: WorldState, actions) -> Array:
        raise NotImplementedError


class CoopComm(Scenario):
    """Speaker/listener communication over three colored landmarks.

    Agents: speaker (0, static, speaks), listener (1, moves, silent).
    The target landmark index is drawn per episode and visible only in the
    speaker's observation.

    Observation layouts:
      speaker:  target color one-hot (3)                          -> 3
      listener: own velocity (2) | landmark rel positions (3x2)
                | speaker message (3)                             -> 11
    Reward (both agents): negative squared listener-target distance.
    """

    name = "coop_comm"
    horizon = 25

    def __init__(self) -> None:
        speaker = Entity(radius=0.075, movable=False)
        listener = Entity(radius=0.075)
        self.agents = (speaker, listener)
        self.landmarks = tuple(Entity(radius=0.04, movable=False, color_tag=c)
                               for c in range(3))
        self.comm_dims = (3, 0)
        self.is_adversary = (False, False)
        self.teams = ((0, 1),)
        self.obs_dims = (3, 11)

    def _reset_state(self, rng: np.random.Generator) -> WorldState:
        state = self._blank_state(rng)
        state.meta["goal"] = int(rng.integers(3))
        return state

    def observe(self, state: WorldState, i: int) -> Array:
        if i == 0:
            return _one_hot(state.meta["goal"], 3)
        rel = (state.pos[2:5] - state.pos[1]).ravel()
        return np.concatenate([state.vel[1], rel, state.comms[0]])

    def rewards(self, state: WorldState, actions) -> Array:
        goal = self.landmark_pos(state, state.meta["goal"])
        d2 = float(np.sum((state.pos[1] - goal) ** 2))
        return np.array([-d2, -d2])


class CoopNav(Scenario):
    """Three agents cover three landmarks while avoiding collisions.

    Observation layout (every agent):
      own velocity (2) | own position (2) | landmark rel positions (3x2)
      | other agent rel positions (2x2)                            -> 14
    Reward (shared): minus the sum over landmarks of the closest-agent
    distance, minus 1 per colliding agent pair.
    """

    name = "coop_nav"
    horizon = 25

    def __init__(self) -> None:
        # Radius 0.05 body; the soft contact tail already excludes other
        # agents out to ~5x that, which is the "significant space" the
        # collision penalty is about.
        self.agents = tuple(Entity(radius=0.05, collidable=True) for _ in range(3))
        self.landmarks = tuple(Entity(radius=0.05, movable=False) for _ in range(3))
        self.comm_dims = (0, 0, 0)
        self.is_adversary = (False, False, False)
        self.teams = ((0, 1, 2),)
        self.obs_dims = (14, 14, 14)

    def _reset_state(self, rng: np.random.Generator) -> WorldState:
        return self._blank_state(rng)

    def observe(self, state: WorldState, i: int) -> Array:
        rel_lm = (state.pos[3:6] - state.pos[i]).ravel()
        others = [j for j in range(3) if j != i]
        rel_ag = (state.pos[others] - state.pos[i]).ravel()
        return np.concatenate([state.vel[i], state.pos[i], rel_lm, rel_ag])

    def rewards(self, state: WorldState, actions) -> Array:
        total = 0.0
        for j in range(3):
            lm = self.landmark_pos(state, j)
            dists = np.linalg.norm(state.pos[:3] - lm, axis=1)
            total -= float(dists.min())
        total -= float(len(collision_pairs(self, state)))
        return np.full(3, total)


class KeepAway(Scenario):
    """One agent races to a secret target landmark; one adversary shadows it.

    Agents: cooperator (0) who sees which of the two landmarks is the
    target, adversary (1) who does not and must infer it while physically
    shoving (both are collidable).

    Observation layouts:
      cooperator: own velocity (2) | landmark rel positions (2x2)
                  | target one-hot (2) | adversary rel position (2)  -> 10
      adversary:  own velocity (2) | landmark rel positions (2x2)
                  | cooperator rel position (2)                      -> 8
    Rewards: each side gets minus its own distance to the target.
    """

    name = "keep_away"
    horizon = 25

    def __init__(self) -> None:
        self.agents = (Entity(radius=0.15, collidable=True),
                       Entity(radius=0.15, collidable=True))
        self.landmarks = tuple(Entity(radius=0.05, movable=False) for _ in range(2))
        self.comm_dims = (0, 0)
        self.is_adversary = (False, True)
        self.teams = ((0,), (1,))
        self.obs_dims = (10, 8)

    def _reset_state(self, rng: np.random.Generator) -> WorldState:
        state = self._blank_state(rng)
        state.meta["goal"] = int(rng.integers(2))
        return state

    def observe(self, state: WorldState, i: int) -> Array:
        rel_lm = (state.pos[2:4] - state.pos[i]).ravel()
        if i == 0:
            rel_adv = state.pos[1] - state.pos[0]
            return np.concatenate([state.vel[0], rel_lm,
                                   _one_hot(state.meta["goal"], 2), rel_adv])
        rel_coop = state.pos[0] - state.pos[1]
        return np.concatenate([state.vel[1], rel_lm, rel_coop])

    def rewards(self, state: WorldState, actions) -> Array:
        goal = self.landmark_pos(state, state.meta["goal"])
        d_coop = float(np.linalg.norm(state.pos[0] - goal))
        d_adv = float(np.linalg.norm(state.pos[1] - goal))
        return np.array([-d_coop, -d_adv])


class PhysicalDeception(Scenario):
    """Two cooperators cover two landmarks to hide the target from a lone
    adversary.

    Agents: cooperators (0, 1) who know the target, adversary (2) who does
    not. Nobody collides; this is a pure positioning game.

    Observation layouts:
      cooperator: own velocity (2) | landmark rel positions (2x2)
                  | target one-hot (2) | teammate rel (2)
                  | adversary rel (2)                                -> 12
      adversary:  own velocity (2) | landmark rel positions (2x2)
                  | cooperator rel positions (2x2)                   -> 10
    Rewards: cooperators share minus the closest-cooperator target distance
    plus the adversary's target distance; the adversary gets minus its own
    target distance.
    """

    name = "physical_deception"
    horizon = 25

    def __init__(self) -> None:
        self.agents = tuple(Entity(radius=0.1) for _ in range(3))
        self.landmarks = tuple(Entity(radius=0.05, movable=False) for _ in range(2))
        self.comm_dims = (0, 0, 0)
        self.is_adversary = (False, False, True)
        self.teams = ((0, 1), (2,))
        self.obs_dims = (12, 12, 10)

    def _reset_state(self, rng: np.random.Generator) -> WorldState:
        state = self._blank_state(rng)
        state.meta["goal"] = int(rng.integers(2))
        return state

    def observe(self, state: WorldState, i: int) -> Array:
        rel_lm = (state.pos[3:5] - state.pos[i]).ravel()
        if i < 2:
            mate = 1 - i
            return np.concatenate([
                state.vel[i], rel_lm, _one_hot(state.meta["goal"], 2),
                state.pos[mate] - state.pos[i], state.pos[2] - state.pos[i],
            ])
        rel_coop = (state.pos[0:2] - state.pos[2]).ravel()
        return np.concatenate([state.vel[2], rel_lm, rel_coop])

    def rewards(self, state: WorldState, actions) -> Array:
        goal = self.landmark_pos(state, state.meta["goal"])
        d_coop = float(np.linalg.norm(state.pos[0:2] - goal, axis=1).min())
        d_adv = float(np.linalg.norm(state.pos[2] - goal))
        coop = -d_coop + d_adv
        return np.array([coop, coop, -d_adv])


class PredatorPrey(Scenario):
    """Three slow predators chase one faster prey around three obstacles.

    Agents: predators (0-2, cooperating), prey (3, adversary). All agents and
    the large obstacle landmarks are collidable. ``variant`` picks the prey
    speed edge: "pp1" is 30% faster than the predators, "pp2" 100% faster.

    Observation layout (every agent):
      own velocity (2) | own position (2) | obstacle rel positions (3x2)
      | other agent rel positions (3x2) | other agent velocities (3x2) -> 22
    Rewards: +10 to every predator and -10 to the prey per predator in
    contact with the prey (post-step), with an extra penalty on the prey for
    straying outside the arena.
    """

    name = "predator_prey"
    horizon = 25

    def __init__(self, variant: str = "pp1") -> None:
        if variant not in ("pp1", "pp2"):
            raise ValueError(f"unknown predator_prey variant {variant!r}")
        self.variant = variant
        prey_speed = 1.3 if variant == "pp1" else 2.0
        predators = tuple(
            Entity(radius=0.075, collidable=True, max_speed=1.0)
            for _ in range(3)
        )
        prey = Entity(radius=0.05, collidable=True, max_speed=prey_speed)
        self.agents = predators + (prey,)
        self.landmarks = tuple(
            Entity(radius=0.2, movable=False, collidable=True) for _ in range(3)
        )
        self.comm_dims = (0, 0, 0, 0)
        self.is_adversary = (False, False, False, True)
        self.teams = ((0, 1, 2), (3,))
        self.obs_dims = (22, 22, 22, 22)

    def _reset_state(self, rng: np.random.Generator) -> WorldState:
        return self._blank_state(rng)

    def observe(self, state: WorldState, i: int) -> Array:
        rel_lm = (state.pos[4:7] - state.pos[i]).ravel()
        others = [j for j in range(4) if j != i]
        rel_ag = (state.pos[others] - state.pos[i]).ravel()
        vel_ag = state.vel[others].ravel()
        return np.concatenate([state.vel[i], state.pos[i], rel_lm, rel_ag, vel_ag])

    def touches(self, state: WorldState) -> int:
        """Number of predators in contact with the prey at this state."""
        prey = self.agents[3]
        n = 0
        for p in range(3):
            d = float(np.linalg.norm(state.pos[p] - state.pos[3]))
            if d < self.agents[p].radius + prey.radius:
                n += 1
        return n

    @staticmethod
    def _escape_penalty(pos: Array) -> float:
        total = 0.0
        for v in np.abs(pos):
            if v < 0.9:
                continue
            if v < 1.0:
                total += (v - 0.9) * 10.0
            else:
                total += min(np.exp(2.0 * v - 2.0), 10.0)
        return total

    def rewards(self, state: WorldState, actions) -> Array:
        n_touch = self.touches(state)
        pred = 10.0 * n_touch
        prey = -10.0 * n_touch - self._escape_penalty(state.pos[3])
        return np.array([pred, pred, pred, prey])


class CovertComm(Scenario):
    """Keyed signaling game: Alice tells Bob a message Eve also overhears.

    Agents: Alice (0, speaks), Bob (1, answers with a reconstruction),
    Eve (2, answers with a reconstruction). No physics; everyone is static.
    The message is one of two 4-dimensional one-hot codewords; the key is a
    fresh random 4-bit vector known to Alice and Bob only.

    Observation layouts:
      Alice: message one-hot (4) | key (4)            -> 8
      Bob:   key (4) | Alice's last message (4)       -> 8
      Eve:   Alice's last message (4)                 -> 4
    Rewards use the cross-entropy CE(p, m) = -log p[m] of a reconstruction
    simplex p against the message index m:
      Alice, Bob: -CE(Bob) + CE(Eve)
      Eve:        -CE(Eve)
    The default horizon of 2 gives the minimum causal signal-then-decode
    episode: Bob and Eve only hear Alice's tick-1 broadcast at tick 2.
    """

    name = "covert_comm"
    has_physics = False

    def __init__(self, horizon: int = 2) -> None:
        if horizon < 1:
            raise ValueError("horizon must be at least 1")
        self.horizon = horizon
        self.agents = tuple(Entity(radius=0.05, movable=False) for _ in range(3))
        self.landmarks = ()
        self.comm_dims = (4, 4, 4)
        self.is_adversary = (False, False, True)
        self.teams = ((0, 1), (2,))
        self.obs_dims = (8, 8, 4)

    def _reset_state(self, rng: np.random.Generator) -> WorldState:
        state = self._blank_state(rng)
        state.pos = np.array([[-0.5, 0.0], [0.5, 0.0], [0.0, 0.5]])
        state.vel = np.zeros((3, 2))
        state.meta["message"] = int(rng.integers(2))
        state.meta["key"] = rng.integers(0, 2, size=4).astype(float)
        return state

    def observe(self, state: WorldState, i: int) -> Array:
        key = state.meta["key"]
        if i == 0:
            return np.concatenate([_one_hot(state.meta["message"], 4), key])
        if i == 1:
            return np.concatenate([key, state.comms[0]])
        return state.comms[0].copy()

    def rewards(self, state: WorldState, actions) -> Array:
        m = state.meta["message"]
        ce_bob = -np.log(max(float(actions[1].comm[m]), _LOG_CLIP))
        ce_eve = -np.log(max(float(actions[2].comm[m]), _LOG_CLIP))
        return np.array([-ce_bob + ce_eve, -ce_bob + ce_eve, -ce_eve])


_REGISTRY = {
    "coop_comm": CoopComm,
    "coop_nav": CoopNav,
    "keep_away": KeepAway,
    "physical_deception": PhysicalDeception,
    "predator_prey": PredatorPrey,
    "covert_comm": CovertComm,
}


def make_scenario(name: str, **kwargs) -> Scenario:
    if name not in _REGISTRY:
        raise ValueError(
            f"unknown scenario {name!r}; expected one of {SCENARIO_NAMES}"
        )
    return _REGISTRY[name](**kwargs)


def default_hidden_units(name: str) -> int:
    """Policy/critic width defaults: wider nets for the crowded worlds."""
    return 128 if name in ("coop_nav", "predator_prey") else 64
