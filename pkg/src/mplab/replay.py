"""Joint-experience replay buffer with FIFO ring semantics.

One record holds the concatenated observations of all agents, every agent's
action, every agent's reward, the next joint observation, and a terminal
flag. Storage grows lazily toward the configured capacity so a desk-scale
run never pays for the full ring up front; once full, each push evicts
exactly the oldest record. Sampling is uniform with replacement.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

Array = np.ndarray

_MIN_ALLOC = 1024


@dataclass(frozen=True)
class TransitionLayout:
    """Fixed per-scenario dimensions of one stored record."""

    obs_dims: tuple[int, ...]
    act_dims: tuple[int, ...]

    @property
    def n_agents(self) -> int:
        return len(self.obs_dims)

    @property
    def x_dim(self) -> int:
        return sum(self.obs_dims)

    @property
    def a_dim(self) -> int:
        return sum(self.act_dims)

    def obs_slice(self, i: int) -> slice:
        off = sum(self.obs_dims[:i])
        return slice(off, off + self.obs_dims[i])

    def act_slice(self, i: int) -> slice:
        off = sum(self.act_dims[:i])
        return slice(off, off + self.act_dims[i])


@dataclass
class Transition:
    """One joint experience tuple."""

    x: Array
    actions: Sequence[Array]      # one flat action vector per agent
    rewards: Array
    x_next: Array
    terminal: bool
    active: Optional[Sequence[int]] = None   # sub-policy provenance tags


@dataclass
class Batch:
    x: Array          # (B, x_dim)
    acts: Array       # (B, a_dim)
    rew: Array        # (B, n_agents)
    x_next: Array     # (B, x_dim)
    terminal: Array   # (B,)
    active: Optional[Array] = None   # (B, n_agents) int

    def __len__(self) -> int:
        return self.x.shape[0]


class ReplayBuffer:
    def __init__(self, capacity: int, layout: TransitionLayout,
                 track_active: bool = False) -> None:
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.layout = layout
        self.track_active = track_active
        self._alloc = 0
        self._cursor = 0
        self._size = 0
        self._x: Array
        self._a: Array
        self._r: Array
        self._xn: Array
        self._t: Array
        self._k: Optional[Array] = None

    @property
    def size(self) -> int:
        return self._size

    def __len__(self) -> int:
        return self._size

    def _grow(self) -> None:
        new_alloc = min(self.capacity, max(_MIN_ALLOC, 2 * self._alloc))
        lay = self.layout

        def resize(old: Optional[Array], width: int, dtype=float) -> Array:
            shape = (new_alloc, width) if width else (new_alloc,)
            fresh = np.zeros(shape, dtype=dtype)
            if old is not None and self._size:
                fresh[: self._size] = old[: self._size]
            return fresh

        if self._alloc == 0:
            self._x = np.zeros((new_alloc, lay.x_dim))
            self._a = np.zeros((new_alloc, lay.a_dim))
            self._r = np.zeros((new_alloc, lay.n_agents))
            self._xn = np.zeros((new_alloc, lay.x_dim))
            self._t = np.zeros(new_alloc, dtype=bool)
            if self.track_active:
                self._k = np.zeros((new_alloc, lay.n_agents), dtype=np.int64)
        else:
            self._x = resize(self._x, lay.x_dim)
            self._a = resize(self._a, lay.a_dim)
            self._r = resize(self._r, lay.n_agents)
            self._xn = resize(self._xn, lay.x_dim)
            self._t = resize(self._t, 0, dtype=bool)
            if self.track_active:
                self._k = resize(self._k, lay.n_agents, dtype=np.int64)
        self._alloc = new_alloc

    def push(self, transition: Transition) -> None:
        lay = self.layout
        x = np.asarray(transition.x, dtype=float)
        xn = np.asarray(transition.x_next, dtype=float)
        if x.shape != (lay.x_dim,) or xn.shape != (lay.x_dim,):
            raise ValueError(
                f"joint observation shape {x.shape} does not match ({lay.x_dim},)"
            )
        if len(transition.actions) != lay.n_agents:
            raise ValueError(
                f"expected {lay.n_agents} actions, got {len(transition.actions)}"
            )
        flat = np.concatenate([np.asarray(a, dtype=float).ravel()
                               for a in transition.actions])
        if flat.shape != (lay.a_dim,):
            raise ValueError(
                f"joint action length {flat.shape[0]} does not match {lay.a_dim}"
            )
        rew = np.asarray(transition.rewards, dtype=float)
        if rew.shape != (lay.n_agents,):
            raise ValueError(
                f"rewards shape {rew.shape} does not match ({lay.n_agents},)"
            )
        if not np.isfinite(rew).all():
            raise ValueError("rewards must be finite")

        if self._cursor >= self._alloc and self._alloc < self.capacity:
            self._grow()
        pos = self._cursor
        self._x[pos] = x
        self._a[pos] = flat
        self._r[pos] = rew
        self._xn[pos] = xn
        self._t[pos] = bool(transition.terminal)
        if self.track_active:
            if transition.active is None:
                raise ValueError("buffer tracks sub-policy tags; none given")
            self._k[pos] = np.asarray(transition.active, dtype=np.int64)
        self._cursor = (self._cursor + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        idx = rng.integers(0, self._size, size=batch_size)
        return Batch(
            x=self._x[idx],
            acts=self._a[idx],
            rew=self._r[idx],
            x_next=self._xn[idx],
            terminal=self._t[idx],
            active=self._k[idx] if self._k is not None else None,
        )

    def contents(self) -> Batch:
        """Every stored record, oldest first."""
        if self._size < self.capacity:
            order = np.arange(self._size)
        else:
            order = (np.arange(self.capacity) + self._cursor) % self.capacity
        return Batch(
            x=self._x[order], acts=self._a[order], rew=self._r[order],
            x_next=self._xn[order], terminal=self._t[order],
            active=self._k[order] if self._k is not None else None,
        )

    def latest(self, n: int) -> Batch:
        """The most recent ``n`` records (fewer if the buffer is shorter)."""
        n = min(n, self._size)
        if self._size < self.capacity:
            idx = np.arange(self._size - n, self._size)
        else:
            idx = (self._cursor - n + np.arange(n)) % self.capacity
        return Batch(
            x=self._x[idx], acts=self._a[idx], rew=self._r[idx],
            x_next=self._xn[idx], terminal=self._t[idx],
            active=self._k[idx] if self._k is not None else None,
        )
