"""Shared FIFO replay buffer.

Storage is a set of preallocated arrays used as a ring. Network resets never
touch the buffer; only ``push`` and ``shrink_capacity`` change its contents.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, PreconditionError, ShapeError


@dataclass
class Transition:
    observation: np.ndarray
    action: np.ndarray
    reward: float
    next_observation: np.ndarray
    terminal: bool


@dataclass
class Batch:
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_observations: np.ndarray
    terminals: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)


class ReplayBuffer:
    def __init__(self, capacity: int, observation_dim: int, action_dim: int):
        if capacity <= 0:
            raise ConfigError(f"capacity must be positive, got {capacity}")
        self.capacity = int(capacity)
        self.observation_dim = int(observation_dim)
        self.action_dim = int(action_dim)
        self._alloc(self.capacity)
        self.write_cursor = 0
        self.count = 0

    def _alloc(self, n: int) -> None:
        self.observations = np.zeros((n, self.observation_dim))
        self.actions = np.zeros((n, self.action_dim))
        self.rewards = np.zeros(n)
        self.next_observations = np.zeros((n, self.observation_dim))
        self.terminals = np.zeros(n)

    def __len__(self) -> int:
        return self.count

    def push(self, transition: Transition) -> None:
        self.add(transition.observation, transition.action, transition.reward,
                 transition.next_observation, transition.terminal)

    def add(self, observation, action, reward, next_observation, terminal) -> None:
        obs = np.asarray(observation, dtype=np.float64)
        act = np.asarray(action, dtype=np.float64).reshape(-1)
        nxt = np.asarray(next_observation, dtype=np.float64)
        if obs.shape != (self.observation_dim,) or nxt.shape != (self.observation_dim,):
            raise ShapeError(f"observation shape {obs.shape}/{nxt.shape}, expected ({self.observation_dim},)")
        if act.shape != (self.action_dim,):
            raise ShapeError(f"action shape {act.shape}, expected ({self.action_dim},)")
        i = self.write_cursor
        self.observations[i] = obs
        self.actions[i] = act
        self.rewards[i] = reward
        self.next_observations[i] = nxt
        self.terminals[i] = float(bool(terminal))
        self.write_cursor = (i + 1) % self.capacity
        self.count = min(self.count + 1, self.capacity)

    def _order(self) -> np.ndarray:
        """Physical indices from oldest to newest."""
        start = (self.write_cursor - self.count) % self.capacity
        return (start + np.arange(self.count)) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Uniform sample with replacement over the current contents."""
        if self.count < 1:
            raise PreconditionError("cannot sample from an empty replay buffer")
        if batch_size < 1:
            raise PreconditionError(f"batch_size must be >= 1, got {batch_size}")
        # occupied slots are always a contiguous prefix (or the whole ring)
        idx = rng.integers(0, self.count, size=batch_size)
        return self._gather(idx)

    def _gather(self, idx: np.ndarray) -> Batch:
        return Batch(self.observations[idx], self.actions[idx], self.rewards[idx],
                     self.next_observations[idx], self.terminals[idx])

    def contents(self) -> Batch:
        """Copy of everything currently stored, oldest first."""
        return self._gather(self._order())

    def observations_view(self) -> np.ndarray:
        return self.observations[: self.count]

    def shrink_capacity(self, new_capacity: int) -> None:
        """Lower the capacity, dropping the oldest entries that no longer fit."""
        if new_capacity <= 0:
            raise ConfigError(f"new_capacity must be positive, got {new_capacity}")
        order = self._order()[-new_capacity:] if self.count > new_capacity else self._order()
        kept = self._gather(order)
        self.capacity = int(new_capacity)
        self._alloc(self.capacity)
        n = len(order)
        self.observations[:n] = kept.observations
        self.actions[:n] = kept.actions
        self.rewards[:n] = kept.rewards
        self.next_observations[:n] = kept.next_observations
        self.terminals[:n] = kept.terminals
        self.count = n
        self.write_cursor = n % self.capacity

    def fingerprint(self) -> bytes:
        """Byte image of the ordered contents, for bitwise comparisons."""
        b = self.contents()
        return b"".join(np.ascontiguousarray(a).tobytes() for a in
                        (b.observations, b.actions, b.rewards, b.next_observations, b.terminals))
