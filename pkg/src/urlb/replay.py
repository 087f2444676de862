"""FIFO transition store with uniform n-step minibatch sampling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    step_in_episode: int
    skill: Optional[np.ndarray] = None


@dataclass
class NStepBatch:
    obs: np.ndarray
    action: np.ndarray
    skill: Optional[np.ndarray]
    R: np.ndarray  # sum_{i < n_eff} gamma^i r_{t+i}
    obs_after_n: np.ndarray
    effective_n: np.ndarray
    next_obs: np.ndarray  # one step later; what the intrinsic modules consume
    reward: np.ndarray  # single-step reward r_t
    discount: np.ndarray  # gamma ** effective_n

    def __len__(self):
        return len(self.obs)


class ReplayBuffer:
    def __init__(self, capacity: int, obs_dim: int, action_dim: int, skill_dim: int = 0,
                 episode_length: int = 250):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.obs_dim, self.action_dim, self.skill_dim = obs_dim, action_dim, skill_dim
        self.episode_length = episode_length
        self._obs = np.zeros((capacity, obs_dim))
        self._next_obs = np.zeros((capacity, obs_dim))
        self._action = np.zeros((capacity, action_dim))
        self._reward = np.zeros(capacity)
        self._step = np.zeros(capacity, dtype=np.int64)
        self._skill = np.zeros((capacity, skill_dim)) if skill_dim else None
        self._head = 0  # next write slot
        self._size = 0

    def __len__(self):
        return self._size

    def push(self, t: Transition):
        obs = np.asarray(t.obs, dtype=np.float64)
        next_obs = np.asarray(t.next_obs, dtype=np.float64)
        action = np.asarray(t.action, dtype=np.float64)
        if obs.shape != (self.obs_dim,) or next_obs.shape != (self.obs_dim,):
            raise ValueError(f"observation width must be {self.obs_dim}")
        if action.shape != (self.action_dim,):
            raise ValueError(f"action width must be {self.action_dim}")
        if np.any(np.abs(action) > 1.0):
            raise ValueError("action components must lie in [-1, 1]")
        i = self._head
        self._obs[i] = obs
        self._next_obs[i] = next_obs
        self._action[i] = action
        self._reward[i] = t.reward
        self._step[i] = t.step_in_episode
        if self.skill_dim:
            if t.skill is None or np.shape(t.skill) != (self.skill_dim,):
                raise ValueError(f"skill width must be {self.skill_dim}")
            self._skill[i] = t.skill
        self._head = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def reset(self):
        self._head = 0
        self._size = 0

    def _slot(self, logical: np.ndarray) -> np.ndarray:
        """Map logical positions (0 = oldest) to storage slots."""
        start = (self._head - self._size) % self.capacity
        return (start + logical) % self.capacity

    def sample_nstep(self, batch: int, n: int, gamma: float, rng: np.random.Generator,
                     starts: Optional[np.ndarray] = None) -> NStepBatch:
        """Uniform n-step minibatch.

        Windows stop at the end of an episode and at the newest stored
        transition; ``effective_n`` records how many rewards were summed.
        ``starts`` (logical positions) overrides the uniform draw.
        """
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        if n < 1:
            raise ValueError("n must be >= 1")
        if starts is None:
            starts = rng.integers(0, self._size, size=batch)
        starts = np.asarray(starts, dtype=np.int64)
        first = self._slot(starts)
        step0 = self._step[first]
        R = np.zeros(len(starts))
        n_eff = np.zeros(len(starts), dtype=np.int64)
        alive = np.ones(len(starts), dtype=bool)
        last = first.copy()
        for k in range(n):
            pos = starts + k
            ok = alive & (pos < self._size)
            slot = self._slot(np.minimum(pos, self._size - 1))
            ok &= self._step[slot] == step0 + k
            R[ok] += gamma**k * self._reward[slot[ok]]
            n_eff[ok] += 1
            last[ok] = slot[ok]
            alive = ok
        out = NStepBatch(
            obs=self._obs[first],
            action=self._action[first],
            skill=self._skill[first] if self.skill_dim else None,
            R=R,
            obs_after_n=self._next_obs[last],
            effective_n=n_eff,
            next_obs=self._next_obs[first],
            reward=self._reward[first],
            discount=gamma ** n_eff.astype(np.float64),
        )
        return out
