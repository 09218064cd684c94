"""Episode-granular experience replay with uniform mini-batch sampling.

Episodes of unequal length are padded to the batch maximum and masked;
padded cells are zero (availability padding marks action 0 legal so downstream
maxes stay well-defined) and contribute to no loss term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import EnvSpec
from .errors import NotEnoughData
from .pipes import EpisodeRecord


@dataclass
class TrainingBatch:
    """B episodes padded to the batch's maximum length L*."""

    obs: np.ndarray  # [B, L*, n_agents, obs_dim]
    state: np.ndarray  # [B, L*, state_dim]
    avail: np.ndarray  # [B, L*, n_agents, n_actions] bool
    actions: np.ndarray  # [B, L*, n_agents] int
    rewards: np.ndarray  # [B, L*]
    mask: np.ndarray  # [B, L*] float, 1 iff t < L_b
    terminal: np.ndarray  # [B, L*] float, 1 at the last step of episodes that truly terminated
    lengths: np.ndarray  # [B] int

    @property
    def size(self) -> int:
        return self.obs.shape[0]

    @property
    def max_length(self) -> int:
        return self.obs.shape[1]


def batch_episodes(episodes: list[EpisodeRecord]) -> TrainingBatch:
    b = len(episodes)
    lengths = np.array([ep.length for ep in episodes], dtype=np.int64)
    lmax = int(lengths.max())
    n, o = episodes[0].obs.shape[1:]
    s = episodes[0].state.shape[1]
    a = episodes[0].avail.shape[2]

    obs = np.zeros((b, lmax, n, o))
    state = np.zeros((b, lmax, s))
    avail = np.zeros((b, lmax, n, a), dtype=bool)
    avail[:, :, :, 0] = True  # padding rows keep one legal action
    actions = np.zeros((b, lmax, n), dtype=np.int64)
    rewards = np.zeros((b, lmax))
    mask = np.zeros((b, lmax))
    terminal = np.zeros((b, lmax))
    for i, ep in enumerate(episodes):
        length = ep.length
        obs[i, :length] = ep.obs
        state[i, :length] = ep.state
        avail[i, :length] = ep.avail
        actions[i, :length] = ep.actions
        rewards[i, :length] = ep.rewards
        mask[i, :length] = 1.0
        if ep.terminated:
            terminal[i, length - 1] = 1.0
    return TrainingBatch(obs, state, avail, actions, rewards, mask, terminal, lengths)


class ReplayPool:
    """FIFO ring buffer of immutable EpisodeRecords."""

    def __init__(self, env_spec: EnvSpec, capacity: int = 5000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.env_spec = env_spec
        self.capacity = capacity
        self._episodes: list[EpisodeRecord] = []
        self._next = 0
        self.total_inserted = 0

    def __len__(self) -> int:
        return len(self._episodes)

    def insert(self, episode: EpisodeRecord) -> None:
        episode.validate(self.env_spec)
        if len(self._episodes) < self.capacity:
            self._episodes.append(episode)
        else:
            self._episodes[self._next] = episode
            self._next = (self._next + 1) % self.capacity
        self.total_inserted += 1

    def episodes(self) -> list[EpisodeRecord]:
        """Stored episodes in insertion order (oldest first)."""
        return self._episodes[self._next :] + self._episodes[: self._next]

    def sample(self, batch_size: int, rng: np.random.Generator) -> TrainingBatch:
        """Uniformly sample batch_size episodes without replacement."""
        if len(self._episodes) < batch_size:
            raise NotEnoughData(f"pool has {len(self._episodes)} episodes, need {batch_size}")
        idx = rng.choice(len(self._episodes), size=batch_size, replace=False)
        return batch_episodes([self._episodes[i] for i in idx])
