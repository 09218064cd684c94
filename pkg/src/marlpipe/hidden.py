"""Per-environment, per-agent recurrent hidden-state container.

Concurrent environments served by one worker must never share recurrent
state; this store isolates the [env, agent] slots and supports zeroing a
whole environment's slice at episode boundaries. Time is realized by in-place
overwrite: acting only ever needs the latest hidden state, and training
recomputes hidden sequences from episode start.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, IndexOutOfRange


class HiddenStateStore:
    def __init__(self, n_envs: int, n_agents: int, hidden_dim: int):
        if n_envs < 1 or n_agents < 1 or hidden_dim < 1:
            raise ConfigError("n_envs, n_agents and hidden_dim must all be >= 1")
        self.n_envs = n_envs
        self.n_agents = n_agents
        self.hidden_dim = hidden_dim
        self._h = np.zeros((n_envs, n_agents, hidden_dim))

    def _check_env(self, env_id: int) -> None:
        if not 0 <= env_id < self.n_envs:
            raise IndexOutOfRange(f"env_id {env_id} not in [0, {self.n_envs})")

    def _check(self, env_id: int, agent_id: int) -> None:
        self._check_env(env_id)
        if not 0 <= agent_id < self.n_agents:
            raise IndexOutOfRange(f"agent_id {agent_id} not in [0, {self.n_agents})")

    def get(self, env_id: int, agent_id: int) -> np.ndarray:
        self._check(env_id, agent_id)
        return self._h[env_id, agent_id].copy()

    def put(self, env_id: int, agent_id: int, h: np.ndarray) -> None:
        self._check(env_id, agent_id)
        h = np.asarray(h, dtype=np.float64)
        if h.shape != (self.hidden_dim,):
            raise IndexOutOfRange(f"hidden vector shape {h.shape} != ({self.hidden_dim},)")
        if not np.all(np.isfinite(h)):
            raise ConfigError("hidden state must be finite")
        self._h[env_id, agent_id] = h

    def get_env(self, env_id: int) -> np.ndarray:
        """All agent slots of one environment, shape [n_agents, hidden_dim] (copy)."""
        self._check_env(env_id)
        return self._h[env_id].copy()

    def put_env(self, env_id: int, h: np.ndarray) -> None:
        self._check_env(env_id)
        h = np.asarray(h, dtype=np.float64)
        if h.shape != (self.n_agents, self.hidden_dim):
            raise IndexOutOfRange(
                f"env slice shape {h.shape} != ({self.n_agents}, {self.hidden_dim})"
            )
        self._h[env_id] = h

    def reset_env(self, env_id: int) -> None:
        """Zero every agent slot of env_id; other environments are untouched."""
        self._check_env(env_id)
        self._h[env_id] = 0.0

    def env_is_zero(self, env_id: int) -> bool:
        self._check_env(env_id)
        return bool(np.all(self._h[env_id] == 0.0))
