"""Multi-agent environments: a brute-forceable cooperative matrix game and a
synthetic shape/latency environment for throughput studies.

The synthetic environment reproduces the tensor shapes of standard SMAC-style
scenarios (see SCENARIOS) and simulates per-step environment cost with a
configurable sleep, so sample-collection throughput becomes a function of
configuration instead of an external game engine.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    EpisodeFinished,
    TooLargeToEnumerate,
    UnavailableAction,
)
from .seeding import derive_rng


@dataclass(frozen=True)
class EnvSpec:
    """Static shape/cost description of a multi-agent environment."""

    n_agents: int
    n_actions: int
    obs_dim: int
    state_dim: int
    episode_limit: int
    step_latency_s: float = 0.0

    def __post_init__(self):
        if self.n_agents < 1:
            raise ConfigError(f"n_agents must be >= 1, got {self.n_agents}")
        if self.n_actions < 2:
            raise ConfigError(f"n_actions must be >= 2, got {self.n_actions}")
        if self.obs_dim < 1 or self.state_dim < 1:
            raise ConfigError("obs_dim and state_dim must be >= 1")
        if self.episode_limit < 1:
            raise ConfigError(f"episode_limit must be >= 1, got {self.episode_limit}")
        if self.step_latency_s < 0:
            raise ConfigError("step_latency_s must be >= 0")


@dataclass
class StepResult:
    """Observation bundle for one time step (pre-action for the next decision)."""

    per_agent_obs: np.ndarray  # [n_agents, obs_dim]
    global_state: np.ndarray  # [state_dim]
    reward: float  # team-shared scalar earned by the previous action
    done: bool
    avail_actions: np.ndarray  # [n_agents, n_actions] bool
    terminated: bool = False  # real terminal state (False while running or on truncation)


# Scenario shape parameters: (n_actions, n_agents, state_dim, obs_dim, episode_limit).
SCENARIOS: dict[str, EnvSpec] = {
    "3m": EnvSpec(n_agents=3, n_actions=9, obs_dim=30, state_dim=48, episode_limit=60),
    "8m": EnvSpec(n_agents=8, n_actions=14, obs_dim=80, state_dim=168, episode_limit=120),
    "2s3z": EnvSpec(n_agents=5, n_actions=11, obs_dim=80, state_dim=120, episode_limit=120),
    "5m_vs_6m": EnvSpec(n_agents=5, n_actions=12, obs_dim=55, state_dim=98, episode_limit=70),
}

MAX_ENUMERABLE_JOINT_ACTIONS = 10**6


class MultiAgentEnv:
    """Environment contract: reset(), step(joint_action), close().

    A live instance is confined to a single actor; specs are immutable and
    freely shareable.
    """

    spec: EnvSpec

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self._t = 0
        self._done = True  # step() before the first reset() is an error
        self._avail = np.ones((spec.n_agents, spec.n_actions), dtype=bool)

    # -- subclass hooks -------------------------------------------------
    def _observe(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (per_agent_obs, global_state, avail_actions) for time self._t."""
        raise NotImplementedError

    def _reward_and_terminal(self, joint_action: np.ndarray) -> tuple[float, bool]:
        """Return (team reward, terminated) for taking joint_action at self._t."""
        raise NotImplementedError

    def _on_reset(self) -> None:
        pass

    # -- public API ------------------------------------------------------
    def reset(self) -> StepResult:
        self._t = 0
        self._done = False
        self._on_reset()
        obs, state, avail = self._observe()
        self._avail = avail
        return StepResult(obs, state, 0.0, done=False, avail_actions=avail)

    def step(self, joint_action) -> StepResult:
        if self._done:
            raise EpisodeFinished("step() called after done; reset() first")
        joint_action = np.asarray(joint_action, dtype=np.int64)
        if joint_action.shape != (self.spec.n_agents,):
            raise UnavailableAction(
                f"joint_action shape {joint_action.shape} != ({self.spec.n_agents},)"
            )
        for i, a in enumerate(joint_action):
            if not (0 <= a < self.spec.n_actions) or not self._avail[i, a]:
                raise UnavailableAction(f"agent {i}: action {a} is masked out")
        if self.spec.step_latency_s > 0:
            time.sleep(self.spec.step_latency_s)
        reward, terminated = self._reward_and_terminal(joint_action)
        self._t += 1
        truncated = not terminated and self._t >= self.spec.episode_limit
        self._done = terminated or truncated
        obs, state, avail = self._observe()
        self._avail = avail
        return StepResult(
            obs, state, reward, done=self._done, avail_actions=avail, terminated=terminated
        )

    def close(self) -> None:
        self._done = True


@dataclass(frozen=True)
class CoopMatrixGameSpec:
    """A fully cooperative repeated matrix game with an enumerable optimum.

    payoff has shape (n_actions,) * n_agents; one episode repeats the game
    n_steps times and the team reward is a straight table lookup.
    """

    payoff: np.ndarray
    n_steps: int = 1

    def __post_init__(self):
        payoff = np.asarray(self.payoff, dtype=np.float64)
        object.__setattr__(self, "payoff", payoff)
        if payoff.ndim < 1:
            raise ConfigError("payoff must have one axis per agent")
        if any(s != payoff.shape[0] for s in payoff.shape):
            raise ConfigError(f"payoff must be square in every axis, got {payoff.shape}")
        if not np.all(np.isfinite(payoff)):
            raise ConfigError("payoff must be finite everywhere")
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")

    @property
    def n_agents(self) -> int:
        return self.payoff.ndim

    @property
    def n_actions(self) -> int:
        return self.payoff.shape[0]

    def env_spec(self) -> EnvSpec:
        # Observation: agent-id one-hot plus normalized time; state: normalized time.
        return EnvSpec(
            n_agents=self.n_agents,
            n_actions=self.n_actions,
            obs_dim=self.n_agents + 1,
            state_dim=1,
            episode_limit=self.n_steps,
            step_latency_s=0.0,
        )


class CoopMatrixGame(MultiAgentEnv):
    """Repeated cooperative matrix game; reward is payoff[joint_action]."""

    def __init__(self, game: CoopMatrixGameSpec, seed: int = 0):
        super().__init__(game.env_spec())
        self.game = game
        del seed  # fully deterministic; accepted for interface uniformity

    def _observe(self):
        n = self.spec.n_agents
        frac = self._t / self.game.n_steps
        obs = np.zeros((n, self.spec.obs_dim))
        obs[:, :n] = np.eye(n)
        obs[:, n] = frac
        state = np.array([frac])
        avail = np.ones((n, self.spec.n_actions), dtype=bool)
        return obs, state, avail

    def _reward_and_terminal(self, joint_action):
        reward = float(self.game.payoff[tuple(joint_action)])
        terminated = self._t + 1 >= self.game.n_steps  # the game is exactly n_steps long
        return reward, terminated


class SyntheticEnv(MultiAgentEnv):
    """Seeded pseudo-random observations at SMAC-matching shapes, with a
    configurable per-step latency and random (never empty) action masks."""

    def __init__(self, spec: EnvSpec, seed: int = 0, mask_prob: float = 0.15):
        super().__init__(spec)
        self._rng = derive_rng(seed, "synthetic-env")
        self._mask_prob = mask_prob

    def _observe(self):
        n, o = self.spec.n_agents, self.spec.obs_dim
        obs = self._rng.standard_normal((n, o))
        k = min(n, o)
        obs[:, :k] = np.eye(n)[:, :k]  # agent-id one-hot in the leading dims
        state = self._rng.standard_normal(self.spec.state_dim)
        avail = self._rng.random((n, self.spec.n_actions)) >= self._mask_prob
        forced = self._rng.integers(self.spec.n_actions, size=n)
        avail[np.arange(n), forced] = True
        return obs, state, avail

    def _reward_and_terminal(self, joint_action):
        del joint_action
        return float(0.1 * self._rng.standard_normal()), False


def optimal_joint_return(game: CoopMatrixGameSpec) -> float:
    """Exhaustively enumerate all joint actions and return n_steps * max payoff."""
    n_joint = game.n_actions**game.n_agents
    if n_joint > MAX_ENUMERABLE_JOINT_ACTIONS:
        raise TooLargeToEnumerate(f"{n_joint} joint actions exceed the enumeration cap")
    best = -np.inf
    for idx in np.ndindex(game.payoff.shape):
        best = max(best, float(game.payoff[idx]))
    return game.n_steps * best


def mean_joint_return(game: CoopMatrixGameSpec) -> float:
    """Expected episode return of the uniform-random joint policy."""
    return game.n_steps * float(np.mean(game.payoff))


@dataclass(frozen=True)
class EnvConfig:
    """Declarative environment selection, loadable from the experiment config."""

    kind: str  # "matrix" | "synthetic"
    payoff: tuple = ()  # nested payoff table (matrix)
    n_steps: int = 1  # repetitions per episode (matrix)
    scenario: str = "3m"  # shape preset (synthetic)
    step_latency_s: float = 0.0
    overrides: dict = field(default_factory=dict)  # EnvSpec field overrides (synthetic)

    @staticmethod
    def from_dict(d: dict) -> "EnvConfig":
        known = {"kind", "payoff", "n_steps", "scenario", "step_latency_s"}
        kind = d.get("kind")
        if kind not in ("matrix", "synthetic"):
            raise ConfigError(f"env.kind must be 'matrix' or 'synthetic', got {kind!r}")
        overrides = {k: v for k, v in d.items() if k not in known}
        if kind == "matrix":
            if "payoff" not in d:
                raise ConfigError("matrix env requires a payoff table")
            return EnvConfig(
                kind="matrix",
                payoff=_freeze(d["payoff"]),
                n_steps=int(d.get("n_steps", 1)),
            )
        scenario = d.get("scenario", "3m")
        if scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {scenario!r}; options: {sorted(SCENARIOS)}")
        return EnvConfig(
            kind="synthetic",
            scenario=scenario,
            step_latency_s=float(d.get("step_latency_s", 0.0)),
            overrides=overrides,
        )

    def game(self) -> CoopMatrixGameSpec | None:
        if self.kind != "matrix":
            return None
        return CoopMatrixGameSpec(payoff=np.asarray(self.payoff, dtype=np.float64),
                                  n_steps=self.n_steps)

    def env_spec(self) -> EnvSpec:
        if self.kind == "matrix":
            return self.game().env_spec()
        base = SCENARIOS[self.scenario]
        fields = {
            "n_agents": base.n_agents,
            "n_actions": base.n_actions,
            "obs_dim": base.obs_dim,
            "state_dim": base.state_dim,
            "episode_limit": base.episode_limit,
            "step_latency_s": self.step_latency_s,
        }
        for k, v in self.overrides.items():
            if k not in fields:
                raise ConfigError(f"unknown env override {k!r}")
            fields[k] = type(fields[k])(v)
        return EnvSpec(**fields)

    def make(self, seed: int) -> MultiAgentEnv:
        if self.kind == "matrix":
            return CoopMatrixGame(self.game(), seed=seed)
        return SyntheticEnv(self.env_spec(), seed=seed)


def _freeze(x):
    if isinstance(x, (list, tuple)):
        return tuple(_freeze(v) for v in x)
    return x
