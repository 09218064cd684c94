"""Metric events emitted by the runtime roles and their CSV aggregation.

Roles push small event objects through a multi-producer channel; the driver
aggregates them into a fixed-schema, append-only CSV. A logical timing mode
replaces wall-clock readings with the cumulative env-step counter so that
single-threaded runs produce bit-identical files across repetitions.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

WALL = "wall"
LOGICAL = "logical"

CSV_HEADER = [
    "time_s",
    "env_steps",
    "episodes",
    "steps_per_sec",
    "loss",
    "eval_return",
    "solve_rate",
    "snapshot_version",
    "mean_staleness",
    "event",
]


@dataclass
class EpisodeEvent:
    role: str
    actor: int
    steps: int
    episode_return: float
    terminated: bool


@dataclass
class TrainEvent:
    loss: float
    version: int
    grad_norm: float = 0.0


@dataclass
class EvalEvent:
    mean_return: float
    solve_rate: float
    n_episodes: int


@dataclass
class StalenessEvent:
    role: str
    staleness: int


@dataclass
class WarnEvent:
    message: str


class MetricsAggregator:
    """Folds events into CSV rows; one row per episode and per evaluation."""

    def __init__(self, csv_path=None, timing: str = WALL, rows_every_episodes: int = 1):
        self.timing = timing
        self.env_steps = 0
        self.episodes = 0
        self.train_steps = 0
        self.last_loss = float("nan")
        self.last_eval_return = float("nan")
        self.last_solve_rate = float("nan")
        self.version = 0
        self.warnings: list[str] = []
        self._stale_sum = 0
        self._stale_n = 0
        self._rows_every = max(1, rows_every_episodes)
        self._t0 = time.monotonic()
        self._last_row_time = 0.0
        self._last_row_steps = 0
        self._file = None
        self._writer = None
        if csv_path is not None:
            self._file = open(csv_path, "w", newline="")
            self._writer = csv.writer(self._file)
            self._writer.writerow(CSV_HEADER)

    def _now(self) -> float:
        if self.timing == LOGICAL:
            return float(self.env_steps)
        return time.monotonic() - self._t0

    def emit(self, event) -> None:
        if isinstance(event, EpisodeEvent):
            self.env_steps += event.steps
            self.episodes += 1
            if self.episodes % self._rows_every == 0:
                self._row("episode")
        elif isinstance(event, TrainEvent):
            self.train_steps += 1
            self.last_loss = event.loss
            self.version = max(self.version, event.version)
        elif isinstance(event, EvalEvent):
            self.last_eval_return = event.mean_return
            self.last_solve_rate = event.solve_rate
            self._row("eval")
        elif isinstance(event, StalenessEvent):
            self._stale_sum += event.staleness
            self._stale_n += 1
        elif isinstance(event, WarnEvent):
            self.warnings.append(event.message)

    def _row(self, kind: str) -> None:
        if self._writer is None:
            return
        now = self._now()
        dt = now - self._last_row_time
        dsteps = self.env_steps - self._last_row_steps
        if self.timing == LOGICAL:
            rate = 0.0
        else:
            rate = dsteps / dt if dt > 0 else 0.0
        mean_stale = self._stale_sum / self._stale_n if self._stale_n else 0.0
        self._writer.writerow(
            [
                f"{now:.6f}",
                self.env_steps,
                self.episodes,
                f"{max(rate, 0.0):.3f}",
                f"{self.last_loss:.8g}",
                f"{self.last_eval_return:.8g}",
                f"{self.last_solve_rate:.8g}",
                self.version,
                f"{mean_stale:.3f}",
                kind,
            ]
        )
        self._last_row_time = now
        self._last_row_steps = self.env_steps
        self._stale_sum = 0
        self._stale_n = 0

    def wall_time(self) -> float:
        return time.monotonic() - self._t0

    def close(self) -> None:
        if self._file is not None:
            self._file.flush()
            self._file.close()
            self._file = None
            self._writer = None
