"""Experiment driver: configures and launches baseline / AW / AWL runs,
aggregates metric events into CSV, and compares sample-collection throughput
across modes under identical episode budgets.
"""

from __future__ import annotations

import threading
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .envs import EnvConfig, optimal_joint_return
from .errors import ConfigError, RoleFailure
from .metrics import LOGICAL, WALL, EvalEvent, MetricsAggregator
from .nets import NetDims, save_checkpoint
from .paramstore import SharedParamPool
from .pipes import Chan, PipeSet, SampleQueue, encode_episode
from .replay import ReplayPool
from .runtime import (
    ActorConfig,
    LearnerConfig,
    WorkerConfig,
    WorkerTrainer,
    greedy_eval,
    run_actor,
    run_baseline,
    run_learner,
    run_worker,
)
from .seeding import derive_int_seed, derive_rng
from .training import LearnerState, TrainConfig

MODES = ("baseline", "aw", "awl")


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str
    seed: int
    env: EnvConfig
    episodes: int  # total episode budget across all actors
    workers: int = 1
    actors: int = 1  # per worker
    hidden_dim: int = 64
    mix_embed: int = 32
    mixer: str = "mono"
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_anneal_steps: int = 50_000
    sync_every_batches: int = 32
    poll_timeout: float = 0.02
    batch_size: int = 32
    min_fill: int = 32
    train_per_episode: float = 1.0
    replay_capacity: int = 5000
    gamma: float = 0.99
    lr: float = 5e-4
    optimizer: str = "rmsprop"
    grad_clip: float = 10.0
    target_sync_period: int = 200
    train_cost_s: float = 0.0
    eval_every_episodes: int = 0
    eval_episodes: int = 20
    timing: str = WALL
    out: str | None = None
    checkpoint_out: str | None = None
    episode_dump: str | None = None
    queue_capacity: int = 64
    pipe_capacity: int = 2
    metrics_every_episodes: int = 1
    compare: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "baseline" and (self.workers != 1 or self.actors != 1):
            raise ConfigError("baseline mode requires workers = actors = 1")
        if self.mode == "aw" and self.workers != 1:
            raise ConfigError("aw mode has exactly one worker")
        if self.workers < 1 or self.actors < 1:
            raise ConfigError("workers and actors must be >= 1")
        n_envs = self.workers * self.actors
        if self.episodes < 1 or self.episodes % n_envs != 0:
            raise ConfigError(
                f"episodes ({self.episodes}) must be a positive multiple of "
                f"workers * actors ({n_envs})"
            )
        if self.timing not in (WALL, LOGICAL):
            raise ConfigError(f"timing must be '{WALL}' or '{LOGICAL}'")

    @property
    def n_envs(self) -> int:
        return self.workers * self.actors

    @property
    def episodes_per_actor(self) -> int:
        return self.episodes // self.n_envs

    def dims(self) -> NetDims:
        spec = self.env.env_spec()
        return NetDims(
            n_agents=spec.n_agents,
            n_actions=spec.n_actions,
            obs_dim=spec.obs_dim,
            state_dim=spec.state_dim,
            hidden_dim=self.hidden_dim,
            mix_embed=self.mix_embed,
            mixer=self.mixer,
        )

    def worker_cfg(self) -> WorkerConfig:
        return WorkerConfig(
            n_actors=self.actors,
            eps_start=self.eps_start,
            eps_end=self.eps_end,
            eps_anneal_steps=self.eps_anneal_steps,
            sync_every_batches=self.sync_every_batches,
            poll_timeout=self.poll_timeout,
        )

    def learner_cfg(self) -> LearnerConfig:
        return LearnerConfig(
            n_workers=self.workers,
            batch_size=self.batch_size,
            min_fill=self.min_fill,
            train_per_episode=self.train_per_episode,
            replay_capacity=self.replay_capacity,
            eval_every_episodes=self.eval_every_episodes,
            eval_episodes=self.eval_episodes,
            train=TrainConfig(
                gamma=self.gamma,
                lr=self.lr,
                optimizer=self.optimizer,
                grad_clip=self.grad_clip,
                target_sync_period=self.target_sync_period,
                train_cost_s=self.train_cost_s,
            ),
        )

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "seed" not in d:
            raise ConfigError("config requires a seed")
        if "env" not in d:
            raise ConfigError("config requires an env section")
        env = EnvConfig.from_dict(d.pop("env"))
        known = {f for f in ExperimentConfig.__dataclass_fields__ if f != "env"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return ExperimentConfig(env=env, **d)
        except TypeError as e:
            raise ConfigError(str(e)) from e


class _RoleThread(threading.Thread):
    def __init__(self, role: str, fn):
        super().__init__(name=role, daemon=True)
        self.role = role
        self._fn = fn
        self.error: BaseException | None = None
        self.result = None

    def run(self):
        try:
            self.result = self._fn()
        except BaseException as e:  # surfaced with role identity by the driver
            self.error = e


def _make_eval_fn(cfg: ExperimentConfig, dims: NetDims, emit, optimum):
    if cfg.eval_every_episodes <= 0 or cfg.eval_episodes <= 0:
        return None

    def eval_fn(flat):
        mean, solve = greedy_eval(
            dims, flat, cfg.env, cfg.eval_episodes,
            derive_int_seed(cfg.seed, "eval"), optimum=optimum,
        )
        emit(EvalEvent(mean, solve, cfg.eval_episodes))

    return eval_fn


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Execute the configured topology to completion; returns the run summary
    (also written as CSV rows incrementally when cfg.out is set)."""
    dims = cfg.dims()
    state = LearnerState(dims, derive_int_seed(cfg.seed, "params-init"), cfg.learner_cfg().train)
    optimum = None
    game = cfg.env.game()
    if game is not None:
        optimum = optimal_joint_return(game)

    agg = MetricsAggregator(cfg.out, timing=cfg.timing,
                            rows_every_episodes=cfg.metrics_every_episodes)
    dump_file = open(cfg.episode_dump, "wb") if cfg.episode_dump else None
    dump = (lambda ep: dump_file.write(encode_episode(ep))) if dump_file else None

    engines = []
    started = time.monotonic()
    try:
        if cfg.mode == "baseline":
            eval_fn = _make_eval_fn(cfg, dims, agg.emit, optimum)
            engine = run_baseline(
                cfg.env, dims, state, cfg.episodes, cfg.worker_cfg(), cfg.learner_cfg(),
                cfg.seed, emit=agg.emit, eval_fn=eval_fn, dump=dump,
            )
            engines.append(engine)
            ingested = cfg.episodes
        else:
            ingested = _run_threaded(cfg, dims, state, agg, dump, optimum, engines)
    finally:
        elapsed = time.monotonic() - started
        agg.close()
        if dump_file is not None:
            dump_file.close()

    if cfg.checkpoint_out:
        save_checkpoint(cfg.checkpoint_out, dims, state.theta)

    rate = agg.env_steps / elapsed if elapsed > 0 else 0.0
    return {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "topology": {"workers": cfg.workers, "actors_per_worker": cfg.actors,
                     "n_envs": cfg.n_envs},
        "episodes": agg.episodes,
        "episodes_ingested": ingested,
        "env_steps": agg.env_steps,
        "wall_time_s": elapsed,
        "steps_per_sec": rate,
        "train_steps": state.train_steps,
        "final_loss": agg.last_loss,
        "final_eval_return": agg.last_eval_return,
        "final_solve_rate": agg.last_solve_rate,
        "snapshot_version": agg.version,
        "optimum_return": optimum,
        "hidden_check_failures": sum(e.hidden_check_failures for e in engines),
        "warnings": list(agg.warnings),
    }


def _run_threaded(cfg, dims, state, agg, dump, optimum, engines) -> int:
    """AW / AWL topologies under threads; the driver thread aggregates events."""
    events = Chan(capacity=65536)
    emit = events.put
    eval_fn = _make_eval_fn(cfg, dims, emit, optimum)
    queue = SampleQueue(cfg.queue_capacity)
    lcfg = cfg.learner_cfg()
    wcfg = cfg.worker_cfg()
    acfg = ActorConfig(env_cfg=cfg.env, episodes=cfg.episodes_per_actor)

    pool = None
    learner_thread = None
    if cfg.mode == "awl":
        pool = SharedParamPool(state.theta)
        writer = pool.writer()
        replay = ReplayPool(cfg.env.env_spec(), lcfg.replay_capacity)
        learner_thread = _RoleThread(
            "learner",
            lambda: run_learner(lcfg, state, queue, writer, replay,
                                emit=emit, eval_fn=eval_fn, dump=dump),
        )

    actor_threads: list[_RoleThread] = []
    worker_threads: list[_RoleThread] = []
    trainers: list[WorkerTrainer] = []
    # environments and sample-queue senders are created before any thread
    # starts so queue exhaustion is well-defined from the beginning
    for w in range(cfg.workers):
        actor_ids = [w * cfg.actors + a for a in range(cfg.actors)]
        pipe_set = PipeSet(actor_ids, capacity=cfg.pipe_capacity)
        for a, aid in enumerate(actor_ids):
            env = cfg.env.make(derive_int_seed(cfg.seed, "env", w, a))
            actor_threads.append(_RoleThread(
                f"actor-{aid}",
                lambda p=pipe_set.pipe(aid), s=queue.sender(), e=env, i=aid:
                    run_actor(acfg, i, p, s, e, emit=emit),
            ))
        rng = derive_rng(cfg.seed, "policy", w)
        if cfg.mode == "aw":
            replay = ReplayPool(cfg.env.env_spec(), lcfg.replay_capacity)
            trainer = WorkerTrainer(state, replay, queue, lcfg,
                                    emit=emit, eval_fn=eval_fn, dump=dump)
            trainers.append(trainer)
            fn = (lambda ps=pipe_set, r=rng, tr=trainer:
                  run_worker(wcfg, dims, ps, r, aw_trainer=tr, emit=emit))
        else:
            reader = pool.reader(f"worker-{w}")
            fn = (lambda ps=pipe_set, r=rng, rd=reader:
                  run_worker(wcfg, dims, ps, r, reader=rd, emit=emit))
        worker_threads.append(_RoleThread(f"worker-{w}", fn))

    threads = actor_threads + worker_threads
    if learner_thread is not None:
        threads.append(learner_thread)
    for t in threads:
        t.start()
    while any(t.is_alive() for t in threads) or events.qsize() > 0:
        try:
            agg.emit(events.get(timeout=0.02))
        except TimeoutError:
            pass
    for t in threads:
        t.join()
    failures = [t for t in threads if t.error is not None]
    if failures:
        raise RoleFailure(failures[0].role, failures[0].error)
    engines.extend(t.result for t in worker_threads)
    if learner_thread is not None:
        return learner_thread.result
    return sum(tr.ingested for tr in trainers)


def throughput_compare(cfg: ExperimentConfig) -> dict:
    """Run baseline / AW / AWL on identical episode budgets and report
    steps/sec plus ratios versus the baseline."""
    compare = dict(cfg.compare)
    aw_actors = int(compare.get("aw_actors", 4))
    awl_workers = int(compare.get("awl_workers", 4))
    awl_actors = int(compare.get("awl_actors", 3))
    budget = cfg.episodes
    for n_envs in (1, aw_actors, awl_workers * awl_actors):
        if budget % n_envs != 0:
            raise ConfigError(
                f"episode budget {budget} is not divisible by topology size {n_envs}"
            )

    def variant(mode: str, workers: int, actors: int) -> ExperimentConfig:
        out = f"{cfg.out}.{mode}.csv" if cfg.out else None
        return replace(cfg, mode=mode, workers=workers, actors=actors, out=out,
                       checkpoint_out=None, episode_dump=None)

    results = {}
    results["baseline"] = run_experiment(variant("baseline", 1, 1))
    results["aw"] = run_experiment(variant("aw", 1, aw_actors))
    results["awl"] = run_experiment(variant("awl", awl_workers, awl_actors))
    base = results["baseline"]["steps_per_sec"]
    aw = results["aw"]["steps_per_sec"]
    awl = results["awl"]["steps_per_sec"]
    results["ratios"] = {
        "aw_vs_baseline": aw / base if base > 0 else float("inf"),
        "awl_vs_baseline": awl / base if base > 0 else float("inf"),
        "awl_vs_aw": awl / aw if aw > 0 else float("inf"),
    }
    return results
