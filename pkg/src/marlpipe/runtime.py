"""The three concurrent roles (actor, worker, learner) and the coupled
single-environment baseline they are measured against.

Actors own environments and produce whole-episode records; workers serve
action decisions for their actors from a periodically synchronized parameter
snapshot; the learner trains from replay and publishes snapshots. The AW
variant has no learner tier: its single worker trains between episodes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .envs import EnvConfig, StepResult
from .errors import AllActorsClosed, ConfigError, QueueExhausted
from .hidden import HiddenStateStore
from .metrics import EpisodeEvent, EvalEvent, StalenessEvent, TrainEvent, WarnEvent
from .nets import MASK_FILL, NetDims, ParamLayout, _agent_cell
from .paramstore import ChecksumMismatch, PoolReader, PoolWriter
from .pipes import ActionReply, EpisodeRecord, ObsActPipe, ObsRequest, PipeSet, SampleQueue
from .replay import ReplayPool
from .seeding import derive_rng
from .training import LearnerState, TrainConfig


@dataclass(frozen=True)
class ActorConfig:
    env_cfg: EnvConfig
    episodes: int  # interaction count T

    def __post_init__(self):
        if self.episodes < 1:
            raise ConfigError("episodes (T) must be >= 1")


@dataclass(frozen=True)
class WorkerConfig:
    n_actors: int
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_anneal_steps: int = 50_000
    sync_every_batches: int = 32  # extra snapshot fetches between episode boundaries
    poll_timeout: float = 0.02

    def __post_init__(self):
        if self.n_actors < 1:
            raise ConfigError("n_actors must be >= 1")
        for name in ("eps_start", "eps_end"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.eps_anneal_steps < 1 or self.sync_every_batches < 1:
            raise ConfigError("eps_anneal_steps and sync_every_batches must be >= 1")


@dataclass(frozen=True)
class LearnerConfig:
    n_workers: int = 1
    batch_size: int = 32
    min_fill: int = 32  # episodes in replay before training starts
    train_per_episode: float = 1.0  # train steps per ingested episode
    replay_capacity: int = 5000
    eval_every_episodes: int = 0  # 0 disables periodic greedy evaluation
    eval_episodes: int = 20
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.n_workers < 1 or self.batch_size < 1:
            raise ConfigError("n_workers and batch_size must be >= 1")
        if self.min_fill < self.batch_size:
            raise ConfigError("min_fill must be >= batch_size")
        if self.train_per_episode <= 0:
            raise ConfigError("train_per_episode must be > 0")
        if self.replay_capacity < self.min_fill:
            raise ConfigError("replay_capacity must be >= min_fill")


class EpsilonSchedule:
    """Linear anneal from start to end over a fixed number of decision steps."""

    def __init__(self, start: float, end: float, anneal_steps: int):
        self.start = start
        self.end = end
        self.anneal_steps = anneal_steps

    def value(self, step: int) -> float:
        if step >= self.anneal_steps:
            return self.end
        frac = step / self.anneal_steps
        return self.start + frac * (self.end - self.start)


class DecisionEngine:
    """Shared decision path: batched recurrent forward + epsilon-greedy
    selection over available actions, with per-slot hidden state and
    last-action memory. Used by workers, the baseline, and evaluation."""

    def __init__(self, dims: NetDims, n_slots: int, rng: np.random.Generator):
        self.dims = dims
        self.rng = rng
        self.store = HiddenStateStore(n_slots, dims.n_agents, dims.hidden_dim)
        self.last_actions = np.full((n_slots, dims.n_agents), -1, dtype=np.int64)
        self._fresh = [True] * n_slots
        self.hidden_check_failures = 0
        self.decisions = 0

    def decide(self, params: dict, items: list) -> list[np.ndarray]:
        """items: [(slot, per_agent_obs [N, O], avail [N, A], eps)] -> joint actions."""
        dims = self.dims
        n, a = dims.n_agents, dims.n_actions
        r = len(items)
        inp = np.empty((r * n, dims.input_dim))
        hidden = np.empty((r * n, dims.hidden_dim))
        eye = np.eye(n)
        for k, (slot, obs, avail, _eps) in enumerate(items):
            if self._fresh[slot] and not self.store.env_is_zero(slot):
                self.hidden_check_failures += 1
            rows = slice(k * n, (k + 1) * n)
            last = np.zeros((n, a))
            prev = self.last_actions[slot]
            live = prev >= 0
            last[np.flatnonzero(live), prev[live]] = 1.0
            inp[rows] = np.concatenate([obs, last, eye], axis=1)
            hidden[rows] = self.store.get_env(slot)
        q, h1 = _agent_cell(params, inp, hidden, cache=None)
        out: list[np.ndarray] = []
        for k, (slot, _obs, avail, eps) in enumerate(items):
            qk = q[k * n : (k + 1) * n]
            joint = np.empty(n, dtype=np.int64)
            for i in range(n):
                av = np.asarray(avail[i], dtype=bool)
                if eps > 0 and self.rng.random() < eps:
                    legal = np.flatnonzero(av)
                    joint[i] = legal[self.rng.integers(len(legal))]
                else:
                    joint[i] = int(np.argmax(np.where(av, qk[i], MASK_FILL)))
            self.store.put_env(slot, h1[k * n : (k + 1) * n])
            self.last_actions[slot] = joint
            self._fresh[slot] = False
            self.decisions += 1
            out.append(joint)
        return out

    def end_episode(self, slot: int) -> None:
        self.store.reset_env(slot)
        self.last_actions[slot] = -1
        self._fresh[slot] = True


class EpisodeCollector:
    """Accumulates one episode's steps into an EpisodeRecord."""

    def __init__(self):
        self._obs: list = []
        self._state: list = []
        self._avail: list = []
        self._actions: list = []
        self._rewards: list = []

    def add(self, pre_step: StepResult, joint_action: np.ndarray, reward: float) -> None:
        self._obs.append(np.asarray(pre_step.per_agent_obs, dtype=np.float64))
        self._state.append(np.asarray(pre_step.global_state, dtype=np.float64))
        self._avail.append(np.asarray(pre_step.avail_actions, dtype=bool))
        self._actions.append(np.asarray(joint_action, dtype=np.int64))
        self._rewards.append(float(reward))

    def finish(self, terminated: bool, actor_id: int, episode_index: int) -> EpisodeRecord:
        return EpisodeRecord(
            obs=np.stack(self._obs),
            state=np.stack(self._state),
            avail=np.stack(self._avail),
            actions=np.stack(self._actions),
            rewards=np.asarray(self._rewards),
            terminated=terminated,
            actor_id=actor_id,
            episode_index=episode_index,
        )


def run_actor(cfg: ActorConfig, actor_id: int, pipe: ObsActPipe, sender, env, emit=None):
    """Play exactly T episodes through the pipe, shipping each whole track.

    Closes the environment and both endpoints on any exit; a worker death
    surfaces as ChannelClosed with no partial episode pushed.
    """
    try:
        for ep_idx in range(cfg.episodes):
            sr = env.reset()
            col = EpisodeCollector()
            t = 0
            while True:
                pipe.send_obs(ObsRequest(actor_id, t, sr.per_agent_obs, sr.avail_actions, False))
                reply = pipe.recv_action()
                nxt = env.step(reply.joint_action)
                col.add(sr, reply.joint_action, nxt.reward)
                sr = nxt
                t += 1
                if sr.done:
                    break
            pipe.send_obs(ObsRequest(actor_id, t, sr.per_agent_obs, sr.avail_actions, True))
            record = col.finish(sr.terminated, actor_id, ep_idx)
            sender.push(record)
            if emit is not None:
                emit(EpisodeEvent("actor", actor_id, record.length, record.episode_return,
                                  sr.terminated))
    finally:
        env.close()
        pipe.actor_close()
        sender.close()


def _fetch_with_retry(reader: PoolReader, attempts: int = 3):
    for k in range(attempts):
        try:
            return reader.fetch()
        except ChecksumMismatch:
            if k == attempts - 1:
                raise
    raise AssertionError("unreachable")


class WorkerTrainer:
    """AW-mode training bolted onto the worker: ingest episodes from the
    sample queue and run train steps between episodes."""

    def __init__(self, state: LearnerState, replay: ReplayPool, queue: SampleQueue,
                 lcfg: LearnerConfig, emit=None, eval_fn=None, dump=None):
        self.state = state
        self.replay = replay
        self.queue = queue
        self.lcfg = lcfg
        self.emit = emit
        self.eval_fn = eval_fn
        self.dump = dump
        self.credit = 0.0
        self.ingested = 0
        self.exhausted = False

    def ingest_available(self) -> bool:
        """Drain pending episodes and spend accumulated train credit.
        Returns True if parameters changed."""
        while not self.exhausted:
            try:
                ok, ep = self.queue.pop_nowait()
            except QueueExhausted:
                self.exhausted = True
                break
            if not ok:
                break
            self._ingest(ep)
        changed = False
        lcfg = self.lcfg
        while self.credit >= 1.0 and len(self.replay) >= lcfg.min_fill:
            batch = self.replay.sample(lcfg.batch_size, self.state.sample_rng)
            loss = self.state.train_step(batch)
            self.credit -= 1.0
            changed = True
            if self.emit is not None:
                self.emit(TrainEvent(loss, self.state.train_steps, self.state.last_grad_norm))
        return changed

    def _ingest(self, ep: EpisodeRecord) -> None:
        self.replay.insert(ep)
        if self.dump is not None:
            self.dump(ep)
        self.ingested += 1
        self.credit += self.lcfg.train_per_episode
        if (
            self.eval_fn is not None
            and self.lcfg.eval_every_episodes
            and self.ingested % self.lcfg.eval_every_episodes == 0
        ):
            self.eval_fn(self.state.theta)


def run_worker(
    cfg: WorkerConfig,
    dims: NetDims,
    pipe_set: PipeSet,
    rng: np.random.Generator,
    reader: PoolReader | None = None,
    aw_trainer: WorkerTrainer | None = None,
    emit=None,
) -> DecisionEngine:
    """Serve decisions to this worker's actors until they all finish.

    In AWL mode `reader` supplies snapshots (fetched at every episode boundary
    and every sync_every_batches decision batches); in AW mode `aw_trainer`
    owns the parameters and trains between episodes.
    """
    if (reader is None) == (aw_trainer is None):
        raise ConfigError("exactly one of reader / aw_trainer must be given")
    layout = ParamLayout(dims)
    if reader is not None:
        _, flat = _fetch_with_retry(reader)
        params = layout.unflatten(flat)
    else:
        params = layout.unflatten(aw_trainer.state.theta)
    engine = DecisionEngine(dims, n_slots=len(pipe_set.pipes), rng=rng)
    slot_of = {aid: i for i, aid in enumerate(sorted(pipe_set.pipes))}
    sched = EpsilonSchedule(cfg.eps_start, cfg.eps_end, cfg.eps_anneal_steps)
    decisions = 0
    batches = 0
    while True:
        try:
            batch = pipe_set.poll(cfg.poll_timeout)
        except AllActorsClosed:
            break
        if batch:
            batches += 1
            boundary = False
            pending: list[ObsRequest] = []
            items = []
            for req in batch:
                slot = slot_of[req.actor_id]
                if req.episode_done:
                    engine.end_episode(slot)
                    boundary = True
                else:
                    items.append((slot, req.per_agent_obs, req.avail_actions,
                                  sched.value(decisions)))
                    decisions += 1
                    pending.append(req)
            if items:
                for req, joint in zip(pending, engine.decide(params, items)):
                    pipe_set.reply(ActionReply(req.actor_id, joint))
            if reader is not None and (boundary or batches % cfg.sync_every_batches == 0):
                if emit is not None:
                    emit(StalenessEvent("worker", reader.staleness()))
                _, flat = _fetch_with_retry(reader)
                params = layout.unflatten(flat)
        if aw_trainer is not None and aw_trainer.ingest_available():
            params = layout.unflatten(aw_trainer.state.theta)
    if aw_trainer is not None:
        # actors are gone; drain whatever is still queued and spend the credit
        while not aw_trainer.exhausted:
            aw_trainer.ingest_available()
            if not aw_trainer.exhausted:
                time.sleep(0.001)  # senders close moments after their pipes do
    return engine


def run_learner(
    cfg: LearnerConfig,
    state: LearnerState,
    queue: SampleQueue,
    writer: PoolWriter,
    replay: ReplayPool,
    emit=None,
    eval_fn=None,
    dump=None,
) -> int:
    """Ingest episodes, train at the configured ratio, publish every step.

    Exits when the sample queue reports exhaustion (drained and every sender
    closed). Returns the number of episodes ingested.
    """
    credit = 0.0
    ingested = 0

    def _ingest(ep: EpisodeRecord) -> None:
        nonlocal credit, ingested
        replay.insert(ep)
        if dump is not None:
            dump(ep)
        ingested += 1
        credit += cfg.train_per_episode
        if (
            eval_fn is not None
            and cfg.eval_every_episodes
            and ingested % cfg.eval_every_episodes == 0
        ):
            eval_fn(state.theta)

    exhausted = False
    while not exhausted:
        try:
            while True:
                ok, ep = queue.pop_nowait()
                if not ok:
                    break
                _ingest(ep)
        except QueueExhausted:
            exhausted = True
        while credit >= 1.0 and len(replay) >= cfg.min_fill:
            batch = replay.sample(cfg.batch_size, state.sample_rng)
            loss = state.train_step(batch)
            credit -= 1.0
            version = writer.publish(state.theta)
            if emit is not None:
                emit(TrainEvent(loss, version, state.last_grad_norm))
        if exhausted:
            break
        try:
            _ingest(queue.pop(timeout=0.05))
        except TimeoutError:
            pass
        except QueueExhausted:
            exhausted = True
    if state.train_steps == 0 and emit is not None:
        emit(WarnEvent(f"learner exiting without training: ingested {ingested} episodes, "
                       f"min_fill is {cfg.min_fill}"))
    if eval_fn is not None:
        eval_fn(state.theta)
    return ingested


def run_baseline(
    env_cfg: EnvConfig,
    dims: NetDims,
    state: LearnerState,
    episodes: int,
    wcfg: WorkerConfig,
    lcfg: LearnerConfig,
    seed: int,
    emit=None,
    eval_fn=None,
    dump=None,
) -> DecisionEngine:
    """The coupled reference: one environment, act-then-train in one loop,
    sharing the exact learner math and decision path with the distributed
    modes (worker index 0 / actor index 0 seed derivations)."""
    from .seeding import derive_int_seed

    env = env_cfg.make(derive_int_seed(seed, "env", 0, 0))
    engine = DecisionEngine(dims, 1, derive_rng(seed, "policy", 0))
    replay = ReplayPool(env_cfg.env_spec(), lcfg.replay_capacity)
    sched = EpsilonSchedule(wcfg.eps_start, wcfg.eps_end, wcfg.eps_anneal_steps)
    layout = ParamLayout(dims)
    params = layout.unflatten(state.theta)
    decisions = 0
    credit = 0.0
    try:
        for ep_idx in range(episodes):
            sr = env.reset()
            col = EpisodeCollector()
            while True:
                eps = sched.value(decisions)
                decisions += 1
                (joint,) = engine.decide(params, [(0, sr.per_agent_obs, sr.avail_actions, eps)])
                nxt = env.step(joint)
                col.add(sr, joint, nxt.reward)
                sr = nxt
                if sr.done:
                    break
            engine.end_episode(0)
            record = col.finish(sr.terminated, 0, ep_idx)
            replay.insert(record)
            if dump is not None:
                dump(record)
            if emit is not None:
                emit(EpisodeEvent("baseline", 0, record.length, record.episode_return,
                                  sr.terminated))
            credit += lcfg.train_per_episode
            while credit >= 1.0 and len(replay) >= lcfg.min_fill:
                batch = replay.sample(lcfg.batch_size, state.sample_rng)
                loss = state.train_step(batch)
                credit -= 1.0
                if emit is not None:
                    emit(TrainEvent(loss, state.train_steps, state.last_grad_norm))
                params = layout.unflatten(state.theta)
            if (
                eval_fn is not None
                and lcfg.eval_every_episodes
                and (ep_idx + 1) % lcfg.eval_every_episodes == 0
            ):
                eval_fn(state.theta)
        if eval_fn is not None:
            eval_fn(state.theta)
    finally:
        env.close()
    return engine


def greedy_eval(
    dims: NetDims,
    flat: np.ndarray,
    env_cfg: EnvConfig,
    n_episodes: int,
    seed: int,
    optimum: float | None = None,
    eps: float = 0.0,
) -> tuple[float, float]:
    """Frozen-parameter evaluation; returns (mean return, solve rate).

    Solve rate is the fraction of episodes whose return reaches `optimum`
    (NaN when no optimum is known).
    """
    from .seeding import derive_int_seed

    layout = ParamLayout(dims)
    params = layout.unflatten(np.asarray(flat))
    env = env_cfg.make(derive_int_seed(seed, "eval-env"))
    engine = DecisionEngine(dims, 1, derive_rng(seed, "eval-policy"))
    returns = []
    try:
        for _ in range(n_episodes):
            sr = env.reset()
            total = 0.0
            while not sr.done:
                (joint,) = engine.decide(params, [(0, sr.per_agent_obs, sr.avail_actions, eps)])
                sr = env.step(joint)
                total += sr.reward
            engine.end_episode(0)
            returns.append(total)
    finally:
        env.close()
    mean = float(np.mean(returns))
    if optimum is None:
        return mean, float("nan")
    solve = float(np.mean([r >= optimum - 1e-6 for r in returns]))
    return mean, solve
