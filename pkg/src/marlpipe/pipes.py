"""Communication channels between the runtime roles.

Two conduits exist: a bidirectional observation-action pipe per actor
(actor <-> worker) and a multi-producer single-consumer sample queue of whole
episodes (actors -> learner). Both are bounded and blocking, with explicit
close semantics: termination is defined as "empty AND all counterpart
endpoints closed", never as a momentarily empty buffer.

Default transport is in-process; the framed binary layout at the bottom pins
the byte-exact message format a cross-process transport would use.
"""

from __future__ import annotations

import struct
import threading
import time
import zlib
from dataclasses import dataclass

import numpy as np

from .envs import EnvSpec
from .errors import (
    AllActorsClosed,
    ChannelClosed,
    LengthMismatch,
    MalformedEpisode,
    MarlpipeError,
    QueueExhausted,
)


class ProtocolViolation(MarlpipeError):
    """An endpoint broke the request/reply alternation contract."""


class Chan:
    """Bounded FIFO with close semantics.

    put() blocks while full and raises ChannelClosed once closed; get()
    drains remaining items after close, then raises ChannelClosed. get/put
    accept a timeout and raise the builtin TimeoutError on expiry.
    """

    def __init__(self, capacity: int, on_event=None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: list = []
        self._closed = False
        self._lock = threading.Lock()
        self._not_full = threading.Condition(self._lock)
        self._not_empty = threading.Condition(self._lock)
        self._on_event = on_event  # called after put/close, outside the lock

    def _notify_event(self):
        if self._on_event is not None:
            self._on_event()

    def put(self, item, timeout: float | None = None) -> None:
        with self._not_full:
            if not self._wait(self._not_full, lambda: self._closed or len(self._items) < self.capacity, timeout):
                raise TimeoutError("put timed out")
            if self._closed:
                raise ChannelClosed("send on closed channel")
            self._items.append(item)
            self._not_empty.notify()
        self._notify_event()

    def get(self, timeout: float | None = None):
        with self._not_empty:
            if not self._wait(self._not_empty, lambda: self._closed or self._items, timeout):
                raise TimeoutError("get timed out")
            if self._items:
                item = self._items.pop(0)
                self._not_full.notify()
                return item
            raise ChannelClosed("receive on closed, drained channel")

    def try_put(self, item) -> bool:
        with self._lock:
            if self._closed:
                raise ChannelClosed("send on closed channel")
            if len(self._items) >= self.capacity:
                return False
            self._items.append(item)
            self._not_empty.notify()
        self._notify_event()
        return True

    def try_get(self):
        """(True, item) if one was pending, (False, None) if empty and open;
        raises ChannelClosed if empty and closed."""
        with self._lock:
            if self._items:
                item = self._items.pop(0)
                self._not_full.notify()
                return True, item
            if self._closed:
                raise ChannelClosed("receive on closed, drained channel")
            return False, None

    def close(self) -> None:
        with self._lock:
            self._closed = True
            self._not_empty.notify_all()
            self._not_full.notify_all()
        self._notify_event()

    @property
    def closed(self) -> bool:
        with self._lock:
            return self._closed

    def qsize(self) -> int:
        with self._lock:
            return len(self._items)

    def drained(self) -> bool:
        with self._lock:
            return self._closed and not self._items

    @staticmethod
    def _wait(cond: threading.Condition, pred, timeout: float | None) -> bool:
        if timeout is None:
            while not pred():
                cond.wait()
            return True
        return cond.wait_for(pred, timeout)

    # test-only hooks for exhaustive interleaving checks
    def snapshot(self):
        with self._lock:
            return tuple(self._items), self._closed

    def restore(self, state) -> None:
        items, closed = state
        with self._lock:
            self._items = list(items)
            self._closed = closed


# ---------------------------------------------------------------------------
# Observation-action pipe
# ---------------------------------------------------------------------------


@dataclass
class ObsRequest:
    actor_id: int
    env_time_step: int
    per_agent_obs: np.ndarray  # [n_agents, obs_dim]
    avail_actions: np.ndarray  # [n_agents, n_actions] bool
    episode_done: bool = False  # end-of-episode notice; no reply expected


@dataclass
class ActionReply:
    actor_id: int
    joint_action: np.ndarray  # [n_agents] int


class ObsActPipe:
    """One actor's bidirectional pipe: an obs lane up, an action lane down."""

    def __init__(self, actor_id: int, capacity: int = 2, on_obs=None):
        self.actor_id = actor_id
        self._obs = Chan(capacity, on_event=on_obs)
        self._act = Chan(capacity)
        self._awaiting_reply = False

    # -- actor side -----------------------------------------------------
    def send_obs(self, req: ObsRequest) -> None:
        if req.actor_id != self.actor_id:
            raise ProtocolViolation(f"request for actor {req.actor_id} on pipe {self.actor_id}")
        if self._awaiting_reply:
            raise ProtocolViolation("previous ObsRequest still awaiting its ActionReply")
        self._obs.put(req)
        if not req.episode_done:
            self._awaiting_reply = True

    def recv_action(self) -> ActionReply:
        reply = self._act.get()
        self._awaiting_reply = False
        return reply

    def actor_close(self) -> None:
        self._obs.close()
        self._act.close()

    # -- worker side ----------------------------------------------------
    def try_recv_obs(self):
        return self._obs.try_get()

    def send_action(self, reply: ActionReply) -> None:
        if reply.actor_id != self.actor_id:
            raise ProtocolViolation(f"reply for actor {reply.actor_id} on pipe {self.actor_id}")
        self._act.put(reply)

    def worker_close(self) -> None:
        self._obs.close()
        self._act.close()

    def drained(self) -> bool:
        return self._obs.drained()


class PipeSet:
    """The worker's view over its actors' pipes: batched polling with a
    bounded wait, plus a distinguished all-closed signal."""

    def __init__(self, actor_ids, capacity: int = 2):
        self._event = threading.Event()
        self.pipes = {
            aid: ObsActPipe(aid, capacity, on_obs=self._event.set)
            for aid in sorted(actor_ids)
        }

    def pipe(self, actor_id: int) -> ObsActPipe:
        return self.pipes[actor_id]

    def poll(self, timeout: float = 0.05) -> list[ObsRequest]:
        """All currently pending requests, order-stable by actor_id.

        Returns [] once the timeout expires with nothing pending; raises
        AllActorsClosed when every pipe is closed and drained.
        """
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            self._event.clear()
            batch: list[ObsRequest] = []
            n_dead = 0
            for aid in sorted(self.pipes):
                pipe = self.pipes[aid]
                try:
                    while True:
                        ok, req = pipe.try_recv_obs()
                        if not ok:
                            break
                        batch.append(req)
                except ChannelClosed:
                    n_dead += 1
            if batch:
                return batch
            if n_dead == len(self.pipes):
                raise AllActorsClosed("all actor pipes closed and drained")
            if deadline is None:
                self._event.wait(0.05)
            else:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return []
                self._event.wait(min(remaining, 0.05))

    def reply(self, reply: ActionReply) -> None:
        self.pipes[reply.actor_id].send_action(reply)

    def close_all(self) -> None:
        for pipe in self.pipes.values():
            pipe.worker_close()


# ---------------------------------------------------------------------------
# Episode records and the sample queue
# ---------------------------------------------------------------------------


@dataclass
class EpisodeRecord:
    """One whole game trajectory, the unit shipped to replay."""

    obs: np.ndarray  # [L, n_agents, obs_dim]
    state: np.ndarray  # [L, state_dim]
    avail: np.ndarray  # [L, n_agents, n_actions] bool
    actions: np.ndarray  # [L, n_agents] int
    rewards: np.ndarray  # [L]
    terminated: bool  # real terminal vs episode-limit truncation
    actor_id: int = 0
    episode_index: int = 0

    @property
    def length(self) -> int:
        return self.obs.shape[0]

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum())

    def validate(self, spec: EnvSpec) -> None:
        length = self.length
        if length < 1 or length > spec.episode_limit:
            raise MalformedEpisode(f"episode length {length} outside [1, {spec.episode_limit}]")
        expect = {
            "obs": (self.obs, (length, spec.n_agents, spec.obs_dim)),
            "state": (self.state, (length, spec.state_dim)),
            "avail": (self.avail, (length, spec.n_agents, spec.n_actions)),
            "actions": (self.actions, (length, spec.n_agents)),
            "rewards": (self.rewards, (length,)),
        }
        for name, (arr, shape) in expect.items():
            if arr.shape != shape:
                raise MalformedEpisode(f"{name}: shape {arr.shape} != {shape}")
        if not (np.all(np.isfinite(self.obs)) and np.all(np.isfinite(self.rewards))):
            raise MalformedEpisode("non-finite values in episode")
        if not self.avail.any(axis=2).all():
            raise MalformedEpisode("a step has an all-false availability row")


class SampleSender:
    """One producer's handle on a SampleQueue; close it when done."""

    def __init__(self, queue: "SampleQueue"):
        self._queue = queue
        self._open = True

    def push(self, episode, timeout: float | None = None) -> None:
        if not self._open:
            raise ChannelClosed("push after sender close")
        self._queue._push(episode, timeout)

    def close(self) -> None:
        if self._open:
            self._open = False
            self._queue._sender_closed()


class SampleQueue:
    """Bounded multi-producer single-consumer FIFO of EpisodeRecords.

    pop() blocks while empty as long as any sender remains open, and raises
    QueueExhausted (repeatably) once empty with zero open senders.
    """

    def __init__(self, capacity: int = 64):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: list = []
        self._senders = 0
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)

    def sender(self) -> SampleSender:
        with self._lock:
            self._senders += 1
        return SampleSender(self)

    @property
    def open_senders(self) -> int:
        with self._lock:
            return self._senders

    def qsize(self) -> int:
        with self._lock:
            return len(self._items)

    def _push(self, episode, timeout: float | None) -> None:
        with self._cond:
            if timeout is None:
                while len(self._items) >= self.capacity:
                    self._cond.wait()
            elif not self._cond.wait_for(lambda: len(self._items) < self.capacity, timeout):
                raise TimeoutError("push timed out")
            self._items.append(episode)
            self._cond.notify_all()

    def _sender_closed(self) -> None:
        with self._cond:
            self._senders -= 1
            self._cond.notify_all()

    def pop(self, timeout: float | None = None):
        with self._cond:
            ready = lambda: self._items or self._senders == 0
            if timeout is None:
                while not ready():
                    self._cond.wait()
            elif not self._cond.wait_for(ready, timeout):
                raise TimeoutError("pop timed out")
            if self._items:
                item = self._items.pop(0)
                self._cond.notify_all()
                return item
            raise QueueExhausted("sample queue empty and all senders closed")

    def pop_nowait(self):
        """(True, item) or (False, None); raises QueueExhausted when done."""
        with self._cond:
            if self._items:
                item = self._items.pop(0)
                self._cond.notify_all()
                return True, item
            if self._senders == 0:
                raise QueueExhausted("sample queue empty and all senders closed")
            return False, None


# ---------------------------------------------------------------------------
# Framed binary message layout (cross-process transport contract)
# ---------------------------------------------------------------------------

FRAME_MAGIC = b"MAPF"
FRAME_OBS = 1
FRAME_ACTION = 2
FRAME_EPISODE = 3


def _frame(frame_type: int, actor_id: int, payload: bytes) -> bytes:
    head = struct.pack("<4sBIQ", FRAME_MAGIC, frame_type, actor_id, len(payload))
    return head + payload + struct.pack("<I", zlib.crc32(payload))


def _unframe(blob: bytes) -> tuple[int, int, bytes]:
    head_size = struct.calcsize("<4sBIQ")
    if len(blob) < head_size + 4:
        raise LengthMismatch("frame truncated")
    magic, frame_type, actor_id, n = struct.unpack("<4sBIQ", blob[:head_size])
    if magic != FRAME_MAGIC:
        raise LengthMismatch(f"bad frame magic {magic!r}")
    payload = blob[head_size : head_size + n]
    if len(payload) != n:
        raise LengthMismatch("frame payload truncated")
    (crc,) = struct.unpack("<I", blob[head_size + n : head_size + n + 4])
    if crc != zlib.crc32(payload):
        raise LengthMismatch("frame checksum mismatch")
    return frame_type, actor_id, payload


def encode_obs_request(req: ObsRequest) -> bytes:
    n, o = req.per_agent_obs.shape
    a = req.avail_actions.shape[1]
    payload = struct.pack("<IIIIB", req.env_time_step, n, o, a, int(req.episode_done))
    payload += np.ascontiguousarray(req.per_agent_obs, dtype="<f8").tobytes()
    payload += np.ascontiguousarray(req.avail_actions, dtype=np.uint8).tobytes()
    return _frame(FRAME_OBS, req.actor_id, payload)


def encode_action_reply(reply: ActionReply) -> bytes:
    acts = np.ascontiguousarray(reply.joint_action, dtype="<u4")
    payload = struct.pack("<I", acts.shape[0]) + acts.tobytes()
    return _frame(FRAME_ACTION, reply.actor_id, payload)


def encode_episode(ep: EpisodeRecord) -> bytes:
    length, n, o = ep.obs.shape
    s = ep.state.shape[1]
    a = ep.avail.shape[2]
    payload = struct.pack(
        "<IIIIIBBI", length, n, o, s, a, int(ep.terminated), 0, ep.episode_index
    )
    payload += np.ascontiguousarray(ep.obs, dtype="<f8").tobytes()
    payload += np.ascontiguousarray(ep.state, dtype="<f8").tobytes()
    payload += np.ascontiguousarray(ep.avail, dtype=np.uint8).tobytes()
    payload += np.ascontiguousarray(ep.actions, dtype="<u4").tobytes()
    payload += np.ascontiguousarray(ep.rewards, dtype="<f8").tobytes()
    return _frame(FRAME_EPISODE, ep.actor_id, payload)


def decode_frame(blob: bytes):
    """Decode one frame into the corresponding message object."""
    frame_type, actor_id, payload = _unframe(blob)
    if frame_type == FRAME_OBS:
        t, n, o, a, done = struct.unpack_from("<IIIIB", payload)
        off = struct.calcsize("<IIIIB")
        obs = np.frombuffer(payload, dtype="<f8", count=n * o, offset=off).reshape(n, o)
        off += 8 * n * o
        avail = np.frombuffer(payload, dtype=np.uint8, count=n * a, offset=off).reshape(n, a)
        return ObsRequest(actor_id, t, obs.astype(np.float64), avail.astype(bool), bool(done))
    if frame_type == FRAME_ACTION:
        (n,) = struct.unpack_from("<I", payload)
        acts = np.frombuffer(payload, dtype="<u4", count=n, offset=4)
        return ActionReply(actor_id, acts.astype(np.int64))
    if frame_type == FRAME_EPISODE:
        length, n, o, s, a, terminated, _rsv, ep_idx = struct.unpack_from("<IIIIIBBI", payload)
        off = struct.calcsize("<IIIIIBBI")
        obs = np.frombuffer(payload, dtype="<f8", count=length * n * o, offset=off)
        off += 8 * length * n * o
        state = np.frombuffer(payload, dtype="<f8", count=length * s, offset=off)
        off += 8 * length * s
        avail = np.frombuffer(payload, dtype=np.uint8, count=length * n * a, offset=off)
        off += length * n * a
        actions = np.frombuffer(payload, dtype="<u4", count=length * n, offset=off)
        off += 4 * length * n
        rewards = np.frombuffer(payload, dtype="<f8", count=length, offset=off)
        return EpisodeRecord(
            obs=obs.reshape(length, n, o).astype(np.float64),
            state=state.reshape(length, s).astype(np.float64),
            avail=avail.reshape(length, n, a).astype(bool),
            actions=actions.reshape(length, n).astype(np.int64),
            rewards=rewards.astype(np.float64),
            terminated=bool(terminated),
            actor_id=actor_id,
            episode_index=ep_idx,
        )
    raise LengthMismatch(f"unknown frame type {frame_type}")
