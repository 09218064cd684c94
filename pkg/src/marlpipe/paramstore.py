"""Versioned parameter snapshot store: one writer (the learner), many readers.

publish() installs a new immutable snapshot atomically (double-buffer
semantics: readers holding the previous snapshot keep it; new fetches see the
new one); fetch() never blocks the writer and validates the checksum on every
call. Snapshots share their byte layout with the nets checkpoint format.
"""

from __future__ import annotations

import threading
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch, MarlpipeError, SecondWriter


class ChecksumMismatch(MarlpipeError):
    pass


def _digest(data: np.ndarray) -> int:
    return zlib.crc32(np.ascontiguousarray(data, dtype="<f8").tobytes())


@dataclass(frozen=True)
class ParamSnapshot:
    version: int
    data: np.ndarray  # flat float64, read-only
    checksum: int

    def verify(self) -> None:
        if _digest(self.data) != self.checksum:
            raise ChecksumMismatch(f"snapshot v{self.version} failed its checksum")


def _freeze(flat: np.ndarray) -> np.ndarray:
    out = np.array(flat, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


class PoolReader:
    """Per-reader fetch handle; tracks the last version seen for staleness."""

    def __init__(self, pool: "SharedParamPool", name: str):
        self._pool = pool
        self.name = name
        self.last_version = -1

    def fetch(self) -> tuple[int, np.ndarray]:
        snap = self._pool._current
        snap.verify()
        if snap.version < self.last_version:
            raise MarlpipeError(
                f"reader {self.name}: version went backwards "
                f"({snap.version} < {self.last_version})"
            )
        self.last_version = snap.version
        return snap.version, snap.data

    def staleness(self) -> int:
        return self._pool.version - max(self.last_version, 0)


class PoolWriter:
    def __init__(self, pool: "SharedParamPool"):
        self._pool = pool

    def publish(self, flat_params: np.ndarray) -> int:
        return self._pool._publish(flat_params)


class SharedParamPool:
    """Shared memory pool M: seeded with an initial snapshot at version 0."""

    def __init__(self, initial_flat: np.ndarray):
        data = _freeze(initial_flat)
        self.size = data.shape[0]
        self._current = ParamSnapshot(0, data, _digest(data))
        self._lock = threading.Lock()
        self._writer_taken = False
        self._readers: list[PoolReader] = []

    @property
    def version(self) -> int:
        return self._current.version

    def writer(self) -> PoolWriter:
        with self._lock:
            if self._writer_taken:
                raise SecondWriter("the pool already has its single writer")
            self._writer_taken = True
        return PoolWriter(self)

    def reader(self, name: str = "") -> PoolReader:
        r = PoolReader(self, name or f"reader-{len(self._readers)}")
        with self._lock:
            self._readers.append(r)
        return r

    def _publish(self, flat_params: np.ndarray) -> int:
        flat_params = np.asarray(flat_params)
        if flat_params.shape != (self.size,):
            raise LengthMismatch(f"publish length {flat_params.shape} != ({self.size},)")
        data = _freeze(flat_params)
        with self._lock:
            snap = ParamSnapshot(self._current.version + 1, data, _digest(data))
            self._current = snap
        return snap.version

    def fetch(self) -> tuple[int, np.ndarray]:
        """Anonymous fetch of the current snapshot (checksum-verified)."""
        snap = self._current
        snap.verify()
        return snap.version, snap.data

    def staleness_report(self) -> dict[str, int]:
        with self._lock:
            readers = list(self._readers)
        return {r.name: r.staleness() for r in readers}
