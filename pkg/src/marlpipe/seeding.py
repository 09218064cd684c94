"""Deterministic, order-independent derivation of per-role RNG streams.

Every concurrent role (env, actor policy, learner sampling, ...) gets its own
generator derived from the experiment seed plus a string/int tag path, so the
streams are stable no matter which thread starts first.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_to_int(tag: str | int) -> int:
    if isinstance(tag, int):
        return tag & 0xFFFFFFFF
    return zlib.crc32(tag.encode("utf-8"))


def derive_seed_sequence(seed: int, *tags: str | int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed & 0xFFFFFFFF] + [_tag_to_int(t) for t in tags])


def derive_rng(seed: int, *tags: str | int) -> np.random.Generator:
    """A PCG64 generator keyed by (seed, *tags)."""
    return np.random.Generator(np.random.PCG64(derive_seed_sequence(seed, *tags)))


def derive_int_seed(seed: int, *tags: str | int) -> int:
    """A stable 32-bit integer seed keyed by (seed, *tags)."""
    return int(derive_seed_sequence(seed, *tags).generate_state(1)[0])
