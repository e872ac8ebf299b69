"""Counter-based random substreams.

Every random quantity in a simulation is addressed by a tuple of
non-negative integers: the master seed, a phase, the replication index, a
stream tag and an index inside that stream (usually a server). The tuple is
fed to :class:`numpy.random.SeedSequence` and the result drives a Philox
generator, so any substream can be rebuilt without touching the others.
This is what makes parallel Monte Carlo order independent.
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np

__all__ = ["Phase", "Stream", "substream", "seed_from"]


class Phase(IntEnum):
    """Which part of an experiment a draw belongs to."""

    CALIBRATE = 0
    EVALUATE = 1
    AUXILIARY = 2


class Stream(IntEnum):
    """Purpose of a stream inside one replication."""

    DATA = 1
    NOISE = 2
    SHARED = 3
    SIGNAL = 4
    AUDIT = 5


def _key(seed: int, keys: tuple[int, ...]) -> list[int]:
    out = [int(seed)]
    for k in keys:
        k = int(k)
        if k < 0:
            raise ValueError("substream keys must be non-negative integers")
        out.append(k)
    if out[0] < 0:
        raise ValueError("seed must be a non-negative integer")
    return out


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Return an independent generator addressed by ``(seed, *keys)``.

    :param seed: master seed (unsigned 64-bit range)
    :param keys: counters identifying the substream
    :return: a fresh Philox-backed generator
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(_key(seed, keys))))


def seed_from(seed: int, *keys: int) -> int:
    """Derive a 63-bit integer seed for APIs that take a plain integer."""
    state = np.random.SeedSequence(_key(seed, keys)).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])
