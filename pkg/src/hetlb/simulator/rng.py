"""xoshiro256** streams, one per source of randomness, seeded from ``numpy.random.SeedSequence``.

Both kernel backends consume these states with the same arithmetic, so a given
``(seed, replication)`` yields the same sample path under either backend.
"""
from __future__ import annotations

import math

import numpy as np

MASK = (1 << 64) - 1
TWO_M53 = 2.0**-53

STREAMS = ("arrival", "size", "sample", "decision", "departure")
ARRIVAL, SIZE, SAMPLE, DECISION, DEPARTURE = range(len(STREAMS))


def stream_states(seed: int, replication: int) -> np.ndarray:
    """``(5, 4)`` uint64 array: xoshiro states for every stream of one replication."""
    if not 0 <= seed < 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    out = np.empty((len(STREAMS), 4), dtype=np.uint64)
    for s in range(len(STREAMS)):
        st = np.random.SeedSequence(seed, spawn_key=(replication, s)).generate_state(4, np.uint64)
        if not st.any():
            st[0] = 1
        out[s] = st
    return out


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK


class Xoshiro:
    """Pure-Python xoshiro256**; ``state`` is a list of four 64-bit ints."""

    __slots__ = ("s",)

    def __init__(self, state) -> None:
        self.s = [int(x) for x in state]

    def next64(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & MASK, 7) * 9) & MASK
        t = (s[1] << 17) & MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uniform(self) -> float:
        return (self.next64() >> 11) * TWO_M53

    def randbelow(self, n: int) -> int:
        return int(self.uniform() * n)

    def exponential(self, rate: float) -> float:
        return -math.log(1.0 - self.uniform()) / rate

    def state(self) -> list[int]:
        return list(self.s)


def fingerprint(states: np.ndarray) -> list[str]:
    """Hex digest of each stream state, used to compare consumption across runs."""
    return ["".join(f"{int(x):016x}" for x in row) for row in np.asarray(states, dtype=np.uint64)]
