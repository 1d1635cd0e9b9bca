"""Dispatch rules as standalone functions over sampled occupancies.

These mirror the decisions made inside the event loops and are handy for testing the
tie rules in isolation. Randomness comes from a ``numpy.random.Generator``.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..core import ClusterSpec

_SNAP_REL = 1e-12


def sample_servers(state, spec: ClusterSpec, rng: np.random.Generator) -> list[np.ndarray]:
    """For each type j, ``d_j`` distinct uniformly chosen global server indices."""
    out = []
    for j in range(spec.M):
        lo, hi = int(state.type_start[j]), int(state.type_start[j + 1])
        out.append(lo + rng.choice(hi - lo, size=spec.d[j], replace=False))
    return out


def _argmin_uniform(q: Sequence[int], rng: np.random.Generator) -> int:
    q = np.asarray(q)
    idx = np.flatnonzero(q == q.min())
    return int(idx[0]) if idx.size == 1 else int(rng.choice(idx))


def select_scheme1(samples: Sequence[Sequence[int]], spec: ClusterSpec, rng: np.random.Generator) -> tuple[int, int]:
    """``(type, position in that type's sample)`` of the least-occupied sampled server.
    Within a type ties are uniform; across types the largest capacity wins."""
    best = None
    for j, q in enumerate(samples):
        if len(q) == 0:
            continue
        r = _argmin_uniform(q, rng)
        if best is None or q[r] < best[2] or (q[r] == best[2] and spec.C[j] >= spec.C[best[0]]):
            best = (j, r, q[r])
    if best is None:
        raise ValueError("no samples")
    return best[0], best[1]


def select_scheme2(samples: Sequence[Sequence[int]], spec: ClusterSpec, rng: np.random.Generator) -> tuple[int, int]:
    """Per-type least-occupied sample, then the largest ``C_j / q`` (idle counts as infinite).
    Equal ratios (to 1e-12 relative) go to the larger capacity."""
    best = None
    for j, q in enumerate(samples):
        if len(q) == 0:
            continue
        r = _argmin_uniform(q, rng)
        if best is None:
            best = (j, r, q[r])
            continue
        bj, _, bq = best
        lhs = spec.C[j] * bq
        rhs = spec.C[bj] * q[r]
        if lhs > rhs * (1.0 + _SNAP_REL) or (lhs >= rhs * (1.0 - _SNAP_REL) and spec.C[j] >= spec.C[bj]):
            best = (j, r, q[r])
    if best is None:
        raise ValueError("no samples")
    return best[0], best[1]


def _pick_type(routing_probs, rng: np.random.Generator) -> int:
    if routing_probs is None:
        raise ValueError("routing probabilities are required")
    p = np.asarray(routing_probs, dtype=float)
    return int(rng.choice(p.size, p=p))


def select_state_independent(spec: ClusterSpec, routing_probs, rng: np.random.Generator, N: int) -> tuple[int, int]:
    """Type drawn from ``routing_probs``, then a uniform server of that type (index within type)."""
    j = _pick_type(routing_probs, rng)
    return j, int(rng.integers(round(N * spec.gamma[j])))


def select_hybrid_sqd(state, spec: ClusterSpec, routing_probs, rng: np.random.Generator) -> tuple[int, int]:
    """Type drawn from ``routing_probs``, then SQ(d_j) among that type; returns a global index."""
    j = _pick_type(routing_probs, rng)
    lo, hi = int(state.type_start[j]), int(state.type_start[j + 1])
    cand = lo + rng.choice(hi - lo, size=spec.d[j], replace=False)
    r = _argmin_uniform(state.occupancy[cand], rng)
    return j, int(cand[r])


def proportional_routing(spec: ClusterSpec) -> np.ndarray:
    """``p_j = gamma_j C_j / sum_i gamma_i C_i``."""
    w = np.asarray(spec.gamma) * np.asarray(spec.C)
    return w / w.sum()
