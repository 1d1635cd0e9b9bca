"""Routing probabilities for the two baselines, chosen by grid search over the simplex."""
from __future__ import annotations

import itertools
import math

import numpy as np

from ..core import ClusterSpec
from ..equilibrium import sqd_tails


def _per_type_occupancy(load: float, d: int) -> float:
    if load >= 1.0:
        return math.inf
    if load <= 0.0:
        return 0.0
    if d == 1:
        return load / (1.0 - load)
    return float(sqd_tails(load, d, 64)[1:].sum())


def baseline_sojourn(spec: ClusterSpec, p, kind: str = "state_independent") -> float:
    """Mean-field mean sojourn when each type j receives a fraction ``p_j`` of the arrivals.

    Every type then behaves as an isolated homogeneous cluster at load
    ``lam p_j / (gamma_j mu C_j)``: independent PS queues for ``state_independent``,
    SQ(d_j) for ``hybrid_sqd``. Returns ``inf`` if some type is overloaded.
    """
    if kind not in ("state_independent", "hybrid_sqd"):
        raise ValueError(f"unknown baseline {kind!r}")
    total = 0.0
    for j in range(spec.M):
        load = spec.lam * p[j] / (spec.gamma[j] * spec.mu * spec.C[j])
        d = 1 if kind == "state_independent" else spec.d[j]
        L = _per_type_occupancy(load, d)
        if math.isinf(L):
            return math.inf
        total += spec.gamma[j] * L
    return total / spec.lam


def simplex_grid(M: int, resolution: float = 0.01):
    steps = int(round(1.0 / resolution))
    for head in itertools.product(range(steps + 1), repeat=M - 1):
        rest = steps - sum(head)
        if rest >= 0:
            yield np.array(head + (rest,), dtype=float) / steps


def optimize_routing(spec: ClusterSpec, kind: str = "state_independent", resolution: float = 0.01) -> np.ndarray:
    """Grid point minimizing :func:`baseline_sojourn`; the first minimum in grid order wins."""
    best, best_p = math.inf, None
    for p in simplex_grid(spec.M, resolution):
        v = baseline_sojourn(spec, p, kind)
        if v < best:
            best, best_p = v, p
    if best_p is None:
        raise ValueError("no stable routing on the grid")
    return best_p
