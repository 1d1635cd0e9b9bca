"""Occupancy correlation between tagged servers, a finite-N check of asymptotic independence."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import SimConfig, run_replications


@dataclass
class ChaosEstimate:
    N: int
    pairs: list[tuple[int, int]]
    kinds: list[str]  # "same" or "cross" per pair
    correlations: np.ndarray
    samples: int
    by_kind: dict[str, float] = field(default_factory=dict)

    @property
    def magnitude(self) -> float:
        """Largest absolute pair-averaged correlation over the pair kinds."""
        return max(abs(v) for v in self.by_kind.values())


def default_pairs(config: SimConfig, per_kind: int = 8) -> tuple[list[tuple[int, int]], list[str]]:
    """Disjoint same-type pairs in every type plus cross-type pairs between consecutive types."""
    ts = config.type_start
    pairs, kinds = [], []
    for j in range(len(ts) - 1):
        n = int(ts[j + 1] - ts[j])
        for i in range(min(per_kind, n // 2)):
            pairs.append((int(ts[j] + 2 * i), int(ts[j] + 2 * i + 1)))
            kinds.append("same")
    for j in range(len(ts) - 2):
        n = int(min(ts[j + 1] - ts[j], ts[j + 2] - ts[j + 1]))
        for i in range(min(per_kind, n)):
            pairs.append((int(ts[j] + i), int(ts[j + 1] + i)))
            kinds.append("cross")
    return pairs, kinds


def _corr(x: np.ndarray, y: np.ndarray) -> float:
    x = x - x.mean()
    y = y - y.mean()
    den = np.sqrt((x * x).sum() * (y * y).sum())
    return float((x * y).sum() / den) if den > 0 else 0.0


def chaos_diagnostic(
    config: SimConfig,
    pairs: list[tuple[int, int]] | None = None,
    replications: int = 10,
    snap_dt: float = 1.0,
    backend: str | None = None,
    per_kind: int = 8,
) -> ChaosEstimate:
    """Pearson correlation of the occupancies of each server pair, from snapshots every
    ``snap_dt`` after warmup pooled over replications, averaged per pair kind."""
    if pairs is None:
        pairs, kinds = default_pairs(config, per_kind)
    else:
        ts = config.type_start
        typ = lambda s: int(np.searchsorted(ts, s, side="right") - 1)
        kinds = ["same" if typ(a) == typ(b) else "cross" for a, b in pairs]
    tagged = sorted({s for p in pairs for s in p})
    col = {s: i for i, s in enumerate(tagged)}
    cfg = config.replace(tagged=tuple(tagged), snap_dt=snap_dt)
    reps = run_replications(cfg, replications, backend)
    snaps = np.concatenate([r.raw["snap_tagged"] for r in reps], axis=0).astype(float)
    corr = np.array([_corr(snaps[:, col[a]], snaps[:, col[b]]) for a, b in pairs])
    by_kind = {k: float(corr[[i for i, kk in enumerate(kinds) if kk == k]].mean()) for k in sorted(set(kinds))}
    return ChaosEstimate(N=config.N, pairs=list(pairs), kinds=kinds, correlations=corr, samples=snaps.shape[0], by_kind=by_kind)
