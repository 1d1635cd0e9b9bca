"""Finite-N simulation front end: configuration, backend choice, replications and statistics."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sps

from ..core import ClusterSpec, TailState, is_stable
from . import _pykernel
from .rng import fingerprint, stream_states

log = logging.getLogger(__name__)

try:
    if os.environ.get("HETLB_PURE_PYTHON"):
        raise ImportError("pure Python backend requested")
    from . import _ckernel
except ImportError:  # no compiled kernel: use the reference implementation
    _ckernel = None

BACKEND = "compiled" if _ckernel is not None else "python"

POLICIES = {"scheme1": 0, "scheme2": 1, "state_independent": 2, "hybrid_sqd": 3}
DISTRIBUTIONS = {"exponential": 0, "constant": 1, "power_law": 2}
ENGINES = ("auto", "markov", "residual")


class SimConfigError(ValueError):
    pass


def kernel(backend: str | None = None):
    """Kernel module for ``backend`` ("compiled", "python" or None for the default)."""
    backend = backend or BACKEND
    if backend == "python":
        return _pykernel
    if backend == "compiled":
        if _ckernel is None:
            raise RuntimeError("compiled kernel is not available")
        return _ckernel
    raise ValueError(f"unknown backend {backend!r}")


def type_counts(spec: ClusterSpec, N: int) -> list[int]:
    """Servers per type, ``N gamma_j``; raises unless every count is a positive integer."""
    out = []
    for j, g in enumerate(spec.gamma):
        x = N * g
        n = int(round(x))
        if n < 1 or abs(x - n) > 1e-9 * max(1.0, x):
            raise SimConfigError(f"N * gamma[{j}] = {x:g} is not a positive integer")
        out.append(n)
    return out


@dataclass(frozen=True)
class SimConfig:
    spec: ClusterSpec
    N: int
    scheme: str = "scheme1"
    routing_probs: tuple[float, ...] | None = None
    horizon: float = 2.0e4
    warmup: float | None = None  # default horizon / 5
    seed: int = 0
    job_dist: str = "exponential"
    engine: str = "auto"
    snap_dt: float = 0.0  # 0 disables snapshots
    tagged: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.routing_probs is not None:
            object.__setattr__(self, "routing_probs", tuple(float(p) for p in self.routing_probs))
        object.__setattr__(self, "tagged", tuple(int(s) for s in self.tagged))
        if self.warmup is None:
            object.__setattr__(self, "warmup", self.horizon / 5.0)
        self.validate()

    def validate(self) -> None:
        spec = self.spec
        if self.scheme not in POLICIES:
            raise SimConfigError(f"unknown scheme {self.scheme!r}; expected one of {sorted(POLICIES)}")
        if self.job_dist not in DISTRIBUTIONS:
            raise SimConfigError(f"unknown job_dist {self.job_dist!r}; expected one of {sorted(DISTRIBUTIONS)}")
        if self.engine not in ENGINES:
            raise SimConfigError(f"unknown engine {self.engine!r}")
        if self.engine == "markov" and self.job_dist != "exponential":
            raise SimConfigError("the Markov engine needs exponential job sizes")
        counts = type_counts(spec, self.N)
        for j, (dj, n) in enumerate(zip(spec.d, counts)):
            if dj > n:
                raise SimConfigError(f"d[{j}] = {dj} exceeds the {n} servers of type {j}")
        if self.scheme in ("state_independent", "hybrid_sqd"):
            if self.routing_probs is None:
                raise SimConfigError(f"{self.scheme} needs routing_probs")
        if self.routing_probs is not None:
            p = np.asarray(self.routing_probs)
            if p.shape != (spec.M,) or np.any(p < 0):
                raise SimConfigError("routing_probs must hold M nonnegative entries")
            if abs(p.sum() - 1.0) > 1e-12:
                raise SimConfigError(f"routing_probs sum to {p.sum():.15g}, not 1")
        if not (self.horizon > 0 and 0 <= self.warmup < self.horizon):
            raise SimConfigError("need horizon > 0 and 0 <= warmup < horizon")
        if self.snap_dt < 0:
            raise SimConfigError("snap_dt must be nonnegative")
        if any(not 0 <= s < self.N for s in self.tagged):
            raise SimConfigError("tagged server index out of range")
        if not 0 <= self.seed < 2**64:
            raise SimConfigError("seed must be a 64-bit unsigned integer")

    @property
    def unstable(self) -> bool:
        return not is_stable(self.spec)

    @property
    def engine_used(self) -> str:
        if self.engine == "auto":
            return "markov" if self.job_dist == "exponential" else "residual"
        return self.engine

    @property
    def type_start(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(type_counts(self.spec, self.N))]).astype(np.int64)

    def replace(self, **changes) -> "SimConfig":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        if "horizon" in changes and "warmup" not in changes:
            kw["warmup"] = None
        kw.update(changes)
        return SimConfig(**kw)


@dataclass
class SimState:
    """Occupancy of every server, ordered by type; ``residual`` lists the remaining work of
    the jobs at each server (residual-work engine only)."""

    occupancy: np.ndarray
    type_start: np.ndarray
    residual: list[list[float]] | None = None

    def __post_init__(self) -> None:
        self.occupancy = np.asarray(self.occupancy, dtype=np.int64)
        self.type_start = np.asarray(self.type_start, dtype=np.int64)
        if np.any(self.occupancy < 0):
            raise ValueError("negative occupancy")
        if self.residual is not None:
            if any(len(r) != q for r, q in zip(self.residual, self.occupancy)):
                raise ValueError("residual lists do not match occupancies")
            if any(x <= 0 for r in self.residual for x in r):
                raise ValueError("in-service jobs must have positive residual work")

    @property
    def M(self) -> int:
        return len(self.type_start) - 1

    def of_type(self, j: int) -> np.ndarray:
        return self.occupancy[self.type_start[j] : self.type_start[j + 1]]

    def tails(self, K: int | None = None) -> TailState:
        if K is None:
            K = max(1, int(self.occupancy.max(initial=0)) + 1)
        return TailState.from_occupancies([self.of_type(j) for j in range(self.M)], K)


@dataclass
class Replication:
    index: int
    raw: dict
    config: SimConfig

    @property
    def mean_sojourn(self) -> float:
        n = self.raw["sojourn_count"]
        return self.raw["sojourn_sum"] / n if n else math.nan

    @property
    def mean_occupancy(self) -> np.ndarray:
        """Time-averaged jobs per server of each type over the post-warmup window."""
        cfg = self.config
        counts = np.asarray(type_counts(cfg.spec, cfg.N), dtype=float)
        return np.asarray(self.raw["occ_integral"]) / (cfg.horizon - cfg.warmup) / counts

    @property
    def state(self) -> SimState:
        return SimState(self.raw["final_occ"], self.config.type_start, self.raw["residual"])

    @property
    def fingerprints(self) -> list[str]:
        return fingerprint(self.raw["states"])


def run_replication(config: SimConfig, replication: int = 0, backend: str | None = None, log_events: bool = False) -> Replication:
    k = kernel(backend)
    spec = config.spec
    p = config.routing_probs or (1.0,) * spec.M
    pcum = np.cumsum(p) if config.routing_probs else np.ones(spec.M)
    states = stream_states(config.seed, replication)
    common = (
        config.type_start, np.asarray(spec.C), np.asarray(spec.d, dtype=np.int64),
        POLICIES[config.scheme], np.asarray(pcum, dtype=float), config.N * spec.lam, spec.mu,
    )
    tagged = np.asarray(config.tagged, dtype=np.int64)
    if config.engine_used == "markov":
        if log_events:
            raise ValueError("event logs are only produced by the residual-work engine")
        raw = k.run_markov(*common, config.horizon, config.warmup, config.snap_dt, tagged, states)
    else:
        raw = k.run_residual(
            *common, DISTRIBUTIONS[config.job_dist], config.horizon, config.warmup, config.snap_dt, tagged, states, log_events
        )
    return Replication(replication, raw, config)


def confidence_halfwidth(values, level: float = 0.95) -> float:
    """Student-t half-width of the mean; NaN with fewer than five values."""
    x = np.asarray(values, dtype=float)
    if x.size < 5:
        return math.nan
    return float(sps.t.ppf(0.5 + level / 2, x.size - 1) * x.std(ddof=1) / math.sqrt(x.size))


@dataclass
class SojournStats:
    scheme: str
    lam: float
    N: int
    job_dist: str
    per_replication: np.ndarray
    jobs: np.ndarray
    occupancy: np.ndarray  # (replications, M) mean jobs per server
    fingerprints: list[list[str]] = field(default_factory=list)
    unstable: bool = False

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_replication))

    @property
    def ci95(self) -> float:
        return confidence_halfwidth(self.per_replication)

    @property
    def jobs_counted(self) -> int:
        return int(np.sum(self.jobs))

    @property
    def mean_occupancy(self) -> np.ndarray:
        return self.occupancy.mean(axis=0)

    def to_json(self) -> dict:
        ci = self.ci95
        return {
            "scheme": self.scheme,
            "lambda": self.lam,
            "N": self.N,
            "job_dist": self.job_dist,
            "mean_sojourn": self.mean,
            "ci95": None if math.isnan(ci) else ci,
            "jobs_counted": self.jobs_counted,
            "replications": len(self.per_replication),
            "per_replication": self.per_replication.tolist(),
            "mean_occupancy": self.mean_occupancy.tolist(),
            "unstable": self.unstable,
        }

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SojournStats)
            and json.dumps(self.to_json()) == json.dumps(other.to_json())
            and self.fingerprints == other.fingerprints
        )


def _run_one(args):
    config, rep, backend = args
    return run_replication(config, rep, backend)


def run_replications(config: SimConfig, replications: int = 10, backend: str | None = None, workers: int = 1) -> list[Replication]:
    """Independent replications ``0 .. replications-1``; results come back in index order
    whatever ``workers`` is, so the merge is deterministic."""
    if replications < 1:
        raise ValueError("need at least one replication")
    if config.unstable:
        log.warning("lambda=%g is at or beyond capacity %g; occupancies will grow", config.spec.lam, config.spec.capacity)
    jobs = [(config, r, backend) for r in range(replications)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_run_one, jobs))
    return [_run_one(j) for j in jobs]


def summarize(config: SimConfig, reps: list[Replication]) -> SojournStats:
    return SojournStats(
        scheme=config.scheme,
        lam=config.spec.lam,
        N=config.N,
        job_dist=config.job_dist,
        per_replication=np.array([r.mean_sojourn for r in reps]),
        jobs=np.array([r.raw["sojourn_count"] for r in reps], dtype=np.int64),
        occupancy=np.array([r.mean_occupancy for r in reps]),
        fingerprints=[r.fingerprints for r in reps],
        unstable=config.unstable,
    )


def simulate(config: SimConfig, replications: int = 10, backend: str | None = None, workers: int = 1) -> tuple[SojournStats, TailState]:
    """Sojourn statistics over replications and the empirical tails at the horizon of the last one."""
    reps = run_replications(config, replications, backend, workers)
    return summarize(config, reps), reps[-1].state.tails()


def write_replication_csv(path: str | Path, reps: list[Replication]) -> None:
    M = reps[0].config.spec.M
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["replication", "arrivals", "departures", "jobs_counted", "mean_sojourn"] + [f"occupancy_{j + 1}" for j in range(M)])
        for r in reps:
            w.writerow(
                [r.index, r.raw["arrivals"], r.raw["departures"], r.raw["sojourn_count"], repr(r.mean_sojourn)]
                + [repr(float(x)) for x in r.mean_occupancy]
            )


def write_stats_json(path: str | Path, stats: SojournStats) -> None:
    Path(path).write_text(json.dumps(stats.to_json(), indent=2) + "\n")
