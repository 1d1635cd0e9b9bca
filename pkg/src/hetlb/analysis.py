"""Theory-versus-simulation tables: error against N, scheme comparisons, insensitivity and drift."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats as sps

from .core import ClusterSpec
from .equilibrium import solve_equilibrium
from .simulator import (
    SimConfig,
    confidence_halfwidth,
    optimize_routing,
    proportional_routing,
    run_replications,
    simulate,
)

log = logging.getLogger(__name__)

SOURCES = ("theory", "simulation")


@dataclass(frozen=True)
class ComparisonRow:
    lam: float
    scheme: str
    source: str
    N: int  # 0 for theory rows
    mean_sojourn: float
    ci95: float
    job_dist: str = ""
    note: str = ""

    def __post_init__(self) -> None:
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}")
        if not self.mean_sojourn > 0:
            raise ValueError("mean_sojourn must be positive")
        if self.source == "theory" and (self.N != 0 or self.ci95 != 0):
            raise ValueError("theory rows have N = 0 and ci95 = 0")


@dataclass
class Table:
    rows: list[ComparisonRow] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    def find(self, **match) -> list[ComparisonRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())]

    def one(self, **match) -> ComparisonRow:
        hits = self.find(**match)
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {match}")
        return hits[0]


def theory_sojourn(spec: ClusterSpec, scheme: str = "scheme1") -> float:
    return solve_equilibrium(spec, scheme).mean_sojourn


def _sim_row(stats, scheme: str, job_dist: str = "", note: str = "") -> ComparisonRow:
    ci = stats.ci95
    return ComparisonRow(stats.lam, scheme, "simulation", stats.N, stats.mean, 0.0 if math.isnan(ci) else ci, job_dist, note)


# --- error against N ---------------------------------------------------------

@dataclass
class ErrorVsN(Table):
    errors: dict[tuple[float, int], float] = field(default_factory=dict)

    def mean_error(self, N: int) -> float:
        vals = [e for (lam, n), e in self.errors.items() if n == N]
        return float(np.mean(vals)) if vals else math.nan


def error_vs_n(
    spec: ClusterSpec,
    scheme: str,
    lambdas: Sequence[float],
    Ns: Sequence[int],
    horizon: float = 2.0e4,
    replications: int = 5,
    seed: int = 0,
    backend: str | None = None,
) -> ErrorVsN:
    """Relative error ``|sim - theory| / theory`` for every (lambda, N) cell. A failing cell
    is recorded in ``failures`` and the sweep moves on."""
    out = ErrorVsN()
    for lam in lambdas:
        s = spec.with_lambda(lam)
        try:
            th = theory_sojourn(s, scheme)
        except Exception as exc:  # keep sweeping
            out.failures.append({"lambda": lam, "N": 0, "error": f"{type(exc).__name__}: {exc}"})
            continue
        out.rows.append(ComparisonRow(lam, scheme, "theory", 0, th, 0.0))
        for N in Ns:
            try:
                stats, _ = simulate(SimConfig(s, N, scheme=scheme, horizon=horizon, seed=seed), replications, backend)
            except Exception as exc:
                out.failures.append({"lambda": lam, "N": N, "error": f"{type(exc).__name__}: {exc}"})
                continue
            out.rows.append(_sim_row(stats, scheme))
            out.errors[(lam, N)] = abs(stats.mean - th) / th
    return out


# --- scheme comparison ---------------------------------------------------------

def baseline_probs(spec: ClusterSpec, mode: str, kind: str) -> tuple[float, ...]:
    if mode == "proportional":
        return tuple(float(p) for p in proportional_routing(spec))
    if mode == "optimized":
        return tuple(float(p) for p in optimize_routing(spec, kind))
    raise ValueError(f"routing mode must be 'optimized' or 'proportional', got {mode!r}")


def scheme_comparison(
    spec: ClusterSpec,
    lambdas: Sequence[float],
    N: int,
    routing: str = "optimized",
    horizon: float = 2.0e4,
    replications: int = 10,
    seed: int = 0,
    schemes: Sequence[str] = ("scheme1", "scheme2", "state_independent", "hybrid_sqd"),
    backend: str | None = None,
) -> Table:
    """All schemes on the same seed, so they see identical arrival and size streams."""
    out = Table()
    for lam in lambdas:
        s = spec.with_lambda(lam)
        for scheme in schemes:
            try:
                p = baseline_probs(s, routing, scheme) if scheme in ("state_independent", "hybrid_sqd") else None
                stats, _ = simulate(SimConfig(s, N, scheme=scheme, routing_probs=p, horizon=horizon, seed=seed), replications, backend)
            except Exception as exc:
                out.failures.append({"lambda": lam, "scheme": scheme, "error": f"{type(exc).__name__}: {exc}"})
                continue
            note = "p=" + ",".join(f"{x:.2f}" for x in p) if p else ""
            out.rows.append(_sim_row(stats, scheme, note=note))
    return out


def welch_interval(a: Sequence[float], b: Sequence[float], level: float = 0.95) -> tuple[float, float]:
    """Welch confidence interval for ``mean(a) - mean(b)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    se = math.sqrt(va + vb)
    if se == 0:
        diff = float(a.mean() - b.mean())
        return diff, diff
    dof = (va + vb) ** 2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    h = float(sps.t.ppf(0.5 + level / 2, dof)) * se
    diff = float(a.mean() - b.mean())
    return diff - h, diff + h


# --- insensitivity -------------------------------------------------------------

DISTRIBUTION_ORDER = ("exponential", "constant", "power_law")


def insensitivity_table(
    spec: ClusterSpec,
    lambdas: Sequence[float],
    N: int,
    scheme: str = "scheme1",
    horizon: float = 2.0e4,
    replications: int = 10,
    seed: int = 0,
    distributions: Sequence[str] = DISTRIBUTION_ORDER,
    backend: str | None = None,
) -> Table:
    out = Table()
    for lam in lambdas:
        s = spec.with_lambda(lam)
        try:
            out.rows.append(ComparisonRow(lam, scheme, "theory", 0, theory_sojourn(s, scheme), 0.0))
        except Exception as exc:
            out.failures.append({"lambda": lam, "source": "theory", "error": f"{type(exc).__name__}: {exc}"})
        for dist in distributions:
            try:
                stats, _ = simulate(SimConfig(s, N, scheme=scheme, horizon=horizon, seed=seed, job_dist=dist), replications, backend)
            except Exception as exc:
                out.failures.append({"lambda": lam, "job_dist": dist, "error": f"{type(exc).__name__}: {exc}"})
                continue
            out.rows.append(_sim_row(stats, scheme, job_dist=dist))
    return out


# --- drift -------------------------------------------------------------------

@dataclass(frozen=True)
class DriftRow:
    lam: float
    scheme: str
    N: int
    slope: float  # jobs per unit time, mean over replications
    ci95: float
    verdict: str  # "stationary", "growing" or "shrinking"
    slopes: tuple[float, ...] = ()


def occupancy_slope(times: np.ndarray, totals: np.ndarray) -> float:
    """Least-squares slope of total occupancy against time."""
    return float(np.polyfit(times, totals.astype(float), 1)[0])


def stability_sweep(
    spec: ClusterSpec,
    lambdas: Sequence[float],
    N: int,
    horizon: float = 1.0e4,
    schemes: Sequence[str] = ("scheme1", "scheme2"),
    replications: int = 10,
    snap_dt: float = 5.0,
    seed: int = 0,
    backend: str | None = None,
) -> list[DriftRow]:
    """Per replication, the regression slope of total occupancy sampled every ``snap_dt``
    after warmup; the verdict is "stationary" when the t interval of the mean slope
    contains zero."""
    rows = []
    for lam in lambdas:
        s = spec.with_lambda(lam)
        for scheme in schemes:
            cfg = SimConfig(s, N, scheme=scheme, horizon=horizon, seed=seed, snap_dt=snap_dt)
            reps = run_replications(cfg, replications, backend)
            slopes = []
            for r in reps:
                y = r.raw["snap_total"]
                slopes.append(occupancy_slope(cfg.warmup + snap_dt * np.arange(len(y)), y))
            m = float(np.mean(slopes))
            h = confidence_halfwidth(slopes)
            if m - h > 0:
                verdict = "growing"
            elif m + h < 0:
                verdict = "shrinking"
            else:
                verdict = "stationary"
            rows.append(DriftRow(lam, scheme, N, m, h, verdict, tuple(slopes)))
    return rows


# --- output ------------------------------------------------------------------

def write_rows_csv(path: str | Path, rows: Sequence) -> None:
    rows = list(rows)
    if not rows:
        Path(path).write_text("")
        return
    dicts = [asdict(r) for r in rows]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(dicts[0]))
        w.writeheader()
        for d in dicts:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in d.items()})


def write_json(path: str | Path, payload: dict) -> None:
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        raise TypeError(type(o).__name__)

    Path(path).write_text(json.dumps(payload, indent=2, default=default) + "\n")
