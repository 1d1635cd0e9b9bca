"""Scheme 1 run side by side with a d_j = 1 proportional-routing scheme on shared randomness.

Both systems live on one uniformized clock of rate ``N lam + mu sum_s C_s``. An event
is an arrival with probability ``N lam / rate``; both systems then see the same
server samples. Scheme 1 joins its usual choice, while the comparison scheme draws a
type with probability ``gamma_j C_j / sum gamma C`` and joins the first sampled server
of that type. Otherwise one uniform ``v`` in ``[0, mu sum_s C_s)`` drives a departure
in each system: a system departs iff ``v`` falls below its busy capacity, and ``v``
then picks a busy server with probability proportional to its capacity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import ClusterSpec
from .engine import type_counts
from .policies import proportional_routing
from .rng import ARRIVAL, DECISION, SAMPLE, Xoshiro, stream_states


@dataclass
class CouplingResult:
    events: int
    violations: int  # event times at which the comparison scheme holds fewer jobs
    min_margin: int  # min over events of total(comparison) - total(scheme 1)
    final_totals: tuple[int, int]
    totals: np.ndarray | None = None  # (events, 2) when recorded


def _depart(occ, cap, v):
    for s in range(len(occ)):
        if occ[s] > 0:
            if v < cap[s]:
                occ[s] -= 1
                return
            v -= cap[s]
    # rounding left v just past the last busy server
    for s in range(len(occ) - 1, -1, -1):
        if occ[s] > 0:
            occ[s] -= 1
            return


def coupled_occupancy(spec: ClusterSpec, N: int, horizon: float, seed: int = 0, replication: int = 0, record: bool = False) -> CouplingResult:
    counts = type_counts(spec, N)
    ts = np.concatenate([[0], np.cumsum(counts)]).astype(int)
    cap = np.repeat(np.asarray(spec.C) * spec.mu, counts).tolist()
    pcum = np.cumsum(proportional_routing(spec)).tolist()
    st = stream_states(seed, replication)
    ra, rs, rd = Xoshiro(st[ARRIVAL]), Xoshiro(st[SAMPLE]), Xoshiro(st[DECISION])
    lam_total = N * spec.lam
    full = float(sum(cap))
    rate = lam_total + full
    A = [0] * N
    B = [0] * N
    tot_a = tot_b = 0
    t = 0.0
    events = violations = 0
    margin = 0
    trace = [] if record else None
    perm = [s - ts[j] for j in range(spec.M) for s in range(ts[j], ts[j + 1])]
    while True:
        t += ra.exponential(rate)
        if t > horizon:
            break
        u = ra.uniform() * rate
        if u < lam_total:
            samples = []
            for j in range(spec.M):
                base, n = ts[j], ts[j + 1] - ts[j]
                chosen = []
                for r in range(spec.d[j]):
                    k = r + rs.randbelow(n - r)
                    perm[base + r], perm[base + k] = perm[base + k], perm[base + r]
                    chosen.append(base + perm[base + r])
                samples.append(chosen)
            # scheme 1: least occupied, uniform within type, later (larger) type on ties
            best_s, best_q = -1, 0
            for j in range(spec.M):
                js, jq, ties = -1, 0, 0
                for s in samples[j]:
                    q = A[s]
                    if js < 0 or q < jq:
                        js, jq, ties = s, q, 1
                    elif q == jq:
                        ties += 1
                        if rd.randbelow(ties) == 0:
                            js = s
                if best_s < 0 or jq <= best_q:
                    best_s, best_q = js, jq
            A[best_s] += 1
            tot_a += 1
            x = rd.uniform()
            jb = 0
            while jb < spec.M - 1 and x >= pcum[jb]:
                jb += 1
            B[samples[jb][0]] += 1
            tot_b += 1
        else:
            v = u - lam_total
            busy_a = sum(c for c, q in zip(cap, A) if q > 0)
            busy_b = sum(c for c, q in zip(cap, B) if q > 0)
            if v < busy_a:
                _depart(A, cap, v)
                tot_a -= 1
            if v < busy_b:
                _depart(B, cap, v)
                tot_b -= 1
        events += 1
        diff = tot_b - tot_a
        if diff < 0:
            violations += 1
        margin = min(margin, diff)
        if record:
            trace.append((tot_a, tot_b))
    return CouplingResult(
        events=events, violations=violations, min_margin=margin, final_totals=(tot_a, tot_b),
        totals=np.array(trace, dtype=np.int64).reshape(-1, 2) if record else None,
    )
