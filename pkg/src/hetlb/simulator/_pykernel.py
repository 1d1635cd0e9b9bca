"""Reference event loops in pure Python.

``_ckernel.pyx`` is a statement-for-statement port; any change here must be mirrored
there, and the backend-equivalence tests compare the two bit for bit.
"""
from __future__ import annotations

import math

import numpy as np

from .rng import ARRIVAL, DECISION, DEPARTURE, SAMPLE, SIZE, Xoshiro

INF = math.inf
SNAP_REL = 1e-12

POLICY_SCHEME1, POLICY_SCHEME2, POLICY_STATE_INDEPENDENT, POLICY_HYBRID = range(4)
DIST_EXPONENTIAL, DIST_CONSTANT, DIST_POWER_LAW = range(3)


def dispatch(policy, occ, perm, ts, d, C, pcum, rs, rd):
    """Server chosen for one arrival. ``perm`` holds per-type local index permutations
    (flattened, type j at ``ts[j]:ts[j+1]``); the first d_j entries after a partial
    Fisher-Yates pass are the sample."""
    M = len(C)
    if policy <= POLICY_SCHEME2:
        best_s = -1
        best_q = 0
        best_j = -1
        for j in range(M):
            base = ts[j]
            n = ts[j + 1] - base
            js = -1
            jq = 0
            ties = 0
            for r in range(d[j]):
                k = r + rs.randbelow(n - r)
                tmp = perm[base + r]
                perm[base + r] = perm[base + k]
                perm[base + k] = tmp
                s = base + perm[base + r]
                q = occ[s]
                if js < 0 or q < jq:
                    js = s
                    jq = q
                    ties = 1
                elif q == jq:
                    ties += 1
                    if rd.randbelow(ties) == 0:
                        js = s
            if best_s < 0:
                take = True
            elif policy == POLICY_SCHEME1:
                # types are in ascending capacity, so ties go to the later type
                take = jq <= best_q
            else:
                # C_j / jq >= C_b / best_q, with q = 0 meaning an infinite rate
                take = C[j] * best_q >= C[best_j] * jq * (1.0 - SNAP_REL)
            if take:
                best_s = js
                best_q = jq
                best_j = j
        return best_s

    u = rd.uniform()
    j = 0
    while j < M - 1 and u >= pcum[j]:
        j += 1
    base = ts[j]
    n = ts[j + 1] - base
    if policy == POLICY_STATE_INDEPENDENT:
        return base + rs.randbelow(n)
    js = -1
    jq = 0
    ties = 0
    for r in range(d[j]):
        k = r + rs.randbelow(n - r)
        tmp = perm[base + r]
        perm[base + r] = perm[base + k]
        perm[base + k] = tmp
        s = base + perm[base + r]
        q = occ[s]
        if js < 0 or q < jq:
            js = s
            jq = q
            ties = 1
        elif q == jq:
            ties += 1
            if rd.randbelow(ties) == 0:
                js = s
    return js


class _Recorder:
    """Time integrals over [warmup, horizon] and equally spaced snapshots."""

    def __init__(self, M, warmup, horizon, snap_dt, tagged):
        self.warmup = warmup
        self.horizon = horizon
        self.snap_dt = snap_dt
        self.n_snap = int((horizon - warmup) / snap_dt) + 1 if snap_dt > 0 else 0
        self.i_snap = 0
        self.tagged = list(tagged)
        self.snap_total = np.zeros(self.n_snap, dtype=np.int64)
        self.snap_tagged = np.zeros((self.n_snap, len(self.tagged)), dtype=np.int64)
        self.occ_int = np.zeros(M)

    def advance(self, t0, t1, occ, occ_type, total):
        a = t0 if t0 > self.warmup else self.warmup
        b = t1 if t1 < self.horizon else self.horizon
        if b > a:
            for j in range(len(occ_type)):
                self.occ_int[j] += occ_type[j] * (b - a)
        while self.i_snap < self.n_snap and self.warmup + self.i_snap * self.snap_dt <= t1:
            i = self.i_snap
            self.snap_total[i] = total
            for m in range(len(self.tagged)):
                self.snap_tagged[i, m] = occ[self.tagged[m]]
            self.i_snap += 1


def _streams(states):
    return [Xoshiro(states[i]) for i in range(states.shape[0])]


def _pack(streams):
    return np.array([g.state() for g in streams], dtype=np.uint64)


def run_markov(ts, C, d, policy, pcum, lam_total, mu, horizon, warmup, snap_dt, tagged, states):
    """Exponential job sizes. A busy type-j server completes some job at rate mu C_j,
    the departing job being uniform among those present."""
    ts = [int(x) for x in ts]
    C = [float(x) for x in C]
    d = [int(x) for x in d]
    pcum = [float(x) for x in pcum]
    M = len(C)
    N = ts[M]
    g = _streams(states)
    ra, rs, rd, rp = g[ARRIVAL], g[SAMPLE], g[DECISION], g[DEPARTURE]

    stype = [0] * N
    for j in range(M):
        for s in range(ts[j], ts[j + 1]):
            stype[s] = j
    perm = [s - ts[stype[s]] for s in range(N)]
    occ = [0] * N
    occ_type = [0] * M
    jobs = [[] for _ in range(N)]
    busy = [0] * N
    bpos = [0] * N
    nbusy = [0] * M
    total = 0
    rec = _Recorder(M, warmup, horizon, snap_dt, tagged)
    soj_sum = 0.0
    soj_n = 0
    n_arr = 0
    n_dep = 0

    t = 0.0
    t_arr = ra.exponential(lam_total)
    while True:
        busycap = 0.0
        for j in range(M):
            busycap += nbusy[j] * C[j]
        if busycap > 0.0:
            t_dep = t + rp.exponential(mu * busycap)
        else:
            t_dep = INF
        arrival = t_arr <= t_dep
        t_ev = t_arr if arrival else t_dep
        if t_ev > horizon:
            break
        rec.advance(t, t_ev, occ, occ_type, total)
        t = t_ev
        if arrival:
            s = dispatch(policy, occ, perm, ts, d, C, pcum, rs, rd)
            j = stype[s]
            jobs[s].append(t)
            occ[s] += 1
            occ_type[j] += 1
            total += 1
            if occ[s] == 1:
                busy[ts[j] + nbusy[j]] = s
                bpos[s] = nbusy[j]
                nbusy[j] += 1
            n_arr += 1
            t_arr = t + ra.exponential(lam_total)
        else:
            v = rp.uniform() * busycap
            acc = 0.0
            jsel = -1
            for j in range(M):
                if nbusy[j] > 0:
                    jsel = j
                    acc += nbusy[j] * C[j]
                    if v < acc:
                        break
            j = jsel
            s = busy[ts[j] + rp.randbelow(nbusy[j])]
            q = occ[s]
            idx = rp.randbelow(q)
            lst = jobs[s]
            a = lst[idx]
            lst[idx] = lst[q - 1]
            lst.pop()
            occ[s] = q - 1
            occ_type[j] -= 1
            total -= 1
            if q == 1:
                p = bpos[s]
                last = busy[ts[j] + nbusy[j] - 1]
                busy[ts[j] + p] = last
                bpos[last] = p
                nbusy[j] -= 1
            if a >= warmup:
                soj_sum += t - a
                soj_n += 1
            n_dep += 1
    rec.advance(t, horizon, occ, occ_type, total)
    return {
        "sojourn_sum": soj_sum,
        "sojourn_count": soj_n,
        "occ_integral": rec.occ_int,
        "final_occ": np.array(occ, dtype=np.int64),
        "snap_total": rec.snap_total,
        "snap_tagged": rec.snap_tagged,
        "states": _pack(g),
        "arrivals": n_arr,
        "departures": n_dep,
        "log": None,
        "residual": None,
    }


def _tree_update(tree, P, s, val):
    i = P + s
    tree[i] = val
    i >>= 1
    while i >= 1:
        a = tree[2 * i]
        b = tree[2 * i + 1]
        tree[i] = a if a <= b else b
        i >>= 1


def _tree_argmin(tree, P):
    i = 1
    while i < P:
        if tree[2 * i] <= tree[2 * i + 1]:
            i = 2 * i
        else:
            i = 2 * i + 1
    return i - P


def draw_size(dist, mu, rz):
    if dist == DIST_EXPONENTIAL:
        return -math.log(1.0 - rz.uniform()) / mu
    if dist == DIST_CONSTANT:
        return 1.0 / mu
    return 1.0 / (2.0 * math.sqrt(1.0 - rz.uniform())) / mu


def run_residual(ts, C, d, policy, pcum, lam_total, mu, dist, horizon, warmup, snap_dt, tagged, states, log_events):
    """Any size distribution. Each server keeps a virtual time V that grows at rate C/q
    while busy; a job arriving at virtual time V with size x finishes when V reaches
    V + x. The next departure over all servers comes from a min segment tree."""
    ts = [int(x) for x in ts]
    C = [float(x) for x in C]
    d = [int(x) for x in d]
    pcum = [float(x) for x in pcum]
    M = len(C)
    N = ts[M]
    g = _streams(states)
    ra, rz, rs, rd = g[ARRIVAL], g[SIZE], g[SAMPLE], g[DECISION]

    stype = [0] * N
    for j in range(M):
        for s in range(ts[j], ts[j + 1]):
            stype[s] = j
    perm = [s - ts[stype[s]] for s in range(N)]
    occ = [0] * N
    occ_type = [0] * M
    tags = [[] for _ in range(N)]
    arrs = [[] for _ in range(N)]
    uids = [[] for _ in range(N)]
    vt = [0.0] * N
    tau = [0.0] * N
    mint = [INF] * N
    minpos = [0] * N
    P = 1
    while P < N:
        P *= 2
    tree = [INF] * (2 * P)
    total = 0
    rec = _Recorder(M, warmup, horizon, snap_dt, tagged)
    log = [] if log_events else None
    soj_sum = 0.0
    soj_n = 0
    n_arr = 0
    n_dep = 0

    t = 0.0
    t_arr = ra.exponential(lam_total)
    while True:
        t_dep = tree[1]
        arrival = t_arr <= t_dep
        t_ev = t_arr if arrival else t_dep
        if t_ev > horizon:
            break
        rec.advance(t, t_ev, occ, occ_type, total)
        t = t_ev
        if arrival:
            s = dispatch(policy, occ, perm, ts, d, C, pcum, rs, rd)
            j = stype[s]
            x = draw_size(dist, mu, rz)
            q = occ[s]
            if q > 0:
                vt[s] += (t - tau[s]) * C[j] / q
            tau[s] = t
            tag = vt[s] + x
            tags[s].append(tag)
            arrs[s].append(t)
            uids[s].append(n_arr)
            if tag < mint[s]:
                mint[s] = tag
                minpos[s] = q
            q += 1
            occ[s] = q
            occ_type[j] += 1
            total += 1
            _tree_update(tree, P, s, tau[s] + (mint[s] - vt[s]) * q / C[j])
            if log is not None:
                log.append((t, s, 0, n_arr, x))
            n_arr += 1
            t_arr = t + ra.exponential(lam_total)
        else:
            s = _tree_argmin(tree, P)
            j = stype[s]
            q = occ[s]
            vt[s] = mint[s]
            tau[s] = t
            i = minpos[s]
            a = arrs[s][i]
            uid = uids[s][i]
            tags[s][i] = tags[s][q - 1]
            arrs[s][i] = arrs[s][q - 1]
            uids[s][i] = uids[s][q - 1]
            tags[s].pop()
            arrs[s].pop()
            uids[s].pop()
            q -= 1
            occ[s] = q
            occ_type[j] -= 1
            total -= 1
            m = INF
            mp = 0
            lst = tags[s]
            for i in range(q):
                if lst[i] < m:
                    m = lst[i]
                    mp = i
            mint[s] = m
            minpos[s] = mp
            if q > 0:
                _tree_update(tree, P, s, tau[s] + (m - vt[s]) * q / C[j])
            else:
                _tree_update(tree, P, s, INF)
            if a >= warmup:
                soj_sum += t - a
                soj_n += 1
            if log is not None:
                log.append((t, s, 1, uid, 0.0))
            n_dep += 1
    rec.advance(t, horizon, occ, occ_type, total)
    return {
        "sojourn_sum": soj_sum,
        "sojourn_count": soj_n,
        "occ_integral": rec.occ_int,
        "final_occ": np.array(occ, dtype=np.int64),
        "snap_total": rec.snap_total,
        "snap_tagged": rec.snap_tagged,
        "states": _pack(g),
        "arrivals": n_arr,
        "departures": n_dep,
        "log": log,
        "residual": [[tg - vt[s] - (horizon - tau[s]) * C[stype[s]] / occ[s] for tg in tags[s]] for s in range(N)],
    }
