# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled event loops; a statement-for-statement port of ``_pykernel``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport log, sqrt, INFINITY
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()

cdef enum:
    ARRIVAL = 0
    SIZE = 1
    SAMPLE = 2
    DECISION = 3
    DEPARTURE = 4

cdef double SNAP_REL = 1e-12
cdef double TWO_M53 = 1.0 / 9007199254740992.0


cdef inline uint64_t rotl(uint64_t x, int k) noexcept nogil:
    return (x << k) | (x >> (64 - k))


cdef inline uint64_t next64(uint64_t* s) noexcept nogil:
    cdef uint64_t result = rotl(s[1] * 5, 7) * 9
    cdef uint64_t t = s[1] << 17
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = rotl(s[3], 45)
    return result


cdef inline double uniform(uint64_t* s) noexcept nogil:
    return <double>(next64(s) >> 11) * TWO_M53


cdef inline int64_t randbelow(uint64_t* s, int64_t n) noexcept nogil:
    return <int64_t>(uniform(s) * n)


cdef inline double exponential(uint64_t* s, double rate) noexcept nogil:
    return -log(1.0 - uniform(s)) / rate


cdef struct Model:
    int M
    int N
    int policy
    int64_t* ts
    double* C
    int64_t* d
    double* pcum
    int64_t* perm
    int64_t* occ


cdef int64_t dispatch(Model* m, uint64_t* rs, uint64_t* rd) noexcept nogil:
    cdef int M = m.M
    cdef int64_t best_s = -1, best_q = 0, best_j = -1
    cdef int64_t j, base, n, js, jq, ties, r, k, tmp, s, q
    cdef bint take
    cdef double u
    if m.policy <= 1:
        for j in range(M):
            base = m.ts[j]
            n = m.ts[j + 1] - base
            js = -1
            jq = 0
            ties = 0
            for r in range(m.d[j]):
                k = r + randbelow(rs, n - r)
                tmp = m.perm[base + r]
                m.perm[base + r] = m.perm[base + k]
                m.perm[base + k] = tmp
                s = base + m.perm[base + r]
                q = m.occ[s]
                if js < 0 or q < jq:
                    js = s
                    jq = q
                    ties = 1
                elif q == jq:
                    ties += 1
                    if randbelow(rd, ties) == 0:
                        js = s
            if best_s < 0:
                take = True
            elif m.policy == 0:
                take = jq <= best_q
            else:
                take = m.C[j] * <double>best_q >= m.C[best_j] * <double>jq * (1.0 - SNAP_REL)
            if take:
                best_s = js
                best_q = jq
                best_j = j
        return best_s

    u = uniform(rd)
    j = 0
    while j < M - 1 and u >= m.pcum[j]:
        j += 1
    base = m.ts[j]
    n = m.ts[j + 1] - base
    if m.policy == 2:
        return base + randbelow(rs, n)
    js = -1
    jq = 0
    ties = 0
    for r in range(m.d[j]):
        k = r + randbelow(rs, n - r)
        tmp = m.perm[base + r]
        m.perm[base + r] = m.perm[base + k]
        m.perm[base + k] = tmp
        s = base + m.perm[base + r]
        q = m.occ[s]
        if js < 0 or q < jq:
            js = s
            jq = q
            ties = 1
        elif q == jq:
            ties += 1
            if randbelow(rd, ties) == 0:
                js = s
    return js


cdef class _Recorder:
    cdef double warmup, horizon, snap_dt
    cdef public int64_t n_snap, i_snap
    cdef int64_t n_tag
    cdef int64_t[::1] tagged
    cdef public object snap_total_arr, snap_tagged_arr, occ_int_arr
    cdef int64_t[::1] snap_total
    cdef int64_t[:, ::1] snap_tagged
    cdef double[::1] occ_int

    def __init__(self, int M, double warmup, double horizon, double snap_dt, tagged):
        self.warmup = warmup
        self.horizon = horizon
        self.snap_dt = snap_dt
        self.n_snap = <int64_t>((horizon - warmup) / snap_dt) + 1 if snap_dt > 0 else 0
        self.i_snap = 0
        self.tagged = np.ascontiguousarray(tagged, dtype=np.int64)
        self.n_tag = self.tagged.shape[0]
        self.snap_total_arr = np.zeros(self.n_snap, dtype=np.int64)
        self.snap_tagged_arr = np.zeros((self.n_snap, self.n_tag), dtype=np.int64)
        self.occ_int_arr = np.zeros(M)
        self.snap_total = self.snap_total_arr
        self.snap_tagged = self.snap_tagged_arr
        self.occ_int = self.occ_int_arr

    cdef void advance(self, double t0, double t1, int64_t* occ, int64_t* occ_type, int M, int64_t total) noexcept:
        cdef double a = t0 if t0 > self.warmup else self.warmup
        cdef double b = t1 if t1 < self.horizon else self.horizon
        cdef int j
        cdef int64_t i, mm
        if b > a:
            for j in range(M):
                self.occ_int[j] += occ_type[j] * (b - a)
        while self.i_snap < self.n_snap and self.warmup + self.i_snap * self.snap_dt <= t1:
            i = self.i_snap
            self.snap_total[i] = total
            for mm in range(self.n_tag):
                self.snap_tagged[i, mm] = occ[self.tagged[mm]]
            self.i_snap += 1


cdef _result(double soj_sum, int64_t soj_n, _Recorder rec, occ, states, int64_t n_arr, int64_t n_dep, log, residual):
    return {
        "sojourn_sum": soj_sum,
        "sojourn_count": soj_n,
        "occ_integral": rec.occ_int_arr,
        "final_occ": occ,
        "snap_total": rec.snap_total_arr,
        "snap_tagged": rec.snap_tagged_arr,
        "states": states,
        "arrivals": n_arr,
        "departures": n_dep,
        "log": log,
        "residual": residual,
    }


def run_markov(ts_in, C_in, d_in, int policy, pcum_in, double lam_total, double mu, double horizon,
               double warmup, double snap_dt, tagged, states_in):
    cdef int64_t[::1] ts = np.ascontiguousarray(ts_in, dtype=np.int64)
    cdef double[::1] C = np.ascontiguousarray(C_in, dtype=np.float64)
    cdef int64_t[::1] d = np.ascontiguousarray(d_in, dtype=np.int64)
    cdef double[::1] pcum = np.ascontiguousarray(pcum_in, dtype=np.float64)
    states = np.array(states_in, dtype=np.uint64, copy=True)
    cdef uint64_t[:, ::1] st = states
    cdef int M = C.shape[0]
    cdef int N = <int>ts[M]
    cdef uint64_t* ra = &st[ARRIVAL, 0]
    cdef uint64_t* rs = &st[SAMPLE, 0]
    cdef uint64_t* rd = &st[DECISION, 0]
    cdef uint64_t* rp = &st[DEPARTURE, 0]

    stype_a = np.zeros(N, dtype=np.int64)
    perm_a = np.zeros(N, dtype=np.int64)
    occ_a = np.zeros(N, dtype=np.int64)
    occ_type_a = np.zeros(M, dtype=np.int64)
    busy_a = np.zeros(N, dtype=np.int64)
    bpos_a = np.zeros(N, dtype=np.int64)
    nbusy_a = np.zeros(M, dtype=np.int64)
    cdef int64_t[::1] stype = stype_a, perm = perm_a, occ = occ_a, occ_type = occ_type_a
    cdef int64_t[::1] busy = busy_a, bpos = bpos_a, nbusy = nbusy_a
    cdef int64_t cap = 16
    jobs_a = np.zeros((N, cap))
    cdef double[:, ::1] jobs = jobs_a
    cdef int64_t j, s, q, idx, p, last, jsel, total = 0, n_arr = 0, n_dep = 0, soj_n = 0
    cdef double t, t_arr, t_dep, t_ev, busycap, v, acc, a, soj_sum = 0.0
    cdef bint arrival
    cdef Model m
    cdef _Recorder rec = _Recorder(M, warmup, horizon, snap_dt, tagged)

    for j in range(M):
        for s in range(ts[j], ts[j + 1]):
            stype[s] = j
            perm[s] = s - ts[j]
    m.M = M
    m.N = N
    m.policy = policy
    m.ts = &ts[0]
    m.C = &C[0]
    m.d = &d[0]
    m.pcum = &pcum[0]
    m.perm = &perm[0]
    m.occ = &occ[0]

    t = 0.0
    t_arr = exponential(ra, lam_total)
    while True:
        busycap = 0.0
        for j in range(M):
            busycap += nbusy[j] * C[j]
        if busycap > 0.0:
            t_dep = t + exponential(rp, mu * busycap)
        else:
            t_dep = INFINITY
        arrival = t_arr <= t_dep
        t_ev = t_arr if arrival else t_dep
        if t_ev > horizon:
            break
        rec.advance(t, t_ev, &occ[0], &occ_type[0], M, total)
        t = t_ev
        if arrival:
            s = dispatch(&m, rs, rd)
            j = stype[s]
            q = occ[s]
            if q == cap:
                cap *= 2
                grown = np.zeros((N, cap))
                grown[:, : cap // 2] = jobs_a
                jobs_a = grown
                jobs = jobs_a
            jobs[s, q] = t
            occ[s] = q + 1
            occ_type[j] += 1
            total += 1
            if occ[s] == 1:
                busy[ts[j] + nbusy[j]] = s
                bpos[s] = nbusy[j]
                nbusy[j] += 1
            n_arr += 1
            t_arr = t + exponential(ra, lam_total)
        else:
            v = uniform(rp) * busycap
            acc = 0.0
            jsel = -1
            for j in range(M):
                if nbusy[j] > 0:
                    jsel = j
                    acc += nbusy[j] * C[j]
                    if v < acc:
                        break
            j = jsel
            s = busy[ts[j] + randbelow(rp, nbusy[j])]
            q = occ[s]
            idx = randbelow(rp, q)
            a = jobs[s, idx]
            jobs[s, idx] = jobs[s, q - 1]
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
    rec.advance(t, horizon, &occ[0], &occ_type[0], M, total)
    return _result(soj_sum, soj_n, rec, occ_a, states, n_arr, n_dep, None, None)


cdef inline void tree_update(double* tree, int64_t P, int64_t s, double val) noexcept nogil:
    cdef int64_t i = P + s
    cdef double a, b
    tree[i] = val
    i >>= 1
    while i >= 1:
        a = tree[2 * i]
        b = tree[2 * i + 1]
        tree[i] = a if a <= b else b
        i >>= 1


cdef inline int64_t tree_argmin(double* tree, int64_t P) noexcept nogil:
    cdef int64_t i = 1
    while i < P:
        if tree[2 * i] <= tree[2 * i + 1]:
            i = 2 * i
        else:
            i = 2 * i + 1
    return i - P


cdef inline double draw_size(int dist, double mu, uint64_t* rz) noexcept nogil:
    if dist == 0:
        return -log(1.0 - uniform(rz)) / mu
    if dist == 1:
        return 1.0 / mu
    return 1.0 / (2.0 * sqrt(1.0 - uniform(rz))) / mu


def run_residual(ts_in, C_in, d_in, int policy, pcum_in, double lam_total, double mu, int dist,
                 double horizon, double warmup, double snap_dt, tagged, states_in, bint log_events):
    cdef int64_t[::1] ts = np.ascontiguousarray(ts_in, dtype=np.int64)
    cdef double[::1] C = np.ascontiguousarray(C_in, dtype=np.float64)
    cdef int64_t[::1] d = np.ascontiguousarray(d_in, dtype=np.int64)
    cdef double[::1] pcum = np.ascontiguousarray(pcum_in, dtype=np.float64)
    states = np.array(states_in, dtype=np.uint64, copy=True)
    cdef uint64_t[:, ::1] st = states
    cdef int M = C.shape[0]
    cdef int N = <int>ts[M]
    cdef uint64_t* ra = &st[ARRIVAL, 0]
    cdef uint64_t* rz = &st[SIZE, 0]
    cdef uint64_t* rs = &st[SAMPLE, 0]
    cdef uint64_t* rd = &st[DECISION, 0]

    stype_a = np.zeros(N, dtype=np.int64)
    perm_a = np.zeros(N, dtype=np.int64)
    occ_a = np.zeros(N, dtype=np.int64)
    occ_type_a = np.zeros(M, dtype=np.int64)
    vt_a = np.zeros(N)
    tau_a = np.zeros(N)
    mint_a = np.full(N, np.inf)
    minpos_a = np.zeros(N, dtype=np.int64)
    cdef int64_t[::1] stype = stype_a, perm = perm_a, occ = occ_a, occ_type = occ_type_a, minpos = minpos_a
    cdef double[::1] vt = vt_a, tau = tau_a, mint = mint_a
    cdef int64_t cap = 16
    tags_a = np.zeros((N, cap))
    arrs_a = np.zeros((N, cap))
    uids_a = np.zeros((N, cap), dtype=np.int64)
    cdef double[:, ::1] tags = tags_a, arrs = arrs_a
    cdef int64_t[:, ::1] uids = uids_a
    cdef int64_t P = 1
    while P < N:
        P *= 2
    tree_a = np.full(2 * P, np.inf)
    cdef double[::1] tree = tree_a
    cdef int64_t j, s, q, i, mp, uid, total = 0, n_arr = 0, n_dep = 0, soj_n = 0
    cdef double t, t_arr, t_dep, t_ev, x, tag, a, mm, soj_sum = 0.0
    cdef bint arrival
    cdef Model m
    cdef _Recorder rec = _Recorder(M, warmup, horizon, snap_dt, tagged)
    log = [] if log_events else None

    for j in range(M):
        for s in range(ts[j], ts[j + 1]):
            stype[s] = j
            perm[s] = s - ts[j]
    m.M = M
    m.N = N
    m.policy = policy
    m.ts = &ts[0]
    m.C = &C[0]
    m.d = &d[0]
    m.pcum = &pcum[0]
    m.perm = &perm[0]
    m.occ = &occ[0]

    t = 0.0
    t_arr = exponential(ra, lam_total)
    while True:
        t_dep = tree[1]
        arrival = t_arr <= t_dep
        t_ev = t_arr if arrival else t_dep
        if t_ev > horizon:
            break
        rec.advance(t, t_ev, &occ[0], &occ_type[0], M, total)
        t = t_ev
        if arrival:
            s = dispatch(&m, rs, rd)
            j = stype[s]
            x = draw_size(dist, mu, rz)
            q = occ[s]
            if q == cap:
                cap *= 2
                g1 = np.zeros((N, cap))
                g1[:, : cap // 2] = tags_a
                tags_a = g1
                tags = tags_a
                g2 = np.zeros((N, cap))
                g2[:, : cap // 2] = arrs_a
                arrs_a = g2
                arrs = arrs_a
                g3 = np.zeros((N, cap), dtype=np.int64)
                g3[:, : cap // 2] = uids_a
                uids_a = g3
                uids = uids_a
            if q > 0:
                vt[s] += (t - tau[s]) * C[j] / q
            tau[s] = t
            tag = vt[s] + x
            tags[s, q] = tag
            arrs[s, q] = t
            uids[s, q] = n_arr
            if tag < mint[s]:
                mint[s] = tag
                minpos[s] = q
            q += 1
            occ[s] = q
            occ_type[j] += 1
            total += 1
            tree_update(&tree[0], P, s, tau[s] + (mint[s] - vt[s]) * q / C[j])
            if log is not None:
                log.append((t, s, 0, n_arr, x))
            n_arr += 1
            t_arr = t + exponential(ra, lam_total)
        else:
            s = tree_argmin(&tree[0], P)
            j = stype[s]
            q = occ[s]
            vt[s] = mint[s]
            tau[s] = t
            i = minpos[s]
            a = arrs[s, i]
            uid = uids[s, i]
            tags[s, i] = tags[s, q - 1]
            arrs[s, i] = arrs[s, q - 1]
            uids[s, i] = uids[s, q - 1]
            q -= 1
            occ[s] = q
            occ_type[j] -= 1
            total -= 1
            mm = INFINITY
            mp = 0
            for i in range(q):
                if tags[s, i] < mm:
                    mm = tags[s, i]
                    mp = i
            mint[s] = mm
            minpos[s] = mp
            if q > 0:
                tree_update(&tree[0], P, s, tau[s] + (mm - vt[s]) * q / C[j])
            else:
                tree_update(&tree[0], P, s, INFINITY)
            if a >= warmup:
                soj_sum += t - a
                soj_n += 1
            if log is not None:
                log.append((t, s, 1, uid, 0.0))
            n_dep += 1
    rec.advance(t, horizon, &occ[0], &occ_type[0], M, total)
    residual = [[tags[s, i] - vt[s] - (horizon - tau[s]) * C[stype[s]] / occ[s] for i in range(occ[s])] for s in range(N)]
    return _result(soj_sum, soj_n, rec, occ_a, states, n_arr, n_dep, log, residual)
