"""Mean-field drift of the tail sequences for both dispatch schemes and a projected RK4 integrator."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .core import ClusterSpec, TailState, check_scheme, k_tilde, k_under, project_array, weighted_sup


class ProjectionError(RuntimeError):
    """The RK4 step left the state space by more than the step-size bound allows."""


@dataclass(frozen=True)
class Derivative:
    dudt: np.ndarray

    def __post_init__(self) -> None:
        a = np.array(self.dudt, dtype=float)
        a.setflags(write=False)
        object.__setattr__(self, "dudt", a)

    def norm(self) -> float:
        return weighted_sup(self.dudt)


@lru_cache(maxsize=256)
def _scheme2_index(C: tuple[float, ...], K: int) -> np.ndarray:
    """``idx[j, i, k]``: index of ``u^(i)`` entering the type-j drift at level ``k`` (clipped to K+1)."""
    M = len(C)
    idx = np.zeros((M, M, K + 1), dtype=np.intp)
    for j in range(M):
        for i in range(M):
            for k in range(1, K + 1):
                if i < j:
                    v = k_tilde(k - 1, j, i, C)
                elif i > j:
                    v = k_under(k - 1, j, i, C)
                else:
                    v = k
                idx[j, i, k] = min(v, K + 1)
    idx.setflags(write=False)
    return idx


def drift(u: np.ndarray, spec: ClusterSpec, scheme: str = "scheme1") -> np.ndarray:
    """Array form of the drift. Inputs are clipped to [0, 1] and the level differences to
    [0, inf), which leaves valid states untouched and keeps the map globally Lipschitz."""
    M, K1 = u.shape
    K = K1 - 1
    th = np.clip(u, 0.0, 1.0)
    padded = np.concatenate([th, np.zeros((M, 1))], axis=1)  # u_{K+1} = 0
    d = np.asarray(spec.d, dtype=float)[:, None]
    powd = padded ** d
    gam = np.asarray(spec.gamma)
    C = np.asarray(spec.C)

    out = np.zeros_like(th)
    arrivals = np.maximum(powd[:, :-2] - powd[:, 1:-1], 0.0)  # (M, K): level k = 1..K
    services = np.maximum(padded[:, 1:-1] - padded[:, 2:], 0.0)
    if scheme == "scheme1":
        # types below j compete at level k-1, types above j at level k
        below = np.cumprod(np.vstack([np.ones(K1 + 1), powd]), axis=0)  # below[j] = prod_{i<j}
        above = np.cumprod(np.vstack([np.ones(K1 + 1), powd[::-1]]), axis=0)[::-1]  # above[j] = prod_{i>=j}
        cross = below[:M, :K] * above[1:, 1 : K + 1]
    elif scheme == "scheme2":
        idx = _scheme2_index(tuple(spec.C), K)
        cross = np.ones((M, K))
        for j in range(M):
            for i in range(M):
                if i != j:
                    cross[j] *= powd[i, idx[j, i, 1:]]
    else:
        check_scheme(scheme)
    out[:, 1:] = (spec.lam / gam)[:, None] * arrivals * cross - (spec.mu * C)[:, None] * services
    return out


def rhs_scheme1(u: TailState, spec: ClusterSpec) -> Derivative:
    return Derivative(drift(u.u, spec, "scheme1"))


def rhs_scheme2(u: TailState, spec: ClusterSpec) -> Derivative:
    return Derivative(drift(u.u, spec, "scheme2"))


def rhs(u: TailState, spec: ClusterSpec, scheme: str) -> Derivative:
    return Derivative(drift(u.u, spec, check_scheme(scheme)))


def rhs_bound(spec: ClusterSpec) -> float:
    """Uniform bound on the drift norm: ``lam / min gamma + mu max C``."""
    return spec.lam / min(spec.gamma) + spec.mu * max(spec.C)


def lipschitz_bound(spec: ClusterSpec) -> float:
    """Lipschitz constant of the drift in the weighted sup metric."""
    return 4 * spec.M * spec.lam * max(spec.d) / min(spec.gamma) + 3 * spec.mu * max(spec.C)


def default_step(spec: ClusterSpec) -> float:
    return 0.01 / rhs_bound(spec)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (n_samples, M, K+1)
    max_projection: float

    def __len__(self) -> int:
        return len(self.times)

    def state(self, i: int) -> TailState:
        return TailState(self.states[i])

    @property
    def final(self) -> TailState:
        return TailState(self.states[-1])

    def __iter__(self):
        for t, u in zip(self.times, self.states):
            yield float(t), TailState(u)

    def to_csv(self, path: str | Path) -> None:
        """Columns ``t`` then ``u[j][n]`` with j outer."""
        _, M, K1 = self.states.shape
        header = ["t"] + [f"u[{j}][{n}]" for j in range(M) for n in range(K1)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t, u in zip(self.times, self.states):
                w.writerow([repr(float(t))] + [repr(float(x)) for x in u.ravel()])


def read_trajectory_csv(path: str | Path) -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    M = 1 + max(int(h.split("]")[0][2:]) for h in header[1:])
    data = np.array([[float(x) for x in r] for r in body])
    return Trajectory(data[:, 0], data[:, 1:].reshape(len(body), M, -1), 0.0)


def integrate(
    u0: TailState,
    spec: ClusterSpec,
    scheme: str = "scheme1",
    t_end: float = 10.0,
    dt: float | None = None,
    stride: int = 1,
    sample_times=None,
    check_projection: bool = True,
) -> Trajectory:
    """Fixed-step classic RK4, projecting back onto the state space after each step.

    States are kept every ``stride`` steps, or at the steps closest to ``sample_times``
    when given. Raises :class:`ProjectionError` if a projection moves the state by more
    than ``10 dt**5`` in the weighted sup metric (the exact flow never leaves the space).
    """
    check_scheme(scheme)
    if dt is None:
        dt = default_step(spec)
    if dt <= 0 or t_end <= 0:
        raise ValueError("dt and t_end must be positive")
    n_steps = max(1, int(np.ceil(t_end / dt - 1e-9)))
    dt = t_end / n_steps  # shrink slightly so the last step lands on t_end
    bound = 10.0 * dt**5

    if sample_times is not None:
        wanted = {int(round(t / dt)) for t in sample_times}
        keep = lambda i: i in wanted
    else:
        keep = lambda i: i % stride == 0 or i == n_steps

    u = np.array(u0.u, dtype=float)
    times, states = [], []
    if keep(0):
        times.append(0.0)
        states.append(u.copy())
    worst = 0.0
    f = lambda x: drift(x, spec, scheme)
    for i in range(1, n_steps + 1):
        k1 = f(u)
        k2 = f(u + 0.5 * dt * k1)
        k3 = f(u + 0.5 * dt * k2)
        k4 = f(u + dt * k3)
        raw = u + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        u = project_array(raw)
        moved = weighted_sup(u - raw)
        worst = max(worst, moved)
        if check_projection and moved > bound:
            raise ProjectionError(f"projection moved the state by {moved:.3g} > {bound:.3g} at t={i * dt:.4g}; reduce dt")
        if keep(i):
            times.append(i * dt)
            states.append(u.copy())
    return Trajectory(np.array(times), np.array(states), worst)


def v_aggregate(u: TailState, n: int, spec: ClusterSpec) -> float:
    """``sum_j gamma_j sum_{k >= n} u_k^(j)``; with ``n = 1`` this is the mean jobs per server."""
    if not 1 <= n <= u.K:
        raise ValueError(f"n must be in [1, {u.K}]")
    return float(np.dot(spec.gamma, u.u[:, n:].sum(axis=1)))


def v1_rate(u: TailState, spec: ClusterSpec) -> float:
    """Time derivative of ``v_aggregate(u, 1)`` along the flow: ``lam (1 - sum_j u_1^(j) / Delta_j)``."""
    return float(spec.lam * (1.0 - np.sum(u.u[:, 1] / spec.delta)))


def lipschitz_ratio(a: TailState, b: TailState, spec: ClusterSpec, scheme: str = "scheme1") -> float:
    dist = weighted_sup(a.u - b.u)
    if dist == 0.0:
        raise ValueError("states must differ")
    check_scheme(scheme)
    return weighted_sup(drift(a.u, spec, scheme) - drift(b.u, spec, scheme)) / dist
