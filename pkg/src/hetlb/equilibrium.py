"""Stationary tail distributions of the mean-field limit.

The equilibrium is the fixed point of ``Theta = F o G``: ``G`` turns tails into the
state-dependent arrival rate seen by a tagged server at each occupancy, ``F`` solves
the birth-death balance equations for those rates and returns tails again.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from decimal import Decimal, localcontext
from pathlib import Path

import numpy as np

from .core import (
    DEFAULT_DEPTH,
    TAIL_TOLERANCE,
    ZERO_MASS,
    ClusterSpec,
    TailState,
    check_scheme,
    is_stable,
    k_tilde,
    k_under,
    metric_distance,
    rho,
)

log = logging.getLogger(__name__)


class EquilibriumError(RuntimeError):
    pass


class ConvergenceError(EquilibriumError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class TruncationError(EquilibriumError):
    pass


@dataclass(frozen=True)
class RateProfile:
    """``rates[j, k]``: arrival rate at a type-j server currently holding k jobs."""

    rates: np.ndarray

    def __post_init__(self) -> None:
        r = np.array(self.rates, dtype=float)
        if np.any(r < 0) or not np.all(np.isfinite(r)):
            raise ValueError("rates must be finite and nonnegative")
        r.setflags(write=False)
        object.__setattr__(self, "rates", r)

    @property
    def K(self) -> int:
        return self.rates.shape[1] - 1


def default_depth(spec: ClusterSpec) -> int:
    """Truncation depth. Tails decay doubly exponentially unless the whole system is a
    single M/M/1-PS type with d = 1, whose tails are geometric."""
    if sum(spec.d) > 1:
        return DEFAULT_DEPTH
    r = rho(spec)
    need = math.ceil(math.log(1e-17) / math.log(r)) + 2 if 0 < r < 1 else DEFAULT_DEPTH
    return int(min(max(DEFAULT_DEPTH, need), 20000))


def _get(P: np.ndarray, i: int, k: int) -> float:
    return P[i, k] if k < P.shape[1] else 0.0


def _quotient(a: np.ndarray, b: np.ndarray, d: int) -> np.ndarray:
    # (a^d - b^d) / (a - b) as sum_m a^m b^(d-1-m): equals d a^(d-1) when a == b
    out = np.zeros_like(a)
    for m in range(d):
        out += a**m * b ** (d - 1 - m)
    return out


def arrival_rate_profile(P: TailState, spec: ClusterSpec, scheme: str = "scheme1") -> RateProfile:
    check_scheme(scheme)
    u = P.u
    M, K1 = u.shape
    nxt = np.concatenate([u[:, 1:], np.zeros((M, 1))], axis=1)
    powd = u ** np.asarray(spec.d, dtype=float)[:, None]
    powd_next = nxt ** np.asarray(spec.d, dtype=float)[:, None]
    rates = np.empty_like(u)
    for j in range(M):
        r = spec.lam / spec.gamma[j] * _quotient(u[j], nxt[j], spec.d[j])
        if scheme == "scheme1":
            for i in range(j):
                r = r * powd[i]
            for i in range(j + 1, M):
                r = r * powd_next[i]
        else:
            for i in range(M):
                if i == j:
                    continue
                if i < j:
                    idx = [k_tilde(k, j, i, spec) for k in range(K1)]
                else:
                    idx = [k_under(k, j, i, spec) for k in range(K1)]
                r = r * np.array([_get(u, i, k) for k in idx]) ** spec.d[i]
        rates[j] = r
    return RateProfile(rates)


def balance_map(rates: RateProfile, spec: ClusterSpec, *, divergence_threshold: float = 1e-9) -> TailState:
    """Birth-death stationary tails for state-dependent arrival rates and service rate ``mu C_j``.

    Raises :class:`EquilibriumError` when the normalized mass at depth K exceeds
    ``divergence_threshold`` (depth too shallow or rates beyond capacity).
    """
    lam_k = rates.rates
    M, K1 = lam_k.shape
    out = np.empty_like(lam_k)
    with np.errstate(divide="ignore", over="ignore"):
        for j in range(M):
            ratio = lam_k[j, :-1] / (spec.mu * spec.C[j])
            logpi = np.concatenate([[0.0], np.cumsum(np.log(ratio))])
            logpi -= logpi.max()
            pi = np.exp(logpi)
            pi /= pi.sum()
            if pi[-1] > divergence_threshold:
                raise EquilibriumError(
                    f"type {j}: stationary mass {pi[-1]:.3g} at depth K={K1 - 1}; increase K or check stability"
                )
            tails = np.cumsum(pi[::-1])[::-1]
            tails[0] = 1.0
            out[j] = np.minimum(tails, 1.0)
    return TailState(out)


def theta(P: TailState, spec: ClusterSpec, scheme: str = "scheme1") -> TailState:
    return balance_map(arrival_rate_profile(P, spec, scheme), spec, divergence_threshold=1.0)


def fixed_point(
    spec: ClusterSpec,
    scheme: str = "scheme1",
    tol: float = 1e-12,
    damping: float = 0.5,
    max_iter: int = 200_000,
    K: int | None = None,
    initial: TailState | None = None,
) -> TailState:
    """Damped iteration ``P <- (1 - damping) P + damping Theta(P)`` from geometric tails at
    the system load, stopped when successive iterates are within ``tol``."""
    return solve_fixed_point(spec, scheme, tol=tol, damping=damping, max_iter=max_iter, K=K, initial=initial).P


@dataclass
class EquilibriumResult:
    P: TailState
    scheme: str
    method: str  # "fixed_point" or "ode"
    iterations: int
    step: float
    residual: float
    tail_mass: float
    mean_sojourn: float
    notes: list[str] = field(default_factory=list)


def solve_fixed_point(
    spec: ClusterSpec,
    scheme: str = "scheme1",
    tol: float = 1e-12,
    damping: float = 0.5,
    max_iter: int = 200_000,
    K: int | None = None,
    initial: TailState | None = None,
) -> EquilibriumResult:
    check_scheme(scheme)
    if not is_stable(spec):
        raise EquilibriumError(f"unstable spec: lambda={spec.lam} >= capacity {spec.capacity}")
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    if tol <= 0:
        raise ValueError("tol must be positive")
    K = default_depth(spec) if K is None else K
    P = initial.padded(K) if initial is not None else TailState.geometric(rho(spec), spec.M, K)
    step = res = math.inf
    res_bound = max(10 * tol, 1e-13)
    for it in range(1, max_iter + 1):
        T = theta(P, spec, scheme)
        new = (1.0 - damping) * P.u + damping * T.u
        step = metric_distance(TailState(new), P)
        P = TailState(new)
        # a small step alone can stop short of the fixed point when contraction is slow
        if step < tol:
            res = conservation_residual(P, spec, scheme)
            if res < res_bound:
                break
    else:
        if step < tol:
            raise ConvergenceError(f"conservation residual {res:.3g} exceeds {res_bound:.3g}", res, max_iter)
        raise ConvergenceError(f"no convergence after {max_iter} iterations (last step {step:.3g})", step, max_iter)

    if P.tail_mass >= TAIL_TOLERANCE:
        raise TruncationError(f"tail mass {P.tail_mass:.3g} at depth K={K}; increase K")
    return EquilibriumResult(
        P=P, scheme=scheme, method="fixed_point", iterations=it, step=step, residual=res,
        tail_mass=P.tail_mass, mean_sojourn=mean_sojourn(P, spec),
    )


def solve_equilibrium(
    spec: ClusterSpec,
    scheme: str = "scheme1",
    tol: float = 1e-12,
    damping: float = 0.5,
    max_iter: int = 200_000,
    K: int | None = None,
    ode_horizon: float = 5_000.0,
) -> EquilibriumResult:
    """Fixed-point iteration, falling back to long-horizon integration of the drift if the
    iteration stalls. ``method`` on the result records which path produced it."""
    try:
        return solve_fixed_point(spec, scheme, tol=tol, damping=damping, max_iter=max_iter, K=K)
    except ConvergenceError as exc:
        log.warning("fixed-point iteration failed (%s); integrating the mean-field ODE instead", exc)
        note = str(exc)
    from .meanfield import integrate

    K = default_depth(spec) if K is None else K
    traj = integrate(TailState.empty(spec.M, K), spec, scheme, t_end=ode_horizon, dt=0.02, stride=10**9)
    P = traj.final
    return EquilibriumResult(
        P=P, scheme=scheme, method="ode", iterations=0, step=float("nan"),
        residual=conservation_residual(P, spec, scheme), tail_mass=P.tail_mass,
        mean_sojourn=mean_sojourn(P, spec), notes=[note],
    )


# --- independent construction for two types -------------------------------

def _alpha_sequences(alpha: Decimal, D: tuple[Decimal, Decimal], d: tuple[int, ...], K: int) -> tuple[list, list]:
    """Forward recursions from ``P_1^(1) = alpha``; stops once either sequence turns negative."""
    P1 = [Decimal(1), alpha]
    P2 = [Decimal(1), D[1] * (1 - alpha / D[0])]
    for l in range(K - 1):
        if P1[l + 1] < 0 or P2[l + 1] < 0:
            break
        P1.append(P1[l + 1] - D[0] * (P1[l] ** d[0] - P1[l + 1] ** d[0]) * P2[l + 1] ** d[1])
        P2.append(P2[l + 1] - D[1] * (P2[l] ** d[1] - P2[l + 1] ** d[1]) * P1[l] ** d[0])
    return P1, P2


def _first_negative(P1: list, P2: list) -> int:
    """1 or 2 for the sequence that drops below zero first, 0 if neither does."""
    for a, b in zip(P1, P2):
        if a < 0:
            return 1
        if b < 0:
            return 2
    return 0


def _first_bad(P: list) -> int:
    for k in range(1, len(P)):
        if P[k] < 0 or P[k] > P[k - 1]:
            return k
    return len(P)


@dataclass
class AlphaResult:
    P: TailState
    alpha: float
    bracket: tuple[float, float]
    iterations: int


def alpha_construction(spec: ClusterSpec, K: int = DEFAULT_DEPTH, digits: int = 60) -> TailState:
    return alpha_search(spec, K=K, digits=digits).P


def alpha_search(spec: ClusterSpec, K: int = DEFAULT_DEPTH, digits: int = 60, max_iter: int = 1000) -> AlphaResult:
    """Scheme-1 equilibrium for two types by shooting on ``alpha = P_1^(1)``.

    The two-type equilibrium equations, solved forward from ``P_1^(1) = alpha`` and the
    flow-balance value of ``P_1^(2)``, give two recursions. For ``alpha`` below the root
    the first sequence turns negative first; above it the second does (or the first
    stalls). The recursion is badly conditioned, so it runs in ``digits``-digit decimal
    arithmetic and bisection continues until the bracket is that narrow. Each sequence
    is then cut where it (or an entry it depends on) stops being nonnegative and
    nonincreasing.
    """
    if spec.M != 2:
        raise ValueError("alpha construction needs exactly two server types")
    if not is_stable(spec):
        raise EquilibriumError("unstable spec")
    with localcontext() as ctx:
        ctx.prec = digits
        lam, mu = Decimal(spec.lam), Decimal(spec.mu)
        D = tuple(lam / (mu * Decimal(g) * Decimal(c)) for g, c in zip(spec.gamma, spec.C))
        lo = max(Decimal(0), D[0] * (1 - 1 / D[1]))
        hi = min(Decimal(1), D[0])
        eps = Decimal(10) ** (-(digits - 5))
        if _first_negative(*_alpha_sequences(lo + eps * hi, D, spec.d, K)) != 1:
            raise EquilibriumError("no sign change at the lower end of the alpha bracket")
        if _first_negative(*_alpha_sequences(hi, D, spec.d, K)) == 1:
            raise EquilibriumError("no sign change at the upper end of the alpha bracket")
        it = 0
        while it < max_iter and hi - lo > eps * hi:
            mid = (lo + hi) / 2
            if _first_negative(*_alpha_sequences(mid, D, spec.d, K)) == 1:
                lo = mid
            else:
                hi = mid
            it += 1
        P1, P2 = _alpha_sequences(lo, D, spec.d, K)
    # P1[l+2] reads P2[l+1] and P2[l+2] reads P1[l]
    c1, c2 = _first_bad(P1), _first_bad(P2)
    c1, c2 = min(c1, c2 + 1), min(c2, c1 + 2)
    u = np.zeros((2, K + 1))
    u[0, :c1] = [float(x) for x in P1[:c1]]
    u[1, :c2] = [float(x) for x in P2[:c2]]
    return AlphaResult(TailState(np.clip(u, 0.0, 1.0)), alpha=float(lo), bracket=(float(lo), float(hi)), iterations=it)


# --- identities and diagnostics --------------------------------------------

def conservation_residuals(P: TailState, spec: ClusterSpec, scheme: str = "scheme1") -> np.ndarray:
    """Per-level residuals of the equilibrium flow identities.

    Scheme 1, level l >= 0: ``sum_j P_{l+1}^(j) / Delta_j - prod_j (P_l^(j))^d_j``.
    Scheme 2, level 0: ``sum_j P_1^(j) / Delta_j - 1``; level l >= 1 couples type 1 at
    ``l`` with type j at ``k_under(l - 1, 1, j)``.
    """
    check_scheme(scheme)
    u = P.u
    D = spec.delta
    K = P.K
    out = np.zeros(K)
    if scheme == "scheme1":
        lhs = (u[:, 1:] / D[:, None]).sum(axis=0)
        rhs_ = np.prod(u[:, :-1] ** np.asarray(spec.d, dtype=float)[:, None], axis=0)
        return lhs - rhs_
    out[0] = float(np.sum(u[:, 1] / D)) - 1.0
    for l in range(1, K):
        lhs = _get(u, 0, l + 1) / D[0]
        rhs_ = u[0, l] ** spec.d[0]
        for j in range(1, spec.M):
            kj = k_under(l - 1, 0, j, spec)
            lhs += _get(u, j, kj + 1) / D[j]
            rhs_ *= _get(u, j, kj) ** spec.d[j]
        out[l] = lhs - rhs_
    return out


def conservation_residual(P: TailState, spec: ClusterSpec, scheme: str = "scheme1") -> float:
    return float(np.max(np.abs(conservation_residuals(P, spec, scheme))))


@dataclass
class DecayCertificate:
    k0: int
    delta: float
    checked_levels: int


def decay_certificate(P: TailState, spec: ClusterSpec) -> DecayCertificate:
    """Smallest level k0 where ``delta = max_k P^(d - 1) max_j Delta_j < 1``, with
    ``Phat_{k+1} <= delta * Phat_k`` verified for all k >= k0 (entries below the
    numerical-zero threshold count as zero, and a relative slack of 1e-9 absorbs
    solver error)."""
    Phat = P.u.max(axis=0)
    Phat = np.where(Phat < ZERO_MASS, 0.0, Phat)
    dsum = sum(spec.d)
    Dmax = float(spec.delta.max())
    for k0 in range(P.K + 1):
        delta = Phat[k0] ** (dsum - 1) * Dmax
        if delta < 1:
            break
    else:
        raise EquilibriumError("no level with contraction factor below 1 within depth K")
    # equality holds exactly for a single type, so allow for the solver's own accuracy
    slack = 1e-9 * Phat[k0:-1]
    bad = np.nonzero(Phat[k0 + 1 :] > delta * Phat[k0:-1] + slack)[0]
    if bad.size:
        k = k0 + int(bad[0])
        raise EquilibriumError(f"contraction fails at level {k}: {Phat[k + 1]:.3g} > {delta:.3g} * {Phat[k]:.3g}")
    return DecayCertificate(k0=k0, delta=float(delta), checked_levels=P.K - k0)


def mean_sojourn(P: TailState, spec: ClusterSpec) -> float:
    """Mean time in system by Little's law: ``(1/lam) sum_j gamma_j sum_{k>=1} P_k^(j)``."""
    return float(np.dot(spec.gamma, P.u[:, 1:].sum(axis=1)) / spec.lam)


def sqd_tails(load: float, d: int, K: int) -> np.ndarray:
    """Closed-form SQ(d) tails on identical servers: ``load^((d^k - 1)/(d - 1))``."""
    k = np.arange(K + 1, dtype=float)
    expo = k if d == 1 else (float(d) ** k - 1.0) / (d - 1.0)
    with np.errstate(under="ignore"):
        return np.power(load, expo)


# --- exports ------------------------------------------------------------------

def write_equilibrium_csv(path: str | Path, P: TailState, rates: RateProfile) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["j", "k", "P", "lambda_k"])
        for j in range(P.M):
            for k in range(P.K + 1):
                w.writerow([j + 1, k, repr(float(P.u[j, k])), repr(float(rates.rates[j, k]))])


def equilibrium_summary(result: EquilibriumResult, spec: ClusterSpec) -> dict:
    try:
        cert = asdict(decay_certificate(result.P, spec))
    except EquilibriumError as exc:
        cert = {"error": str(exc)}
    return {
        "scheme": result.scheme,
        "method": result.method,
        "spec": spec.as_dict(),
        "K": result.P.K,
        "mean_sojourn": result.mean_sojourn,
        "iterations": result.iterations,
        "last_step": result.step,
        "conservation_residual": result.residual,
        "tail_mass": result.tail_mass,
        "decay_certificate": cert,
        "P1": result.P.u[:, 1].tolist(),
        "notes": result.notes,
    }


def write_summary_json(path: str | Path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, default=float) + "\n")
