"""Model parameters, tail-sequence states and the index maps shared by every module.

A cluster has ``M`` server types ordered by nondecreasing capacity. A state of the
large-system limit is, per type ``j``, the tail sequence ``u[j, n]`` = fraction of
type-``j`` servers holding at least ``n`` jobs, truncated at depth ``K``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

DEFAULT_DEPTH = 64
# entries below this are numerically zero when judging truncation adequacy
ZERO_MASS = 1e-14
# u_K must be below this before a solver declares convergence
TAIL_TOLERANCE = 1e-9
_SNAP = 1e-12

SCHEMES = ("scheme1", "scheme2")


class SpecError(ValueError):
    """Invalid model parameters. ``line`` points into the config file when known."""

    def __init__(self, message: str, *, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


def check_scheme(scheme: str) -> str:
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}, expected one of {SCHEMES}")
    return scheme


@dataclass(frozen=True)
class ClusterSpec:
    """Static parameters of a heterogeneous processor-sharing cluster.

    ``lam`` is the arrival rate per server (the system sees ``N * lam``), jobs have
    mean size ``1 / mu`` and a type-``j`` server processes work at rate ``C[j]``.
    """

    gamma: tuple[float, ...]
    C: tuple[float, ...]
    d: tuple[int, ...]
    lam: float
    mu: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))
        object.__setattr__(self, "C", tuple(float(c) for c in self.C))
        d = []
        for x in self.d:
            if float(x) != int(x):
                raise SpecError(f"d must hold integers, got {x!r}", field="d")
            d.append(int(x))
        object.__setattr__(self, "d", tuple(d))
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "mu", float(self.mu))
        self._validate()

    def _validate(self) -> None:
        M = len(self.gamma)
        if M < 1:
            raise SpecError("need at least one server type", field="M")
        for name in ("C", "d"):
            if len(getattr(self, name)) != M:
                raise SpecError(f"{name} has {len(getattr(self, name))} entries, expected M={M}", field=name)
        if any(not g > 0 for g in self.gamma):
            raise SpecError("every gamma_j must be > 0", field="gamma")
        if abs(sum(self.gamma) - 1.0) > 1e-12:
            raise SpecError(f"gamma must sum to 1 (got {sum(self.gamma):.12g})", field="gamma")
        if any(not c > 0 for c in self.C):
            raise SpecError("every capacity must be > 0", field="C")
        if any(a > b for a, b in zip(self.C, self.C[1:])):
            raise SpecError("capacities must be sorted nondecreasing (C_1 <= ... <= C_M)", field="C")
        if any(x < 1 for x in self.d):
            raise SpecError("every d_j must be >= 1", field="d")
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise SpecError("lambda must be > 0", field="lambda")
        if not (self.mu > 0 and math.isfinite(self.mu)):
            raise SpecError("mu must be > 0", field="mu")

    @classmethod
    def ordered(cls, gamma: Sequence[float], C: Sequence[float], d: Sequence[int], lam: float, mu: float = 1.0) -> "ClusterSpec":
        """Build a spec from types listed in any order; they are sorted by capacity."""
        order = sorted(range(len(C)), key=lambda j: C[j])
        return cls(
            gamma=[gamma[j] for j in order],
            C=[C[j] for j in order],
            d=[d[j] for j in order],
            lam=lam,
            mu=mu,
        )

    @property
    def M(self) -> int:
        return len(self.gamma)

    @property
    def delta(self) -> np.ndarray:
        """Per-type load ``lam / (mu * gamma_j * C_j)``."""
        return self.lam / (self.mu * np.asarray(self.gamma) * np.asarray(self.C))

    @property
    def capacity(self) -> float:
        """Largest sustainable per-server arrival rate, ``mu * sum_j gamma_j C_j``."""
        return self.mu * float(np.dot(self.gamma, self.C))

    def with_lambda(self, lam: float) -> "ClusterSpec":
        return ClusterSpec(self.gamma, self.C, self.d, lam, self.mu)

    def replace(self, **changes) -> "ClusterSpec":
        values = dict(gamma=self.gamma, C=self.C, d=self.d, lam=self.lam, mu=self.mu)
        values.update(changes)
        return ClusterSpec(**values)

    def as_dict(self) -> dict:
        return {
            "M": self.M,
            "gamma": list(self.gamma),
            "C": list(self.C),
            "d": list(self.d),
            "lambda": self.lam,
            "mu": self.mu,
        }


@dataclass(frozen=True)
class TailState:
    """Truncated element of the tail-sequence space: ``u`` has shape ``(M, K + 1)``.

    Rows start at 1 and are nonincreasing in ``n`` with values in ``[0, 1]``.
    The array is stored read-only.
    """

    u: np.ndarray
    atol: float = field(default=1e-12, repr=False, compare=False)

    def __post_init__(self) -> None:
        u = np.array(self.u, dtype=float, copy=True)
        if u.ndim != 2 or u.shape[1] < 2:
            raise ValueError(f"tail array must have shape (M, K+1) with K >= 1, got {u.shape}")
        tol = self.atol
        if not np.all(np.isfinite(u)):
            raise ValueError("tail values must be finite")
        if np.any(np.abs(u[:, 0] - 1.0) > tol):
            raise ValueError("u_0 must equal 1 for every type")
        if np.any(u < -tol) or np.any(u > 1.0 + tol):
            raise ValueError("tail values must lie in [0, 1]")
        if np.any(np.diff(u, axis=1) > tol):
            raise ValueError("tail sequences must be nonincreasing")
        u.setflags(write=False)
        object.__setattr__(self, "u", u)

    @property
    def M(self) -> int:
        return self.u.shape[0]

    @property
    def K(self) -> int:
        return self.u.shape[1] - 1

    @property
    def tail_mass(self) -> float:
        """Largest ``u_K`` over types; large values mean the truncation is too shallow."""
        return float(self.u[:, -1].max())

    def pmf(self) -> np.ndarray:
        """Occupancy distribution ``u_n - u_{n+1}`` (mass at K lumps everything >= K)."""
        return self.u - np.concatenate([self.u[:, 1:], np.zeros((self.M, 1))], axis=1)

    def mean_occupancy(self) -> np.ndarray:
        return self.u[:, 1:].sum(axis=1)

    def truncated(self, K: int) -> "TailState":
        if K >= self.K:
            return self.padded(K)
        return TailState(self.u[:, : K + 1])

    def padded(self, K: int) -> "TailState":
        if K <= self.K:
            return TailState(self.u[:, : K + 1])
        extra = np.zeros((self.M, K - self.K))
        return TailState(np.concatenate([self.u, extra], axis=1))

    def __eq__(self, other) -> bool:
        return isinstance(other, TailState) and self.u.shape == other.u.shape and bool(np.array_equal(self.u, other.u))

    def __hash__(self) -> int:
        return hash((self.u.shape, self.u.tobytes()))

    @classmethod
    def empty(cls, M: int, K: int = DEFAULT_DEPTH) -> "TailState":
        u = np.zeros((M, K + 1))
        u[:, 0] = 1.0
        return cls(u)

    @classmethod
    def geometric(cls, ratio: float | Sequence[float], M: int, K: int = DEFAULT_DEPTH) -> "TailState":
        r = np.broadcast_to(np.asarray(ratio, dtype=float), (M,))
        n = np.arange(K + 1)
        return cls(r[:, None] ** n[None, :])

    @classmethod
    def from_occupancies(cls, occupancies: Iterable[Sequence[int]], K: int = DEFAULT_DEPTH) -> "TailState":
        """Empirical tails of per-type occupancy lists."""
        rows = []
        for q in occupancies:
            q = np.asarray(q, dtype=int)
            counts = np.bincount(np.minimum(q, K), minlength=K + 1)
            rows.append(np.cumsum(counts[::-1])[::-1] / len(q))
        return cls(np.array(rows))

    @classmethod
    def project(cls, u: np.ndarray) -> "TailState":
        """Nearest-in-spirit valid state: clamp, repair monotonicity from the tail, pin ``u_0``."""
        return cls(project_array(u))


def project_array(u: np.ndarray) -> np.ndarray:
    v = np.clip(u, 0.0, 1.0)
    # cumulative max from the tail makes each row nonincreasing
    v = np.maximum.accumulate(v[:, ::-1], axis=1)[:, ::-1]
    v[:, 0] = 1.0
    return v


def _snap(x: float) -> float:
    r = round(x)
    if abs(x - r) <= _SNAP * max(1.0, abs(x)):
        return float(r)
    return x


def k_under(k: int, i: int, j: int, spec: ClusterSpec | Sequence[float]) -> int:
    """``floor(C_j k / C_i) + 1``: smallest type-j occupancy that loses to a type-i server at k."""
    C = spec.C if isinstance(spec, ClusterSpec) else spec
    return math.floor(_snap(C[j] * k / C[i])) + 1


def k_tilde(k: int, i: int, j: int, spec: ClusterSpec | Sequence[float]) -> int:
    """``ceil(C_j k / C_i)``."""
    C = spec.C if isinstance(spec, ClusterSpec) else spec
    return math.ceil(_snap(C[j] * k / C[i]))


def weighted_sup(x: np.ndarray) -> float:
    """``sup_{j,n} |x[j, n]| / (n + 1)``; the norm behind :func:`metric_distance`."""
    x = np.asarray(x, dtype=float)
    w = 1.0 / (np.arange(x.shape[-1]) + 1.0)
    return float(np.max(np.abs(x) * w))


def metric_distance(a: TailState, b: TailState) -> float:
    if a.u.shape != b.u.shape:
        raise ValueError(f"dimension mismatch: {a.u.shape} vs {b.u.shape}")
    return weighted_sup(a.u - b.u)


def rho(spec: ClusterSpec) -> float:
    return spec.lam / spec.capacity


def is_stable(spec: ClusterSpec) -> bool:
    return spec.lam < spec.capacity


# --- key-value config files -------------------------------------------------

_SPEC_KEYS = ("M", "gamma", "C", "d", "lambda", "mu")
_LIST_KEYS = {"gamma", "C", "d"}
_LINE = re.compile(r"^\s*([A-Za-z_][\w.\-]*)\s*[=:]\s*(.*?)\s*$")


def parse_number(text: str) -> float:
    text = text.strip()
    if "/" in text:
        return float(Fraction(text))
    return float(text)


def parse_values(text: str) -> list[float]:
    text = text.strip()
    if text.startswith("[") and text.endswith("]"):
        text = text[1:-1]
    parts = [p for p in re.split(r"[,\s]+", text) if p]
    return [parse_number(p) for p in parts]


def parse_kv(text: str) -> dict[str, tuple[str, int]]:
    """Raw ``key -> (value, line)`` pairs of a flat key-value file; ``#`` starts a comment."""
    out: dict[str, tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _LINE.match(line)
        if not m:
            raise SpecError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = m.group(1), m.group(2)
        if key in out:
            raise SpecError(f"duplicate key {key!r}", field=key, line=lineno)
        out[key] = (value, lineno)
    return out


def spec_from_mapping(raw: Mapping[str, tuple[str, int | None]]) -> ClusterSpec:
    """Validate raw config values, attaching line numbers to every error."""
    unknown = sorted(set(raw) - set(_SPEC_KEYS))
    if unknown:
        key = unknown[0]
        raise SpecError(f"unknown key {key!r}", field=key, line=raw[key][1])
    missing = [k for k in _SPEC_KEYS if k not in raw and k not in ("M", "mu")]
    if missing:
        raise SpecError(f"missing key {missing[0]!r}", field=missing[0])

    parsed: dict[str, object] = {}
    for key, (value, line) in raw.items():
        try:
            parsed[key] = parse_values(value) if key in _LIST_KEYS else parse_number(value)
        except (ValueError, ZeroDivisionError) as exc:
            raise SpecError(f"cannot parse {key} = {value!r}: {exc}", field=key, line=line) from None

    gamma, C, d = parsed["gamma"], parsed["C"], parsed["d"]
    if "M" in parsed:
        M = parsed["M"]
        if M != int(M) or M < 1:
            raise SpecError(f"M must be a positive integer, got {M}", field="M", line=raw["M"][1])
        for key in ("gamma", "C", "d"):
            if len(parsed[key]) != int(M):
                raise SpecError(f"{key} has {len(parsed[key])} entries but M = {int(M)}", field=key, line=raw[key][1])
    try:
        return ClusterSpec(gamma=gamma, C=C, d=d, lam=parsed["lambda"], mu=parsed.get("mu", 1.0))
    except SpecError as exc:
        key = exc.field
        line = raw[key][1] if key in raw else None
        raise SpecError(str(exc), field=key, line=line) from None


def load_spec(path: str | Path, overrides: Mapping[str, str] | None = None) -> ClusterSpec:
    """Read a spec file, optionally overriding keys (``--set key=value`` on the CLI)."""
    raw = parse_kv(Path(path).read_text())
    for key, value in (overrides or {}).items():
        raw[key] = (value, None)
    return spec_from_mapping(raw)


def format_spec(spec: ClusterSpec) -> str:
    def fmt(xs):
        return "[" + ", ".join(repr(x) for x in xs) + "]"

    return (
        f"M = {spec.M}\n"
        f"gamma = {fmt(spec.gamma)}\n"
        f"C = {fmt(spec.C)}\n"
        f"d = {fmt(spec.d)}\n"
        f"lambda = {spec.lam!r}\n"
        f"mu = {spec.mu!r}\n"
    )
