from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Literal, Protocol

import numpy as np

from packages.critheat_core.domain.errors import DomainError

TWO_PI = 2.0 * np.pi

Normalization = Literal["unitary", "paper", "probabilist"]
HeatStep = Literal["spectral", "monotone"]
SigmaKind = Literal["critical_power", "power", "linear", "additive"]
PhiKind = Literal["constant", "field_process"]
StopKind = Literal["tau_inf", "tau_linf", "tau_l1", "explosion"]
DoublingKind = Literal["start", "double", "halve", "sentinel"]


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class KernelSpec:
    normalization: Normalization = "probabilist"
    truncation_tol: float = 1e-16

    def __post_init__(self) -> None:
        if self.normalization == "paper":
            object.__setattr__(self, "normalization", "unitary")
        if self.normalization not in ("unitary", "probabilist"):
            raise DomainError(f"unknown kernel normalization {self.normalization!r}")
        if not self.truncation_tol > 0:
            raise DomainError("truncation_tol must be > 0")


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic mesh on [-pi, pi) and a uniform time grid."""

    N: int
    dt: float
    steps: int

    def __post_init__(self) -> None:
        if self.N < 8 or not _is_power_of_two(self.N):
            raise DomainError(f"N must be a power of two >= 8, got {self.N}")
        if not self.dt > 0:
            raise DomainError("dt must be > 0")
        if self.steps < 1:
            raise DomainError("steps must be >= 1")

    @property
    def dx(self) -> float:
        return TWO_PI / self.N

    @property
    def T(self) -> float:
        return self.steps * self.dt

    @property
    def x(self) -> np.ndarray:
        return -np.pi + self.dx * np.arange(self.N)

    @property
    def wavenumbers(self) -> np.ndarray:
        """Integer wavenumbers of the rfft modes, 0..N/2."""
        return np.arange(self.N // 2 + 1, dtype=np.float64)

    def refined(self, factor: int) -> GridSpec:
        return GridSpec(N=self.N, dt=self.dt / factor, steps=self.steps * factor)

    def with_steps(self, steps: int) -> GridSpec:
        return GridSpec(N=self.N, dt=self.dt, steps=steps)


@dataclass(frozen=True)
class Field:
    """Samples of a periodic function at x_j = -pi + j*dx."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1 or not _is_power_of_two(arr.shape[0]):
            raise DomainError("field must be 1-D with a power-of-two length")
        object.__setattr__(self, "values", arr)

    @classmethod
    def from_function(cls, func: Callable[[np.ndarray], np.ndarray], N: int) -> Field:
        x = -np.pi + (TWO_PI / N) * np.arange(N)
        return cls(np.asarray(func(x), dtype=np.float64))

    @property
    def N(self) -> int:
        return int(self.values.shape[0])

    @property
    def dx(self) -> float:
        return TWO_PI / self.N

    @property
    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def l1(self) -> float:
        # periodic trapezoid rule == plain Riemann sum on the uniform mesh
        return float(np.sum(np.abs(self.values)) * self.dx)

    def linf(self) -> float:
        return float(np.max(np.abs(self.values)))

    def minimum(self) -> float:
        return float(np.min(self.values))


@dataclass(frozen=True)
class NoiseSlice:
    increments: np.ndarray

    @property
    def N(self) -> int:
        return int(self.increments.shape[-1])


@dataclass(frozen=True)
class SigmaFamily:
    kind: SigmaKind = "critical_power"
    c: float = 1.0
    gamma: float = 1.5

    def __post_init__(self) -> None:
        if self.kind not in ("critical_power", "power", "linear", "additive"):
            raise DomainError(f"unknown sigma kind {self.kind!r}")
        if self.c < 0:
            raise DomainError("sigma prefactor c must be >= 0")
        if not self.gamma > 0:
            raise DomainError("sigma exponent gamma must be > 0")

    @property
    def is_zero(self) -> bool:
        return self.c == 0.0


@dataclass(frozen=True)
class DriftSpec:
    alpha: float = 4.0
    epsilon_clamp: float = 0.5

    def __post_init__(self) -> None:
        if not self.alpha > 3:
            raise DomainError("drift alpha must be > 3")
        if not 0 < self.epsilon_clamp < 1:
            raise DomainError("epsilon_clamp must lie in (0, 1)")


class Coefficient(Protocol):
    def __call__(self, u: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class TrajectoryState:
    t_index: int
    field: Field
    l1: float
    linf: float
    minimum: float
    qv_accum: float = 0.0
    exploded: bool = False

    @classmethod
    def initial(cls, fld: Field) -> TrajectoryState:
        return cls(
            t_index=0,
            field=fld,
            l1=fld.l1(),
            linf=fld.linf(),
            minimum=fld.minimum(),
        )


@dataclass(frozen=True)
class CoupledState:
    u: TrajectoryState
    v: TrajectoryState
    v_minus: TrajectoryState

    def __post_init__(self) -> None:
        indices = {self.u.t_index, self.v.t_index, self.v_minus.t_index}
        sizes = {self.u.field.N, self.v.field.N, self.v_minus.field.N}
        if len(indices) != 1 or len(sizes) != 1:
            raise DomainError("coupled fields must share grid and time index")

    def ordering_gap(self) -> float:
        """min over x of min(v - u, u + v_minus); negative means the order broke."""
        u = self.u.field.values
        gap = np.minimum(self.v.field.values - u, u + self.v_minus.field.values)
        return float(np.min(gap))


@dataclass(frozen=True)
class ConvolutionSpec:
    p: float = 8.0
    beta: float = 0.2
    T: float = 0.5
    phi_kind: PhiKind = "constant"
    phi_level: float = 1.0

    def __post_init__(self) -> None:
        if not self.p > 6:
            raise DomainError("p must be > 6")
        lo, hi = 3.0 / (2.0 * self.p), 0.25
        if not lo < self.beta < hi:
            raise DomainError(f"beta must lie in ({lo:.6g}, {hi}) for p={self.p}")
        if not self.T > 0:
            raise DomainError("T must be > 0")


@dataclass(frozen=True)
class TrackerSet:
    epsilon: float = 0.5
    M: float = 1000.0
    n_levels: tuple[float, ...] = (10.0, 100.0)
    n_max: float = 1e6

    def __post_init__(self) -> None:
        if not 0 < self.epsilon < 1:
            raise DomainError("epsilon must lie in (0, 1)")
        if not self.M > 0:
            raise DomainError("M must be > 0")
        if not self.n_max > 1:
            raise DomainError("n_max must be > 1")
        if self.n_levels:
            if min(self.n_levels) <= 1 or max(self.n_levels) > self.n_max:
                raise DomainError("n_levels must lie in (1, n_max]")
        object.__setattr__(self, "n_levels", tuple(sorted(float(n) for n in self.n_levels)))


@dataclass(frozen=True)
class StopEvent:
    kind: StopKind
    threshold: float
    t_index: int
    trigger_value: float
    level: int | None = None


@dataclass
class DoublingLog:
    rho_times: list[int] = field(default_factory=list)
    levels: list[int] = field(default_factory=list)
    event_kinds: list[DoublingKind] = field(default_factory=list)
    qv_at_rho: list[float] = field(default_factory=list)

    @property
    def started(self) -> bool:
        return bool(self.levels)

    @property
    def closed(self) -> bool:
        return bool(self.event_kinds) and self.event_kinds[-1] == "sentinel"

    @property
    def current_level(self) -> int:
        return self.levels[-1] if self.levels else 0

    def append(self, t_index: int, level: int, kind: DoublingKind, qv: float = 0.0) -> None:
        self.rho_times.append(int(t_index))
        self.levels.append(int(level))
        self.event_kinds.append(kind)
        self.qv_at_rho.append(float(qv))

    def count(self, kind: DoublingKind) -> int:
        return sum(1 for k in self.event_kinds if k == kind)


@dataclass
class StopEventLog:
    events: list[StopEvent] = field(default_factory=list)
    doubling: DoublingLog = field(default_factory=DoublingLog)
    last_index: int = -1

    def first(self, kind: StopKind, threshold: float | None = None) -> StopEvent | None:
        for event in self.events:
            if event.kind == kind and (threshold is None or event.threshold == threshold):
                return event
        return None

    def fired(self, kind: StopKind, threshold: float) -> bool:
        return self.first(kind, threshold) is not None
