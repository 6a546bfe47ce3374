from __future__ import annotations

import math
from datetime import datetime, timezone

UTC = timezone.utc
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from packages.critheat_core.application.convolution_service import WeightScheme
from packages.critheat_core.application.solver_service import (
    InitialKind,
    equation_coefficients,
    initial_field,
)
from packages.critheat_core.application.trajectory_engine import RunPlan, horizon_steps
from packages.critheat_core.domain.models import (
    ConvolutionSpec,
    DriftSpec,
    GridSpec,
    HeatStep,
    PhiKind,
    SigmaFamily,
    SigmaKind,
    StopKind,
    TrackerSet,
)
from packages.critheat_core.domain.models import Field as GridField

Subcommand = Literal[
    "verify-kernel",
    "verify-noise",
    "simulate",
    "couple",
    "convolve",
    "verify-moment",
    "verify-l1",
    "sweep-gamma",
    "report",
]
VerdictStatus = Literal["pass", "fail", "inconclusive", "vacuous"]
Equation = Literal["u", "v"]

SUBCOMMANDS: tuple[str, ...] = (
    "verify-kernel",
    "verify-noise",
    "simulate",
    "couple",
    "convolve",
    "verify-moment",
    "verify-l1",
    "sweep-gamma",
    "report",
)


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridSection(StrictModel):
    N: int = 64
    dt: float = Field(default=1e-3, gt=0)
    T: float = Field(default=0.5, gt=0)

    @field_validator("N")
    @classmethod
    def power_of_two(cls, value: int) -> int:
        if value < 8 or value & (value - 1):
            raise ValueError("N must be a power of two >= 8")
        return value

    @model_validator(mode="after")
    def whole_steps(self) -> GridSection:
        horizon_steps(self.T, self.dt)
        return self

    @property
    def steps(self) -> int:
        return horizon_steps(self.T, self.dt)

    def spec(self) -> GridSpec:
        return GridSpec(N=self.N, dt=self.dt, steps=self.steps)


class SigmaSection(StrictModel):
    kind: SigmaKind = "critical_power"
    c: float = Field(default=1.0, ge=0)
    gamma: float = Field(default=1.5, gt=0)

    def family(self) -> SigmaFamily:
        return SigmaFamily(kind=self.kind, c=self.c, gamma=self.gamma)


class DriftSection(StrictModel):
    enabled: bool = True
    alpha: float = 4.0

    @field_validator("alpha")
    @classmethod
    def alpha_above_three(cls, value: float) -> float:
        if not value > 3:
            raise ValueError(f"alpha must be > 3, got {value}")
        return value


class ClampSection(StrictModel):
    epsilon: float = Field(default=0.5, gt=0, lt=1)
    n: float | None = Field(default=None, gt=0)


class ThresholdsSection(StrictModel):
    M: float = Field(default=1000.0, gt=0)
    n_levels: list[float] = Field(default_factory=lambda: [10.0, 100.0])
    n_max: float = Field(default=1e6, gt=1)
    stop_on: list[StopKind] = Field(default_factory=lambda: ["tau_inf", "explosion"])

    @model_validator(mode="after")
    def levels_inside(self) -> ThresholdsSection:
        for n in self.n_levels:
            if not 1 < n <= self.n_max:
                raise ValueError(f"n_levels entries must lie in (1, n_max], got {n}")
        return self


class SchemeSection(StrictModel):
    stride: int = Field(default=1, ge=1)
    noise_block: int = Field(default=64, ge=1)
    substeps: int = Field(default=1, ge=1)
    tol_order: float = Field(default=1e-6, gt=0)
    snapshot_every: int = Field(default=0, ge=0)
    coupled_heat_step: HeatStep = "monotone"


class InitialSection(StrictModel):
    kind: InitialKind = "constant"
    level: float = 1.0
    amplitude: float = 0.5
    modes: int = Field(default=4, ge=1)
    seed: int = Field(default=0, ge=0)


class EnsembleSection(StrictModel):
    replicas: int = Field(default=100, ge=1)
    master_seed: int = Field(default=0, ge=0, lt=2**64)
    workers: int | None = Field(default=None, ge=1)
    chunk_size: int = Field(default=32, ge=1)


class ExperimentSection(StrictModel):
    equation: Equation = "v"
    claims_critical: bool = True
    growth_constant: float | None = Field(default=None, gt=0)
    p: float = 8.0
    beta: float = 0.2
    phi_kind: PhiKind = "constant"
    phi_level: float = 1.0
    T_grid: list[float] = Field(default_factory=lambda: [0.1, 0.2, 0.4, 0.8])
    gamma_grid: list[float] = Field(default_factory=lambda: [1.0, 1.25, 1.5, 1.75, 2.0])
    eps_grid: list[float] = Field(default_factory=lambda: [0.5, 0.25, 0.1, 0.05])
    refinement_factor: int = Field(default=4, ge=2)
    factorization_levels: int = Field(default=3, ge=2)
    factorization_scheme: WeightScheme = "pair_exact"
    clamp_pairs: list[tuple[float, float, float, float]] = Field(
        default_factory=lambda: [(0.5, 10.0, 0.25, 100.0)]
    )
    noise_dump: bool = False

    @model_validator(mode="after")
    def convolution_parameters(self) -> ExperimentSection:
        if not self.p > 6:
            raise ValueError(f"p must be > 6, got {self.p}")
        lo = 3.0 / (2.0 * self.p)
        if not lo < self.beta < 0.25:
            raise ValueError(f"beta must lie in ({lo:.6g}, 0.25), got {self.beta}")
        if self.gamma_grid != sorted(self.gamma_grid):
            raise ValueError("gamma_grid must be sorted ascending")
        for eps1, n1, eps2, n2 in self.clamp_pairs:
            if not (eps2 < eps1 and n2 > n1):
                raise ValueError("clamp_pairs entries need eps2 < eps1 and n2 > n1")
        return self

    def convolution_spec(self, T: float) -> ConvolutionSpec:
        return ConvolutionSpec(
            p=self.p, beta=self.beta, T=T, phi_kind=self.phi_kind, phi_level=self.phi_level
        )


class SolverConfig(StrictModel):
    grid: GridSection = Field(default_factory=GridSection)
    sigma: SigmaSection = Field(default_factory=SigmaSection)
    drift: DriftSection = Field(default_factory=DriftSection)
    clamp: ClampSection = Field(default_factory=ClampSection)
    thresholds: ThresholdsSection = Field(default_factory=ThresholdsSection)
    scheme: SchemeSection = Field(default_factory=SchemeSection)
    initial: InitialSection = Field(default_factory=InitialSection)

    def drift_spec(self) -> DriftSpec | None:
        if not self.drift.enabled:
            return None
        return DriftSpec(alpha=self.drift.alpha, epsilon_clamp=self.clamp.epsilon)

    def tracker_set(self) -> TrackerSet:
        return TrackerSet(
            epsilon=self.clamp.epsilon,
            M=self.thresholds.M,
            n_levels=tuple(self.thresholds.n_levels),
            n_max=self.thresholds.n_max,
        )

    def initial_field(self) -> GridField:
        init = self.initial
        return initial_field(
            init.kind, self.grid.N, init.level, init.amplitude, init.modes, init.seed
        )

    def run_plan(self, equation: Equation = "v", grid: GridSpec | None = None) -> RunPlan:
        coefficients = equation_coefficients(
            equation, self.sigma.family(), self.drift_spec(), self.clamp.n
        )
        terminal = set(self.thresholds.stop_on) | {"explosion"}
        if equation == "u":
            # u may change sign; the floor does not stop it
            terminal.discard("tau_inf")
        return RunPlan(
            grid=grid or self.grid.spec(),
            coefficients=coefficients,
            trackers=self.tracker_set(),
            terminal=frozenset(terminal),
            stride=self.scheme.stride,
            noise_block=self.scheme.noise_block,
            snapshot_every=self.scheme.snapshot_every,
        )


class ExperimentDescriptor(StrictModel):
    ensemble: EnsembleSection = Field(default_factory=EnsembleSection)
    experiment: ExperimentSection = Field(default_factory=ExperimentSection)


class Verdict(BaseModel):
    verifier: str
    status: VerdictStatus
    statistic: float | None = None
    threshold: float | None = None
    margin: float | None = None
    tolerance: str = ""
    sample_size: int = 0
    details: dict[str, Any] = Field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status in ("pass", "vacuous")


class ReplicaSummary(BaseModel):
    replica: int
    seed: int
    final_l1: float | None
    final_linf: float | None
    qv_accum: float
    qv_stopped: float
    sup_l1: float
    stop_index: int
    stop_kind: StopKind | None = None
    events: int = 0
    doubling_count: int = 0
    max_level: int = 0


class EnsembleReport(BaseModel):
    replicas: list[ReplicaSummary] = Field(default_factory=list)
    aggregates: dict[str, float | None] = Field(default_factory=dict)
    verdicts: list[Verdict] = Field(default_factory=list)


class Provenance(BaseModel):
    timestamp: str = Field(
        default_factory=lambda: datetime.now(UTC).isoformat(timespec="seconds")
    )
    versions: dict[str, str]


class RunManifest(BaseModel):
    run_id: str
    subcommand: Subcommand
    tool_version: str
    master_seed: int
    replicas: int
    config: dict[str, Any]
    started_at: str
    finished_at: str
    files: dict[str, str] = Field(default_factory=dict)
    exit_code: int = 0


class RunRequest(BaseModel):
    """HTTP body for POST /runs; `config` uses the TOML section layout."""

    subcommand: Subcommand
    config: dict[str, Any] = Field(default_factory=dict)
    seed: int | None = None
    replicas: int | None = None
    workers: int | None = None
    overrides: list[str] = Field(default_factory=list)


class RunResponse(BaseModel):
    run_id: str
    exit_code: int
    verdicts: list[Verdict] = Field(default_factory=list)
    manifest: RunManifest
    provenance: Provenance


def finite_or_none(value: float) -> float | None:
    return float(value) if math.isfinite(value) else None

