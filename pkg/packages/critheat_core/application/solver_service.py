"""Mild-form stepping of u, v and v_minus on the periodic grid."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from packages.critheat_core.application.coefficient_service import (
    ClampedDrift,
    clamp_sigma,
    sigma_function,
    sigma_minus,
)
from packages.critheat_core.application.heat_kernel_service import semigroup_multiplier
from packages.critheat_core.application.noise_service import NoiseStream
from packages.critheat_core.application.trajectory_engine import (
    CoupledBatchResult,
    CoupledPlan,
    RunPlan,
    StepCoefficients,
    advance,
    run_batch,
    run_coupled_batch,
)
from packages.critheat_core.domain.errors import ConfigError, StateError
from packages.critheat_core.domain.models import (
    CoupledState,
    DriftSpec,
    Field,
    GridSpec,
    HeatStep,
    NoiseSlice,
    SigmaFamily,
    StopEventLog,
    TrajectoryState,
)
from packages.critheat_core.infrastructure.binary_dump import DumpHeader, write_dump
from packages.critheat_core.infrastructure.rng import substream

logger = logging.getLogger(__name__)

InitialKind = Literal["constant", "cosine", "random_trig"]
Equation = Literal["u", "v", "v_minus"]

TOL_ORDER = 1e-6


def initial_field(
    kind: InitialKind,
    N: int,
    level: float = 1.0,
    amplitude: float = 0.5,
    modes: int = 4,
    seed: int = 0,
) -> Field:
    """Bounded periodic initial data; the default u(0) = 1."""
    x = -np.pi + (2.0 * np.pi / N) * np.arange(N)
    if kind == "constant":
        return Field(np.full(N, float(level)))
    if kind == "cosine":
        return Field(level + amplitude * np.cos(x))
    if kind == "random_trig":
        if modes < 1 or modes >= N // 2:
            raise ConfigError(f"modes must lie in [1, {N // 2 - 1}]", "initial.modes")
        # stream 1 keeps the initial data off the replica noise streams
        rng = substream(seed, 0, stream=1)
        k = np.arange(1, modes + 1)
        a = rng.standard_normal(modes) * amplitude / k
        b = rng.standard_normal(modes) * amplitude / k
        values = level + a @ np.cos(np.outer(k, x)) + b @ np.sin(np.outer(k, x))
        return Field(values)
    raise ConfigError(f"unknown initial kind {kind!r}", "initial.kind")


def lp_norm(fld: Field, p: float) -> float:
    if math.isinf(p):
        return fld.linf()
    return float((np.sum(np.abs(fld.values) ** p) * fld.dx) ** (1.0 / p))


def equation_coefficients(
    equation: Equation,
    family: SigmaFamily,
    drift: DriftSpec | None,
    clamp_n: float | None = None,
) -> StepCoefficients:
    """Coefficients of the u, v or v_minus equation.

    u has no drift. v and v_minus carry f_eps when `drift` is given. v_minus uses
    sigma(-.) and is driven by the reflected increments -dW, which is the coupling
    under which -v_minus <= u can hold pathwise.
    """
    sigma = None
    if not family.is_zero:
        sigma = clamp_sigma(family, clamp_n) if clamp_n is not None else sigma_function(family)
    f = ClampedDrift(drift.alpha, drift.epsilon_clamp) if drift is not None else None
    if equation == "u":
        return StepCoefficients(sigma=sigma)
    if equation == "v":
        return StepCoefficients(sigma=sigma, drift=f)
    return StepCoefficients(
        sigma=sigma_minus(sigma) if sigma is not None else None, drift=f, noise_sign=-1.0
    )


def step(
    state: TrajectoryState, slc: NoiseSlice, coefficients: StepCoefficients, dt: float
) -> TrajectoryState:
    """One exponential-Euler step of the mild form."""
    fld = state.field
    if not fld.is_finite:
        raise StateError(f"non-finite field at t_index {state.t_index}")
    if slc.N != fld.N:
        raise StateError(f"noise slice has {slc.N} cells, field has {fld.N}")
    values, dq = advance(
        fld.values, slc.increments, coefficients, dt, fld.dx, semigroup_multiplier(fld.N, dt)
    )
    new = Field(values)
    exploded = not new.is_finite
    if exploded:
        logger.warning("numerical_explosion", extra={"event": "explosion"})
    return TrajectoryState(
        t_index=state.t_index + 1,
        field=new,
        l1=new.l1(),
        linf=new.linf(),
        minimum=new.minimum(),
        qv_accum=state.qv_accum + float(dq),
        exploded=exploded,
    )


@dataclass(frozen=True)
class TrajectorySeries:
    """Strided (t, l1, linf, qv_accum, events_fired) up to the stop index."""

    t: np.ndarray
    t_index: np.ndarray
    l1: np.ndarray
    linf: np.ndarray
    qv_accum: np.ndarray
    events_fired: np.ndarray

    def rows(self) -> list[tuple[float, float, float, float, int]]:
        return [
            (float(t), float(a), float(b), float(c), int(e))
            for t, a, b, c, e in zip(
                self.t, self.l1, self.linf, self.qv_accum, self.events_fired, strict=True
            )
        ]


@dataclass(frozen=True)
class SimulationResult:
    series: TrajectorySeries
    log: StopEventLog
    final: TrajectoryState
    stop_index: int
    snapshots: dict[int, np.ndarray]


def _series_for(
    plan: RunPlan, index: np.ndarray, values: tuple[np.ndarray, ...], stop: int, log: StopEventLog
) -> TrajectorySeries:
    l1, linf, qv = values
    keep = index <= stop
    idx = index[keep]
    l1, linf, qv = l1[keep], linf[keep], qv[keep]
    if idx[-1] != stop:
        # the frozen values after `stop` are the values at `stop`
        later = np.flatnonzero(index > stop)
        j = later[0] if later.size else len(index) - 1
        idx = np.append(idx, stop)
        l1 = np.append(l1, values[0][j])
        linf = np.append(linf, values[1][j])
        qv = np.append(qv, values[2][j])
    fired_at = np.array([event.t_index for event in log.events], dtype=np.int64)
    counts = np.searchsorted(np.sort(fired_at), idx, side="right")
    return TrajectorySeries(
        t=idx * plan.grid.dt,
        t_index=idx,
        l1=l1,
        linf=linf,
        qv_accum=qv,
        events_fired=counts,
    )


def validate_start(plan: RunPlan, initial: Field) -> None:
    if initial.N != plan.grid.N:
        raise ConfigError(
            f"initial field has {initial.N} points, grid has {plan.grid.N}", "grid.N"
        )
    if "tau_inf" in plan.terminal and plan.trackers.epsilon >= initial.minimum():
        raise ConfigError(
            f"epsilon {plan.trackers.epsilon} must lie below min v(0) = {initial.minimum()}",
            "clamp.epsilon",
        )


def simulate(
    plan: RunPlan, initial: Field, seed: int, replica: int = 0, substeps: int = 1
) -> SimulationResult:
    """Run one trajectory to the horizon or its first terminal stopping event.

    Identical to replica `replica` of an ensemble with master seed `seed`.
    """
    validate_start(plan, initial)
    stream = NoiseStream.for_replica(plan.grid, seed, replica, substeps=substeps)
    batch = run_batch(plan, initial.values, [stream])
    stop = int(batch.stop_index[0])
    log = batch.logs[0]
    series = _series_for(
        plan, batch.record_index, (batch.l1[0], batch.linf[0], batch.qv[0]), stop, log
    )
    final_field = Field(batch.final[0])
    final = TrajectoryState(
        t_index=stop,
        field=final_field,
        l1=final_field.l1(),
        linf=final_field.linf(),
        minimum=final_field.minimum(),
        qv_accum=float(batch.qv_final[0]),
        exploded=batch.stop_kind[0] == "explosion",
    )
    snapshots = {n: frame[0].copy() for n, frame in batch.snapshots.items()}
    return SimulationResult(
        series=series, log=log, final=final, stop_index=stop, snapshots=snapshots
    )


def dump_snapshots(
    path: str | Path, grid: GridSpec, seed: int, snapshots: dict[int, np.ndarray]
) -> Path:
    """Field dumps in the noise-dump format; rows follow increasing t_index."""
    rows = np.empty((0, grid.N))
    if snapshots:
        rows = np.stack([snapshots[n] for n in sorted(snapshots)])
    header = DumpHeader(N=grid.N, dt=grid.dt, steps=grid.steps, seed=seed)
    return write_dump(path, header, rows)


@dataclass(frozen=True)
class ComparisonReport:
    violation_steps: int
    checked_steps: int
    max_violation: float
    first_violation: int | None
    min_gap: float
    exploded: bool
    tol_order: float = TOL_ORDER

    @property
    def violation_rate(self) -> float:
        return self.violation_steps / max(self.checked_steps, 1)


@dataclass(frozen=True)
class CoupledResult:
    final: CoupledState
    report: ComparisonReport


def coupled_plan(
    grid: GridSpec,
    family: SigmaFamily,
    drift: DriftSpec | None,
    clamp_n: float | None = None,
    n_max: float = 1e6,
    tol_order: float = TOL_ORDER,
    noise_block: int = 64,
    heat_step: HeatStep = "monotone",
) -> CoupledPlan:
    return CoupledPlan(
        grid=grid,
        u=equation_coefficients("u", family, None, clamp_n),
        v=equation_coefficients("v", family, drift, clamp_n),
        v_minus=equation_coefficients("v_minus", family, drift, clamp_n),
        n_max=n_max,
        tol_order=tol_order,
        noise_block=noise_block,
        heat_step=heat_step,
    )


def comparison_report(batch: CoupledBatchResult, r: int, tol_order: float) -> ComparisonReport:
    first = int(batch.first_violation[r])
    return ComparisonReport(
        violation_steps=int(batch.violation_steps[r]),
        checked_steps=int(batch.checked_steps[r]),
        max_violation=float(batch.max_violation[r]),
        first_violation=first if first >= 0 else None,
        min_gap=float(batch.min_gap[r]),
        exploded=bool(batch.exploded[r]),
        tol_order=tol_order,
    )


def simulate_coupled(
    plan: CoupledPlan, initial_u: Field, seed: int, replica: int = 0, substeps: int = 1
) -> CoupledResult:
    """u, v and v_minus on one noise stream, with the ordering violations counted."""
    if initial_u.N != plan.grid.N:
        raise ConfigError("initial field and grid disagree on N", "grid.N")
    stream = NoiseStream.for_replica(plan.grid, seed, replica, substeps=substeps)
    batch = run_coupled_batch(plan, initial_u.values, [stream])
    stop = int(batch.stop_index[0])

    def state(values: np.ndarray) -> TrajectoryState:
        fld = Field(values)
        return TrajectoryState(
            t_index=stop, field=fld, l1=fld.l1(), linf=fld.linf(), minimum=fld.minimum()
        )

    final = CoupledState(
        u=state(batch.u[0]), v=state(batch.v[0]), v_minus=state(batch.v_minus[0])
    )
    return CoupledResult(final=final, report=comparison_report(batch, 0, plan.tol_order))
