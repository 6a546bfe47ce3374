"""Batched exponential-Euler stepping for (replicas, N) fields.

One replica is one row; every row reads its own NoiseStream, so a row's path does not
depend on which other rows share the batch.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from packages.critheat_core.application.heat_kernel_service import (
    apply_multiplier,
    semigroup_multiplier,
    step_multiplier,
)
from packages.critheat_core.application.noise_service import NoiseStream
from packages.critheat_core.application.stopping_service import BatchTrackers
from packages.critheat_core.domain.errors import DomainError
from packages.critheat_core.domain.models import (
    Coefficient,
    GridSpec,
    HeatStep,
    StopEventLog,
    StopKind,
    TrackerSet,
)

# precedence when several terminal events fire on the same index
_STOP_PRECEDENCE: tuple[StopKind, ...] = ("explosion", "tau_inf", "tau_l1", "tau_linf")


@dataclass(frozen=True)
class StepCoefficients:
    """Coefficients of one equation. `sigma=None` is the noise-free case."""

    sigma: Coefficient | None = None
    drift: Coefficient | None = None
    noise_sign: float = 1.0


def advance(
    values: np.ndarray,
    increments: np.ndarray,
    coefficients: StepCoefficients,
    dt: float,
    dx: float,
    multiplier: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """One post-smoothing step and the Ito quadratic-variation increment.

    new = S(dt) u + dt f(u) + sign * sigma(u) dW / dx, and the increment is
    sum_j sigma(u_j)^2 dt dx evaluated at the pre-step field.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        out = apply_multiplier(values, multiplier)
        if coefficients.drift is not None:
            out = out + dt * coefficients.drift(values)
        if coefficients.sigma is None:
            return out, np.zeros(values.shape[:-1])
        s = coefficients.sigma(values)
        out = out + coefficients.noise_sign * s * (increments / dx)
        return out, np.sum(s * s, axis=-1) * (dt * dx)


def field_stats(values: np.ndarray, dx: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(l1, linf, min) along the last axis."""
    with np.errstate(over="ignore", invalid="ignore"):
        magnitude = np.abs(values)
        l1 = np.sum(magnitude, axis=-1) * dx
        return l1, np.max(magnitude, axis=-1), np.min(values, axis=-1)


def record_indices(steps: int, stride: int) -> np.ndarray:
    if stride < 1:
        raise DomainError("stride must be >= 1")
    return np.unique(np.append(np.arange(0, steps + 1, stride), steps))


@dataclass(frozen=True)
class RunPlan:
    grid: GridSpec
    coefficients: StepCoefficients
    trackers: TrackerSet
    terminal: frozenset[StopKind] = frozenset({"explosion"})
    stride: int = 1
    noise_block: int = 64
    snapshot_every: int = 0


@dataclass
class BatchResult:
    record_index: np.ndarray
    l1: np.ndarray
    linf: np.ndarray
    minimum: np.ndarray
    qv: np.ndarray
    final: np.ndarray
    stop_index: np.ndarray
    stop_kind: list[StopKind | None]
    sup_l1: np.ndarray
    running_min: np.ndarray
    qv_final: np.ndarray
    qv_at_tau_l1: np.ndarray
    logs: list[StopEventLog]
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def replicas(self) -> int:
        return int(self.final.shape[0])

    @property
    def exploded(self) -> np.ndarray:
        return np.array([kind == "explosion" for kind in self.stop_kind])

    @property
    def qv_stopped(self) -> np.ndarray:
        """qv at the first of tau_l1, the terminal stop, or the horizon."""
        return np.where(np.isnan(self.qv_at_tau_l1), self.qv_final, self.qv_at_tau_l1)


def _draw(streams: Sequence[NoiseStream], count: int) -> np.ndarray:
    return np.stack([stream.take(count) for stream in streams])


def run_batch(plan: RunPlan, initial: np.ndarray, streams: Sequence[NoiseStream]) -> BatchResult:
    """Step every replica to the horizon or to its first terminal event."""
    grid = plan.grid
    R = len(streams)
    if R < 1:
        raise DomainError("run_batch needs at least one noise stream")
    values = np.array(np.broadcast_to(np.asarray(initial, dtype=np.float64), (R, grid.N)))
    multiplier = semigroup_multiplier(grid.N, grid.dt)
    trackers = BatchTrackers(plan.trackers, R)

    rec = record_indices(grid.steps, plan.stride)
    rec_pos = {int(idx): j for j, idx in enumerate(rec)}
    K = rec.size
    out_l1 = np.empty((R, K))
    out_linf = np.empty((R, K))
    out_min = np.empty((R, K))
    out_qv = np.empty((R, K))
    outputs = (out_l1, out_linf, out_min, out_qv)
    snapshots: dict[int, np.ndarray] = {}

    qv = np.zeros(R)
    alive = np.ones(R, dtype=bool)
    stop_index = np.full(R, grid.steps, dtype=np.int64)
    stop_kind: list[StopKind | None] = [None] * R
    sup_l1 = np.full(R, -np.inf)
    running_min = np.full(R, np.inf)
    qv_at_tau_l1 = np.full(R, np.nan)

    noise = np.empty((R, 0, grid.N))
    cursor = 0
    last_col = -1
    for n in range(grid.steps + 1):
        l1, linf, minimum = field_stats(values, grid.dx)
        fired = trackers.observe(n, l1, linf, minimum, qv, alive)
        sup_l1 = np.where(alive, np.fmax(sup_l1, l1), sup_l1)
        running_min = np.where(alive, np.fmin(running_min, minimum), running_min)
        qv_at_tau_l1[fired["tau_l1"]] = qv[fired["tau_l1"]]

        if n in rec_pos:
            col = rec_pos[n]
            for out, current in zip(outputs, (l1, linf, minimum, qv), strict=True):
                out[:, col] = current
            last_col = col
        if plan.snapshot_every and n % plan.snapshot_every == 0:
            snapshots[n] = values.copy()

        for kind in _STOP_PRECEDENCE:
            if kind not in plan.terminal and kind != "explosion":
                continue
            for r in np.flatnonzero(alive & fired[kind]):
                stop_index[r] = n
                stop_kind[r] = kind
            alive &= ~fired[kind]
        if n == grid.steps or not alive.any():
            break

        if cursor == noise.shape[1]:
            noise = _draw(streams, min(plan.noise_block, grid.steps - n))
            cursor = 0
        new_values, dq = advance(
            values, noise[:, cursor], plan.coefficients, grid.dt, grid.dx, multiplier
        )
        cursor += 1
        values = np.where(alive[:, None], new_values, values)
        qv = np.where(alive, qv + dq, qv)

    # every replica is frozen from here on
    for out, current in zip(outputs, (l1, linf, minimum, qv), strict=True):
        out[:, last_col + 1 :] = current[:, None]
    trackers.close(stop_index, qv)
    logs = [trackers.event_log(r, last_index=int(stop_index[r])) for r in range(R)]
    return BatchResult(
        record_index=rec,
        l1=out_l1,
        linf=out_linf,
        minimum=out_min,
        qv=out_qv,
        final=values,
        stop_index=stop_index,
        stop_kind=stop_kind,
        sup_l1=sup_l1,
        running_min=running_min,
        qv_final=qv,
        qv_at_tau_l1=qv_at_tau_l1,
        logs=logs,
        snapshots=snapshots,
    )


@dataclass(frozen=True)
class CoupledPlan:
    grid: GridSpec
    u: StepCoefficients
    v: StepCoefficients
    v_minus: StepCoefficients
    n_max: float = 1e6
    tol_order: float = 1e-6
    noise_block: int = 64
    heat_step: HeatStep = "monotone"


@dataclass
class CoupledBatchResult:
    u: np.ndarray
    v: np.ndarray
    v_minus: np.ndarray
    stop_index: np.ndarray
    exploded: np.ndarray
    violation_steps: np.ndarray
    max_violation: np.ndarray
    first_violation: np.ndarray
    min_gap: np.ndarray
    checked_steps: np.ndarray

    @property
    def violation_rate(self) -> np.ndarray:
        """Per replica: fraction of checked indices with an ordering violation."""
        return self.violation_steps / np.maximum(self.checked_steps, 1)


def ordering_gap(u: np.ndarray, v: np.ndarray, v_minus: np.ndarray) -> np.ndarray:
    """min over x of min(v - u, u + v_minus), per replica."""
    with np.errstate(invalid="ignore", over="ignore"):
        return np.min(np.minimum(v - u, u + v_minus), axis=-1)


def run_coupled_batch(
    plan: CoupledPlan, initial_u: np.ndarray, streams: Sequence[NoiseStream]
) -> CoupledBatchResult:
    """Advance u, v and v_minus in lockstep on shared noise.

    v(0) = max(u(0), 1) and v_minus(0) = max(-u(0), 1); v_minus reads the reflected
    increments -dW through `noise_sign` in its coefficients. All three use the heat step
    named by `plan.heat_step`; the default `monotone` step keeps v - u and u + v_minus
    nonnegative whenever the noise terms cancel.
    """
    grid = plan.grid
    R = len(streams)
    u = np.array(np.broadcast_to(np.asarray(initial_u, dtype=np.float64), (R, grid.N)))
    v = np.maximum(u, 1.0)
    vm = np.maximum(-u, 1.0)
    multiplier = step_multiplier(grid.N, grid.dt, plan.heat_step)

    alive = np.ones(R, dtype=bool)
    stop_index = np.full(R, grid.steps, dtype=np.int64)
    exploded = np.zeros(R, dtype=bool)
    violation_steps = np.zeros(R, dtype=np.int64)
    checked = np.zeros(R, dtype=np.int64)
    max_violation = np.zeros(R)
    first_violation = np.full(R, -1, dtype=np.int64)
    min_gap = np.full(R, np.inf)

    noise = np.empty((R, 0, grid.N))
    cursor = 0
    for n in range(grid.steps + 1):
        with np.errstate(invalid="ignore", over="ignore"):
            sup = np.max(np.abs(np.stack([u, v, vm])), axis=(0, 2))
        blown = alive & (~np.isfinite(sup) | (sup >= plan.n_max))
        exploded |= blown
        stop_index[blown] = n
        alive &= ~blown

        gap = ordering_gap(u, v, vm)
        check = alive
        checked += check
        min_gap = np.where(check, np.fmin(min_gap, gap), min_gap)
        violated = check & (gap < -plan.tol_order)
        violation_steps += violated
        max_violation = np.where(violated, np.fmax(max_violation, -gap), max_violation)
        first_violation = np.where(violated & (first_violation < 0), n, first_violation)

        if n == grid.steps or not alive.any():
            break
        if cursor == noise.shape[1]:
            noise = _draw(streams, min(plan.noise_block, grid.steps - n))
            cursor = 0
        inc = noise[:, cursor]
        cursor += 1
        keep = alive[:, None]
        u_new, _ = advance(u, inc, plan.u, grid.dt, grid.dx, multiplier)
        v_new, _ = advance(v, inc, plan.v, grid.dt, grid.dx, multiplier)
        vm_new, _ = advance(vm, inc, plan.v_minus, grid.dt, grid.dx, multiplier)
        u = np.where(keep, u_new, u)
        v = np.where(keep, v_new, v)
        vm = np.where(keep, vm_new, vm)

    return CoupledBatchResult(
        u=u,
        v=v,
        v_minus=vm,
        stop_index=stop_index,
        exploded=exploded,
        violation_steps=violation_steps,
        max_violation=max_violation,
        first_violation=first_violation,
        min_gap=min_gap,
        checked_steps=checked,
    )


def horizon_steps(T: float, dt: float) -> int:
    steps = round(T / dt)
    if steps < 1 or not math.isclose(steps * dt, T, rel_tol=1e-9, abs_tol=1e-15):
        raise DomainError(f"horizon T={T} is not a whole number of steps of dt={dt}")
    return int(steps)
