"""Replicated runs over fixed replica chunks.

Replica r always reads substream (master_seed, r) and chunk boundaries depend only on
(replicas, chunk_size), so neither the worker count nor the completion order of the
chunks can change a number in the output.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import TypeVar

import numpy as np

from packages.critheat_core.application.convolution_service import convolution_statistics
from packages.critheat_core.application.heat_kernel_service import step_multiplier
from packages.critheat_core.application.noise_service import NoiseStream
from packages.critheat_core.application.solver_service import (
    coupled_plan,
    equation_coefficients,
    validate_start,
)
from packages.critheat_core.application.stopping_service import doubling_statistics
from packages.critheat_core.application.trajectory_engine import (
    BatchResult,
    CoupledBatchResult,
    advance,
    field_stats,
    horizon_steps,
    run_batch,
    run_coupled_batch,
)
from packages.critheat_core.domain.errors import ConfigError
from packages.critheat_core.domain.models import (
    ConvolutionSpec,
    DriftSpec,
    GridSpec,
    StopEventLog,
    StopKind,
)
from packages.critheat_lab.domain.models import (
    EnsembleReport,
    Equation,
    ReplicaSummary,
    SolverConfig,
    Verdict,
    finite_or_none,
)

logger = logging.getLogger(__name__)

T = TypeVar("T")


def chunk_bounds(replicas: int, chunk_size: int) -> list[tuple[int, int]]:
    if replicas < 1:
        raise ConfigError(f"replicas must be >= 1, got {replicas}", "ensemble.replicas")
    if chunk_size < 1:
        raise ConfigError("chunk_size must be >= 1", "ensemble.chunk_size")
    return [(lo, min(lo + chunk_size, replicas)) for lo in range(0, replicas, chunk_size)]


def gather_chunks(
    func: Callable[[tuple[int, int]], T], chunks: Sequence[tuple[int, int]], workers: int | None
) -> list[T]:
    """Map `func` over chunks; results come back in chunk order whatever the pool does."""
    if (workers is not None and workers <= 1) or len(chunks) == 1:
        return [func(chunk) for chunk in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, chunks))


def _streams(
    grid: GridSpec, master_seed: int, lo: int, hi: int, substeps: int
) -> list[NoiseStream]:
    return [NoiseStream.for_replica(grid, master_seed, r, substeps=substeps) for r in range(lo, hi)]


def mean_and_se(values: np.ndarray) -> tuple[float, float]:
    data = np.asarray(values, dtype=np.float64)
    if data.size == 0:
        return math.nan, math.nan
    mean = float(np.mean(data))
    if data.size < 2:
        return mean, 0.0
    return mean, float(np.std(data, ddof=1) / math.sqrt(data.size))


@dataclass
class EnsembleRun:
    """Per-replica arrays of one ensemble, in replica order."""

    grid: GridSpec
    equation: Equation
    master_seed: int
    initial_l1: float
    record_index: np.ndarray
    l1: np.ndarray
    linf: np.ndarray
    qv: np.ndarray
    stop_index: np.ndarray
    stop_kind: list[StopKind | None]
    sup_l1: np.ndarray
    running_min: np.ndarray
    qv_final: np.ndarray
    qv_stopped: np.ndarray
    final_l1: np.ndarray
    final_linf: np.ndarray
    logs: list[StopEventLog]

    @property
    def replicas(self) -> int:
        return len(self.logs)

    @property
    def t(self) -> np.ndarray:
        return self.record_index * self.grid.dt

    @property
    def exploded(self) -> np.ndarray:
        return np.array([kind == "explosion" for kind in self.stop_kind], dtype=bool)

    def summaries(self) -> list[ReplicaSummary]:
        out = []
        for r, log in enumerate(self.logs):
            doubling = log.doubling
            out.append(
                ReplicaSummary(
                    replica=r,
                    seed=self.master_seed,
                    final_l1=finite_or_none(float(self.final_l1[r])),
                    final_linf=finite_or_none(float(self.final_linf[r])),
                    qv_accum=float(self.qv_final[r]),
                    qv_stopped=float(self.qv_stopped[r]),
                    sup_l1=float(self.sup_l1[r]),
                    stop_index=int(self.stop_index[r]),
                    stop_kind=self.stop_kind[r],
                    events=len(log.events),
                    doubling_count=doubling.count("double"),
                    max_level=max(doubling.levels, default=0),
                )
            )
        return out

    def aggregates(self) -> dict[str, float | None]:
        finite = np.isfinite(self.final_l1)
        l1_mean, l1_se = mean_and_se(self.final_l1[finite])
        qv_mean, qv_se = mean_and_se(self.qv_stopped)
        sup_mean, sup_se = mean_and_se(self.sup_l1)
        stats = doubling_statistics(log.doubling for log in self.logs)
        return {
            "replicas": float(self.replicas),
            "final_l1_mean": finite_or_none(l1_mean),
            "final_l1_se": finite_or_none(l1_se),
            "qv_stopped_mean": finite_or_none(qv_mean),
            "qv_stopped_se": finite_or_none(qv_se),
            "sup_l1_mean": finite_or_none(sup_mean),
            "sup_l1_se": finite_or_none(sup_se),
            "explosion_rate": float(np.mean(self.exploded)),
            "doubling_total": float(stats.total_doubles),
            "doubling_max_level": float(stats.max_level),
        }

    def report(self, verdicts: Sequence[Verdict] = ()) -> EnsembleReport:
        return EnsembleReport(
            replicas=self.summaries(), aggregates=self.aggregates(), verdicts=list(verdicts)
        )


def _merge(
    grid: GridSpec, equation: Equation, seed: int, initial_l1: float, batches: list[BatchResult]
) -> EnsembleRun:
    final = np.concatenate([b.final for b in batches])
    final_l1, final_linf, _ = field_stats(final, grid.dx)
    return EnsembleRun(
        grid=grid,
        equation=equation,
        master_seed=seed,
        initial_l1=initial_l1,
        record_index=batches[0].record_index,
        l1=np.concatenate([b.l1 for b in batches]),
        linf=np.concatenate([b.linf for b in batches]),
        qv=np.concatenate([b.qv for b in batches]),
        stop_index=np.concatenate([b.stop_index for b in batches]),
        stop_kind=[kind for b in batches for kind in b.stop_kind],
        sup_l1=np.concatenate([b.sup_l1 for b in batches]),
        running_min=np.concatenate([b.running_min for b in batches]),
        qv_final=np.concatenate([b.qv_final for b in batches]),
        qv_stopped=np.concatenate([b.qv_stopped for b in batches]),
        final_l1=final_l1,
        final_linf=final_linf,
        logs=[log for b in batches for log in b.logs],
    )


def run_ensemble(
    config: SolverConfig,
    replicas: int,
    master_seed: int,
    workers: int | None = None,
    chunk_size: int = 32,
    equation: Equation = "v",
    terminal: frozenset[StopKind] | None = None,
) -> EnsembleRun:
    """Replica r is `simulate(plan, initial, master_seed, replica=r)`."""
    chunks = chunk_bounds(replicas, chunk_size)
    plan = config.run_plan(equation)
    if terminal is not None:
        plan = replace(plan, terminal=terminal | {"explosion"})
    initial = config.initial_field()
    validate_start(plan, initial)
    substeps = config.scheme.substeps

    def run_chunk(bounds: tuple[int, int]) -> BatchResult:
        lo, hi = bounds
        return run_batch(plan, initial.values, _streams(plan.grid, master_seed, lo, hi, substeps))

    batches = gather_chunks(run_chunk, chunks, workers)
    run = _merge(plan.grid, equation, master_seed, initial.l1(), batches)
    logger.info(
        "ensemble_completed",
        extra={
            "event": "ensemble",
            "replicas": replicas,
            "workers": workers,
            "seed": master_seed,
        },
    )
    return run


@dataclass
class CoupledEnsemble:
    grid: GridSpec
    violation_steps: np.ndarray
    checked_steps: np.ndarray
    max_violation: np.ndarray
    first_violation: np.ndarray
    min_gap: np.ndarray
    exploded: np.ndarray
    stop_index: np.ndarray

    @property
    def replicas(self) -> int:
        return int(self.violation_steps.shape[0])

    @property
    def violation_rate(self) -> float:
        """Pooled fraction of checked (replica, index) pairs with an ordering violation."""
        return float(np.sum(self.violation_steps) / max(int(np.sum(self.checked_steps)), 1))

    def rows(self) -> list[tuple[int, int, int, float, int, float, int]]:
        return [
            (
                r,
                int(self.violation_steps[r]),
                int(self.checked_steps[r]),
                float(self.max_violation[r]),
                int(self.first_violation[r]),
                float(self.min_gap[r]),
                int(self.exploded[r]),
            )
            for r in range(self.replicas)
        ]


def run_coupled_ensemble(
    config: SolverConfig,
    replicas: int,
    master_seed: int,
    workers: int | None = None,
    chunk_size: int = 32,
    grid: GridSpec | None = None,
    substeps: int = 1,
) -> CoupledEnsemble:
    """u, v and v_minus per replica on shared noise, ordering violations counted."""
    chunks = chunk_bounds(replicas, chunk_size)
    plan = coupled_plan(
        grid or config.grid.spec(),
        config.sigma.family(),
        config.drift_spec(),
        config.clamp.n,
        n_max=config.thresholds.n_max,
        tol_order=config.scheme.tol_order,
        noise_block=config.scheme.noise_block,
        heat_step=config.scheme.coupled_heat_step,
    )
    initial = config.initial_field()

    def run_chunk(bounds: tuple[int, int]) -> CoupledBatchResult:
        lo, hi = bounds
        return run_coupled_batch(
            plan, initial.values, _streams(plan.grid, master_seed, lo, hi, substeps)
        )

    batches = gather_chunks(run_chunk, chunks, workers)
    return CoupledEnsemble(
        grid=plan.grid,
        violation_steps=np.concatenate([b.violation_steps for b in batches]),
        checked_steps=np.concatenate([b.checked_steps for b in batches]),
        max_violation=np.concatenate([b.max_violation for b in batches]),
        first_violation=np.concatenate([b.first_violation for b in batches]),
        min_gap=np.concatenate([b.min_gap for b in batches]),
        exploded=np.concatenate([b.exploded for b in batches]),
        stop_index=np.concatenate([b.stop_index for b in batches]),
    )


@dataclass(frozen=True)
class RefinementPair:
    factor: int
    coarse: CoupledEnsemble
    fine: CoupledEnsemble


def comparison_refinement(
    config: SolverConfig,
    replicas: int,
    master_seed: int,
    factor: int = 4,
    workers: int | None = None,
    chunk_size: int = 32,
) -> RefinementPair:
    """Coupled runs at dt and dt/factor on matched noise.

    The coarse slices are sums of `factor` consecutive fine increments of the same stream.
    """
    if factor < 2:
        raise ConfigError("refinement factor must be >= 2", "experiment.refinement_factor")
    grid = config.grid.spec()
    coarse = run_coupled_ensemble(
        config, replicas, master_seed, workers, chunk_size, grid=grid, substeps=factor
    )
    fine = run_coupled_ensemble(
        config, replicas, master_seed, workers, chunk_size, grid=grid.refined(factor)
    )
    return RefinementPair(factor=factor, coarse=coarse, fine=fine)


@dataclass(frozen=True)
class PositivityRow:
    epsilon: float
    below: int
    replicas: int

    @property
    def fraction(self) -> float:
        return self.below / self.replicas


def positivity_sweep(
    config: SolverConfig,
    eps_grid: Sequence[float],
    replicas: int,
    master_seed: int,
    workers: int | None = None,
    chunk_size: int = 32,
) -> list[PositivityRow]:
    """Fraction of v-trajectories whose running minimum reaches each eps, floor stop off.

    The drift keeps its configured clamp; only the reported level changes.
    """
    run = run_ensemble(
        config, replicas, master_seed, workers, chunk_size, "v", terminal=frozenset()
    )
    rows = []
    for eps in sorted(eps_grid, reverse=True):
        below = int(np.sum(run.running_min <= eps))
        rows.append(PositivityRow(epsilon=float(eps), below=below, replicas=replicas))
    return rows


@dataclass(frozen=True)
class LocalizationResult:
    pair: tuple[float, float, float, float]
    max_diff: float
    replicas: int
    touched: int
    compared_steps: int


def _touches(
    fields: tuple[np.ndarray, np.ndarray, np.ndarray], eps: float, n: float
) -> np.ndarray:
    _, v, vm = fields
    with np.errstate(invalid="ignore"):
        hit = np.zeros(v.shape[0], dtype=bool)
        for values in fields:
            hit |= np.any(~np.isfinite(values) | (np.abs(values) >= n), axis=-1)
        hit |= np.any(v <= eps, axis=-1) | np.any(vm <= eps, axis=-1)
    return hit


def localization_consistency(
    config: SolverConfig,
    pairs: Sequence[tuple[float, float, float, float]],
    replicas: int,
    master_seed: int,
) -> list[LocalizationResult]:
    """Clamp levels (eps1, n1) and (eps2, n2) on one noise, compared until (eps1, n1) binds.

    A replica stops being compared after the first index at which any of its three
    level-1 fields reaches the n1 ceiling or v, v_minus reach the eps1 floor.
    """
    grid = config.grid.spec()
    family = config.sigma.family()
    multiplier = step_multiplier(grid.N, grid.dt, config.scheme.coupled_heat_step)
    u0 = config.initial_field().values
    out = []
    for pair in pairs:
        eps1, n1, eps2, n2 = pair
        levels = []
        for eps, n in ((eps1, n1), (eps2, n2)):
            drift = (
                DriftSpec(alpha=config.drift.alpha, epsilon_clamp=eps)
                if config.drift.enabled
                else None
            )
            levels.append(
                tuple(equation_coefficients(eq, family, drift, n) for eq in ("u", "v", "v_minus"))
            )
        base = np.broadcast_to(u0, (replicas, grid.N))
        start = (base.copy(), np.maximum(base, 1.0), np.maximum(-base, 1.0))
        first = tuple(a.copy() for a in start)
        second = tuple(a.copy() for a in start)
        streams = _streams(grid, master_seed, 0, replicas, 1)
        comparing = np.ones(replicas, dtype=bool)
        max_diff = 0.0
        compared = 0
        for step in range(grid.steps + 1):
            if comparing.any():
                compared += 1
                for a, b in zip(first, second, strict=True):
                    diff = np.abs(a[comparing] - b[comparing])
                    max_diff = max(max_diff, float(np.max(diff)))
            comparing &= ~_touches(first, eps1, n1)
            if step == grid.steps or not comparing.any():
                break
            noise = np.stack([s.take(1)[0] for s in streams])
            first = tuple(
                advance(f, noise, c, grid.dt, grid.dx, multiplier)[0]
                for f, c in zip(first, levels[0], strict=True)
            )
            second = tuple(
                advance(f, noise, c, grid.dt, grid.dx, multiplier)[0]
                for f, c in zip(second, levels[1], strict=True)
            )
        out.append(
            LocalizationResult(
                pair=(eps1, n1, eps2, n2),
                max_diff=max_diff,
                replicas=replicas,
                touched=int(np.sum(~comparing)),
                compared_steps=compared,
            )
        )
    return out


@dataclass(frozen=True)
class ConvolutionMoments:
    T_grid: tuple[float, ...]
    p: float
    level: float
    m: np.ndarray
    se: np.ndarray
    replicas: int


def convolution_moments(
    spec: ConvolutionSpec,
    N: int,
    dt: float,
    T_grid: Sequence[float],
    replicas: int,
    master_seed: int,
    workers: int | None = None,
    chunk_size: int = 32,
) -> ConvolutionMoments:
    """m(T) = mean over replicas of sup_{t <= T, x} |Z|^p, one run to max(T_grid)."""
    times = sorted(float(T) for T in T_grid)
    grid = GridSpec(N=N, dt=dt, steps=horizon_steps(times[-1], dt))
    marks = np.array([horizon_steps(T, dt) for T in times])
    chunks = chunk_bounds(replicas, chunk_size)

    def run_chunk(bounds: tuple[int, int]) -> np.ndarray:
        lo, hi = bounds
        noise = np.stack([s.take(grid.steps) for s in _streams(grid, master_seed, lo, hi, 1)])
        return convolution_statistics(spec, grid, noise, marks).sup_at

    sup_at = np.concatenate(gather_chunks(run_chunk, chunks, workers))
    powered = sup_at**spec.p
    stats = [mean_and_se(powered[:, j]) for j in range(len(times))]
    return ConvolutionMoments(
        T_grid=tuple(times),
        p=spec.p,
        level=spec.phi_level,
        m=np.array([s[0] for s in stats]),
        se=np.array([s[1] for s in stats]),
        replicas=replicas,
    )


def convolution_endpoint(
    spec: ConvolutionSpec,
    grid: GridSpec,
    replicas: int,
    master_seed: int,
    workers: int | None = None,
    chunk_size: int = 32,
) -> np.ndarray:
    """(R, N) values of Z at the horizon of `grid`."""
    chunks = chunk_bounds(replicas, chunk_size)

    def run_chunk(bounds: tuple[int, int]) -> np.ndarray:
        lo, hi = bounds
        noise = np.stack([s.take(grid.steps) for s in _streams(grid, master_seed, lo, hi, 1)])
        return convolution_statistics(spec, grid, noise, np.array([], dtype=np.int64)).final

    return np.concatenate(gather_chunks(run_chunk, chunks, workers))


@dataclass(frozen=True)
class GammaRow:
    gamma: float
    explosions: int
    replicas: int


def gamma_runs(
    config: SolverConfig,
    gamma_grid: Sequence[float],
    replicas: int,
    master_seed: int,
    workers: int | None = None,
    chunk_size: int = 32,
) -> list[GammaRow]:
    """Explosion counts of u with sigma = c(1 + |u|^gamma); every gamma reuses the same seeds."""
    rows = []
    for gamma in gamma_grid:
        swept = config.model_copy(
            update={"sigma": config.sigma.model_copy(update={"kind": "power", "gamma": gamma})}
        )
        run = run_ensemble(
            swept, replicas, master_seed, workers, chunk_size, "u", terminal=frozenset()
        )
        rows.append(
            GammaRow(gamma=float(gamma), explosions=int(np.sum(run.exploded)), replicas=replicas)
        )
        logger.info("gamma_point", extra={"event": "sweep", "replicas": replicas})
    return rows
