"""Discretised space-time white noise and Walsh integrals against it."""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from packages.critheat_core.domain.errors import ConfigError, DomainError
from packages.critheat_core.domain.models import GridSpec, NoiseSlice
from packages.critheat_core.infrastructure.binary_dump import DumpHeader, read_dump, write_dump
from packages.critheat_core.infrastructure.rng import substream

# phi(s, past) -> values on the grid at step s, where `past` holds slices 0..s-1 only.
AdaptedIntegrand = Callable[[int, np.ndarray], np.ndarray]
# phi(t, x) for deterministic integrands, evaluated at cell left corners.
SpaceTimeFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]

DEFAULT_BLOCK_ROWS = 1024


def sample_slice(grid: GridSpec, rng: np.random.Generator) -> NoiseSlice:
    """N independent centred Gaussians with variance dt*dx."""
    scale = math.sqrt(grid.dt * grid.dx)
    return NoiseSlice(scale * rng.standard_normal(grid.N))


class NoiseStream:
    """Block-buffered noise for one replica.

    With `substeps > 1` every returned slice is the sum of `substeps` consecutive fine
    increments of variance (dt / substeps) * dx. A stream at dt with substeps=4 and a
    stream at dt/4 with substeps=1 built from the same generator therefore see the same
    Brownian sheet.
    """

    def __init__(
        self,
        grid: GridSpec,
        rng: np.random.Generator,
        substeps: int = 1,
        block_rows: int | None = None,
    ) -> None:
        if substeps < 1:
            raise DomainError("substeps must be >= 1")
        if block_rows is None:
            block_rows = min(DEFAULT_BLOCK_ROWS, grid.steps) * substeps
        if block_rows % substeps:
            raise DomainError("substeps must divide block_rows")
        self.grid = grid
        self.rng = rng
        self.substeps = substeps
        self.block_rows = block_rows
        self._scale = math.sqrt(grid.dt / substeps * grid.dx)
        self._buffer = np.empty((0, grid.N))
        self._cursor = 0
        self.slices_drawn = 0

    @classmethod
    def for_replica(
        cls, grid: GridSpec, master_seed: int, replica: int, substeps: int = 1
    ) -> NoiseStream:
        return cls(grid, substream(master_seed, replica), substeps=substeps)

    def _refill(self) -> None:
        fine = self.rng.standard_normal((self.block_rows, self.grid.N))
        coarse = fine.reshape(-1, self.substeps, self.grid.N).sum(axis=1)
        self._buffer = self._scale * coarse
        self._cursor = 0

    def take(self, count: int) -> np.ndarray:
        """The next `count` slices as a (count, N) array."""
        out = np.empty((count, self.grid.N))
        filled = 0
        while filled < count:
            if self._cursor >= self._buffer.shape[0]:
                self._refill()
            chunk = min(count - filled, self._buffer.shape[0] - self._cursor)
            out[filled : filled + chunk] = self._buffer[self._cursor : self._cursor + chunk]
            self._cursor += chunk
            filled += chunk
        self.slices_drawn += count
        return out

    def next_slice(self) -> NoiseSlice:
        return NoiseSlice(self.take(1)[0])


def _as_matrix(slices: Sequence[NoiseSlice] | np.ndarray) -> np.ndarray:
    if isinstance(slices, np.ndarray):
        matrix = np.asarray(slices, dtype=np.float64)
    else:
        if not slices:
            raise DomainError("walsh_integral needs at least one slice")
        matrix = np.stack([np.asarray(s.increments, dtype=np.float64) for s in slices])
    if matrix.ndim != 2:
        raise DomainError("noise must be a sequence of 1-D slices")
    return matrix


def walsh_integral(
    slices: Sequence[NoiseSlice] | np.ndarray, phi: np.ndarray | AdaptedIntegrand
) -> float:
    """Sum over steps s and cells j of phi(s, j) * dW(s, j).

    `phi` is either a deterministic (steps, N) array or a callable that receives the
    step index and the slices strictly before it, which keeps the integrand adapted.
    """
    noise = _as_matrix(slices)
    if callable(phi):
        total = 0.0
        for s in range(noise.shape[0]):
            row = np.asarray(phi(s, noise[:s]), dtype=np.float64)
            if row.shape != (noise.shape[1],):
                raise DomainError(
                    f"phi at step {s} has shape {row.shape}, expected ({noise.shape[1]},)"
                )
            total += float(row @ noise[s])
        return total
    values = np.asarray(phi, dtype=np.float64)
    if values.shape != noise.shape:
        raise DomainError(f"phi shape {values.shape} does not match noise shape {noise.shape}")
    return float(np.sum(values * noise))


def sample_on_cells(func: SpaceTimeFunction, grid: GridSpec) -> np.ndarray:
    """func evaluated at (s*dt, x_j): a (steps, N) step function."""
    t = grid.dt * np.arange(grid.steps)
    tt, xx = np.meshgrid(t, grid.x, indexing="ij")
    return np.broadcast_to(np.asarray(func(tt, xx), dtype=np.float64), tt.shape).copy()


@dataclass(frozen=True)
class CovarianceReport:
    empirical_cov: float
    target: float
    std_err: float
    replicas: int

    @property
    def passed(self) -> bool:
        return abs(self.empirical_cov - self.target) <= 3.0 * self.std_err + 1e-12 * max(
            1.0, abs(self.target)
        )


def covariance_test(
    phi: SpaceTimeFunction,
    psi: SpaceTimeFunction,
    replicas: int,
    master_seed: int,
    grid: GridSpec,
) -> CovarianceReport:
    """Empirical covariance of two Walsh integrals against the quadrature target.

    The target dt*dx*sum(phi*psi) is the cell quadrature of the covariance identity, and
    it is also the exact covariance of the two discrete integrals.
    """
    if replicas < 100:
        raise ConfigError("covariance_test needs at least 100 replicas", "ensemble.replicas")
    phi_cells = sample_on_cells(phi, grid)
    psi_cells = sample_on_cells(psi, grid)
    target = float(np.sum(phi_cells * psi_cells) * grid.dt * grid.dx)

    a = np.empty(replicas)
    b = np.empty(replicas)
    for r in range(replicas):
        noise = NoiseStream.for_replica(grid, master_seed, r).take(grid.steps)
        a[r] = np.sum(phi_cells * noise)
        b[r] = np.sum(psi_cells * noise)
    # the integrals are centred, so the product is unbiased for the covariance
    products = a * b
    return CovarianceReport(
        empirical_cov=float(np.mean(products)),
        target=target,
        std_err=float(np.std(products, ddof=1) / math.sqrt(replicas)),
        replicas=replicas,
    )


def dump_noise(path: str | Path, grid: GridSpec, seed: int, increments: np.ndarray) -> Path:
    header = DumpHeader(N=grid.N, dt=grid.dt, steps=grid.steps, seed=seed)
    return write_dump(path, header, increments)


def load_noise(path: str | Path) -> tuple[GridSpec, int, list[NoiseSlice]]:
    header, rows = read_dump(path)
    grid = GridSpec(N=header.N, dt=header.dt, steps=header.steps)
    if rows.shape[0] != header.steps:
        raise DomainError(f"{path}: header announces {header.steps} slices, found {rows.shape[0]}")
    return grid, header.seed, [NoiseSlice(row.copy()) for row in rows]
