"""Stochastic convolution Z and its factorised reconstruction through Z_beta.

Both are computed on the Fourier modes of the grid. With eta_m the injected noise of
step m, the direct recursion gives

    Z_n = sum_{m<n} S((n-1-m) dt) eta_m,

and the reconstruction replaces the unit weight of each pair (n, m) by

    kappa(J) = c_beta * sum_{d=1}^{J} w(d) a(J-d),    J = n - m,

where w are the exact cell integrals of s^{beta-1}, a the inner weights of s^{-beta}
and c_beta = sin(pi beta) / pi. Over a pair of cells the kernel product integrates to
the Beta integral pi / sin(pi beta), so the continuum identity is kappa = 1.

Weight schemes:

- ``pair_exact``: inner weights chosen so that, for every pair of cells, the sum over
  intermediate cells reproduces that Beta integral; kappa(J) = 1 to round-off at
  every lag and the reconstruction matches Z up to floating point.
- ``cell_exact``: both singular weights integrated over single cells. kappa(J)
  depends on J only, so the short-lag error does not shrink with dt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from packages.critheat_core.application.heat_kernel_service import (
    apply_multiplier,
    discrete_variance,
    semigroup_multiplier,
)
from packages.critheat_core.application.noise_service import NoiseStream
from packages.critheat_core.domain.errors import ConfigError, DomainError
from packages.critheat_core.domain.models import TWO_PI, ConvolutionSpec, GridSpec

WeightScheme = Literal["pair_exact", "cell_exact"]


def holder_exponent_bound(p: float, beta: float) -> float:
    """Exponent ((beta - 1) p - 1/2) / (p - 1) of the Hoelder step; must exceed -1."""
    return ((beta - 1.0) * p - 0.5) / (p - 1.0)


def check_beta(spec: ConvolutionSpec) -> None:
    lo = 3.0 / (2.0 * spec.p)
    if not lo < spec.beta < 0.25:
        raise ConfigError(f"beta must lie in ({lo:.6g}, 0.25) for p={spec.p}", "experiment.beta")


def phi_values(spec: ConvolutionSpec, z: np.ndarray) -> np.ndarray:
    """phi at the current step: the constant L or the bounded adapted field L cos(Z)."""
    if spec.phi_kind == "constant":
        return np.full_like(z, spec.phi_level)
    return spec.phi_level * np.cos(z)


@dataclass(frozen=True)
class ConvolutionPath:
    z: np.ndarray
    """(steps + 1, N) or (R, steps + 1, N) direct Z, Z(0) = 0."""
    eta: np.ndarray
    """injected increments phi dW / dx, one row per step."""


def stochastic_convolution_from_noise(
    spec: ConvolutionSpec, grid: GridSpec, noise: np.ndarray
) -> ConvolutionPath:
    """Z_{n+1} = S(dt) Z_n + phi_n dW_n / dx on given (…, steps, N) increments."""
    multiplier = semigroup_multiplier(grid.N, grid.dt)
    steps = noise.shape[-2]
    z = np.zeros(noise.shape[:-2] + (steps + 1, grid.N))
    eta = np.empty_like(noise)
    for n in range(steps):
        eta[..., n, :] = phi_values(spec, z[..., n, :]) * noise[..., n, :] / grid.dx
        z[..., n + 1, :] = apply_multiplier(z[..., n, :], multiplier) + eta[..., n, :]
    return ConvolutionPath(z=z, eta=eta)


def stochastic_convolution(
    spec: ConvolutionSpec, grid: GridSpec, seed: int, replica: int = 0, substeps: int = 1
) -> ConvolutionPath:
    stream = NoiseStream.for_replica(grid, seed, replica, substeps=substeps)
    return stochastic_convolution_from_noise(spec, grid, stream.take(grid.steps))


@dataclass(frozen=True)
class ConvolutionStatistics:
    sup_at: np.ndarray
    """(R, len(checkpoints)) running sup over t <= checkpoint and x of |Z|."""
    final: np.ndarray
    """(R, N) Z at the last step."""


def convolution_statistics(
    spec: ConvolutionSpec, grid: GridSpec, noise: np.ndarray, checkpoints: np.ndarray
) -> ConvolutionStatistics:
    """Same recursion as `stochastic_convolution_from_noise` without storing the path.

    `noise` is (R, steps, N); checkpoints are step indices in [0, steps].
    """
    R, steps, _ = noise.shape
    marks = np.asarray(checkpoints, dtype=np.int64)
    if marks.size and (marks.min() < 0 or marks.max() > steps):
        raise DomainError(f"checkpoints must lie in [0, {steps}]")
    multiplier = semigroup_multiplier(grid.N, grid.dt)
    z = np.zeros((R, grid.N))
    running = np.zeros(R)
    sup_at = np.zeros((R, marks.size))
    for n in range(steps + 1):
        running = np.maximum(running, np.max(np.abs(z), axis=-1))
        sup_at[:, marks == n] = running[:, None]
        if n == steps:
            break
        eta = phi_values(spec, z) * noise[:, n, :] / grid.dx
        z = apply_multiplier(z, multiplier) + eta
    return ConvolutionStatistics(sup_at=sup_at, final=z)


def factorization_weights(
    beta: float, steps: int, scheme: WeightScheme = "pair_exact"
) -> tuple[np.ndarray, np.ndarray]:
    """(a, w) for lags 0..steps-1 and 1..steps (w[0] is lag 1), in units of dt.

    w(d) is the exact integral of s^(beta-1) over the cell at lag d. For ``pair_exact``
    a solves, lag by lag, sum_d w(d) a(J-d) = pi / sin(pi beta), the integral of the
    kernel product over the pair of cells J apart.
    """
    if scheme not in ("pair_exact", "cell_exact"):
        raise ConfigError(f"unknown weight scheme {scheme!r}", "experiment.factorization_scheme")
    d = np.arange(steps, dtype=np.float64)
    w = ((d + 1.0) ** beta - d**beta) / beta
    if scheme == "cell_exact":
        a = ((d + 1.0) ** (1.0 - beta) - d ** (1.0 - beta)) / (1.0 - beta)
        return a, w
    pair_integral = math.pi / math.sin(math.pi * beta)
    a = np.empty(steps)
    for J in range(1, steps + 1):
        tail = float(np.dot(w[1:J], a[J - 2 :: -1][: J - 1])) if J > 1 else 0.0
        a[J - 1] = (pair_integral - tail) / w[0]
    return a, w


def combined_weights(beta: float, steps: int, scheme: WeightScheme) -> np.ndarray:
    """kappa(J) for J = 1..steps."""
    a, w = factorization_weights(beta, steps, scheme)
    c = math.sin(math.pi * beta) / math.pi
    return c * np.convolve(w, a)[:steps]


def _causal_matrices(kernel: np.ndarray, decay: np.ndarray, shift: int) -> np.ndarray:
    """Lower-triangular Toeplitz matrices T_k[i, m] = kernel[i-m] * decay_k ** (i-m+shift)."""
    steps = kernel.shape[0]
    lag = np.arange(steps)[:, None] - np.arange(steps)[None, :]
    lower = lag >= 0
    safe_lag = np.where(lower, lag, 0)
    powers = decay[:, None, None] ** (safe_lag + shift)[None, :, :]
    return np.where(lower[None, :, :], kernel[safe_lag][None, :, :] * powers, 0.0)


def factorization_reconstruct(
    spec: ConvolutionSpec,
    grid: GridSpec,
    eta: np.ndarray,
    scheme: WeightScheme = "pair_exact",
) -> np.ndarray:
    """Z rebuilt from the same injected noise through Z_beta, shape (steps + 1, N).

    Z_beta(i) = dt^-beta sum_{m<=i} a(i-m) S((i-m) dt) eta_m sits at the right end of
    cell i, and Z(n) = c_beta dt^beta sum_{i<n} w(n-i) S((n-1-i) dt) Z_beta(i).
    """
    check_beta(spec)
    steps = eta.shape[0]
    a, w = factorization_weights(spec.beta, steps, scheme)
    c = math.sin(math.pi * spec.beta) / math.pi
    k = np.arange(grid.N // 2 + 1, dtype=np.float64)
    decay = np.exp(-k * k * grid.dt)

    eta_hat = np.fft.rfft(eta, axis=-1)
    inner = _causal_matrices(a, decay, shift=0)
    z_beta_hat = np.einsum("kim,mk->ik", inner, eta_hat) * grid.dt**-spec.beta
    # row r = n - 1 collects i <= r with weight w(n - i) S((r - i) dt)
    outer = _causal_matrices(w, decay, shift=0)
    z_hat = np.einsum("kri,ik->rk", outer, z_beta_hat) * (c * grid.dt**spec.beta)

    z = np.zeros((steps + 1, grid.N))
    z[1:] = np.fft.irfft(z_hat, n=grid.N, axis=-1)
    return z


def factorization_discrepancy_oracle(
    spec: ConvolutionSpec, grid: GridSpec, scheme: WeightScheme = "pair_exact"
) -> float:
    """E |Z_rec(T, x) - Z(T, x)|^2 for constant phi, in closed form.

    (dt / 2pi) L^2 sum_J (kappa(J) - 1)^2 sum_k e^{-2 k^2 (J-1) dt}.
    """
    kappa = combined_weights(spec.beta, grid.steps, scheme)
    k = np.fft.fftfreq(grid.N, d=1.0 / grid.N)
    lags = np.arange(grid.steps, dtype=np.float64)
    mode_sums = np.exp(-2.0 * np.outer(lags, k * k) * grid.dt).sum(axis=1)
    return float(grid.dt / TWO_PI * spec.phi_level**2 * np.sum((kappa - 1.0) ** 2 * mode_sums))


@dataclass(frozen=True)
class FactorizationComparison:
    steps: int
    dt: float
    sup_abs_diff: float
    sup_direct: float
    oracle_rms: float
    reference_rms: float

    @property
    def rel_sup_diff(self) -> float:
        if self.sup_direct == 0.0:
            return 0.0
        return self.sup_abs_diff / self.sup_direct

    @property
    def oracle_rel_rms(self) -> float:
        if self.reference_rms == 0.0:
            return 0.0
        return self.oracle_rms / self.reference_rms


def compare_factorization(
    spec: ConvolutionSpec,
    grid: GridSpec,
    noise: np.ndarray,
    scheme: WeightScheme = "pair_exact",
) -> FactorizationComparison:
    path = stochastic_convolution_from_noise(spec, grid, noise)
    rebuilt = factorization_reconstruct(spec, grid, path.eta, scheme)
    oracle = factorization_discrepancy_oracle(spec, grid, scheme)
    reference = spec.phi_level**2 * discrete_variance(grid)
    return FactorizationComparison(
        steps=grid.steps,
        dt=grid.dt,
        sup_abs_diff=float(np.max(np.abs(rebuilt - path.z))),
        sup_direct=float(np.max(np.abs(path.z))),
        oracle_rms=math.sqrt(oracle),
        reference_rms=math.sqrt(reference),
    )


def factorization_check(
    spec: ConvolutionSpec,
    grid: GridSpec,
    seed: int,
    levels: int = 3,
    scheme: WeightScheme = "pair_exact",
) -> list[FactorizationComparison]:
    """Refinement study on matched noise: level j uses dt / 2^j.

    The finest level reads the fine increments directly; coarser levels sum them.
    """
    if levels < 1:
        raise ConfigError("levels must be >= 1", "experiment.levels")
    finest = 2 ** (levels - 1)
    out = []
    for j in range(levels):
        level_grid = grid.refined(2**j)
        stream = NoiseStream.for_replica(level_grid, seed, 0, substeps=finest // 2**j)
        out.append(compare_factorization(spec, level_grid, stream.take(level_grid.steps), scheme))
    return out
