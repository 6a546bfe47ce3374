"""Periodic heat kernel on [-pi, pi]: series evaluation, norms and the heat semigroup."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq

from packages.critheat_core.domain.errors import DomainError
from packages.critheat_core.domain.models import TWO_PI, Field, GridSpec, HeatStep, KernelSpec

logger = logging.getLogger(__name__)

# Below this time the cosine series needs O(t^-1/2) modes; evaluation is capped here.
MIN_KERNEL_TIME = 1e-6
# Modes summed per block so that t ~ 1e-6 does not allocate a (K, len(x)) matrix at once.
_MODE_BLOCK = 512

PROBABILIST = KernelSpec(normalization="probabilist")
UNITARY = KernelSpec(normalization="unitary")


def _coefficients(spec: KernelSpec) -> tuple[float, float]:
    """(constant mode, cosine-mode prefactor) of the chosen convention."""
    if spec.normalization == "unitary":
        return 1.0 / math.sqrt(TWO_PI), math.sqrt(2.0 / math.pi)
    return 1.0 / TWO_PI, 1.0 / math.pi


def _check_time(t: float) -> float:
    if not t > 0:
        raise DomainError(f"kernel time must be > 0, got {t}")
    if t < MIN_KERNEL_TIME:
        logger.warning(
            "kernel_time_capped",
            extra={"event": "truncation_capped"},
        )
        return MIN_KERNEL_TIME
    return float(t)


def truncation_order(t: float, tol: float) -> int:
    """Smallest K with e^{-K^2 t} / (2 K t) <= tol.

    The left side bounds the tail integral of e^{-x^2 t} over [K, inf), which in turn
    bounds the tail of the cosine series.
    """
    if not t > 0 or not tol > 0:
        raise DomainError("truncation_order needs t > 0 and tol > 0")

    log_tol = math.log(tol)

    def excess(k: float) -> float:
        return -k * k * t - math.log(2.0 * k * t) - log_tol

    if excess(1.0) <= 0:
        return 1
    hi = 2.0
    while excess(hi) > 0:
        hi *= 2.0
    root = brentq(excess, 1.0, hi, xtol=1e-9)
    k = max(1, math.ceil(root))
    # ceil of a numerical root may land one short
    while excess(float(k)) > 0:
        k += 1
    return k


def eval_kernel(spec: KernelSpec, t: float, x: float | np.ndarray) -> float | np.ndarray:
    """Truncated cosine series of G(t, x); vectorised over x."""
    t = _check_time(t)
    K = truncation_order(t, spec.truncation_tol)
    return _series(spec, t, x, K)


def _series(spec: KernelSpec, t: float, x: float | np.ndarray, K: int) -> float | np.ndarray:
    a0, ak = _coefficients(spec)
    xs = np.atleast_1d(np.asarray(x, dtype=np.float64))
    total = np.full(xs.shape, a0)
    for start in range(1, K + 1, _MODE_BLOCK):
        k = np.arange(start, min(start + _MODE_BLOCK, K + 1), dtype=np.float64)
        weights = ak * np.exp(-k * k * t)
        total += weights @ np.cos(np.outer(k, xs))
    if np.ndim(x) == 0:
        return float(total[0])
    return total


def quadrature_grid(n: int) -> np.ndarray:
    return -np.pi + (TWO_PI / n) * np.arange(n)


def kernel_l1_norm(spec: KernelSpec, t: float, quadrature_N: int = 4096) -> float:
    """Trapezoid rule for the integral of |G(t, .)| over [-pi, pi]."""
    if quadrature_N < 64:
        raise DomainError("quadrature_N must be >= 64")
    values = np.asarray(eval_kernel(spec, t, quadrature_grid(quadrature_N)))
    return float(np.sum(np.abs(values)) * TWO_PI / quadrature_N)


def kernel_sup(spec: KernelSpec, t: float) -> float:
    """sup_x |G(t, x)|, attained at x = 0 for this positive-coefficient series."""
    return float(eval_kernel(spec, t, 0.0))


def stated_sup_bound(t: float) -> float:
    """(2/pi)^{1/2} + t^{-1/2}/2, the closed form quoted for the unitary-normalised kernel.

    Its derivation sums the cosine tail with prefactor pi^{-1/2} instead of (2/pi)^{1/2};
    for t below roughly 0.07 the series value exceeds it.
    """
    return math.sqrt(2.0 / math.pi) + 0.5 / math.sqrt(t)


def kernel_sup_bound(t: float) -> float:
    """(2/pi)^{1/2} + t^{-1/2}/sqrt(2): the integral-test bound for the unitary series."""
    return math.sqrt(2.0 / math.pi) + 1.0 / math.sqrt(2.0 * t)


def kernel_l2_norm_sq(spec: KernelSpec, t: float) -> float:
    """Integral of G(t, y)^2 over D, summed in closed form via Parseval."""
    a0, ak = _coefficients(spec)
    t = _check_time(t)
    K = truncation_order(2.0 * t, spec.truncation_tol)
    k = np.arange(1, K + 1, dtype=np.float64)
    return float(TWO_PI * a0 * a0 + math.pi * ak * ak * np.sum(np.exp(-2.0 * k * k * t)))


def continuum_variance(t: float, tol: float = 1e-14) -> float:
    """Integral over [0, t] of the mass-one kernel's squared L2 norm.

    This is Var Z(t, x) for the continuum stochastic convolution with phi = 1.
    """
    if t < 0:
        raise DomainError("t must be >= 0")
    if t == 0:
        return 0.0
    # tail of sum (1 - e^{-2k^2 t}) / k^2 behaves like 1/K
    K = max(int(math.ceil(1.0 / tol ** 0.5)), truncation_order(2.0 * t, tol))
    k = np.arange(1, K + 1, dtype=np.float64)
    series = np.sum(-np.expm1(-2.0 * k * k * t) / (k * k))
    return float(t / TWO_PI + series / TWO_PI)


def discrete_variance(grid: GridSpec, n_steps: int | None = None) -> float:
    """Exact Var Z_n(x) of the spectral scheme with additive unit noise.

    Z_{n+1} = S(dt) Z_n + xi_n with xi_n i.i.d. N(0, dt/dx) per cell gives
    (dt / 2pi) * sum_k sum_{j<n} e^{-2 k^2 j dt} over the integer wavenumbers
    -N/2 .. N/2 - 1.
    """
    n = grid.steps if n_steps is None else n_steps
    if n < 0:
        raise DomainError("n_steps must be >= 0")
    k = np.fft.fftfreq(grid.N, d=1.0 / grid.N)
    rate = 2.0 * k * k * grid.dt
    ratio = np.empty_like(rate)
    zero = rate == 0
    ratio[zero] = n
    ratio[~zero] = -np.expm1(-rate[~zero] * n) / -np.expm1(-rate[~zero])
    return float(grid.dt / TWO_PI * np.sum(ratio))


def semigroup_multiplier(N: int, t: float) -> np.ndarray:
    """e^{-k^2 t} on the rfft modes of an N-point grid."""
    k = np.arange(N // 2 + 1, dtype=np.float64)
    return np.exp(-k * k * t)


def monotone_multiplier(N: int, t: float) -> np.ndarray:
    """e^{t L_h} on the rfft modes, L_h the periodic three-point Laplacian.

    L_h has nonnegative off-diagonal entries, so e^{t L_h} maps nonnegative grid
    functions to nonnegative ones for every t; the spectral e^{-k^2 t} does not.
    """
    dx = TWO_PI / N
    k = np.arange(N // 2 + 1, dtype=np.float64)
    return np.exp(-t * (2.0 / dx * np.sin(k * dx / 2.0)) ** 2)


def step_multiplier(N: int, t: float, heat_step: HeatStep = "spectral") -> np.ndarray:
    if heat_step == "spectral":
        return semigroup_multiplier(N, t)
    if heat_step == "monotone":
        return monotone_multiplier(N, t)
    raise DomainError(f"unknown heat step {heat_step!r}")


def apply_multiplier(values: np.ndarray, multiplier: np.ndarray) -> np.ndarray:
    """Multiply the Fourier modes of `values` (last axis) by `multiplier`."""
    n = values.shape[-1]
    return np.fft.irfft(np.fft.rfft(values, axis=-1) * multiplier, n=n, axis=-1)


def semigroup_apply(t: float, fld: Field) -> Field:
    """Exact heat flow on the grid: Fourier mode k decays by e^{-k^2 t}."""
    if t < 0:
        raise DomainError("semigroup time must be >= 0")
    if t == 0:
        return fld
    return Field(apply_multiplier(fld.values, semigroup_multiplier(fld.N, t)))


@dataclass(frozen=True)
class SmoothingBound:
    lhs: float
    rhs_ratio: float


def smoothing_bound_check(t: float, fld: Field) -> SmoothingBound:
    """sup of S(t) v and the ratio sup * t^{1/2} / |v|_{L1} for nonnegative v."""
    if not 0 < t <= 1:
        raise DomainError("smoothing bound is stated for t in (0, 1]")
    if np.any(fld.values < 0):
        raise DomainError("smoothing bound needs a nonnegative field")
    mass = fld.l1()
    if mass == 0:
        return SmoothingBound(lhs=0.0, rhs_ratio=0.0)
    lhs = float(np.max(semigroup_apply(t, fld).values))
    return SmoothingBound(lhs=lhs, rhs_ratio=lhs * math.sqrt(t) / mass)


@lru_cache(maxsize=1)
def calibrated_smoothing_constant(samples: int = 200) -> float:
    """1.1 * max over t in [1e-4, 1] of sup G_prob(t, .) * t^{1/2}."""
    ts = np.logspace(-4.0, 0.0, samples)
    values = [kernel_sup(PROBABILIST, float(t)) * math.sqrt(float(t)) for t in ts]
    return 1.1 * max(values)


@dataclass(frozen=True)
class KernelCheck:
    name: str
    passed: bool
    statistic: float
    threshold: float
    details: dict[str, float] = field(default_factory=dict)


def _check_l1(spec: KernelSpec, target: float, times: tuple[float, ...]) -> KernelCheck:
    errors = {f"t={t:g}": abs(kernel_l1_norm(spec, t, 8192) - target) for t in times}
    worst = max(errors.values())
    return KernelCheck(f"l1_norm_{spec.normalization}", worst <= 1e-6, worst, 1e-6, errors)


def _check_sup_bound() -> KernelCheck:
    ts = np.logspace(-4.0, 0.0, 50)
    sups = np.array([kernel_sup(UNITARY, float(t)) for t in ts])
    bound = np.array([kernel_sup_bound(float(t)) for t in ts])
    stated = np.array([stated_sup_bound(float(t)) for t in ts])
    violations = int(np.sum(sups > bound))
    return KernelCheck(
        "sup_bound",
        violations == 0,
        float(np.max(sups / bound)),
        1.0,
        {"violations": violations, "stated_bound_violations": int(np.sum(sups > stated))},
    )


def _check_shape(n: int = 4096) -> list[KernelCheck]:
    x = quadrature_grid(n)
    worst_min = math.inf
    worst_sym = 0.0
    worst_peak = 0.0
    for t in (1e-4, 1e-3, 1e-2, 0.1, 1.0):
        g = np.asarray(eval_kernel(PROBABILIST, t, x))
        worst_min = min(worst_min, float(np.min(g)))
        mirrored = np.asarray(eval_kernel(PROBABILIST, t, -x))
        shifted = np.asarray(eval_kernel(PROBABILIST, t, x + TWO_PI))
        worst_sym = max(
            worst_sym, float(np.max(np.abs(g - mirrored))), float(np.max(np.abs(g - shifted)))
        )
        worst_peak = max(worst_peak, float(np.max(g)) - kernel_sup(PROBABILIST, t))
    return [
        KernelCheck("positivity", worst_min >= -1e-10, worst_min, -1e-10),
        KernelCheck("symmetry_periodicity", worst_sym <= 1e-10, worst_sym, 1e-10),
        KernelCheck("peak_at_origin", worst_peak <= 1e-12, worst_peak, 1e-12),
    ]


def _check_semigroup(n: int = 4096, seed: int = 7) -> KernelCheck:
    rng = np.random.default_rng(seed)
    fld = Field(rng.standard_normal(n))
    composed = semigroup_apply(0.3, semigroup_apply(0.2, fld)).values
    direct = semigroup_apply(0.5, fld).values
    cosine = Field.from_function(np.cos, n)
    decay = np.abs(semigroup_apply(0.5, cosine).values - math.exp(-0.5) * cosine.values)
    worst = max(float(np.max(np.abs(composed - direct))), float(np.max(decay)))
    return KernelCheck("semigroup", worst <= 1e-12, worst, 1e-12)


def _check_self_convergence() -> KernelCheck:
    x = quadrature_grid(256)
    worst = 0.0
    for t in (1e-3, 1e-2, 0.1, 1.0):
        K = truncation_order(t, PROBABILIST.truncation_tol)
        a = np.asarray(_series(PROBABILIST, t, x, K))
        b = np.asarray(_series(PROBABILIST, t, x, 2 * K))
        # rounding of the longer sum is allowed on top of the tail bound
        allowance = PROBABILIST.truncation_tol + 8 * np.finfo(float).eps * np.abs(a)
        worst = max(worst, float(np.max(np.abs(a - b) - allowance)))
    return KernelCheck("self_convergence", worst <= 0.0, worst, 0.0)


def _check_smoothing(n: int = 1024) -> KernelCheck:
    C = calibrated_smoothing_constant()
    spike = np.zeros(n)
    spike[n // 2] = n / TWO_PI
    worst = 0.0
    for t in np.logspace(-4.0, 0.0, 20):
        worst = max(worst, smoothing_bound_check(float(t), Field(spike)).rhs_ratio)
    return KernelCheck("smoothing_bound", worst <= C, worst, C)


def verify_kernel_suite() -> list[KernelCheck]:
    """Every kernel property the lab asserts, in a fixed order."""
    checks = [
        _check_l1(UNITARY, math.sqrt(TWO_PI), (0.01, 0.1, 1.0, 10.0)),
        _check_l1(PROBABILIST, 1.0, (1e-3, 0.01, 0.1, 1.0, 10.0)),
        _check_sup_bound(),
    ]
    checks.extend(_check_shape())
    checks.append(_check_semigroup())
    checks.append(_check_self_convergence())
    checks.append(_check_smoothing())
    return checks
