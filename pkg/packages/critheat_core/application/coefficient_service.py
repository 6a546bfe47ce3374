from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from packages.critheat_core.domain.errors import DomainError
from packages.critheat_core.domain.models import DriftSpec, SigmaFamily

CRITICAL_GAMMA = 1.5


def sigma_eval(family: SigmaFamily, u: float | np.ndarray) -> float | np.ndarray:
    """Noise coefficient of the family at u (scalar or array)."""
    arr = np.asarray(u, dtype=np.float64)
    if family.kind == "critical_power":
        out = family.c * (1.0 + np.abs(arr) ** CRITICAL_GAMMA)
    elif family.kind == "power":
        out = family.c * (1.0 + np.abs(arr) ** family.gamma)
    elif family.kind == "linear":
        out = family.c * arr
    else:
        out = np.full_like(arr, family.c)
    if np.ndim(u) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class Sigma:
    family: SigmaFamily

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(sigma_eval(self.family, u))


@dataclass(frozen=True)
class ClampedSigma:
    """sigma_n: sigma(-n) below -n, sigma(n) above n."""

    family: SigmaFamily
    n: float

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(sigma_eval(self.family, np.clip(u, -self.n, self.n)))


@dataclass(frozen=True)
class ReflectedSigma:
    """u -> inner(-u), the coefficient of the v_minus equation."""

    inner: Sigma | ClampedSigma

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return self.inner(-np.asarray(u))


@dataclass(frozen=True)
class ClampedDrift:
    """f_eps(u) = max(eps, u) ** -alpha."""

    alpha: float
    epsilon: float

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return np.maximum(self.epsilon, u) ** -self.alpha

    @property
    def sup(self) -> float:
        return float(self.epsilon**-self.alpha)


def sigma_function(family: SigmaFamily) -> Sigma:
    return Sigma(family)


def clamp_sigma(family: SigmaFamily, n: float) -> ClampedSigma:
    if not n > 0:
        raise DomainError(f"clamp level n must be > 0, got {n}")
    return ClampedSigma(family, float(n))


def clamp_drift(spec: DriftSpec) -> ClampedDrift:
    return ClampedDrift(alpha=spec.alpha, epsilon=spec.epsilon_clamp)


def sigma_minus(coefficient: Sigma | ClampedSigma | SigmaFamily) -> ReflectedSigma:
    if isinstance(coefficient, SigmaFamily):
        coefficient = Sigma(coefficient)
    return ReflectedSigma(coefficient)


def growth_check(family: SigmaFamily, C: float, u_grid: np.ndarray) -> bool:
    """True iff |sigma(u)| <= C (1 + |u|^{3/2}) on every grid point."""
    grid = np.asarray(u_grid, dtype=np.float64)
    if grid.size == 0:
        raise DomainError("growth_check needs a non-empty grid")
    if not C > 0:
        raise DomainError("growth constant C must be > 0")
    lhs = np.abs(np.asarray(sigma_eval(family, grid)))
    rhs = C * (1.0 + np.abs(grid) ** CRITICAL_GAMMA)
    return bool(np.all(lhs <= rhs))


def default_growth_grid() -> np.ndarray:
    return np.concatenate([-np.logspace(3, -3, 200), [0.0], np.logspace(-3, 3, 200)])
