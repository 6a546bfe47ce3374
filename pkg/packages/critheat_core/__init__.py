"""Numerical core for the critical stochastic heat equation (framework-free)."""

from packages.critheat_core.application.heat_kernel_service import (
    eval_kernel,
    kernel_l1_norm,
    kernel_sup,
    semigroup_apply,
    truncation_order,
)
from packages.critheat_core.application.solver_service import simulate, simulate_coupled, step

__all__ = [
    "eval_kernel",
    "kernel_l1_norm",
    "kernel_sup",
    "semigroup_apply",
    "simulate",
    "simulate_coupled",
    "step",
    "truncation_order",
]
