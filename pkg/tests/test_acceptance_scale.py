"""Ensembles a escala de aceptación; se excluyen con `pytest -m 'not slow'`."""

from __future__ import annotations

import math

import numpy as np
import pytest

from packages.critheat_core.application.heat_kernel_service import discrete_variance
from packages.critheat_core.application.noise_service import covariance_test
from packages.critheat_core.domain.models import ConvolutionSpec, GridSpec
from packages.critheat_lab.config_loader import parse_raw
from packages.critheat_lab.ensemble import (
    convolution_endpoint,
    localization_consistency,
    run_ensemble,
)
from packages.critheat_lab.verifiers import doob_bound_check, localization_verdict

pytestmark = pytest.mark.slow


def test_isometry_with_ten_thousand_replicas() -> None:
    grid = GridSpec(N=16, dt=0.01, steps=100)
    report = covariance_test(
        lambda t, x: np.ones_like(x), lambda t, x: np.ones_like(x), 10_000, 2024, grid
    )
    assert report.target == pytest.approx(2 * math.pi)
    assert report.passed


def test_additive_variance_at_unit_time() -> None:
    grid = GridSpec(N=64, dt=1e-3, steps=1000)
    spec = ConvolutionSpec(p=8.0, beta=0.2, T=grid.T)
    values = convolution_endpoint(spec, grid, 10_000, 11)
    squares = values[:, 0] ** 2
    se = float(np.std(squares, ddof=1) / math.sqrt(squares.size))
    assert abs(float(np.mean(squares)) - discrete_variance(grid)) <= 3 * se


def test_doob_bound_with_drift() -> None:
    config, _ = parse_raw(
        {
            "grid": {"N": 64, "dt": 1e-3, "T": 1.0},
            "sigma": {"kind": "critical_power", "c": 0.1},
            "drift": {"alpha": 4.0},
            "clamp": {"epsilon": 0.5},
            "thresholds": {"M": 1000.0},
        }
    )
    run = run_ensemble(config, 1000, 5, workers=4)
    verdict = doob_bound_check(run, 1000.0, 0.5, 4.0, 1.0)
    assert verdict.threshold == pytest.approx((2 * math.pi + 2 * math.pi * 16) / 1000)
    assert verdict.status == "pass"


def test_localization_over_a_hundred_runs() -> None:
    config, _ = parse_raw({"grid": {"N": 32, "dt": 1e-3, "T": 0.1}})
    results = localization_consistency(config, [(0.5, 10.0, 0.25, 100.0)], 100, 77)
    assert localization_verdict(results).status == "pass"
