from __future__ import annotations

import numpy as np
import pytest

from packages.critheat_core.application.heat_kernel_service import discrete_variance
from packages.critheat_core.application.solver_service import simulate
from packages.critheat_core.domain.errors import ConfigError
from packages.critheat_core.domain.models import ConvolutionSpec, GridSpec
from packages.critheat_lab.config_loader import parse_raw
from packages.critheat_lab.domain.models import SolverConfig
from packages.critheat_lab.ensemble import (
    chunk_bounds,
    comparison_refinement,
    convolution_endpoint,
    convolution_moments,
    gamma_runs,
    gather_chunks,
    localization_consistency,
    mean_and_se,
    positivity_sweep,
    run_coupled_ensemble,
    run_ensemble,
)


def _small_config(*overrides: str) -> SolverConfig:
    config, _ = parse_raw(
        {"grid": {"N": 8, "dt": 0.001, "T": 0.02}, "thresholds": {"M": 50.0}},
        overrides,
    )
    return config


def test_chunk_bounds() -> None:
    assert chunk_bounds(10, 4) == [(0, 4), (4, 8), (8, 10)]
    assert chunk_bounds(3, 32) == [(0, 3)]
    with pytest.raises(ConfigError):
        chunk_bounds(0, 4)
    with pytest.raises(ConfigError):
        chunk_bounds(4, 0)


def test_gather_chunks_keeps_chunk_order() -> None:
    chunks = chunk_bounds(20, 3)
    assert gather_chunks(lambda b: b[0], chunks, workers=4) == [lo for lo, _ in chunks]
    assert gather_chunks(lambda b: b[1], chunks, workers=1) == [hi for _, hi in chunks]


def test_mean_and_se_edge_cases() -> None:
    mean, se = mean_and_se(np.array([]))
    assert np.isnan(mean) and np.isnan(se)
    assert mean_and_se(np.array([2.0])) == (2.0, 0.0)
    assert mean_and_se(np.array([1.0, 3.0])) == pytest.approx((2.0, 1.0))


def test_worker_count_does_not_change_any_number() -> None:
    """Mismo seed y mismo chunk_size: 1 o 4 workers dan arrays idénticos."""
    config = _small_config()
    serial = run_ensemble(config, 10, 7, workers=1, chunk_size=3)
    threaded = run_ensemble(config, 10, 7, workers=4, chunk_size=3)
    np.testing.assert_array_equal(serial.l1, threaded.l1)
    np.testing.assert_array_equal(serial.qv_final, threaded.qv_final)
    np.testing.assert_array_equal(serial.stop_index, threaded.stop_index)
    assert [log.events for log in serial.logs] == [log.events for log in threaded.logs]


def test_replica_r_is_the_single_simulation_of_replica_r() -> None:
    config = _small_config()
    run = run_ensemble(config, 4, 11, chunk_size=4)
    single = simulate(config.run_plan("v"), config.initial_field(), seed=11, replica=2)
    assert run.stop_index[2] == single.stop_index
    recorded = run.l1[2, : single.series.l1.size]
    np.testing.assert_allclose(recorded, single.series.l1, rtol=1e-12, atol=0)


def test_report_summarises_every_replica() -> None:
    run = run_ensemble(_small_config(), 5, 3)
    report = run.report()
    assert [s.replica for s in report.replicas] == list(range(5))
    assert report.aggregates["replicas"] == 5.0
    assert report.aggregates["explosion_rate"] == 0.0
    assert all(s.qv_stopped >= 0.0 for s in report.replicas)
    assert run.t[-1] == pytest.approx(0.02)


def test_coupled_ensemble_and_refinement_pair() -> None:
    config = _small_config()
    coupled = run_coupled_ensemble(config, 6, 1, chunk_size=4)
    assert coupled.replicas == 6
    assert np.all(coupled.checked_steps == 21)
    assert len(coupled.rows()) == 6

    pair = comparison_refinement(config, 4, 1, factor=2)
    assert pair.fine.grid.dt == pytest.approx(config.grid.dt / 2)
    assert np.all(pair.fine.checked_steps == 41)
    with pytest.raises(ConfigError):
        comparison_refinement(config, 4, 1, factor=1)


def test_positivity_rows_are_nonincreasing_as_eps_shrinks() -> None:
    rows = positivity_sweep(_small_config(), [0.1, 0.5, 0.25], 8, 2)
    assert [row.epsilon for row in rows] == [0.5, 0.25, 0.1]
    fractions = [row.fraction for row in rows]
    assert fractions == sorted(fractions, reverse=True)


def test_clamp_levels_agree_until_the_coarser_one_binds() -> None:
    results = localization_consistency(
        _small_config(), [(0.5, 10.0, 0.25, 100.0), (0.4, 5.0, 0.2, 50.0)], 6, 9
    )
    assert [r.pair for r in results] == [(0.5, 10.0, 0.25, 100.0), (0.4, 5.0, 0.2, 50.0)]
    assert all(r.max_diff == 0.0 for r in results)
    assert all(r.compared_steps >= 1 for r in results)


def test_convolution_moments_grow_with_the_horizon() -> None:
    spec = ConvolutionSpec(p=8.0, beta=0.2, T=0.04)
    moments = convolution_moments(spec, 8, 0.005, [0.04, 0.01, 0.02], 6, 3, chunk_size=4)
    assert moments.T_grid == (0.01, 0.02, 0.04)
    assert np.all(np.diff(moments.m) >= 0.0)
    assert moments.replicas == 6


def test_endpoint_variance_matches_the_discrete_formula() -> None:
    grid = GridSpec(N=8, dt=0.01, steps=10)
    spec = ConvolutionSpec(p=8.0, beta=0.2, T=grid.T)
    values = convolution_endpoint(spec, grid, 400, 17)
    assert values.shape == (400, 8)
    empirical = float(np.mean(values[:, 4] ** 2))
    se = float(np.std(values[:, 4] ** 2, ddof=1) / np.sqrt(400))
    assert abs(empirical - discrete_variance(grid)) <= 3 * se


def test_gamma_runs_reuse_seeds_across_gamma() -> None:
    config = _small_config("experiment.claims_critical=false")
    rows = gamma_runs(config, [1.0, 2.0], 4, 5)
    assert [row.gamma for row in rows] == [1.0, 2.0]
    assert all(row.replicas == 4 and 0 <= row.explosions <= 4 for row in rows)


def test_doubling_histogram_is_filled_from_the_replica_logs() -> None:
    config = _small_config("sigma.c=0.5", "initial.level=3.9")
    run = run_ensemble(config, 20, 4, chunk_size=8)
    aggregates = run.report().aggregates
    assert aggregates["doubling_total"] >= 10
    assert aggregates["doubling_max_level"] >= 2
    assert aggregates["doubling_total"] == sum(log.doubling.count("double") for log in run.logs)
