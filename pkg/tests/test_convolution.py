from __future__ import annotations

import numpy as np
import pytest

from packages.critheat_core.application.convolution_service import (
    combined_weights,
    compare_factorization,
    convolution_statistics,
    factorization_check,
    factorization_discrepancy_oracle,
    factorization_reconstruct,
    factorization_weights,
    holder_exponent_bound,
    stochastic_convolution,
    stochastic_convolution_from_noise,
)
from packages.critheat_core.application.noise_service import NoiseStream
from packages.critheat_core.domain.errors import ConfigError, DomainError
from packages.critheat_core.domain.models import ConvolutionSpec, GridSpec

GRID = GridSpec(N=16, dt=0.01, steps=20)
SPEC = ConvolutionSpec(p=8.0, beta=0.2, T=GRID.T)


def test_beta_window_and_holder_exponent() -> None:
    assert holder_exponent_bound(8.0, 0.2) > -1.0
    with pytest.raises(DomainError):
        ConvolutionSpec(p=6.0)
    with pytest.raises(DomainError):
        ConvolutionSpec(p=8.0, beta=0.18)
    with pytest.raises(DomainError):
        ConvolutionSpec(p=8.0, beta=0.25)


def test_pair_exact_weights_make_kappa_one() -> None:
    kappa = combined_weights(0.2, 200, "pair_exact")
    np.testing.assert_allclose(kappa, 1.0, rtol=0, atol=1e-9)


def test_cell_exact_kappa_approaches_one_at_large_lags() -> None:
    kappa = combined_weights(0.2, 400, "cell_exact")
    assert abs(kappa[-1] - 1.0) < abs(kappa[0] - 1.0)
    assert abs(kappa[-1] - 1.0) < 0.05


def test_unknown_weight_scheme_is_a_config_error() -> None:
    with pytest.raises(ConfigError):
        factorization_weights(0.2, 10, "midpoint")  # type: ignore[arg-type]


def test_convolution_is_linear_in_a_constant_phi() -> None:
    noise = NoiseStream.for_replica(GRID, 4, 0).take(GRID.steps)
    one = stochastic_convolution_from_noise(SPEC, GRID, noise)
    two = stochastic_convolution_from_noise(
        ConvolutionSpec(p=8.0, beta=0.2, T=GRID.T, phi_level=2.0), GRID, noise
    )
    np.testing.assert_allclose(two.z, 2.0 * one.z, rtol=1e-12, atol=1e-14)
    np.testing.assert_array_equal(one.z[0], np.zeros(GRID.N))
    direct = stochastic_convolution(SPEC, GRID, seed=4)
    np.testing.assert_array_equal(direct.z, one.z)


def test_field_process_phi_is_bounded_by_its_level() -> None:
    spec = ConvolutionSpec(p=8.0, beta=0.2, T=GRID.T, phi_kind="field_process", phi_level=0.5)
    noise = NoiseStream.for_replica(GRID, 4, 0).take(GRID.steps)
    path = stochastic_convolution_from_noise(spec, GRID, noise)
    assert np.all(np.abs(path.eta) <= 0.5 * np.abs(noise) / GRID.dx + 1e-15)


def test_statistics_follow_the_stored_path() -> None:
    noise = np.stack([NoiseStream.for_replica(GRID, 8, r).take(GRID.steps) for r in range(3)])
    marks = np.array([0, 5, GRID.steps])
    stats = convolution_statistics(SPEC, GRID, noise, marks)
    for r in range(3):
        z = stochastic_convolution_from_noise(SPEC, GRID, noise[r]).z
        np.testing.assert_allclose(stats.final[r], z[-1], rtol=0, atol=1e-12)
        running = np.maximum.accumulate(np.max(np.abs(z), axis=-1))
        np.testing.assert_allclose(stats.sup_at[r], running[marks], rtol=0, atol=1e-12)


def test_statistics_reject_checkpoints_past_the_horizon() -> None:
    noise = np.zeros((1, GRID.steps, GRID.N))
    with pytest.raises(DomainError):
        convolution_statistics(SPEC, GRID, noise, np.array([GRID.steps + 1]))


def test_pair_exact_reconstruction_is_exact() -> None:
    noise = NoiseStream.for_replica(GRID, 2, 0).take(GRID.steps)
    result = compare_factorization(SPEC, GRID, noise, scheme="pair_exact")
    assert result.rel_sup_diff <= 1e-8
    assert factorization_discrepancy_oracle(SPEC, GRID, "pair_exact") <= 1e-16


def test_cell_exact_refinement_shrinks_the_oracle() -> None:
    """El error relativo del oráculo baja en cada nivel de refinamiento."""
    levels = factorization_check(SPEC, GRID, seed=5, levels=3, scheme="cell_exact")
    assert [c.steps for c in levels] == [20, 40, 80]
    assert levels[1].dt == pytest.approx(GRID.dt / 2)
    rel = [c.oracle_rel_rms for c in levels]
    assert rel[0] > rel[1] > rel[2] > 0.0


def test_factorization_check_needs_a_level() -> None:
    with pytest.raises(ConfigError):
        factorization_check(SPEC, GRID, seed=0, levels=0)


def test_reconstruction_tracks_the_whole_path() -> None:
    noise = NoiseStream.for_replica(GRID, 4, 0).take(GRID.steps)
    path = stochastic_convolution_from_noise(SPEC, GRID, noise)
    rebuilt = factorization_reconstruct(SPEC, GRID, path.eta, "pair_exact")
    assert rebuilt.shape == path.z.shape
    assert np.all(rebuilt[0] == 0.0)
    np.testing.assert_allclose(rebuilt, path.z, rtol=0, atol=1e-8 * np.max(np.abs(path.z)))
