from __future__ import annotations

import math

import numpy as np
import pytest

from packages.critheat_core.application.convolution_service import (
    FactorizationComparison,
    factorization_check,
)
from packages.critheat_core.application.heat_kernel_service import KernelCheck
from packages.critheat_core.application.noise_service import CovarianceReport
from packages.critheat_core.domain.errors import ConfigError
from packages.critheat_core.domain.models import (
    ConvolutionSpec,
    DoublingLog,
    GridSpec,
    StopEvent,
    StopEventLog,
)
from packages.critheat_lab.ensemble import (
    ConvolutionMoments,
    CoupledEnsemble,
    EnsembleRun,
    GammaRow,
    LocalizationResult,
    PositivityRow,
    RefinementPair,
)
from packages.critheat_lab.verifiers import (
    agreement_verdict,
    comparison_verdict,
    covariance_verdict,
    doob_bound,
    doob_bound_check,
    doubling_finiteness_check,
    factorization_verdict,
    gamma_sweep_verdict,
    kernel_verdicts,
    level_scaling_check,
    localization_verdict,
    moment_scaling_check,
    positivity_verdict,
    quadratic_variation_check,
    slice_moment_verdicts,
    submartingale_test,
    variance_verdict,
    wilson_interval,
)

GRID = GridSpec(N=8, dt=0.1, steps=2)


def _run(
    l1: np.ndarray,
    sup_l1: np.ndarray | None = None,
    qv: np.ndarray | None = None,
    logs: list[StopEventLog] | None = None,
    stop: int | None = None,
) -> EnsembleRun:
    R, K = l1.shape
    stopped = np.zeros(R) if qv is None else qv
    return EnsembleRun(
        grid=GRID,
        equation="v",
        master_seed=0,
        initial_l1=2 * math.pi,
        record_index=np.arange(K),
        l1=l1,
        linf=l1 / (2 * math.pi),
        qv=np.zeros((R, K)),
        stop_index=np.full(R, K - 1 if stop is None else stop),
        stop_kind=[None] * R,
        sup_l1=l1.max(axis=1) if sup_l1 is None else sup_l1,
        running_min=np.ones(R),
        qv_final=stopped,
        qv_stopped=stopped,
        final_l1=l1[:, -1],
        final_linf=l1[:, -1] / (2 * math.pi),
        logs=logs if logs is not None else [StopEventLog() for _ in range(R)],
    )


def _coupled(violations: int, checked: int = 100, replicas: int = 10) -> CoupledEnsemble:
    per = np.zeros(replicas, dtype=np.int64)
    per[0] = violations
    return CoupledEnsemble(
        grid=GRID,
        violation_steps=per,
        checked_steps=np.full(replicas, checked),
        max_violation=np.where(per > 0, 1e-3, 0.0),
        first_violation=np.where(per > 0, 1, -1),
        min_gap=np.zeros(replicas),
        exploded=np.zeros(replicas, dtype=bool),
        stop_index=np.full(replicas, checked - 1),
    )


def test_wilson_interval() -> None:
    assert wilson_interval(0, 0) == (0.0, 1.0)
    lo, hi = wilson_interval(0, 10)
    assert lo == 0.0
    assert hi == pytest.approx(0.2775, abs=1e-3)
    lo, hi = wilson_interval(5, 10)
    assert 0.5 - lo == pytest.approx(hi - 0.5)


def test_kernel_verdicts_are_prefixed() -> None:
    checks = [
        KernelCheck("sup_bound", True, 0.9, 1.0, {"violations": 0}),
        KernelCheck("semigroup", False, 1e-9, 1e-12),
    ]
    verdicts = kernel_verdicts(checks)
    assert [(v.verifier, v.status) for v in verdicts] == [
        ("kernel.sup_bound", "pass"),
        ("kernel.semigroup", "fail"),
    ]
    assert verdicts[0].details == {"violations": 0}


def test_covariance_verdict_uses_three_standard_errors() -> None:
    ok = covariance_verdict("noise.isometry", CovarianceReport(1.0, 1.02, 0.01, 200))
    assert ok.status == "pass"
    assert ok.margin == pytest.approx(0.01)
    bad = covariance_verdict("noise.isometry", CovarianceReport(1.0, 1.05, 0.01, 200))
    assert bad.status == "fail"
    assert bad.sample_size == 200


def test_slice_moments_of_correct_noise_pass() -> None:
    dt, dx = 1e-3, 2 * math.pi / 64
    samples = math.sqrt(dt * dx) * np.random.default_rng(1).standard_normal((200, 64))
    verdicts = slice_moment_verdicts(samples, dt, dx)
    assert [v.verifier for v in verdicts] == ["noise.slice_mean", "noise.slice_variance"]
    assert all(v.status == "pass" for v in verdicts)
    assert verdicts[1].threshold == pytest.approx(dt * dx)


def test_variance_verdict() -> None:
    samples = 2.0 * np.random.default_rng(3).standard_normal(2000)
    assert variance_verdict("convolution.isometry", samples, 4.0, 2000).status == "pass"
    assert variance_verdict("convolution.isometry", samples, 8.0, 2000).status == "fail"


def test_submartingale_is_inconclusive_on_small_ensembles() -> None:
    verdict = submartingale_test(_run(np.ones((10, 3))))
    assert verdict.status == "inconclusive"
    assert verdict.sample_size == 10


def test_submartingale_pass_and_fail() -> None:
    rising = np.tile(np.array([1.0, 1.5, 2.0]), (120, 1))
    assert submartingale_test(_run(rising)).status == "pass"
    falling = np.tile(np.array([2.0, 1.5, 1.0]), (120, 1))
    verdict = submartingale_test(_run(falling))
    assert verdict.status == "fail"
    assert verdict.details["means"] == [2.0, 1.5, 1.0]


def test_doob_bound_values() -> None:
    assert doob_bound(2 * math.pi, 1000.0, 0.5, 4.0, 1.0) == pytest.approx(
        2 * math.pi * 17 / 1000
    )
    assert doob_bound(2 * math.pi, 1000.0, 0.5, None, 1.0) == pytest.approx(2 * math.pi / 1000)


def test_doob_bound_check() -> None:
    l1 = np.full((200, 3), 2 * math.pi)
    sup = np.full(200, 2 * math.pi)
    sup[:5] = 2000.0
    passed = doob_bound_check(_run(l1, sup_l1=sup), 1000.0, 0.5, 4.0, 1.0)
    assert passed.status == "pass"
    assert passed.details["exceedances"] == 5

    sup[:100] = 2000.0
    assert doob_bound_check(_run(l1, sup_l1=sup), 1000.0, 0.5, 4.0, 1.0).status == "fail"
    vacuous = doob_bound_check(_run(l1, sup_l1=sup), 5.0, 0.5, 4.0, 1.0)
    assert vacuous.status == "vacuous"
    assert vacuous.ok


def test_quadratic_variation_check() -> None:
    l1 = np.ones((50, 2))
    assert quadratic_variation_check(_run(l1, qv=np.full(50, 10.0)), M=10.0).status == "pass"
    assert quadratic_variation_check(_run(l1, qv=np.full(50, 101.0)), M=10.0).status == "fail"


def test_l1_verdicts_need_the_horizon_covered() -> None:
    """Si la réplica mediana se para en el índice 0, un pass se vuelve inconclusive."""
    rising = np.tile(np.array([1.0, 1.5, 2.0]), (120, 1))
    early = submartingale_test(_run(rising, stop=0))
    assert early.status == "inconclusive"
    assert early.details["stop_index"] == {"q10": 0.0, "median": 0.0, "q90": 0.0, "steps": 2}
    assert "median stop index" in early.details["reason"]
    full = submartingale_test(_run(rising))
    assert full.status == "pass"
    assert full.details["stop_index"]["median"] == 2.0

    falling = np.tile(np.array([2.0, 1.5, 1.0]), (120, 1))
    assert submartingale_test(_run(falling, stop=0)).status == "fail"

    flat = np.full((200, 3), 2 * math.pi)
    assert doob_bound_check(_run(flat, stop=0), 1000.0, 0.5, 4.0, 1.0).status == "inconclusive"
    qv = np.full(200, 10.0)
    assert quadratic_variation_check(_run(flat, qv=qv, stop=0), M=10.0).status == "inconclusive"
    assert quadratic_variation_check(_run(flat, qv=qv + 100, stop=0), M=10.0).status == "fail"


def _moments(m: np.ndarray, level: float = 1.0, p: float = 8.0) -> ConvolutionMoments:
    return ConvolutionMoments(
        T_grid=(0.1, 0.2, 0.4, 0.8), p=p, level=level, m=m, se=np.zeros_like(m), replicas=32
    )


def test_level_scaling_is_exact_for_linear_moments() -> None:
    base = _moments(np.array([1.0, 2.0, 3.0, 4.0]))
    assert level_scaling_check(base, _moments(base.m * 256.0, level=2.0)).status == "pass"
    assert level_scaling_check(base, _moments(base.m * 255.0, level=2.0)).status == "fail"


def test_moment_scaling_against_the_power_law() -> None:
    T = np.array([0.1, 0.2, 0.4, 0.8])
    exact = _moments(3.0 * T**1.5)
    verdict = moment_scaling_check(exact)
    assert verdict.status == "pass"
    assert verdict.details["fitted_slope"] == pytest.approx(1.5)

    steep = _moments(3.0 * T**4)
    assert moment_scaling_check(steep).status == "fail"


def test_moment_scaling_needs_four_horizons() -> None:
    short = ConvolutionMoments((0.1, 0.2, 0.4), 8.0, 1.0, np.ones(3), np.zeros(3), 32)
    with pytest.raises(ConfigError) as exc:
        moment_scaling_check(short)
    assert exc.value.key_path == "experiment.T_grid"


def _level(steps: int, rel: float, oracle: float) -> FactorizationComparison:
    return FactorizationComparison(
        steps=steps,
        dt=1.0 / steps,
        sup_abs_diff=rel,
        sup_direct=1.0,
        oracle_rms=oracle,
        reference_rms=1.0,
    )


def test_factorization_verdict() -> None:
    halving = [_level(10, 0.2, 0.1), _level(20, 0.08, 0.07), _level(40, 0.03, 0.05)]
    verdict = factorization_verdict(halving)
    assert verdict.status == "pass"
    assert verdict.details["sup_ratios"] == pytest.approx([2.5, 8 / 3])
    # stalls around 1.13 per halving and never reaches 5%
    stalled = [
        _level(64, 0.0733, 0.0633),
        _level(128, 0.0650, 0.046),
        _level(256, 0.0529, 0.033),
    ]
    assert factorization_verdict(stalled).status == "fail"
    slow = [_level(10, 0.04, 0.1), _level(20, 0.03, 0.07)]
    assert factorization_verdict(slow).status == "fail"
    coarse = [_level(10, 0.2, 0.1), _level(20, 0.1, 0.07)]
    assert factorization_verdict(coarse).status == "fail"
    converged = [_level(64, 3e-15, 0.0), _level(128, 5e-15, 0.0)]
    assert factorization_verdict(converged).status == "pass"
    assert factorization_verdict([_level(64, 3e-15, 0.0), _level(128, 1e-3, 0.0)]).status == (
        "fail"
    )


def test_factorization_at_the_reference_resolution() -> None:
    """N=32, 64 pasos, T=0.5, p=8, beta=0.2: pair_exact pasa y cell_exact se estanca."""
    grid = GridSpec(N=32, dt=0.5 / 64, steps=64)
    spec = ConvolutionSpec(p=8.0, beta=0.2, T=grid.T)
    exact = factorization_check(spec, grid, seed=5, levels=2)
    verdict = factorization_verdict(exact)
    assert verdict.status == "pass"
    assert all(level.rel_sup_diff <= 1e-9 for level in exact)

    cells = factorization_check(spec, grid, seed=5, levels=2, scheme="cell_exact")
    assert factorization_verdict(cells).status == "fail"


def _doubling_log(levels: int, explode_at: int | None = None) -> StopEventLog:
    doubling = DoublingLog()
    doubling.append(0, 1, "start")
    for m in range(2, levels + 1):
        doubling.append(m, m, "double")
    events = []
    if explode_at is not None:
        events.append(StopEvent("explosion", 1e6, explode_at, math.inf))
    return StopEventLog(events=events, doubling=doubling)


def test_doubling_finiteness() -> None:
    logs = [_doubling_log(2 + r % 3) for r in range(30)]
    verdict = doubling_finiteness_check(_run(np.ones((30, 2)), logs=logs))
    assert verdict.status == "pass"
    assert verdict.details["per_level"] == {"1": 30, "2": 20, "3": 10}

    logs[0] = _doubling_log(2, explode_at=5)
    early = doubling_finiteness_check(_run(np.ones((30, 2)), logs=logs))
    assert early.status == "fail"
    assert early.details["early_explosions"] == 1
    assert doubling_finiteness_check(_run(np.ones((30, 2)), logs=logs), critical=False).ok


def test_doubling_check_needs_events_and_horizon() -> None:
    quiet = doubling_finiteness_check(_run(np.ones((30, 2))))
    assert quiet.status == "inconclusive"
    assert quiet.details["reason"] == "no doubling events"
    logs = [_doubling_log(3) for _ in range(30)]
    short = doubling_finiteness_check(_run(np.ones((30, 2)), logs=logs, stop=0))
    assert short.status == "inconclusive"
    assert short.details["stop_index"]["median"] == 0.0
    logs[0] = _doubling_log(2, explode_at=0)
    assert doubling_finiteness_check(_run(np.ones((30, 2)), logs=logs, stop=0)).status == "fail"


def test_gamma_sweep_verdict() -> None:
    rising = [GammaRow(1.0, 0, 100), GammaRow(1.5, 20, 100), GammaRow(2.0, 90, 100)]
    verdict = gamma_sweep_verdict(rising, {"N": 64.0, "dt": 1e-3})
    assert verdict.status == "pass"
    assert verdict.details["N"] == 64.0
    assert verdict.details["endpoints"] == []
    falling = [GammaRow(1.0, 90, 100), GammaRow(2.0, 5, 100)]
    assert gamma_sweep_verdict(falling, {}).status == "fail"


def test_gamma_sweep_checks_the_two_ends() -> None:
    tame_end = [GammaRow(1.0, 0, 200), GammaRow(1.5, 0, 200), GammaRow(2.0, 0, 200)]
    verdict = gamma_sweep_verdict(tame_end, {})
    assert verdict.status == "fail"
    assert verdict.details["endpoints"] == ["no explosion at gamma=2"]
    linear_blows = [GammaRow(1.0, 1, 200), GammaRow(1.5, 40, 200), GammaRow(2.0, 190, 200)]
    assert gamma_sweep_verdict(linear_blows, {}).details["endpoints"] == [
        "1 explosions at gamma=1"
    ]
    assert gamma_sweep_verdict(linear_blows, {}).status == "fail"
    interior = [GammaRow(1.25, 0, 200), GammaRow(1.75, 0, 200)]
    assert gamma_sweep_verdict(interior, {}).status == "pass"


def test_comparison_verdict() -> None:
    assert comparison_verdict(RefinementPair(4, _coupled(0), _coupled(0))).status == "pass"
    assert comparison_verdict(RefinementPair(4, _coupled(0), _coupled(1))).status == "fail"
    assert comparison_verdict(RefinementPair(4, _coupled(40), _coupled(8))).status == "pass"
    assert comparison_verdict(RefinementPair(4, _coupled(40), _coupled(20))).status == "fail"
    assert comparison_verdict(RefinementPair(4, _coupled(40), _coupled(0))).status == "pass"


def test_positivity_verdict() -> None:
    rows = [PositivityRow(0.1, 1, 10), PositivityRow(0.5, 4, 10), PositivityRow(0.25, 2, 10)]
    verdict = positivity_verdict(rows)
    assert verdict.status == "pass"
    assert verdict.details["eps"] == [0.5, 0.25, 0.1]
    assert positivity_verdict([PositivityRow(0.5, 1, 10), PositivityRow(0.1, 3, 10)]).status == (
        "fail"
    )


def test_localization_verdict() -> None:
    same = LocalizationResult((0.5, 10.0, 0.25, 100.0), 0.0, 8, 2, 11)
    off = LocalizationResult((0.4, 5.0, 0.2, 50.0), 1e-6, 8, 3, 11)
    assert localization_verdict([same]).status == "pass"
    assert localization_verdict([same, off]).status == "fail"


def test_agreement_verdict() -> None:
    a = np.array([1.0, 2.0])
    assert agreement_verdict("noise.reproducibility", a, a.copy()).status == "pass"
    assert agreement_verdict("noise.reproducibility", a, a + 1e-15).status == "fail"
    assert agreement_verdict("x", a, a + 1e-15, tol=1e-12).status == "pass"
    mismatch = agreement_verdict("x", a, np.ones(3))
    assert mismatch.status == "fail"
    assert mismatch.tolerance == "shape mismatch"
