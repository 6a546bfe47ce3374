"""Statistical verdicts over ensemble outputs.

Means are compared with a 3-standard-error slack, frequencies through Wilson score
intervals. Every verdict records its tolerance and the sample size it used.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence

import numpy as np
from scipy.stats import norm

from packages.critheat_core.application.convolution_service import FactorizationComparison
from packages.critheat_core.application.heat_kernel_service import KernelCheck
from packages.critheat_core.application.noise_service import CovarianceReport
from packages.critheat_core.application.stopping_service import doubling_statistics
from packages.critheat_core.domain.errors import ConfigError
from packages.critheat_core.domain.models import TWO_PI
from packages.critheat_lab.domain.models import Verdict, VerdictStatus, finite_or_none
from packages.critheat_lab.ensemble import (
    ConvolutionMoments,
    EnsembleRun,
    GammaRow,
    LocalizationResult,
    PositivityRow,
    RefinementPair,
    mean_and_se,
)

logger = logging.getLogger(__name__)

MIN_REPLICAS = 100
SE_SLACK = 3.0
# rounding allowance on means that are exactly monotone in exact arithmetic
ROUNDING = 1e-12
# relative gap treated as already converged
FACTORIZATION_FLOOR = 1e-9
# share of the horizon the median replica must cover before the L1 verdicts count
MIN_COVERAGE = 0.1


def wilson_interval(successes: int, n: int, alpha: float = 0.05) -> tuple[float, float]:
    """Two-sided Wilson score interval for a binomial proportion."""
    if n <= 0:
        return 0.0, 1.0
    z = float(norm.ppf(1.0 - alpha / 2.0))
    phat = successes / n
    denom = 1.0 + z * z / n
    center = phat + z * z / (2.0 * n)
    margin = z * math.sqrt(phat * (1.0 - phat) / n + z * z / (4.0 * n * n))
    return max(0.0, (center - margin) / denom), min(1.0, (center + margin) / denom)


def _verdict(
    verifier: str,
    status: VerdictStatus,
    statistic: float | None,
    threshold: float | None,
    tolerance: str,
    sample_size: int,
    margin: float | None = None,
    **details: object,
) -> Verdict:
    verdict = Verdict(
        verifier=verifier,
        status=status,
        statistic=finite_or_none(statistic) if statistic is not None else None,
        threshold=finite_or_none(threshold) if threshold is not None else None,
        margin=finite_or_none(margin) if margin is not None else None,
        tolerance=tolerance,
        sample_size=sample_size,
        details=dict(details),
    )
    logger.info("verdict", extra={"verifier": verifier, "status": status, "event": "verdict"})
    return verdict


def kernel_verdicts(checks: Sequence[KernelCheck]) -> list[Verdict]:
    return [
        _verdict(
            f"kernel.{check.name}",
            "pass" if check.passed else "fail",
            check.statistic,
            check.threshold,
            "deterministic",
            1,
            **check.details,
        )
        for check in checks
    ]


def covariance_verdict(name: str, report: CovarianceReport) -> Verdict:
    gap = abs(report.empirical_cov - report.target)
    return _verdict(
        name,
        "pass" if report.passed else "fail",
        report.empirical_cov,
        report.target,
        "3 SE",
        report.replicas,
        margin=SE_SLACK * report.std_err - gap,
        std_err=report.std_err,
    )


def slice_moment_verdicts(samples: np.ndarray, dt: float, dx: float) -> list[Verdict]:
    """Cell mean 0 and cell variance dt*dx, each within 3 SE, from (n, N) slices."""
    values = samples.ravel()
    n = int(values.size)
    mean, mean_se = mean_and_se(values)
    target = dt * dx
    squares = values * values
    var, var_se = mean_and_se(squares)
    return [
        _verdict(
            "noise.slice_mean",
            "pass" if abs(mean) <= SE_SLACK * mean_se else "fail",
            mean,
            0.0,
            "3 SE",
            n,
            margin=SE_SLACK * mean_se - abs(mean),
        ),
        _verdict(
            "noise.slice_variance",
            "pass" if abs(var - target) <= SE_SLACK * var_se else "fail",
            var,
            target,
            "3 SE",
            n,
            margin=SE_SLACK * var_se - abs(var - target),
        ),
    ]


def variance_verdict(name: str, samples: np.ndarray, target: float, replicas: int) -> Verdict:
    """E X^2 of centred samples against an exact variance."""
    squares = np.asarray(samples, dtype=np.float64) ** 2
    var, se = mean_and_se(squares)
    gap = abs(var - target)
    status: VerdictStatus = "pass" if gap <= SE_SLACK * se + ROUNDING * target else "fail"
    return _verdict(name, status, var, target, "3 SE", replicas, margin=SE_SLACK * se - gap)


def _columns(run: EnsembleRun, times: Sequence[float] | None) -> np.ndarray:
    if times is None:
        return np.arange(run.record_index.size)
    recorded = run.t
    return np.array(sorted({int(np.argmin(np.abs(recorded - t))) for t in times}))


def stop_quantiles(run: EnsembleRun) -> dict[str, float]:
    """10/50/90% quantiles of the stop index next to the step count."""
    q10, q50, q90 = np.quantile(run.stop_index, [0.1, 0.5, 0.9])
    return {"q10": float(q10), "median": float(q50), "q90": float(q90), "steps": run.grid.steps}


def short_lived(run: EnsembleRun, coverage: float = MIN_COVERAGE) -> str | None:
    """Reason string when the median replica stops before `coverage` of the horizon."""
    median = float(np.median(run.stop_index))
    if median < coverage * run.grid.steps:
        return f"median stop index {median:g} is below {coverage:g} of {run.grid.steps} steps"
    return None


def submartingale_test(run: EnsembleRun, times: Sequence[float] | None = None) -> Verdict:
    """Mean of the stopped L1 mass must not decrease beyond 3 SE of the paired difference."""
    cols = _columns(run, times)
    values = run.l1[:, cols]
    finite = np.all(np.isfinite(values), axis=1)
    kept = values[finite]
    n = int(kept.shape[0])
    means = kept.mean(axis=0) if n else np.full(cols.size, math.nan)
    if run.replicas < MIN_REPLICAS:
        return _verdict(
            "l1.submartingale",
            "inconclusive",
            None,
            0.0,
            "3 SE of paired differences",
            run.replicas,
            reason=f"needs at least {MIN_REPLICAS} replicas",
            stop_index=stop_quantiles(run),
        )
    margins = []
    for k in range(cols.size - 1):
        diff_mean, diff_se = mean_and_se(kept[:, k + 1] - kept[:, k])
        slack = SE_SLACK * diff_se + ROUNDING * max(1.0, abs(float(means[k])))
        margins.append(diff_mean + slack)
    worst = min(margins) if margins else 0.0
    status: VerdictStatus = "pass" if worst >= 0.0 else "fail"
    reason = short_lived(run) if status == "pass" else None
    return _verdict(
        "l1.submartingale",
        "inconclusive" if reason else status,
        worst,
        0.0,
        "3 SE of paired differences",
        n,
        margin=worst,
        times=[float(t) for t in run.t[cols]],
        means=[float(m) for m in means],
        non_finite_replicas=int(np.sum(~finite)),
        stop_index=stop_quantiles(run),
        reason=reason,
    )


def doob_bound(
    initial_l1: float, M: float, epsilon: float, alpha: float | None, T: float
) -> float:
    """(|v(0)|_1 + 2 pi T eps^-alpha) / M; `alpha=None` is the drift-free case."""
    drift_mass = TWO_PI * T * epsilon**-alpha if alpha is not None else 0.0
    return (initial_l1 + drift_mass) / M


def doob_bound_check(
    run: EnsembleRun, M: float, epsilon: float, alpha: float | None, T: float
) -> Verdict:
    """P(sup I > M) against (|v(0)|_1 + 2 pi T eps^-alpha) / M via a Wilson interval."""
    bound = doob_bound(run.initial_l1, M, epsilon, alpha, T)
    hits = int(np.sum(~(run.sup_l1 <= M)))
    lo, hi = wilson_interval(hits, run.replicas)
    if bound >= 1.0:
        return _verdict(
            "l1.doob_bound",
            "vacuous",
            hits / run.replicas,
            bound,
            "Wilson 95%",
            run.replicas,
            ci=[lo, hi],
        )
    status: VerdictStatus = "pass" if lo <= bound else "fail"
    reason = short_lived(run) if status == "pass" else None
    return _verdict(
        "l1.doob_bound",
        "inconclusive" if reason else status,
        hits / run.replicas,
        bound,
        "Wilson 95%",
        run.replicas,
        margin=bound - lo,
        ci=[lo, hi],
        exceedances=hits,
        stop_index=stop_quantiles(run),
        reason=reason,
    )


def quadratic_variation_check(run: EnsembleRun, M: float) -> Verdict:
    """mean + 3 SE of the qv integral frozen at tau_l1, the terminal stop or the horizon."""
    mean, se = mean_and_se(run.qv_stopped)
    upper = mean + SE_SLACK * se
    threshold = M * M
    status: VerdictStatus = "pass" if upper <= threshold else "fail"
    reason = short_lived(run) if status == "pass" else None
    return _verdict(
        "l1.quadratic_variation",
        "inconclusive" if reason else status,
        upper,
        threshold,
        "mean + 3 SE",
        run.replicas,
        margin=threshold - upper,
        stop_index=stop_quantiles(run),
        reason=reason,
        mean=finite_or_none(mean),
        std_err=finite_or_none(se),
    )


def moment_exponent(p: float) -> float:
    return p / 4.0 - 0.5


def level_scaling_check(base: ConvolutionMoments, scaled: ConvolutionMoments) -> Verdict:
    """Z is linear in a constant phi: m(T) scales by the level ratio to the p-th power."""
    target = (scaled.level / base.level) ** base.p if base.level else 0.0
    ratio = scaled.m / np.where(base.m > 0, base.m, 1.0)
    rel = float(np.max(np.abs(ratio - target) / max(target, 1.0))) if base.level else 0.0
    return _verdict(
        "convolution.level_scaling",
        "pass" if rel <= 1e-9 else "fail",
        rel,
        1e-9,
        "exact linearity",
        base.replicas,
        margin=1e-9 - rel,
        target_ratio=target,
    )


def moment_scaling_check(moments: ConvolutionMoments) -> Verdict:
    """m(T) <= 2 c L^p T^(p/4 - 1/2) with c fitted on the two smallest horizons."""
    T = np.asarray(moments.T_grid)
    if T.size < 4:
        raise ConfigError("T_grid needs at least 4 horizons", "experiment.T_grid")
    p, L = moments.p, moments.level
    details: dict[str, object] = {
        "T_grid": [float(t) for t in T],
        "m": [float(m) for m in moments.m],
        "se": [float(s) for s in moments.se],
    }
    if L == 0.0 or np.all(moments.m == 0.0):
        return _verdict(
            "convolution.moment_scaling",
            "pass",
            0.0,
            2.0,
            "fitted constant x2",
            moments.replicas,
            **details,
        )
    scale = L**p * T ** moment_exponent(p)
    c = float(np.max(moments.m[:2] / scale[:2]))
    ratios = moments.m[2:] / (c * scale[2:])
    worst = float(np.max(ratios))
    slope = float(np.polyfit(np.log(T), np.log(moments.m), 1)[0])
    details.update(fitted_constant=c, fitted_slope=slope, expected_slope=moment_exponent(p))
    return _verdict(
        "convolution.moment_scaling",
        "pass" if worst <= 2.0 else "fail",
        worst,
        2.0,
        "fitted constant x2",
        moments.replicas,
        margin=2.0 - worst,
        **details,
    )


def factorization_verdict(
    levels: Sequence[FactorizationComparison],
    limit: float = 0.05,
    min_ratio: float = 2.0,
    floor: float = FACTORIZATION_FLOOR,
) -> Verdict:
    """Relative sup gap at least halved per dt halving and within `limit` at the finest dt.

    A finer level already at the round-off `floor` counts as halved.
    """
    rel = [level.rel_sup_diff for level in levels]
    ratios = [a / b if b else None for a, b in zip(rel, rel[1:], strict=False)]
    halving = all(
        fine <= floor or (ratio is not None and ratio >= min_ratio)
        for fine, ratio in zip(rel[1:], ratios, strict=False)
    )
    finest = rel[-1]
    status: VerdictStatus = "pass" if halving and finest <= limit else "fail"
    return _verdict(
        "convolution.factorization",
        status,
        finest,
        limit,
        f"relative sup gap at the finest dt; ratio >= {min_ratio:g} per halving",
        len(levels),
        margin=limit - finest,
        dt=[level.dt for level in levels],
        rel_sup_diff=rel,
        oracle_rel_rms=[level.oracle_rel_rms for level in levels],
        sup_ratios=ratios,
        floor=floor,
    )


def doubling_finiteness_check(run: EnsembleRun, critical: bool = True) -> Verdict:
    """Per-level doubling counts decay with level; no early explosion when critical.

    Only levels with at least 10 events enter the trend test. An early explosion fails
    the check outright; a pass needs at least one doubling and enough horizon covered.
    """
    stats = doubling_statistics(log.doubling for log in run.logs)
    populated = [(m, c) for m, c in stats.per_level.items() if c >= 10]
    decaying = all(b[1] <= a[1] for a, b in zip(populated, populated[1:], strict=False))
    early = 0
    for log in run.logs:
        blow = log.first("explosion")
        if blow is None:
            continue
        stops = [e.t_index for e in log.events if e.kind in ("tau_inf", "tau_l1")]
        if not stops or min(stops) > blow.t_index:
            early += 1
    ok = decaying and (early == 0 or not critical)
    reason = None
    if ok:
        reason = short_lived(run)
        if stats.total_doubles == 0:
            reason = "no doubling events"
    return _verdict(
        "doubling.finiteness",
        "inconclusive" if reason else ("pass" if ok else "fail"),
        float(stats.total_doubles),
        None,
        "monotone per-level counts on levels with >= 10 events",
        run.replicas,
        per_level={str(m): c for m, c in stats.per_level.items()},
        max_level=stats.max_level,
        early_explosions=early,
        critical=critical,
        per_replica=[log.doubling.count("double") for log in run.logs],
        stop_index=stop_quantiles(run),
        reason=reason,
    )


def gamma_table(rows: Sequence[GammaRow]) -> list[dict[str, float]]:
    table = []
    for row in rows:
        lo, hi = wilson_interval(row.explosions, row.replicas)
        table.append(
            {
                "gamma": row.gamma,
                "frequency": row.explosions / row.replicas,
                "ci_low": lo,
                "ci_high": hi,
            }
        )
    return table


def gamma_sweep_verdict(rows: Sequence[GammaRow], resolution: dict[str, float]) -> Verdict:
    """Explosion frequencies nondecreasing in gamma up to Wilson-interval overlap.

    When the grid holds them, gamma = 1 must show no explosion and gamma = 2 at least one.
    """
    table = gamma_table(rows)
    breaks = [
        (a["gamma"], b["gamma"])
        for a, b in zip(table, table[1:], strict=False)
        if b["frequency"] < a["frequency"] and b["ci_high"] < a["ci_low"]
    ]
    endpoints = []
    for row in rows:
        if math.isclose(row.gamma, 1.0) and row.explosions > 0:
            endpoints.append(f"{row.explosions} explosions at gamma=1")
        if math.isclose(row.gamma, 2.0) and row.explosions == 0:
            endpoints.append("no explosion at gamma=2")
    replicas = rows[0].replicas if rows else 0
    return _verdict(
        "explosion.gamma_sweep",
        "pass" if not breaks and not endpoints else "fail",
        float(len(breaks)),
        0.0,
        "Wilson 95% overlap; frequency 0 at gamma=1 and > 0 at gamma=2",
        replicas,
        table=table,
        breaks=[list(b) for b in breaks],
        endpoints=endpoints,
        **resolution,
    )


def comparison_verdict(pair: RefinementPair) -> Verdict:
    """Violation rate beyond tol_order must shrink by the refinement factor."""
    coarse, fine = pair.coarse.violation_rate, pair.fine.violation_rate
    details = {
        "coarse_rate": coarse,
        "fine_rate": fine,
        "coarse_max_violation": float(np.max(pair.coarse.max_violation)),
        "fine_max_violation": float(np.max(pair.fine.max_violation)),
        "factor": pair.factor,
    }
    if coarse == 0.0:
        return _verdict(
            "comparison.refinement",
            "pass" if fine == 0.0 else "fail",
            0.0,
            float(pair.factor),
            "rate ratio",
            pair.coarse.replicas,
            **details,
        )
    ratio = coarse / fine if fine > 0.0 else math.inf
    return _verdict(
        "comparison.refinement",
        "pass" if ratio >= pair.factor else "fail",
        ratio,
        float(pair.factor),
        "rate ratio",
        pair.coarse.replicas,
        margin=ratio - pair.factor,
        **details,
    )


def positivity_verdict(rows: Sequence[PositivityRow]) -> Verdict:
    """Fractions below eps reported per eps; they must not grow as eps decreases."""
    ordered = sorted(rows, key=lambda row: row.epsilon, reverse=True)
    fractions = [row.fraction for row in ordered]
    monotone = all(b <= a for a, b in zip(fractions, fractions[1:], strict=False))
    return _verdict(
        "solver.positivity",
        "pass" if monotone else "fail",
        fractions[-1] if fractions else 0.0,
        None,
        "nonincreasing as eps decreases",
        ordered[0].replicas if ordered else 0,
        eps=[row.epsilon for row in ordered],
        fractions=fractions,
    )


def localization_verdict(results: Sequence[LocalizationResult], tol: float = 1e-12) -> Verdict:
    worst = max((r.max_diff for r in results), default=0.0)
    return _verdict(
        "solver.localization",
        "pass" if worst <= tol else "fail",
        worst,
        tol,
        "max abs difference before the first clamp activation",
        results[0].replicas if results else 0,
        margin=tol - worst,
        pairs=[list(r.pair) for r in results],
        touched=[r.touched for r in results],
    )


def agreement_verdict(
    name: str, first: np.ndarray, second: np.ndarray, tol: float = 0.0
) -> Verdict:
    """Two arrays that must coincide; `tol=0` asks for bitwise equality."""
    a = np.asarray(first, dtype=np.float64)
    b = np.asarray(second, dtype=np.float64)
    if a.shape != b.shape:
        return _verdict(name, "fail", None, tol, "shape mismatch", int(a.size))
    gap = float(np.max(np.abs(a - b))) if a.size else 0.0
    ok = np.array_equal(a, b) if tol == 0.0 else gap <= tol
    return _verdict(
        name,
        "pass" if ok else "fail",
        gap,
        tol,
        "bitwise" if tol == 0.0 else "max abs difference",
        int(a.size),
        margin=tol - gap,
    )
