from __future__ import annotations

import hashlib
import json
import logging
from collections.abc import Callable, Iterator
from datetime import datetime, timezone

UTC = timezone.utc
from typing import Any

import numpy as np
import scipy

from packages.critheat_core.application.convolution_service import factorization_check
from packages.critheat_core.application.heat_kernel_service import (
    discrete_variance,
    verify_kernel_suite,
)
from packages.critheat_core.application.noise_service import (
    NoiseStream,
    covariance_test,
    dump_noise,
)
from packages.critheat_core.application.solver_service import dump_snapshots, simulate
from packages.critheat_core.domain.errors import ConfigError, CritHeatError
from packages.critheat_lab.artifacts import VERDICTS_NAME, ArtifactStore, sha256_file
from packages.critheat_lab.config_loader import resolved_config
from packages.critheat_lab.domain.models import (
    ExperimentDescriptor,
    Provenance,
    RunManifest,
    RunResponse,
    SolverConfig,
    Subcommand,
    Verdict,
)
from packages.critheat_lab.ensemble import (
    EnsembleRun,
    comparison_refinement,
    convolution_endpoint,
    convolution_moments,
    gamma_runs,
    localization_consistency,
    mean_and_se,
    positivity_sweep,
    run_ensemble,
)
from packages.critheat_lab.logging_utils import run_context
from packages.critheat_lab.verifiers import (
    MIN_REPLICAS,
    agreement_verdict,
    comparison_verdict,
    covariance_verdict,
    doob_bound_check,
    doubling_finiteness_check,
    factorization_verdict,
    gamma_sweep_verdict,
    gamma_table,
    kernel_verdicts,
    level_scaling_check,
    localization_verdict,
    moment_scaling_check,
    positivity_verdict,
    quadratic_variation_check,
    slice_moment_verdicts,
    submartingale_test,
    variance_verdict,
)

logger = logging.getLogger(__name__)

TOOL_VERSION = "0.1.0"

# slices drawn from at most this many replicas for the per-cell moment checks
SLICE_REPLICAS = 100
# (steps^2 * modes) entries held by the factorised reconstruction at its finest level
FACTORIZATION_BUDGET = 50_000_000
# replicas used by the exact level-scaling comparison of the moment check
SCALING_REPLICAS = 32

Pipeline = Callable[[str, SolverConfig, ExperimentDescriptor, int | None], list[Verdict]]


def run_id_for(
    subcommand: str, resolved: dict[str, Any], inputs: dict[str, str] | None = None
) -> str:
    """Stable id: same subcommand, config and inputs give the same output directory."""
    payload = {
        "subcommand": subcommand,
        "config": resolved,
        "inputs": inputs or {},
        "tool": TOOL_VERSION,
    }
    blob = json.dumps(payload, sort_keys=True)
    return f"{subcommand}-{hashlib.sha256(blob.encode('utf-8')).hexdigest()[:12]}"


def exit_code_for(verdicts: list[Verdict]) -> int:
    return 0 if all(v.ok for v in verdicts) else 1


def _now() -> str:
    return datetime.now(UTC).isoformat(timespec="seconds")


def _provenance() -> Provenance:
    return Provenance(
        versions={
            "critheat_core": TOOL_VERSION,
            "critheat_lab": TOOL_VERSION,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        }
    )


def _cos(t: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.cos(x) * (t < 1.0)


def _sin(t: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.sin(x) * (t < 1.0)


def _one(t: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.ones_like(t + x)


class ExperimentOrchestrator:
    """Runs one subcommand end to end: pipeline, files, verdicts, manifest."""

    def __init__(self, artifact_store: ArtifactStore, default_workers: int | None = None) -> None:
        self.artifact_store = artifact_store
        self.default_workers = default_workers
        self._pipelines: dict[str, Pipeline] = {
            "verify-kernel": self._verify_kernel,
            "verify-noise": self._verify_noise,
            "simulate": self._simulate,
            "couple": self._couple,
            "convolve": self._convolve,
            "verify-moment": self._verify_moment,
            "verify-l1": self._verify_l1,
            "sweep-gamma": self._sweep_gamma,
            "report": self._report,
        }

    def run(
        self, subcommand: Subcommand, config: SolverConfig, descriptor: ExperimentDescriptor
    ) -> RunResponse:
        for event in self.run_stream(subcommand, config, descriptor):
            if event.get("type") == "end":
                return RunResponse(
                    run_id=event["run_id"],
                    exit_code=event["exit_code"],
                    verdicts=[Verdict(**v) for v in event.get("verdicts", [])],
                    manifest=RunManifest(**event["manifest"]),
                    provenance=Provenance(**event["provenance"]),
                )
            if event.get("type") == "error":
                raise RuntimeError(event.get("message", "Unknown error"))
        raise RuntimeError("Stream ended without end event")

    def run_stream(
        self, subcommand: Subcommand, config: SolverConfig, descriptor: ExperimentDescriptor
    ) -> Iterator[dict[str, Any]]:
        pipeline = self._pipelines.get(subcommand)
        if pipeline is None:
            raise ConfigError(f"unknown subcommand {subcommand!r}", "subcommand")
        resolved = resolved_config(config, descriptor)
        inputs = self._report_inputs() if subcommand == "report" else None
        # the worker count never changes an output file, so it stays out of the id
        identity = {**resolved, "ensemble": {**resolved["ensemble"], "workers": None}}
        run_id = run_id_for(subcommand, identity, inputs)
        workers = descriptor.ensemble.workers or self.default_workers
        started_at = _now()
        context = run_context(run_id, subcommand)
        logger.info("run_started", extra={**context, "event": "run", "workers": workers})
        yield {"type": "status", "run_id": run_id, "message": f"running {subcommand}"}

        self.artifact_store.clear(run_id)
        try:
            verdicts = pipeline(run_id, config, descriptor, workers)
        except CritHeatError:
            raise
        except Exception as exc:  # noqa: BLE001
            logger.exception("run_failed", extra={**context, "event": "error"})
            yield {"type": "error", "run_id": run_id, "message": str(exc)}
            return
        if subcommand != "report":
            self.artifact_store.save_json(
                run_id, VERDICTS_NAME, [v.model_dump(mode="json") for v in verdicts]
            )
        exit_code = exit_code_for(verdicts)
        manifest = RunManifest(
            run_id=run_id,
            subcommand=subcommand,
            tool_version=TOOL_VERSION,
            master_seed=descriptor.ensemble.master_seed,
            replicas=descriptor.ensemble.replicas,
            config=resolved,
            started_at=started_at,
            finished_at=_now(),
            files=self.artifact_store.digests(run_id),
            exit_code=exit_code,
        )
        self.artifact_store.save_manifest(manifest)
        logger.info(
            "run_completed",
            extra={
                **context,
                "event": "run",
                "status": "pass" if exit_code == 0 else "fail",
                "exit_code": exit_code,
            },
        )

        for verdict in verdicts:
            yield {"type": "verdict", "verifier": verdict.verifier, "status": verdict.status}
        yield {
            "type": "end",
            "run_id": run_id,
            "exit_code": exit_code,
            "verdicts": [v.model_dump() for v in verdicts],
            "manifest": manifest.model_dump(),
            "provenance": _provenance().model_dump(),
        }

    def _verify_kernel(
        self,
        run_id: str,
        config: SolverConfig,
        descriptor: ExperimentDescriptor,
        workers: int | None,
    ) -> list[Verdict]:
        checks = verify_kernel_suite()
        self.artifact_store.save_csv(
            run_id,
            "kernel_checks.csv",
            ("name", "passed", "statistic", "threshold"),
            ((c.name, c.passed, c.statistic, c.threshold) for c in checks),
        )
        return kernel_verdicts(checks)

    def _verify_noise(
        self,
        run_id: str,
        config: SolverConfig,
        descriptor: ExperimentDescriptor,
        workers: int | None,
    ) -> list[Verdict]:
        grid = config.grid.spec()
        replicas = descriptor.ensemble.replicas
        seed = descriptor.ensemble.master_seed
        verdicts = []
        rows = []
        for name, phi, psi in (
            ("noise.isometry", _one, _one),
            ("noise.orthogonality", _cos, _sin),
            ("noise.cosine_energy", _cos, _cos),
        ):
            report = covariance_test(phi, psi, replicas, seed, grid)
            rows.append((name, report.empirical_cov, report.target, report.std_err, replicas))
            verdicts.append(covariance_verdict(name, report))
        self.artifact_store.save_csv(
            run_id, "covariance.csv", ("test", "empirical", "target", "std_err", "replicas"), rows
        )

        samples = np.concatenate(
            [
                NoiseStream.for_replica(grid, seed, r).take(grid.steps)
                for r in range(min(replicas, SLICE_REPLICAS))
            ]
        )
        verdicts.extend(slice_moment_verdicts(samples, grid.dt, grid.dx))

        first = NoiseStream.for_replica(grid, seed, 0).take(grid.steps)
        again = NoiseStream.for_replica(grid, seed, 0).take(grid.steps)
        verdicts.append(agreement_verdict("noise.reproducibility", first, again))
        fine = NoiseStream.for_replica(grid.refined(2), seed, 0).take(2 * grid.steps)
        coarse = NoiseStream.for_replica(grid, seed, 0, substeps=2).take(grid.steps)
        verdicts.append(
            agreement_verdict(
                "noise.refinement_coupling",
                coarse,
                fine.reshape(grid.steps, 2, grid.N).sum(axis=1),
                tol=1e-12,
            )
        )
        if descriptor.experiment.noise_dump:
            dump_noise(self.artifact_store.path(run_id, "noise_r0.bin"), grid, seed, first)
        return verdicts

    def _simulate(
        self,
        run_id: str,
        config: SolverConfig,
        descriptor: ExperimentDescriptor,
        workers: int | None,
    ) -> list[Verdict]:
        equation = descriptor.experiment.equation
        seed = descriptor.ensemble.master_seed
        plan = config.run_plan(equation)
        result = simulate(plan, config.initial_field(), seed, 0, config.scheme.substeps)
        store = self.artifact_store
        store.save_csv(
            run_id,
            "trajectory.csv",
            ("t", "l1", "linf", "qv_accum", "events_fired"),
            result.series.rows(),
        )
        event_rows: list[tuple[Any, ...]] = [
            (e.kind, e.threshold, e.level, e.t_index, e.trigger_value) for e in result.log.events
        ]
        doubling = result.log.doubling
        event_rows.extend(
            (f"rho_{kind}", 2.0**level, level, t_index, qv)
            for t_index, level, kind, qv in zip(
                doubling.rho_times,
                doubling.levels,
                doubling.event_kinds,
                doubling.qv_at_rho,
                strict=True,
            )
        )
        store.save_csv(
            run_id,
            "events.csv",
            ("kind", "threshold", "level", "t_index", "trigger_value"),
            event_rows,
        )
        if result.snapshots:
            dump_snapshots(store.path(run_id, "snapshots.bin"), plan.grid, seed, result.snapshots)

        replicas = descriptor.ensemble.replicas
        if replicas > 1:
            run = run_ensemble(
                config,
                replicas,
                seed,
                workers,
                descriptor.ensemble.chunk_size,
                equation,
            )
            self._save_ensemble(run_id, run)
            store.save_json(run_id, "ensemble_report.json", run.report().model_dump(mode="json"))
        return []

    def _save_ensemble(self, run_id: str, run: EnsembleRun) -> None:
        self.artifact_store.save_csv(
            run_id,
            "ensemble.csv",
            (
                "replica",
                "seed",
                "final_l1",
                "final_linf",
                "qv_accum",
                "qv_stopped",
                "sup_l1",
                "stop_index",
                "stop_kind",
                "events",
                "doubling_count",
                "max_level",
            ),
            (
                (
                    s.replica,
                    s.seed,
                    s.final_l1,
                    s.final_linf,
                    s.qv_accum,
                    s.qv_stopped,
                    s.sup_l1,
                    s.stop_index,
                    s.stop_kind,
                    s.events,
                    s.doubling_count,
                    s.max_level,
                )
                for s in run.summaries()
            ),
        )

    def _couple(
        self,
        run_id: str,
        config: SolverConfig,
        descriptor: ExperimentDescriptor,
        workers: int | None,
    ) -> list[Verdict]:
        ensemble, experiment = descriptor.ensemble, descriptor.experiment
        store = self.artifact_store
        pair = comparison_refinement(
            config,
            ensemble.replicas,
            ensemble.master_seed,
            experiment.refinement_factor,
            workers,
            ensemble.chunk_size,
        )
        columns = (
            "replica",
            "violation_steps",
            "checked_steps",
            "max_violation",
            "first_violation",
            "min_gap",
            "exploded",
        )
        store.save_csv(run_id, "coupled.csv", columns, pair.coarse.rows())
        store.save_csv(run_id, "coupled_fine.csv", columns, pair.fine.rows())

        localization = localization_consistency(
            config, experiment.clamp_pairs, ensemble.replicas, ensemble.master_seed
        )
        store.save_csv(
            run_id,
            "localization.csv",
            ("eps1", "n1", "eps2", "n2", "max_diff", "touched", "compared_steps"),
            ((*r.pair, r.max_diff, r.touched, r.compared_steps) for r in localization),
        )

        positivity = positivity_sweep(
            config,
            experiment.eps_grid,
            ensemble.replicas,
            ensemble.master_seed,
            workers,
            ensemble.chunk_size,
        )
        store.save_csv(
            run_id,
            "positivity.csv",
            ("epsilon", "below", "replicas", "fraction"),
            ((r.epsilon, r.below, r.replicas, r.fraction) for r in positivity),
        )
        return [
            comparison_verdict(pair),
            localization_verdict(localization),
            positivity_verdict(positivity),
        ]

    def _convolve(
        self,
        run_id: str,
        config: SolverConfig,
        descriptor: ExperimentDescriptor,
        workers: int | None,
    ) -> list[Verdict]:
        ensemble, experiment = descriptor.ensemble, descriptor.experiment
        grid = config.grid.spec()
        spec = experiment.convolution_spec(grid.T)
        finest = grid.steps * 2 ** (experiment.factorization_levels - 1)
        if finest * finest * (grid.N // 2 + 1) > FACTORIZATION_BUDGET:
            raise ConfigError(
                f"factorization study at {finest} steps on N={grid.N} is too large;"
                " lower grid.T, raise grid.dt or reduce the level count",
                "experiment.factorization_levels",
            )
        verdicts = []
        endpoint = convolution_endpoint(
            spec, grid, ensemble.replicas, ensemble.master_seed, workers, ensemble.chunk_size
        )
        samples = endpoint[:, grid.N // 2]
        var, se = mean_and_se(samples**2)
        target = None
        if spec.phi_kind == "constant":
            target = spec.phi_level**2 * discrete_variance(grid)
            verdicts.append(
                variance_verdict("convolution.isometry", samples, target, ensemble.replicas)
            )
        self.artifact_store.save_csv(
            run_id,
            "convolution.csv",
            ("T", "replicas", "variance", "std_err", "target"),
            [(grid.T, ensemble.replicas, var, se, target)],
        )

        levels = factorization_check(
            spec,
            grid,
            ensemble.master_seed,
            experiment.factorization_levels,
            experiment.factorization_scheme,
        )
        self.artifact_store.save_csv(
            run_id,
            "factorization.csv",
            (
                "steps",
                "dt",
                "sup_abs_diff",
                "sup_direct",
                "rel_sup_diff",
                "oracle_rms",
                "reference_rms",
            ),
            (
                (
                    c.steps,
                    c.dt,
                    c.sup_abs_diff,
                    c.sup_direct,
                    c.rel_sup_diff,
                    c.oracle_rms,
                    c.reference_rms,
                )
                for c in levels
            ),
        )
        verdicts.append(factorization_verdict(levels))
        return verdicts

    def _verify_moment(
        self,
        run_id: str,
        config: SolverConfig,
        descriptor: ExperimentDescriptor,
        workers: int | None,
    ) -> list[Verdict]:
        ensemble, experiment = descriptor.ensemble, descriptor.experiment
        grid = config.grid
        T_grid = experiment.T_grid
        spec = experiment.convolution_spec(max(T_grid))
        moments = convolution_moments(
            spec,
            grid.N,
            grid.dt,
            T_grid,
            ensemble.replicas,
            ensemble.master_seed,
            workers,
            ensemble.chunk_size,
        )
        verdicts = [moment_scaling_check(moments)]
        if experiment.phi_kind == "constant":
            small = min(ensemble.replicas, SCALING_REPLICAS)
            doubled = experiment.model_copy(update={"phi_level": 2.0 * experiment.phi_level})
            base, scaled = (
                convolution_moments(
                    params.convolution_spec(max(T_grid)),
                    grid.N,
                    grid.dt,
                    T_grid,
                    small,
                    ensemble.master_seed,
                    workers,
                    ensemble.chunk_size,
                )
                for params in (experiment, doubled)
            )
            verdicts.append(level_scaling_check(base, scaled))
        self.artifact_store.save_csv(
            run_id,
            "moments.csv",
            ("T", "m", "se", "replicas"),
            (
                (T, m, se, moments.replicas)
                for T, m, se in zip(moments.T_grid, moments.m, moments.se, strict=True)
            ),
        )
        return verdicts

    def _verify_l1(
        self,
        run_id: str,
        config: SolverConfig,
        descriptor: ExperimentDescriptor,
        workers: int | None,
    ) -> list[Verdict]:
        ensemble, experiment = descriptor.ensemble, descriptor.experiment
        store = self.artifact_store
        run = run_ensemble(
            config,
            ensemble.replicas,
            ensemble.master_seed,
            workers,
            ensemble.chunk_size,
            "v",
        )
        if ensemble.replicas < MIN_REPLICAS:
            logger.warning(
                "below_sample_floor",
                extra=run_context(run_id, "verify-l1", event="verdict", replicas=ensemble.replicas),
            )
        self._save_ensemble(run_id, run)

        finite = np.isfinite(run.l1)
        rows = []
        for j, t in enumerate(run.t):
            column = run.l1[finite[:, j], j]
            mean, se = mean_and_se(column)
            rows.append((t, mean, se, int(column.size)))
        store.save_csv(run_id, "l1_means.csv", ("t", "mean", "se", "n"), rows)

        alpha = config.drift.alpha if config.drift.enabled else None
        thresholds = config.thresholds
        verdicts = [
            submartingale_test(run),
            doob_bound_check(run, thresholds.M, config.clamp.epsilon, alpha, config.grid.T),
            quadratic_variation_check(run, thresholds.M),
            doubling_finiteness_check(run, experiment.claims_critical),
        ]
        per_level = verdicts[-1].details.get("per_level", {})
        store.save_csv(
            run_id,
            "doubling.csv",
            ("level", "count"),
            ((int(level), count) for level, count in per_level.items()),
        )
        report = run.report(verdicts)
        store.save_json(run_id, "ensemble_report.json", report.model_dump(mode="json"))
        return verdicts

    def _sweep_gamma(
        self,
        run_id: str,
        config: SolverConfig,
        descriptor: ExperimentDescriptor,
        workers: int | None,
    ) -> list[Verdict]:
        ensemble, experiment = descriptor.ensemble, descriptor.experiment
        rows = gamma_runs(
            config,
            experiment.gamma_grid,
            ensemble.replicas,
            ensemble.master_seed,
            workers,
            ensemble.chunk_size,
        )
        self.artifact_store.save_csv(
            run_id,
            "gamma.csv",
            ("gamma", "explosions", "replicas", "frequency", "ci_low", "ci_high"),
            (
                (row.gamma, row.explosions, row.replicas, t["frequency"], t["ci_low"], t["ci_high"])
                for row, t in zip(rows, gamma_table(rows), strict=True)
            ),
        )
        resolution = {
            "N": float(config.grid.N),
            "dt": config.grid.dt,
            "n_max": config.thresholds.n_max,
            "c": config.sigma.c,
        }
        return [gamma_sweep_verdict(rows, resolution)]

    def _report_inputs(self) -> dict[str, str]:
        base = self.artifact_store.base_dir
        return {
            path.relative_to(base).as_posix(): sha256_file(path)
            for path in self.artifact_store.verdict_files()
        }

    def _report(
        self,
        run_id: str,
        config: SolverConfig,
        descriptor: ExperimentDescriptor,
        workers: int | None,
    ) -> list[Verdict]:
        """Collect every stored verdicts.json into summary.csv and summary.json."""
        collected: list[dict[str, Any]] = []
        for path in self.artifact_store.verdict_files():
            source = path.parent.name
            for raw in json.loads(path.read_text(encoding="utf-8")):
                verdict = Verdict(**raw)
                collected.append({"run": source, **verdict.model_dump(mode="json")})
        self.artifact_store.save_csv(
            run_id,
            "summary.csv",
            ("run", "verifier", "status", "statistic", "threshold", "margin", "sample_size"),
            (
                (
                    row["run"],
                    row["verifier"],
                    row["status"],
                    row["statistic"],
                    row["threshold"],
                    row["margin"],
                    row["sample_size"],
                )
                for row in collected
            ),
        )
        counts: dict[str, int] = {}
        for row in collected:
            counts[row["status"]] = counts.get(row["status"], 0) + 1
        self.artifact_store.save_json(
            run_id, "summary.json", {"verdicts": collected, "counts": counts}
        )
        return []
