"""`critheat <subcommand>`: parse one experiment config, run it, exit 0/1/2.

    critheat verify-kernel
    critheat simulate --config runs/critical.toml --seed 42
    critheat verify-l1 --config runs/critical.toml --replicas 1000 --workers 8
    critheat couple --set experiment.refinement_factor=2 --out /tmp/critheat
    critheat report --out artifacts
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from dotenv import load_dotenv
from pydantic import ValidationError

from packages.critheat_core.domain.errors import ConfigError, CritHeatError
from packages.critheat_lab.artifacts import ArtifactStore
from packages.critheat_lab.config_loader import parse_config, parse_raw, resolved_config
from packages.critheat_lab.domain.models import (
    SUBCOMMANDS,
    ExperimentDescriptor,
    RunManifest,
    SolverConfig,
)
from packages.critheat_lab.logging_utils import run_context, setup_logging
from packages.critheat_lab.orchestrator import ExperimentOrchestrator
from packages.critheat_lab.settings import get_settings

logger = logging.getLogger(__name__)

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="critheat",
        description="Numerical lab for the critical stochastic heat equation.",
    )
    subparsers = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        sub = subparsers.add_parser(name)
        source = sub.add_mutually_exclusive_group()
        source.add_argument("--config", help="TOML experiment file (defaults if omitted)")
        source.add_argument(
            "--manifest", help="replay the config and seed embedded in a manifest.json"
        )
        sub.add_argument("--seed", type=int, help="overrides ensemble.master_seed")
        sub.add_argument("--replicas", type=int, help="overrides ensemble.replicas")
        sub.add_argument("--workers", type=int, help="overrides ensemble.workers")
        sub.add_argument("--out", help="output directory (default: $CRITHEAT_OUT)")
        sub.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="SECTION.KEY=VALUE",
            help="override one config key; repeatable",
        )
        sub.add_argument("--log-level", help="default: $LOG_LEVEL")
    return parser


def load_config(args: argparse.Namespace) -> tuple[SolverConfig, ExperimentDescriptor]:
    flags = {"seed": args.seed, "replicas": args.replicas, "workers": args.workers}
    if args.manifest:
        path = Path(args.manifest)
        if not path.is_file():
            raise ConfigError(f"manifest not found: {path}", "manifest")
        manifest = RunManifest.model_validate_json(path.read_text(encoding="utf-8"))
        return parse_raw(manifest.config, args.overrides, flags)
    return parse_config(args.config, args.overrides, flags)


def _echo(payload: dict[str, Any]) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def main(argv: Sequence[str] | None = None) -> int:
    load_dotenv(override=False)
    args = build_parser().parse_args(argv)
    try:
        settings = get_settings()
    except CritHeatError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    setup_logging(args.log_level or settings.log_level)

    try:
        config, descriptor = load_config(args)
    except (CritHeatError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    store = ArtifactStore(args.out or settings.out_dir)
    orchestrator = ExperimentOrchestrator(store, default_workers=settings.resolved_workers())
    try:
        response = orchestrator.run(args.subcommand, config, descriptor)
    except (CritHeatError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception:  # noqa: BLE001
        logger.exception("run_failed", extra=run_context(None, args.subcommand, event="error"))
        return EXIT_CONFIG

    _echo(
        {
            "run_id": response.run_id,
            "exit_code": response.exit_code,
            "out_dir": str(store.base_dir / response.run_id),
            "config": resolved_config(config, descriptor),
            "verdicts": {v.verifier: v.status for v in response.verdicts},
        }
    )
    return EXIT_PASS if response.exit_code == 0 else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
