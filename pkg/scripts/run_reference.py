#!/usr/bin/env python3
"""Ejecuta en proceso (sin CLI ni API) los experimentos de referencia de runs/ y un report final.

Desde la raíz del repo:
  python scripts/run_reference.py
  python scripts/run_reference.py verify-l1 couple
  CRITHEAT_OUT=/tmp/critheat CRITHEAT_WORKERS=8 python scripts/run_reference.py
"""
from __future__ import annotations

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from dotenv import load_dotenv

from packages.critheat_lab.artifacts import ArtifactStore
from packages.critheat_lab.config_loader import parse_config
from packages.critheat_lab.logging_utils import setup_logging
from packages.critheat_lab.orchestrator import ExperimentOrchestrator
from packages.critheat_lab.settings import get_settings

RUNS = Path(__file__).resolve().parent.parent / "runs"

REFERENCE: dict[str, tuple[str | None, ...]] = {
    "verify-kernel": (None,),
    "verify-noise": ("noise.toml",),
    "simulate": ("critical.toml",),
    "couple": ("couple.toml",),
    "convolve": ("convolve.toml",),
    "verify-moment": ("moment.toml",),
    "verify-l1": ("critical.toml", "doob.toml", "qv.toml"),
    "sweep-gamma": ("gamma.toml",),
}


def main() -> int:
    load_dotenv()
    settings = get_settings()
    setup_logging(settings.log_level)
    selected = sys.argv[1:] or list(REFERENCE)
    unknown = [name for name in selected if name not in REFERENCE]
    if unknown:
        print(f"Unknown subcommands: {', '.join(unknown)}")
        return 2

    orchestrator = ExperimentOrchestrator(ArtifactStore(settings.out_dir), settings.workers)
    worst = 0
    for name in selected:
        for filename in REFERENCE[name]:
            config, descriptor = parse_config(RUNS / filename if filename else None)
            response = orchestrator.run(name, config, descriptor)
            worst = max(worst, response.exit_code)
            source = filename or "defaults"
            print(f"{name} [{source}]: {response.run_id} (exit {response.exit_code})")
            for verdict in response.verdicts:
                print(f"  {verdict.status:<12} {verdict.verifier}")

    config, descriptor = parse_config(None)
    summary = orchestrator.run("report", config, descriptor)
    print(f"report: {Path(settings.out_dir) / summary.run_id}")
    return worst


if __name__ == "__main__":
    raise SystemExit(main())
