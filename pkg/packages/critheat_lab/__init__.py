"""Experiment layer: configs, ensembles, verdicts and run artifacts."""

from packages.critheat_lab.models import RunRequest, RunResponse, Verdict
from packages.critheat_lab.orchestrator import ExperimentOrchestrator

__all__ = ["ExperimentOrchestrator", "RunRequest", "RunResponse", "Verdict"]
