from packages.critheat_lab.domain.models import (
    EnsembleReport,
    ExperimentDescriptor,
    Provenance,
    ReplicaSummary,
    RunManifest,
    RunRequest,
    RunResponse,
    SolverConfig,
    Verdict,
)

__all__ = [
    "EnsembleReport",
    "ExperimentDescriptor",
    "Provenance",
    "ReplicaSummary",
    "RunManifest",
    "RunRequest",
    "RunResponse",
    "SolverConfig",
    "Verdict",
]
