from packages.critheat_lab.domain.models import (
    EnsembleReport,
    ExperimentDescriptor,
    RunManifest,
    SolverConfig,
    Verdict,
)

__all__ = ["EnsembleReport", "ExperimentDescriptor", "RunManifest", "SolverConfig", "Verdict"]
