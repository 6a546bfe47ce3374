from packages.critheat_core.domain.errors import (
    ConfigError,
    CritHeatError,
    DomainError,
    StateError,
    UsageError,
)
from packages.critheat_core.domain.models import (
    ConvolutionSpec,
    CoupledState,
    DoublingLog,
    DriftSpec,
    Field,
    GridSpec,
    KernelSpec,
    NoiseSlice,
    SigmaFamily,
    StopEvent,
    StopEventLog,
    TrackerSet,
    TrajectoryState,
)

__all__ = [
    "ConfigError",
    "ConvolutionSpec",
    "CoupledState",
    "CritHeatError",
    "DomainError",
    "DoublingLog",
    "DriftSpec",
    "Field",
    "GridSpec",
    "KernelSpec",
    "NoiseSlice",
    "SigmaFamily",
    "StateError",
    "StopEvent",
    "StopEventLog",
    "TrackerSet",
    "TrajectoryState",
    "UsageError",
]
