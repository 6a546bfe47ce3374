from packages.critheat_core.application.convolution_service import (
    factorization_check,
    factorization_reconstruct,
    stochastic_convolution,
)
from packages.critheat_core.application.noise_service import (
    NoiseStream,
    covariance_test,
    sample_slice,
    walsh_integral,
)
from packages.critheat_core.application.stopping_service import (
    BatchTrackers,
    doubling_statistics,
    doubling_update,
    update,
)

__all__ = [
    "BatchTrackers",
    "NoiseStream",
    "covariance_test",
    "doubling_statistics",
    "doubling_update",
    "factorization_check",
    "factorization_reconstruct",
    "sample_slice",
    "stochastic_convolution",
    "update",
    "walsh_integral",
]
