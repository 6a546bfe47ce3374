from __future__ import annotations

import numpy as np

from packages.critheat_core.domain.errors import DomainError

_UINT64_MAX = 2**64 - 1


def check_seed(seed: int) -> int:
    if not 0 <= int(seed) <= _UINT64_MAX:
        raise DomainError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return int(seed)


def substream(master_seed: int, replica: int = 0, stream: int = 0) -> np.random.Generator:
    """Philox generator for (master_seed, replica, stream).

    The spawn key places each replica on its own counter-based stream, so the draws of
    replica r never depend on how many other replicas exist or where they run.
    """
    if replica < 0 or stream < 0:
        raise DomainError("replica and stream indices must be >= 0")
    seq = np.random.SeedSequence(check_seed(master_seed), spawn_key=(replica, stream))
    return np.random.Generator(np.random.Philox(seq))
