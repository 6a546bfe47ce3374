"""Little-endian replay dumps: fixed header (N, dt, steps, seed) then float64 rows."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from packages.critheat_core.domain.errors import DomainError

HEADER_DTYPE = np.dtype([("N", "<i8"), ("dt", "<f8"), ("steps", "<i8"), ("seed", "<u8")])
DATA_DTYPE = np.dtype("<f8")


@dataclass(frozen=True)
class DumpHeader:
    N: int
    dt: float
    steps: int
    seed: int


def write_dump(path: str | Path, header: DumpHeader, rows: np.ndarray) -> Path:
    data = np.asarray(rows, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != header.N:
        raise DomainError(f"dump rows must have shape (k, {header.N}), got {data.shape}")
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    head = np.array([(header.N, header.dt, header.steps, header.seed)], dtype=HEADER_DTYPE)
    with target.open("wb") as fh:
        fh.write(head.tobytes())
        fh.write(data.astype(DATA_DTYPE, copy=False).tobytes())
    return target


def read_dump(path: str | Path) -> tuple[DumpHeader, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_DTYPE.itemsize:
        raise DomainError(f"{path}: truncated header")
    head = np.frombuffer(raw[: HEADER_DTYPE.itemsize], dtype=HEADER_DTYPE)[0]
    header = DumpHeader(
        N=int(head["N"]), dt=float(head["dt"]), steps=int(head["steps"]), seed=int(head["seed"])
    )
    body = np.frombuffer(raw[HEADER_DTYPE.itemsize :], dtype=DATA_DTYPE)
    if header.N <= 0 or body.size % header.N:
        raise DomainError(f"{path}: payload is not a whole number of rows of length {header.N}")
    return header, body.reshape(-1, header.N).astype(np.float64)
