from __future__ import annotations

import csv
import hashlib
import json
import math
from collections.abc import Iterable, Iterator, Sequence
from pathlib import Path
from typing import Any

import numpy as np

from packages.critheat_lab.models import RunManifest

MANIFEST_NAME = "manifest.json"
VERDICTS_NAME = "verdicts.json"


def format_cell(value: Any) -> str:
    """17 significant digits for floats, so a CSV round-trips every double."""
    if value is None:
        return ""
    if isinstance(value, bool | np.bool_):
        return "1" if value else "0"
    if isinstance(value, int | np.integer):
        return str(int(value))
    if isinstance(value, float | np.floating):
        return format(float(value), ".17g")
    return str(value)


def jsonable(value: Any) -> Any:
    """Plain JSON types; non-finite floats become null."""
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, list | tuple):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [jsonable(v) for v in value.tolist()]
    if isinstance(value, bool | np.bool_):
        return bool(value)
    if isinstance(value, int | np.integer):
        return int(value)
    if isinstance(value, float | np.floating):
        number = float(value)
        return number if math.isfinite(number) else None
    return value


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


class ArtifactStore:
    def __init__(self, base_dir: str = "artifacts") -> None:
        self.base_dir = Path(base_dir)
        self.base_dir.mkdir(parents=True, exist_ok=True)

    def _run_dir(self, run_id: str) -> Path:
        path = self.base_dir / run_id
        path.mkdir(parents=True, exist_ok=True)
        return path

    def path(self, run_id: str, name: str) -> Path:
        return self._run_dir(run_id) / name

    def clear(self, run_id: str) -> None:
        """Drop earlier outputs of the same run id so stale files never enter a manifest."""
        for item in self._run_dir(run_id).iterdir():
            if item.is_file():
                item.unlink()

    def save_csv(
        self, run_id: str, name: str, columns: Sequence[str], rows: Iterable[Sequence[Any]]
    ) -> Path:
        path = self.path(run_id, name)
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow([format_cell(cell) for cell in row])
        return path

    def save_json(self, run_id: str, name: str, payload: Any) -> Path:
        path = self.path(run_id, name)
        text = json.dumps(jsonable(payload), indent=2, sort_keys=True, allow_nan=False)
        path.write_text(text + "\n", encoding="utf-8")
        return path

    def digests(self, run_id: str) -> dict[str, str]:
        """sha256 of every output file of the run, manifest excluded."""
        run_dir = self._run_dir(run_id)
        return {
            item.name: sha256_file(item)
            for item in sorted(run_dir.iterdir())
            if item.is_file() and item.name != MANIFEST_NAME
        }

    def save_manifest(self, manifest: RunManifest) -> Path:
        return self.save_json(manifest.run_id, MANIFEST_NAME, manifest.model_dump(mode="json"))

    def load_manifest(self, run_id: str) -> RunManifest | None:
        path = self.base_dir / run_id / MANIFEST_NAME
        if not path.is_file():
            return None
        return RunManifest.model_validate_json(path.read_text(encoding="utf-8"))

    def verdict_files(self) -> Iterator[Path]:
        """verdicts.json of every run under the base directory, in name order."""
        yield from sorted(self.base_dir.glob(f"*/{VERDICTS_NAME}"))
