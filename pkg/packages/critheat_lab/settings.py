from __future__ import annotations

import os
from dataclasses import dataclass

from packages.critheat_core.domain.errors import ConfigError


def _to_bool(value: str, default: bool) -> bool:
    if not value:
        return default
    return value.strip().lower() in {"1", "true", "yes", "y", "on"}


def _to_workers(value: str) -> int | None:
    value = value.strip()
    if not value:
        return None
    try:
        workers = int(value)
    except ValueError as exc:
        raise ConfigError(f"not an integer: {value!r}", "CRITHEAT_WORKERS") from exc
    return workers if workers > 0 else None


@dataclass(frozen=True)
class Settings:
    out_dir: str
    log_level: str
    workers: int | None
    api_key: str
    require_api_key: bool

    def resolved_workers(self) -> int:
        return self.workers or os.cpu_count() or 1


def get_settings() -> Settings:
    return Settings(
        out_dir=os.getenv("CRITHEAT_OUT", "artifacts"),
        log_level=os.getenv("LOG_LEVEL", "INFO"),
        workers=_to_workers(os.getenv("CRITHEAT_WORKERS", "")),
        api_key=os.getenv("API_KEY", ""),
        require_api_key=_to_bool(os.getenv("REQUIRE_API_KEY", "true"), True),
    )
