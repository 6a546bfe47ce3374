from __future__ import annotations

import json
import logging
from datetime import datetime, timezone

UTC = timezone.utc
from typing import Any

# run identity first, then the per-event fields
_EXTRA_KEYS = (
    "run_id",
    "subcommand",
    "event",
    "replica",
    "verifier",
    "status",
    "exit_code",
    "key_path",
    "workers",
    "replicas",
    "seed",
)


def run_context(run_id: str | None, subcommand: str | None, **fields: Any) -> dict[str, Any]:
    """`extra` mapping for a log line about one run; None values are left out."""
    context = {"run_id": run_id, "subcommand": subcommand, **fields}
    return {key: value for key, value in context.items() if value is not None}


class JsonFormatter(logging.Formatter):
    """One JSON object per line: timestamp, level, logger, message and the run fields."""

    def format(self, record: logging.LogRecord) -> str:
        payload: dict[str, Any] = {
            "timestamp": datetime.now(UTC).isoformat(timespec="seconds"),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        payload.update(
            (key, value)
            for key in _EXTRA_KEYS
            if (value := getattr(record, key, None)) is not None
        )
        if record.exc_info:
            payload["exception"] = self.formatException(record.exc_info)
        return json.dumps(payload, default=str)


def setup_logging(level: str = "INFO") -> None:
    root = logging.getLogger()
    root.setLevel(level.upper())
    handler = logging.StreamHandler()
    handler.setFormatter(JsonFormatter())
    root.handlers.clear()
    root.addHandler(handler)
