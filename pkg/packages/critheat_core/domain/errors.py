from __future__ import annotations


class CritHeatError(Exception):
    """Base class for every error raised by the lab."""


class DomainError(CritHeatError, ValueError):
    """Numeric input outside an operation's domain (t <= 0, shape mismatch...)."""


class ConfigError(CritHeatError, ValueError):
    def __init__(self, message: str, key_path: str | None = None) -> None:
        self.key_path = key_path
        prefix = f"{key_path}: " if key_path else ""
        super().__init__(f"{prefix}{message}")


class StateError(CritHeatError, RuntimeError):
    """A trajectory state that cannot be advanced (non-finite values)."""


class UsageError(CritHeatError, RuntimeError):
    """API misuse, e.g. trackers fed states out of order."""
