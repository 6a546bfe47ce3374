"""TOML experiment files -> validated (SolverConfig, ExperimentDescriptor)."""

from __future__ import annotations

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import Any

from pydantic import ValidationError

from packages.critheat_core.application.coefficient_service import (
    default_growth_grid,
    growth_check,
)
from packages.critheat_core.domain.errors import ConfigError
from packages.critheat_lab.domain.models import ExperimentDescriptor, SolverConfig

SOLVER_SECTIONS = ("grid", "sigma", "drift", "clamp", "thresholds", "scheme", "initial")
DESCRIPTOR_SECTIONS = ("ensemble", "experiment")

# CLI flag -> dotted key it overrides
FLAG_KEYS = {
    "seed": "ensemble.master_seed",
    "replicas": "ensemble.replicas",
    "workers": "ensemble.workers",
}


def load_toml(path: str | Path) -> dict[str, Any]:
    target = Path(path)
    if not target.is_file():
        raise ConfigError(f"config file not found: {target}", "config")
    try:
        with target.open("rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {target}: {exc}", "config") from exc


def _parse_value(text: str) -> Any:
    """TOML literal when it parses as one, otherwise the raw string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(raw: Mapping[str, Any], overrides: Iterable[str]) -> dict[str, Any]:
    """Apply `section.key=value` overrides on a copy of `raw`."""
    out: dict[str, Any] = {
        name: dict(body) if isinstance(body, Mapping) else body for name, body in raw.items()
    }
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override {item!r} is not section.key=value", key.strip() or None)
        out.setdefault(section, {})[name] = _parse_value(value.strip())
    return out


def set_key(raw: dict[str, Any], dotted: str, value: Any) -> None:
    section, _, name = dotted.partition(".")
    raw.setdefault(section, {})[name] = value


def _config_error(exc: ValidationError) -> ConfigError:
    first = exc.errors()[0]
    return ConfigError(first["msg"], ".".join(str(part) for part in first["loc"]))


def _build(raw: Mapping[str, Any]) -> tuple[SolverConfig, ExperimentDescriptor]:
    for section, body in raw.items():
        if section not in SOLVER_SECTIONS + DESCRIPTOR_SECTIONS:
            raise ConfigError("unknown config section", section)
        if not isinstance(body, Mapping):
            raise ConfigError("section must be a table", section)
    try:
        config = SolverConfig.model_validate(
            {name: raw[name] for name in SOLVER_SECTIONS if name in raw}
        )
        descriptor = ExperimentDescriptor.model_validate(
            {name: raw[name] for name in DESCRIPTOR_SECTIONS if name in raw}
        )
    except ValidationError as exc:
        raise _config_error(exc) from exc
    return config, descriptor


def check_consistency(config: SolverConfig, descriptor: ExperimentDescriptor) -> None:
    """Cross-section gates that pydantic field validators cannot see."""
    experiment = descriptor.experiment
    family = config.sigma.family()
    if experiment.claims_critical:
        C = experiment.growth_constant or max(family.c, 1.0)
        if not growth_check(family, C, default_growth_grid()):
            raise ConfigError(
                f"sigma kind={family.kind} gamma={family.gamma} exceeds C(1+|u|^(3/2))"
                f" with C={C}; set experiment.claims_critical=false for super-critical runs",
                "sigma.gamma",
            )
    initial = config.initial_field()
    if config.thresholds.n_max <= initial.linf():
        raise ConfigError(
            f"n_max {config.thresholds.n_max} must exceed sup |u(0)| = {initial.linf()}",
            "thresholds.n_max",
        )
    floors_stop = "tau_inf" in config.thresholds.stop_on and experiment.equation == "v"
    if floors_stop and config.clamp.epsilon >= initial.minimum():
        raise ConfigError(
            f"epsilon {config.clamp.epsilon} must lie below min v(0) = {initial.minimum()}",
            "clamp.epsilon",
        )


def parse_raw(
    raw: Mapping[str, Any],
    overrides: Iterable[str] = (),
    flags: Mapping[str, Any] | None = None,
) -> tuple[SolverConfig, ExperimentDescriptor]:
    """Validate an already-loaded mapping. Flags beat overrides, which beat the mapping."""
    merged = apply_overrides(raw, overrides)
    for flag, value in (flags or {}).items():
        if value is not None:
            set_key(merged, FLAG_KEYS[flag], value)
    config, descriptor = _build(merged)
    check_consistency(config, descriptor)
    return config, descriptor


def parse_config(
    path: str | Path | None,
    overrides: Iterable[str] = (),
    flags: Mapping[str, Any] | None = None,
) -> tuple[SolverConfig, ExperimentDescriptor]:
    """Load, merge and validate one experiment file. `path=None` means all defaults."""
    raw = load_toml(path) if path is not None else {}
    return parse_raw(raw, overrides, flags)


def resolved_config(config: SolverConfig, descriptor: ExperimentDescriptor) -> dict[str, Any]:
    """Every key with its resolved value, in section order; echoed and stored in manifests."""
    out = config.model_dump(mode="json")
    out.update(descriptor.model_dump(mode="json"))
    return out
