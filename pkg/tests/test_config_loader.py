from __future__ import annotations

from pathlib import Path

import pytest

from packages.critheat_core.domain.errors import ConfigError
from packages.critheat_lab.config_loader import (
    apply_overrides,
    parse_config,
    parse_raw,
    resolved_config,
)


def _write(tmp_path: Path, text: str) -> Path:
    path = tmp_path / "run.toml"
    path.write_text(text, encoding="utf-8")
    return path


def test_defaults_without_a_file() -> None:
    config, descriptor = parse_config(None)
    assert config.grid.N == 64
    assert config.grid.steps == 500
    assert config.sigma.kind == "critical_power"
    assert descriptor.ensemble.replicas == 100
    assert descriptor.experiment.equation == "v"


def test_flags_beat_overrides_which_beat_the_file(tmp_path: Path) -> None:
    path = _write(tmp_path, "[ensemble]\nreplicas = 10\nmaster_seed = 1\n")
    _, from_file = parse_config(path)
    assert from_file.ensemble.replicas == 10

    _, overridden = parse_config(path, ["ensemble.replicas=20"])
    assert overridden.ensemble.replicas == 20

    _, flagged = parse_config(path, ["ensemble.replicas=20"], {"replicas": 30, "seed": None})
    assert flagged.ensemble.replicas == 30
    assert flagged.ensemble.master_seed == 1


def test_override_values_are_read_as_toml_literals() -> None:
    raw = apply_overrides(
        {}, ["initial.kind=cosine", "thresholds.n_levels=[20.0, 40.0]", "drift.enabled=false"]
    )
    assert raw == {
        "initial": {"kind": "cosine"},
        "thresholds": {"n_levels": [20.0, 40.0]},
        "drift": {"enabled": False},
    }


def test_malformed_override_is_rejected() -> None:
    with pytest.raises(ConfigError):
        apply_overrides({}, ["gridN=16"])
    with pytest.raises(ConfigError):
        apply_overrides({}, ["grid.N"])


@pytest.mark.parametrize(
    ("raw", "key_path"),
    [
        ({"bogus": {"x": 1}}, "bogus"),
        ({"grid": {"N": 12}}, "grid.N"),
        ({"grid": {"N": 16, "foo": 1}}, "grid.foo"),
        ({"clamp": {"epsilon": 1.5}}, "clamp.epsilon"),
        ({"drift": {"alpha": 2.0}}, "drift.alpha"),
        ({"experiment": {"beta": 0.1}}, "experiment"),
    ],
)
def test_invalid_values_name_their_key(raw: dict, key_path: str) -> None:
    with pytest.raises(ConfigError) as exc:
        parse_raw(raw)
    assert exc.value.key_path == key_path


def test_horizon_must_be_whole_steps() -> None:
    with pytest.raises(ConfigError) as exc:
        parse_raw({"grid": {"dt": 0.3, "T": 1.0}})
    assert exc.value.key_path == "grid"


def test_super_critical_sigma_needs_explicit_opt_in() -> None:
    raw = {"sigma": {"kind": "power", "gamma": 2.0}}
    with pytest.raises(ConfigError) as exc:
        parse_raw(raw)
    assert exc.value.key_path == "sigma.gamma"
    config, _ = parse_raw(raw, ["experiment.claims_critical=false"])
    assert config.sigma.gamma == 2.0


def test_n_max_must_exceed_the_initial_sup() -> None:
    with pytest.raises(ConfigError) as exc:
        parse_raw(
            {"initial": {"level": 3.0}, "thresholds": {"n_max": 2.0, "n_levels": []}},
        )
    assert exc.value.key_path == "thresholds.n_max"


def test_floor_must_lie_below_the_initial_minimum_of_v() -> None:
    raw = {"initial": {"level": 0.8}, "clamp": {"epsilon": 0.9}}
    with pytest.raises(ConfigError) as exc:
        parse_raw(raw)
    assert exc.value.key_path == "clamp.epsilon"
    # u has no floor
    parse_raw(raw, ["experiment.equation=\"u\""])


def test_missing_and_broken_files(tmp_path: Path) -> None:
    with pytest.raises(ConfigError) as missing:
        parse_config(tmp_path / "absent.toml")
    assert missing.value.key_path == "config"
    with pytest.raises(ConfigError):
        parse_config(_write(tmp_path, "[grid\nN = 8\n"))


def test_resolved_config_lists_every_section(tmp_path: Path) -> None:
    config, descriptor = parse_config(_write(tmp_path, "[grid]\nN = 16\n"))
    resolved = resolved_config(config, descriptor)
    assert list(resolved) == [
        "grid",
        "sigma",
        "drift",
        "clamp",
        "thresholds",
        "scheme",
        "initial",
        "ensemble",
        "experiment",
    ]
    assert resolved["grid"] == {"N": 16, "dt": 0.001, "T": 0.5}
    assert resolved["ensemble"]["workers"] is None


@pytest.mark.parametrize(
    "name",
    sorted(p.name for p in (Path(__file__).resolve().parent.parent / "runs").glob("*.toml")),
)
def test_reference_runs_parse(name: str) -> None:
    path = Path(__file__).resolve().parent.parent / "runs" / name
    config, descriptor = parse_config(path)
    assert config.grid.steps >= 1
    assert descriptor.ensemble.replicas >= 1
