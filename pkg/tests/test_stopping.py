from __future__ import annotations

import numpy as np
import pytest

from packages.critheat_core.application.stopping_service import (
    BatchTrackers,
    doubling_qv_segments,
    doubling_statistics,
    doubling_update,
    dyadic_level,
    update,
)
from packages.critheat_core.domain.errors import DomainError, UsageError
from packages.critheat_core.domain.models import (
    DoublingLog,
    Field,
    StopEventLog,
    TrackerSet,
    TrajectoryState,
)

_DUMMY = Field(np.zeros(8))


def _state(t_index: int, linf: float, l1: float = 1.0, minimum: float = 1.0, qv: float = 0.0):
    return TrajectoryState(
        t_index=t_index, field=_DUMMY, l1=l1, linf=linf, minimum=minimum, qv_accum=qv
    )


def test_dyadic_level() -> None:
    assert dyadic_level(2.0) == 1
    assert dyadic_level(7.99) == 2
    assert dyadic_level(8.0) == 3
    assert dyadic_level(float("inf")) == 1023


def test_thresholds_fire_once_on_closed_crossings() -> None:
    trackers = TrackerSet(epsilon=0.5, M=10.0, n_levels=(4.0, 16.0), n_max=100.0)
    log = StopEventLog()
    assert update(trackers, _state(0, linf=1.0), log) == []
    fired = update(trackers, _state(1, linf=4.0, minimum=0.5), log)
    assert [(e.kind, e.threshold) for e in fired] == [("tau_inf", 0.5), ("tau_linf", 4.0)]
    assert update(trackers, _state(2, linf=5.0, minimum=0.1, l1=10.0), log) == []
    fired = update(trackers, _state(3, linf=100.0, l1=10.5), log)
    assert [(e.kind, e.threshold) for e in fired] == [
        ("tau_linf", 16.0),
        ("tau_l1", 10.0),
        ("explosion", 100.0),
    ]
    assert log.first("tau_linf", 16.0).trigger_value == 100.0  # type: ignore[union-attr]
    assert log.last_index == 3


def test_trackers_must_be_fed_in_order() -> None:
    log = StopEventLog()
    update(TrackerSet(), _state(0, 1.0), log)
    with pytest.raises(UsageError):
        update(TrackerSet(), _state(2, 1.0), log)


def test_tracker_set_validation() -> None:
    with pytest.raises(DomainError):
        TrackerSet(epsilon=1.0)
    with pytest.raises(DomainError):
        TrackerSet(n_levels=(1.0,))
    with pytest.raises(DomainError):
        TrackerSet(n_levels=(10.0,), n_max=5.0)
    assert TrackerSet(n_levels=(100.0, 10.0)).n_levels == (10.0, 100.0)


def test_doubling_moves_one_level_per_index() -> None:
    """Un salto de 3 a 9 sube un nivel por índice hasta alcanzar el nivel de 9."""
    log = DoublingLog()
    path = [1.0, 3.0, 9.0, 9.0, 2.0, 1.0]
    for n, linf in enumerate(path):
        doubling_update(log, _state(n, linf, qv=float(n)), final=n == len(path) - 1)
    assert log.event_kinds == ["start", "double", "double", "halve", "halve", "sentinel"]
    assert log.levels == [1, 2, 3, 2, 1, 1]
    assert log.rho_times == [1, 2, 3, 4, 5, 5]
    assert doubling_qv_segments(log) == [1.0, 1.0, 1.0, 1.0, 0.0]

    stats = doubling_statistics([log])
    assert stats.per_level == {1: 1, 2: 1}
    assert stats.total_doubles == 2
    assert stats.max_level == 3


def test_doubling_log_is_frozen_after_the_sentinel() -> None:
    log = DoublingLog()
    doubling_update(log, _state(0, 5.0), final=True)
    doubling_update(log, _state(1, 100.0))
    assert log.event_kinds == ["start", "sentinel"]
    assert log.levels == [2, 2]


def test_path_below_two_never_starts() -> None:
    log = DoublingLog()
    for n in range(4):
        doubling_update(log, _state(n, 1.9), final=n == 3)
    assert not log.started
    assert log.event_kinds == []


def test_batch_trackers_agree_with_single_path_updates() -> None:
    trackers = TrackerSet(epsilon=0.3, M=40.0, n_levels=(8.0, 64.0), n_max=500.0)
    rng = np.random.default_rng(2024)
    R, steps = 12, 80
    linf = np.exp(np.cumsum(rng.normal(0.05, 0.6, size=(R, steps)), axis=1))
    l1 = 5.0 * linf * rng.uniform(0.5, 1.5, size=(R, steps))
    minimum = rng.uniform(0.0, 2.0, size=(R, steps))
    qv = np.cumsum(rng.uniform(0.0, 1.0, size=(R, steps)), axis=1)

    batch = BatchTrackers(trackers, R)
    active = np.ones(R, dtype=bool)
    for n in range(steps):
        batch.observe(n, l1[:, n], linf[:, n], minimum[:, n], qv[:, n], active)
    batch.close(np.full(R, steps - 1), qv[:, -1])

    for r in range(R):
        log = StopEventLog()
        for n in range(steps):
            state = _state(n, linf[r, n], l1[r, n], minimum[r, n], qv[r, n])
            update(trackers, state, log)
            doubling_update(log.doubling, state, final=n == steps - 1)
        batched = batch.event_log(r)
        assert batched.events == log.events
        assert batched.doubling == log.doubling
        assert batched.last_index == log.last_index


def test_batch_trackers_reject_out_of_order_indices() -> None:
    batch = BatchTrackers(TrackerSet(), 2)
    zeros = np.zeros(2)
    with pytest.raises(UsageError):
        batch.observe(1, zeros, zeros, zeros, zeros, np.ones(2, dtype=bool))
