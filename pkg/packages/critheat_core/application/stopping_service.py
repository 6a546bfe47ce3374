"""First-crossing trackers and the dyadic doubling/halving log.

Every condition is checked on grid values only and fires on the closed threshold.
`update`/`doubling_update` follow one trajectory state by state; `BatchTrackers` does
the same bookkeeping for a (replicas,) batch and must produce identical logs.
"""

from __future__ import annotations

import math
from collections import Counter
from collections.abc import Iterable
from dataclasses import dataclass, field

import numpy as np

from packages.critheat_core.domain.errors import UsageError
from packages.critheat_core.domain.models import (
    DoublingLog,
    StopEvent,
    StopEventLog,
    StopKind,
    TrackerSet,
    TrajectoryState,
)

# order in which events of one grid index are appended to a log
KIND_ORDER: dict[StopKind, int] = {"tau_inf": 0, "tau_linf": 1, "tau_l1": 2, "explosion": 3}
_MAX_LEVEL = 1023


def dyadic_level(linf: float) -> int:
    """floor(log2 linf), saturating for huge or non-finite values."""
    if not math.isfinite(linf) or linf >= 2.0**_MAX_LEVEL:
        return _MAX_LEVEL
    return int(math.floor(math.log2(linf)))


def is_explosion(trackers: TrackerSet, linf: float) -> bool:
    return not math.isfinite(linf) or linf >= trackers.n_max


def update(trackers: TrackerSet, state: TrajectoryState, log: StopEventLog) -> list[StopEvent]:
    """Fire every threshold first crossed at `state`; each kind/threshold fires once."""
    if state.t_index != log.last_index + 1:
        raise UsageError(f"tracker expected t_index {log.last_index + 1}, got {state.t_index}")
    log.last_index = state.t_index
    fired: list[StopEvent] = []

    if state.minimum <= trackers.epsilon and not log.fired("tau_inf", trackers.epsilon):
        fired.append(StopEvent("tau_inf", trackers.epsilon, state.t_index, state.minimum))
    for n in trackers.n_levels:
        if state.linf >= n and not log.fired("tau_linf", n):
            fired.append(StopEvent("tau_linf", n, state.t_index, state.linf))
    if state.l1 > trackers.M and not log.fired("tau_l1", trackers.M):
        fired.append(StopEvent("tau_l1", trackers.M, state.t_index, state.l1))
    exploded = state.exploded or is_explosion(trackers, state.linf)
    if exploded and not log.fired("explosion", trackers.n_max):
        fired.append(StopEvent("explosion", trackers.n_max, state.t_index, state.linf))

    log.events.extend(fired)
    return fired


def doubling_update(log: DoublingLog, state: TrajectoryState, final: bool = False) -> DoublingLog:
    """Advance the doubling log by one state; `final=True` also closes it with a sentinel.

    The level moves by at most one per grid index, so a jump across several dyadic
    levels is spread over the following indices.
    """
    if log.closed:
        return log
    linf = state.linf if math.isfinite(state.linf) else math.inf
    if not log.started:
        if linf >= 2.0:
            log.append(state.t_index, max(1, dyadic_level(linf)), "start", state.qv_accum)
    else:
        m = log.current_level
        if m < _MAX_LEVEL and linf >= 2.0 ** (m + 1):
            log.append(state.t_index, m + 1, "double", state.qv_accum)
        elif m >= 2 and linf <= 2.0 ** (m - 1):
            log.append(state.t_index, m - 1, "halve", state.qv_accum)
    if final and log.started:
        log.append(state.t_index, log.current_level, "sentinel", state.qv_accum)
    return log


@dataclass(frozen=True)
class DoublingStatistics:
    per_level: dict[int, int] = field(default_factory=dict)
    total_doubles: int = 0
    max_level: int = 0


def doubling_statistics(logs: Iterable[DoublingLog]) -> DoublingStatistics:
    """Histogram of double events keyed by the level they leave."""
    counts: Counter[int] = Counter()
    max_level = 0
    for log in logs:
        for i, kind in enumerate(log.event_kinds):
            if kind == "double":
                counts[log.levels[i] - 1] += 1
        if log.levels:
            max_level = max(max_level, max(log.levels))
    return DoublingStatistics(
        per_level=dict(sorted(counts.items())),
        total_doubles=sum(counts.values()),
        max_level=max_level,
    )


def doubling_qv_segments(log: DoublingLog) -> list[float]:
    """Quadratic-variation increments between consecutive doubling times."""
    qv = log.qv_at_rho
    return [qv[i + 1] - qv[i] for i in range(len(qv) - 1)]


class BatchTrackers:
    """Vectorised `update` + `doubling_update` over a batch of replicas."""

    def __init__(self, trackers: TrackerSet, replicas: int) -> None:
        self.trackers = trackers
        self.replicas = replicas
        self._levels_n = np.asarray(trackers.n_levels, dtype=np.float64)
        self.first_inf = np.full(replicas, -1, dtype=np.int64)
        self.first_linf = np.full((replicas, len(trackers.n_levels)), -1, dtype=np.int64)
        self.first_l1 = np.full(replicas, -1, dtype=np.int64)
        self.first_explosion = np.full(replicas, -1, dtype=np.int64)
        self._trigger_inf = np.zeros(replicas)
        self._trigger_l1 = np.zeros(replicas)
        self._trigger_explosion = np.zeros(replicas)
        self._trigger_linf = np.zeros((replicas, len(trackers.n_levels)))
        self.level = np.zeros(replicas, dtype=np.int64)
        self.doubling = [DoublingLog() for _ in range(replicas)]
        self.next_index = 0

    def observe(
        self,
        t_index: int,
        l1: np.ndarray,
        linf: np.ndarray,
        minimum: np.ndarray,
        qv: np.ndarray,
        active: np.ndarray,
    ) -> dict[StopKind, np.ndarray]:
        """Record first crossings at `t_index` for active replicas; return the new firings."""
        if t_index != self.next_index:
            raise UsageError(f"batch trackers expected t_index {self.next_index}, got {t_index}")
        self.next_index += 1
        tr = self.trackers

        new_inf = active & (self.first_inf < 0) & (minimum <= tr.epsilon)
        self.first_inf[new_inf] = t_index
        self._trigger_inf[new_inf] = minimum[new_inf]

        new_linf = np.zeros(self.replicas, dtype=bool)
        if self._levels_n.size:
            crossing = (
                active[:, None] & (self.first_linf < 0) & (linf[:, None] >= self._levels_n)
            )
            self.first_linf[crossing] = t_index
            self._trigger_linf[crossing] = np.broadcast_to(linf[:, None], crossing.shape)[
                crossing
            ]
            new_linf = crossing.any(axis=1)

        new_l1 = active & (self.first_l1 < 0) & (l1 > tr.M)
        self.first_l1[new_l1] = t_index
        self._trigger_l1[new_l1] = l1[new_l1]

        exploded = ~np.isfinite(linf) | (linf >= tr.n_max)
        new_explosion = active & (self.first_explosion < 0) & exploded
        self.first_explosion[new_explosion] = t_index
        self._trigger_explosion[new_explosion] = linf[new_explosion]

        self._observe_doubling(t_index, linf, qv, active)
        return {
            "tau_inf": new_inf,
            "tau_linf": new_linf,
            "tau_l1": new_l1,
            "explosion": new_explosion,
        }

    def _observe_doubling(
        self, t_index: int, linf: np.ndarray, qv: np.ndarray, active: np.ndarray
    ) -> None:
        safe = np.where(np.isfinite(linf), linf, np.inf)
        m = self.level
        with np.errstate(over="ignore"):
            upper = np.ldexp(1.0, np.minimum(m + 1, _MAX_LEVEL))
            lower = np.ldexp(1.0, np.maximum(m - 1, 0))
        start = active & (m == 0) & (safe >= 2.0)
        double = active & (m > 0) & (m < _MAX_LEVEL) & (safe >= upper)
        halve = active & (m >= 2) & ~double & (safe <= lower)
        for r in np.flatnonzero(start):
            level = max(1, dyadic_level(float(safe[r])))
            self.doubling[r].append(t_index, level, "start", float(qv[r]))
            self.level[r] = level
        for r in np.flatnonzero(double):
            self.level[r] += 1
            self.doubling[r].append(t_index, int(self.level[r]), "double", float(qv[r]))
        for r in np.flatnonzero(halve):
            self.level[r] -= 1
            self.doubling[r].append(t_index, int(self.level[r]), "halve", float(qv[r]))

    def close(self, stop_index: np.ndarray, qv: np.ndarray) -> None:
        """Append the sentinel for every replica whose doubling log started."""
        for r, log in enumerate(self.doubling):
            if log.started and not log.closed:
                log.append(int(stop_index[r]), log.current_level, "sentinel", float(qv[r]))

    def event_log(self, r: int, last_index: int | None = None) -> StopEventLog:
        tr = self.trackers
        candidates: list[tuple[StopKind, float, int, float]] = [
            ("tau_inf", tr.epsilon, int(self.first_inf[r]), self._trigger_inf[r]),
            ("tau_l1", tr.M, int(self.first_l1[r]), self._trigger_l1[r]),
            ("explosion", tr.n_max, int(self.first_explosion[r]), self._trigger_explosion[r]),
        ]
        for j, n in enumerate(tr.n_levels):
            candidates.append(("tau_linf", n, int(self.first_linf[r, j]), self._trigger_linf[r, j]))
        events = [
            StopEvent(kind, threshold, index, float(value))
            for kind, threshold, index, value in candidates
            if index >= 0
        ]
        events.sort(key=lambda e: (e.t_index, KIND_ORDER[e.kind], e.threshold))
        return StopEventLog(
            events=events,
            doubling=self.doubling[r],
            last_index=self.next_index - 1 if last_index is None else last_index,
        )
