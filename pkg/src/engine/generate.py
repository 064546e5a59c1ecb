"""Timing-only trace generation.

Pending work sits on a heap keyed by ``(time, creation order)``; popping an
entry records its event, and any instantaneous follow-ups are recorded right
after it. Numerical values never influence the schedule.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Tuple

from src.cluster import ClusterSpec, compute_time, dyn_local_steps, p2p_time, ring_allreduce_time
from src.config import StrategyKind
from src.engine.events import TRACE_FORMAT, Event, EventKind, Trace
from src.errors import UnschedulableError
from src.params import VersionId
from src.strategies.base import GPS, MessageKind, StrategyConfig, lps_actor, worker_actor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StopRule:
    """No worker round starts once any configured budget would be exceeded."""

    max_time_s: Optional[float] = None
    max_worker_steps: Optional[int] = None
    max_samples: Optional[int] = None
    samples_per_step: int = 1

    def __post_init__(self) -> None:
        if self.max_time_s is None and self.max_worker_steps is None and self.max_samples is None:
            raise ValueError("stop rule needs a time, step or sample budget")
        for name in ("max_time_s", "max_worker_steps", "max_samples"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ValueError(f"{name} must be positive")
        if self.samples_per_step < 1:
            raise ValueError("samples_per_step must be >= 1")

    def allows(self, time: float, steps_started: int, steps: int) -> bool:
        total = steps_started + steps
        if self.max_time_s is not None and time > self.max_time_s:
            return False
        if self.max_worker_steps is not None and total > self.max_worker_steps:
            return False
        if self.max_samples is not None and total * self.samples_per_step > self.max_samples:
            return False
        return True


def _ref(version: VersionId) -> List:
    return version.to_json()


class _Generator:
    def __init__(self, spec: ClusterSpec, strategy: StrategyConfig, stop: StopRule) -> None:
        if not spec.workers:
            raise UnschedulableError("cluster has no workers")
        self.spec = spec
        self.strategy = strategy
        self.stop = stop
        self.events: List[Event] = []
        self._heap: List[Tuple[float, int, Callable[[float], None]]] = []
        self._created = 0
        self._next_msg = 0
        self._messages: Dict[int, Dict[str, Any]] = {}
        self.steps_started = 0

        fastest = spec.fastest_speed
        self.workers = [worker_actor(i) for i in range(len(spec.workers))]
        self.round_steps = [
            dyn_local_steps(strategy.local_steps, w.speed, fastest) if strategy.dyn_updates else strategy.local_steps
            for w in spec.workers
        ]
        self.rounds = [0] * len(spec.workers)
        self.round_start: List[Optional[VersionId]] = [None] * len(spec.workers)

        self.gps_updates = 0
        n_lps = len(spec.lps)
        self.lps_t = [0] * n_lps
        self.lps_t_last = [0] * n_lps
        self.lps_revision = [0] * n_lps
        self.lps_synced = [VersionId(GPS, 0)] * n_lps

        self.barrier_round = 0
        self.barrier_pending = 0

    # ----- plumbing -----

    def _at(self, time: float, fn: Callable[[float], None]) -> None:
        heapq.heappush(self._heap, (time, self._created, fn))
        self._created += 1

    def _record(self, time: float, actor: str, kind: EventKind, payload: Dict[str, Any]) -> None:
        self.events.append(Event(len(self.events), time, actor, kind, payload))

    def _region(self, actor: str) -> str:
        if actor == GPS:
            return self.spec.gps_region
        if actor.startswith("lps"):
            return self.spec.lps[int(actor[3:])].region
        return self.spec.workers[int(actor[1:])].region

    def _send(self, time: float, kind: MessageKind, src: str, dst: str, version: VersionId, **meta: Any) -> None:
        msg = self._next_msg
        self._next_msg += 1
        arrive = time + p2p_time(self._region(src), self._region(dst), self.spec.message_bytes, self.spec)
        self._messages[msg] = {"kind": kind, "src": src, "dst": dst, "version": version, **meta}
        self._record(time, src, EventKind.MSG_SEND, {
            "msg": msg, "kind": kind.value, "src": src, "dst": dst,
            "version": _ref(version), "arrive": arrive,
        })
        self._at(arrive, lambda t: self._arrive(t, msg))

    def _arrive(self, time: float, msg: int) -> None:
        info = self._messages.pop(msg)
        kind, dst = info["kind"], info["dst"]
        self._record(time, dst, EventKind.MSG_ARRIVE, {
            "msg": msg, "kind": kind.value, "src": info["src"], "dst": dst,
        })
        if kind in (MessageKind.LOCAL_MODEL, MessageKind.GLOBAL_MODEL) and dst.startswith("w"):
            self._start_round(time, int(dst[1:]), msg, info["version"])
        elif kind is MessageKind.WORKER_DELTA and dst == GPS:
            self._gps_apply(time, msg, info, origin=info["src"], sync=info["start"])
        elif kind is MessageKind.WORKER_DELTA:
            self._lps_apply(time, int(dst[3:]), msg, info)
        elif kind is MessageKind.LPS_DELTA:
            self._gps_apply(time, msg, info, origin=info["src"], sync=info["synced"])
        else:
            self._lps_merge(time, int(dst[3:]), msg, info)

    # ----- workers -----

    def _start_round(
        self, time: float, w: int, msg: Optional[int], version: VersionId, admitted: bool = False
    ) -> bool:
        steps = self.round_steps[w]
        if not admitted and not self.stop.allows(time, self.steps_started, steps):
            return False
        self.steps_started += steps
        self.round_start[w] = version
        payload: Dict[str, Any] = {"round": self.rounds[w], "steps": steps, "start_version": _ref(version)}
        if msg is not None:
            payload["msg"] = msg
        self._record(time, self.workers[w], EventKind.WORKER_START, payload)
        duration = compute_time(steps, self.spec.workers[w].speed, self.spec)
        self._at(time + duration, lambda t: self._finish_round(t, w))
        return True

    def _finish_round(self, time: float, w: int) -> None:
        actor = self.workers[w]
        round_no = self.rounds[w]
        self._record(time, actor, EventKind.WORKER_FINISH, {"round": round_no, "steps": self.round_steps[w]})
        self.rounds[w] += 1
        if self.strategy.barrier:
            self._barrier_finish(time)
            return
        if self.strategy.kind is StrategyKind.HALOS:
            server = lps_actor(self.spec.lps_of(w))
        else:
            server = GPS
        start = self.round_start[w]
        self._send(time, MessageKind.WORKER_DELTA, actor, server, start, start=start, round=round_no)

    # ----- servers -----

    def _lps_apply(self, time: float, j: int, msg: int, info: Dict[str, Any]) -> None:
        actor = lps_actor(j)
        self.lps_t[j] += 1
        self.lps_revision[j] += 1
        version = VersionId(actor, self.lps_revision[j])
        self._record(time, actor, EventKind.LPS_APPLY_DELTA, {
            "msg": msg, "worker": info["src"], "round": info["round"], "t": self.lps_t[j],
            "produces": _ref(version), "base_version": [actor, self.lps_revision[j] - 1],
            "start_version": _ref(info["start"]),
        })
        self._send(time, MessageKind.LOCAL_MODEL, actor, info["src"], version)
        if self.lps_t[j] - self.lps_t_last[j] == self.strategy.accumulation:
            self._send(time, MessageKind.LPS_DELTA, actor, GPS, version, synced=self.lps_synced[j])
            if not self.strategy.strict_single_inflight:
                self.lps_t_last[j] = self.lps_t[j]

    def _lps_merge(self, time: float, j: int, msg: int, info: Dict[str, Any]) -> None:
        actor = lps_actor(j)
        self.lps_revision[j] += 1
        self.lps_t_last[j] = self.lps_t[j]
        self.lps_synced[j] = info["version"]
        self._record(time, actor, EventKind.LPS_MERGE, {
            "msg": msg, "global_version": _ref(info["version"]), "t": self.lps_t[j],
            "produces": [actor, self.lps_revision[j]], "base_version": [actor, self.lps_revision[j] - 1],
        })

    def _gps_apply(self, time: float, msg: int, info: Dict[str, Any], origin: str, sync: VersionId) -> None:
        self.gps_updates += 1
        version = VersionId(GPS, self.gps_updates)
        self._record(time, GPS, EventKind.GPS_APPLY, {
            "msg": msg, "origin": origin, "produces": _ref(version),
            "base_version": [GPS, self.gps_updates - 1], "sync_version": _ref(sync),
        })
        self._send(time, MessageKind.GLOBAL_MODEL, GPS, origin, version)

    # ----- barrier methods -----

    def _barrier_start(self, time: float) -> None:
        total = sum(self.round_steps)
        if not self.stop.allows(time, self.steps_started, total):
            return
        version = VersionId(GPS, self.barrier_round)
        self.barrier_pending = len(self.workers)
        for w in range(len(self.workers)):
            self._start_round(time, w, None, version, admitted=True)

    def _barrier_finish(self, time: float) -> None:
        self.barrier_pending -= 1
        if self.barrier_pending:
            return
        round_no = self.barrier_round
        self._record(time, GPS, EventKind.BARRIER, {"round": round_no, "participants": list(self.workers)})
        duration = ring_allreduce_time(self.spec.worker_regions(), self.spec.message_bytes, self.spec)
        self._at(time + duration, self._barrier_apply)

    def _barrier_apply(self, time: float) -> None:
        round_no = self.barrier_round
        self.barrier_round += 1
        self.gps_updates += 1
        self._record(time, GPS, EventKind.GPS_APPLY, {
            "round": round_no, "produces": [GPS, self.gps_updates], "base_version": [GPS, round_no],
            "participants": [{"worker": a, "steps": s} for a, s in zip(self.workers, self.round_steps)],
        })
        self._barrier_start(time)

    # ----- driver -----

    def _seed(self) -> None:
        kind = self.strategy.kind
        if self.strategy.barrier:
            self._at(0.0, self._barrier_start)
        elif kind is StrategyKind.HALOS:
            def initial(t: float) -> None:
                for j, server in enumerate(self.spec.lps):
                    for member in server.members:
                        self._send(t, MessageKind.LOCAL_MODEL, lps_actor(j), self.workers[member], VersionId(lps_actor(j), 0))
            self._at(0.0, initial)
        else:
            def initial(t: float) -> None:
                for actor in self.workers:
                    self._send(t, MessageKind.GLOBAL_MODEL, GPS, actor, VersionId(GPS, 0))
            self._at(0.0, initial)

    def run(self) -> List[Event]:
        self._seed()
        while self._heap:
            time, _, fn = heapq.heappop(self._heap)
            fn(time)
        return self.events


def generate_trace(
    spec: ClusterSpec,
    strategy: StrategyConfig,
    stop: StopRule,
    config_hash: str = "",
    seed: int = 0,
) -> Trace:
    """Deterministic event order for *strategy* on *spec* until *stop* is reached."""
    events = _Generator(spec, strategy, stop).run()
    header = {
        "format": TRACE_FORMAT,
        "config_hash": config_hash,
        "seed": seed,
        "strategy": strategy.kind.value,
        "workers": [worker_actor(i) for i in range(len(spec.workers))],
        "lps": [lps_actor(j) for j in range(len(spec.lps))] if strategy.kind is StrategyKind.HALOS else [],
        "lps_members": [[worker_actor(m) for m in s.members] for s in spec.lps]
        if strategy.kind is StrategyKind.HALOS else [],
    }
    logger.debug("generated %d events for %s", len(events), strategy.kind.value)
    return Trace(header=header, events=events)
