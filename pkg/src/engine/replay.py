"""Numerical execution of a trace in its recorded order.

Handlers are applied serially in trace order. Worker rounds are submitted to
the pool at WorkerStart and collected at WorkerFinish, so the degree of
parallelism never changes results. Every message a handler produces must
match the trace's next MsgSend for that actor, and nothing may be consumed
before its MsgArrive.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict, deque
from concurrent.futures import Future
from dataclasses import dataclass, field, replace
from typing import Any, Deque, Dict, List, Optional, Set

from src.analysis import LossSample, RunReport
from src.cluster import ClusterSpec
from src.config import LOSS_BLOWUP_FACTOR, SAMPLE_EVERY_S, SAMPLE_EVERY_UPDATES, ShardMode, StrategyKind
from src.engine._worker import WorkerPool
from src.engine.events import Event, EventKind, Trace, trace_hash
from src.engine.metrics import measure_staleness, runtime_breakdown
from src.errors import LossBlowupError, NonFiniteError, SnapshotError, TraceError
from src.optim import LrSchedule, lr_at
from src.params import ParamVector, SnapshotStore, VersionId, model_hash
from src.strategies.base import GPS, Message, MessageKind, StrategyConfig, lps_actor, worker_actor
from src.strategies.baselines import (
    OuterState,
    async_local_sgd_step,
    diloco_round,
    sync_sgd_round,
    worker_gradient,
)
from src.strategies.halos import GpsState, LpsState, gps_on_delta, halos_on_global_model, halos_on_worker_delta
from src.strategies.worker import WorkerState, worker_round
from src.workloads.base import Workload

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReplayOptions:
    parallelism: int = 1
    retain_snapshots: bool = False
    sample_every_s: float = SAMPLE_EVERY_S
    sample_every_updates: int = SAMPLE_EVERY_UPDATES
    # stop replaying once a sampled loss reaches this value
    stop_at_loss: Optional[float] = None
    # None disables the blow-up check; non-finite losses always diverge
    blowup_factor: Optional[float] = LOSS_BLOWUP_FACTOR
    shard_mode: ShardMode = ShardMode.IID
    data_seed: int = 0
    expected_config_hash: Optional[str] = None


@dataclass
class ReplayResult:
    report: RunReport
    final_model: ParamVector
    snapshots: SnapshotStore


@dataclass
class _Pending:
    future: Future
    version: VersionId
    round: int
    steps: int


def inner_schedule(trace: Trace, strategy: StrategyConfig) -> LrSchedule:
    """Worker schedule spanning the busiest worker's step count in *trace*."""
    if strategy.kind is StrategyKind.SYNC_SGD:
        total = sum(1 for e in trace if e.kind is EventKind.GPS_APPLY)
    else:
        per_worker: Dict[str, int] = defaultdict(int)
        for e in trace:
            if e.kind is EventKind.WORKER_START:
                per_worker[e.actor] += int(e.payload["steps"])
        total = max(per_worker.values(), default=0)
    total = max(total, 1)
    inner = strategy.inner
    warmup = int(round(inner.warmup_fraction * total))
    return LrSchedule(peak_lr=inner.lr, total_steps=total, warmup_steps=warmup, floor_fraction=inner.floor_fraction)


class _Replayer:
    def __init__(
        self,
        trace: Trace,
        spec: ClusterSpec,
        strategy: StrategyConfig,
        workload: Workload,
        options: ReplayOptions,
        config_hash: str,
        seed: int,
    ) -> None:
        self._check_header(trace, spec, strategy, options)
        self.trace = trace
        self.spec = spec
        self.strategy = strategy
        self.kind = strategy.kind
        self.workload = workload
        self.options = options
        self.config_hash = config_hash
        self.seed = seed
        self._loss_cache: Dict[VersionId, float] = {}
        self.store = SnapshotStore(retain_all=options.retain_snapshots, on_drop=self._forget_loss)
        self.schedule = inner_schedule(trace, strategy)
        self.max_norm = strategy.inner.max_norm

        theta0 = workload.init_params()
        dim = theta0.shape[0]
        shards = workload.shard(len(spec.workers), options.shard_mode, options.data_seed)
        self.workers: Dict[str, WorkerState] = {}
        for i, (w, shard) in enumerate(zip(spec.workers, shards)):
            if self.kind is StrategyKind.HALOS:
                server: Optional[str] = lps_actor(spec.lps_of(i))
            elif self.kind is StrategyKind.ASYNC_LOCAL_SGD:
                server = GPS
            else:
                server = None
            actor = worker_actor(i)
            self.workers[actor] = WorkerState(
                index=i, actor=actor, speed=w.speed, server=server,
                inner=strategy.inner.make_state(dim), local_steps=strategy.local_steps, shard=shard,
            )

        self.outbox: Dict[str, Deque[Message]] = defaultdict(deque)
        self.in_flight: Dict[int, Message] = {}
        self.arrived: Dict[int, Message] = {}
        self.pending: Dict[str, _Pending] = {}
        self.round_results: Dict[str, Any] = {}
        self.lps: Dict[str, LpsState] = {}
        self.gps: Optional[GpsState] = None
        self.outer: Optional[OuterState] = None

        if strategy.barrier:
            if self.kind is StrategyKind.SYNC_SGD:
                self.outer = OuterState(theta0, inner=strategy.inner.make_state(dim))
            else:
                self.outer = OuterState(theta0, nesterov=strategy.server.make_state(dim))
            self.store.commit(self.outer.version, theta0)
        else:
            self.gps = GpsState(theta0, strategy.server.make_state(dim, strategy.global_beta()))
            self.store.commit(self.gps.version, theta0)
        if self.kind is StrategyKind.HALOS:
            for j, group in enumerate(spec.lps):
                actor = lps_actor(j)
                state = LpsState.create(
                    actor, theta0, strategy.local_server.make_state(dim), strategy.accumulation,
                    strategy.merge_alpha, strict=strategy.strict_single_inflight,
                )
                self.lps[actor] = state
                self.store.commit(state.version, theta0)
                for member in group.members:
                    self.outbox[actor].append(
                        Message(MessageKind.LOCAL_MODEL, actor, worker_actor(member), theta0, state.version)
                    )
        elif self.kind is StrategyKind.ASYNC_LOCAL_SGD:
            for actor in self.workers:
                self.outbox[GPS].append(Message(MessageKind.GLOBAL_MODEL, GPS, actor, theta0, self.gps.version))

        self.tokens = 0
        self.updates = 0
        self.samples: List[LossSample] = []
        self._next_boundary = options.sample_every_s

    # ----- validation helpers -----

    @staticmethod
    def _check_header(trace: Trace, spec: ClusterSpec, strategy: StrategyConfig, options: ReplayOptions) -> None:
        header = trace.header
        if header.get("strategy") != strategy.kind.value:
            raise TraceError(f"trace was generated for {header.get('strategy')!r}, not {strategy.kind.value!r}")
        if len(header.get("workers", [])) != len(spec.workers):
            raise TraceError("trace worker count does not match the cluster")
        expected = options.expected_config_hash
        if expected is not None and header.get("config_hash") != expected:
            raise TraceError(f"trace config hash {header.get('config_hash')!r} does not match {expected!r}")

    def _commit(self, version: VersionId, model: ParamVector, event: Event) -> None:
        produced = event.payload.get("produces")
        if produced is not None and version.to_json() != list(produced):
            raise TraceError(f"seq {event.seq}: handler produced {version}, trace expects {produced}")
        self.store.commit(version, model)

    def _take(self, event: Event, kind: MessageKind) -> Message:
        msg_id = event.payload.get("msg")
        if msg_id not in self.arrived:
            state = "is still in flight" if msg_id in self.in_flight else "has not arrived or was already consumed"
            raise TraceError(f"seq {event.seq}: message {msg_id} {state}")
        msg = self.arrived.pop(msg_id)
        if msg.kind is not kind or msg.dst != event.actor:
            raise TraceError(f"seq {event.seq}: message {msg_id} is a {msg.kind.value} for {msg.dst}")
        return msg

    # ----- global model and loss sampling -----

    def _global(self) -> VersionId:
        return self.outer.version if self.outer is not None else self.gps.version

    def _global_model(self) -> ParamVector:
        return self.outer.model if self.outer is not None else self.gps.model

    def _sample(self, time: float) -> float:
        version = self._global()
        loss = self._loss_cache.get(version)
        if loss is None:
            loss = self.workload.full_loss(self._global_model())
            self._loss_cache[version] = loss
        if not math.isfinite(loss):
            raise NonFiniteError("global loss")
        factor = self.options.blowup_factor
        if factor is not None and self.samples:
            reference = max(abs(self.samples[0].loss), 1.0)
            if loss > factor * reference:
                raise LossBlowupError(loss, self.samples[0].loss, factor)
        sample = LossSample(time=time, tokens=self.tokens, loss=loss, updates=self.updates)
        if self.samples and time <= self.samples[-1].time:
            if self.samples[-1].updates != self.updates or self.samples[-1].loss != loss:
                self.samples[-1] = sample
        else:
            self.samples.append(sample)
        logger.debug("t=%.3f tokens=%d updates=%d loss=%.6g", time, self.tokens, self.updates, loss)
        return loss

    def _forget_loss(self, version: VersionId) -> None:
        self._loss_cache.pop(version, None)

    def _reached_target(self) -> bool:
        target = self.options.stop_at_loss
        return target is not None and bool(self.samples) and self.samples[-1].loss <= target

    # ----- event handlers -----

    def _on_send(self, event: Event) -> None:
        box = self.outbox[event.actor]
        if not box:
            raise TraceError(f"seq {event.seq}: {event.actor} has no produced message to send")
        msg = box.popleft()
        p = event.payload
        if msg.kind.value != p.get("kind") or msg.dst != p.get("dst"):
            raise TraceError(
                f"seq {event.seq}: trace sends {p.get('kind')} to {p.get('dst')}, "
                f"handler produced {msg.kind.value} for {msg.dst}"
            )
        if msg.version is not None and msg.version.to_json() != list(p.get("version", [])):
            raise TraceError(f"seq {event.seq}: message carries {msg.version}, trace says {p.get('version')}")
        self.in_flight[p["msg"]] = msg

    def _on_arrive(self, event: Event) -> None:
        msg_id = event.payload.get("msg")
        if msg_id not in self.in_flight:
            raise TraceError(f"seq {event.seq}: message {msg_id} arrives before it was sent")
        msg = self.in_flight.pop(msg_id)
        if msg.dst != event.actor:
            raise TraceError(f"seq {event.seq}: message {msg_id} is addressed to {msg.dst}")
        self.arrived[msg_id] = msg

    def _on_worker_start(self, event: Event) -> None:
        actor, p = event.actor, event.payload
        worker = self.workers.get(actor)
        if worker is None:
            raise TraceError(f"seq {event.seq}: unknown worker {actor}")
        if actor in self.pending:
            raise TraceError(f"seq {event.seq}: {actor} starts a round while still computing")
        start = VersionId.from_json(p["start_version"])
        if "msg" in p:
            kind = MessageKind.LOCAL_MODEL if self.kind is StrategyKind.HALOS else MessageKind.GLOBAL_MODEL
            msg = self._take(event, kind)
            if msg.version != start:
                raise TraceError(f"seq {event.seq}: round starts from {start}, message carries {msg.version}")
            model = msg.body
        else:
            if start != self._global():
                raise TraceError(f"seq {event.seq}: barrier round starts from {start}, global is {self._global()}")
            try:
                model = self.store.get(start)
            except SnapshotError as exc:
                raise TraceError(f"seq {event.seq}: {exc}") from None

        steps = int(p["steps"])
        if self.kind is StrategyKind.SYNC_SGD:
            job = lambda: worker_gradient(worker, model, self.workload, worker.steps_done)
        else:
            job = lambda: worker_round(worker, model, self.schedule, self.workload, self.max_norm, steps)
        self.pending[actor] = _Pending(self.pool.submit(job), start, int(p["round"]), steps)

    def _on_worker_finish(self, event: Event) -> None:
        actor = event.actor
        pending = self.pending.pop(actor, None)
        if pending is None or pending.round != event.payload.get("round"):
            raise TraceError(f"seq {event.seq}: {actor} finishes a round it never started")
        result = pending.future.result()
        worker = self.workers[actor]
        if self.kind is StrategyKind.SYNC_SGD:
            self.workers[actor] = replace(worker, steps_done=worker.steps_done + pending.steps)
            self.round_results[actor] = result[0]
        else:
            self.workers[actor] = replace(worker, inner=result.inner, steps_done=worker.steps_done + result.steps)
            if self.strategy.barrier:
                self.round_results[actor] = result.delta
            else:
                self.outbox[actor].append(
                    Message(MessageKind.WORKER_DELTA, actor, worker.server, result.delta, pending.version)
                )
        self.tokens += pending.steps * self.workload.samples_per_step

    def _on_lps_apply(self, event: Event) -> None:
        state = self.lps.get(event.actor)
        if state is None:
            raise TraceError(f"seq {event.seq}: unknown LPS {event.actor}")
        msg = self._take(event, MessageKind.WORKER_DELTA)
        if msg.src != event.payload.get("worker"):
            raise TraceError(f"seq {event.seq}: delta from {msg.src}, trace says {event.payload.get('worker')}")
        state, outgoing = halos_on_worker_delta(state, msg.body, msg.src)
        self._commit(state.version, state.model, event)
        self.lps[event.actor] = state
        self.outbox[event.actor].extend(outgoing)

    def _on_lps_merge(self, event: Event) -> None:
        state = self.lps.get(event.actor)
        if state is None:
            raise TraceError(f"seq {event.seq}: unknown LPS {event.actor}")
        msg = self._take(event, MessageKind.GLOBAL_MODEL)
        if msg.version.to_json() != list(event.payload.get("global_version", [])):
            raise TraceError(f"seq {event.seq}: merge of {msg.version}, trace says {event.payload.get('global_version')}")
        state = halos_on_global_model(state, msg.body)
        self._commit(state.version, state.model, event)
        self.lps[event.actor] = state

    def _on_gps_apply(self, event: Event) -> None:
        if self.strategy.barrier:
            self._apply_barrier_round(event)
        else:
            kind = MessageKind.LPS_DELTA if self.kind is StrategyKind.HALOS else MessageKind.WORKER_DELTA
            msg = self._take(event, kind)
            if msg.src != event.payload.get("origin"):
                raise TraceError(f"seq {event.seq}: delta from {msg.src}, trace says {event.payload.get('origin')}")
            if self.kind is StrategyKind.HALOS:
                gps, reply = gps_on_delta(self.gps, msg.body, msg.src)
            else:
                gps, reply = async_local_sgd_step(self.gps, msg.body, msg.src)
            self._commit(gps.version, gps.model, event)
            self.gps = gps
            self.outbox[GPS].append(reply)
        self.updates += 1
        if self.updates % self.options.sample_every_updates == 0:
            self._sample(event.t)

    def _apply_barrier_round(self, event: Event) -> None:
        participants = [entry["worker"] for entry in event.payload.get("participants", [])]
        missing = [w for w in participants if w not in self.round_results]
        if missing or len(participants) != len(self.round_results):
            raise TraceError(f"seq {event.seq}: round applied before {missing or 'all workers'} finished")
        contributions = [self.round_results[w] for w in participants]
        if self.kind is StrategyKind.SYNC_SGD:
            lr = lr_at(self.schedule, self.outer.rounds)
            outer = sync_sgd_round(self.outer, contributions, lr, self.max_norm)
        else:
            outer = diloco_round(self.outer, contributions)
        self._commit(outer.version, outer.model, event)
        self.outer = outer
        self.round_results.clear()

    def _on_barrier(self, event: Event) -> None:
        participants = event.payload.get("participants", [])
        if self.pending or sorted(participants) != sorted(self.round_results):
            raise TraceError(f"seq {event.seq}: barrier reached while workers are still computing")

    _HANDLERS = {
        EventKind.MSG_SEND: _on_send,
        EventKind.MSG_ARRIVE: _on_arrive,
        EventKind.WORKER_START: _on_worker_start,
        EventKind.WORKER_FINISH: _on_worker_finish,
        EventKind.LPS_APPLY_DELTA: _on_lps_apply,
        EventKind.LPS_MERGE: _on_lps_merge,
        EventKind.GPS_APPLY: _on_gps_apply,
        EventKind.BARRIER: _on_barrier,
    }

    # ----- driver -----

    def run(self, pool: WorkerPool) -> ReplayResult:
        self.pool = pool
        diverged, diagnosis, divergence_seq, truncated = False, None, None, None
        previous_t = 0.0
        current: Optional[Event] = None
        try:
            self._sample(0.0)
            for index, event in enumerate(self.trace.events):
                current = event
                if event.seq != index:
                    raise TraceError(f"event {index} carries seq {event.seq}")
                if event.t < previous_t:
                    raise TraceError(f"seq {event.seq}: time goes backwards ({event.t} < {previous_t})")
                while self._next_boundary < event.t:
                    self._sample(self._next_boundary)
                    self._next_boundary += self.options.sample_every_s
                    if self._reached_target():
                        break
                if self._reached_target():
                    truncated = event.seq
                    break
                previous_t = event.t
                self._HANDLERS[event.kind](self, event)
                if self._reached_target():
                    truncated = event.seq
                    break
            else:
                current = None
                self._sample(previous_t)
        except (NonFiniteError, LossBlowupError) as exc:
            diverged = True
            divergence_seq = current.seq if current is not None else None
            diagnosis = str(exc) if divergence_seq is None else f"{exc} at event seq {divergence_seq}"
            logger.warning("run diverged: %s", diagnosis)

        report = RunReport(
            strategy=self.kind.value,
            config_hash=self.config_hash,
            seed=self.seed,
            samples=list(self.samples),
            breakdown={w: b.to_json() for w, b in runtime_breakdown(self.trace).items()},
            final_model_hash=model_hash(self._global_model()),
            trace_hash=trace_hash(self.trace),
            total_tokens=self.tokens,
            global_updates=self.updates,
            diverged=diverged,
            diagnosis=diagnosis,
            divergence_seq=divergence_seq,
            truncated_at_seq=truncated,
        )
        if self.options.retain_snapshots:
            report.staleness = measure_staleness(self.trace, self.store).to_json()
        accuracy = getattr(self.workload, "accuracy", None)
        if callable(accuracy) and not diverged:
            report.accuracy = accuracy(self._global_model())
        return ReplayResult(report=report, final_model=self._global_model(), snapshots=self.store)


def replay(
    trace: Trace,
    spec: ClusterSpec,
    strategy: StrategyConfig,
    workload: Workload,
    options: Optional[ReplayOptions] = None,
    config_hash: str = "",
    seed: int = 0,
) -> ReplayResult:
    """Execute *trace* numerically and summarise it as a :class:`RunReport`."""
    options = options or ReplayOptions()
    replayer = _Replayer(trace, spec, strategy, workload, options, config_hash or trace.header.get("config_hash", ""), seed)
    with WorkerPool(options.parallelism) as pool:
        return replayer.run(pool)
