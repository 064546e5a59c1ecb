"""Global and local parameter servers of the hierarchical asynchronous scheme.

Handlers are transitions ``(state, input) -> (new state, outgoing messages)``;
states are never mutated in place.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from typing import Deque, List, Tuple, Union

from src.optim import NesterovState, from_displacement, nesterov_apply
from src.params import ParamVector, VersionId, check_finite, convex_merge, same_dim
from src.strategies.base import GPS, Message, MessageKind


@dataclass(frozen=True)
class GpsState:
    model: ParamVector
    nesterov: NesterovState
    # number of deltas applied
    updates: int = 0
    actor: str = GPS

    @property
    def version(self) -> VersionId:
        return VersionId(self.actor, self.updates)


@dataclass(frozen=True)
class WorkerDelta:
    worker: str
    delta: ParamVector


@dataclass(frozen=True)
class GlobalModel:
    model: ParamVector


InboxItem = Union[WorkerDelta, GlobalModel]


@dataclass(frozen=True)
class LpsState:
    actor: str
    model: ParamVector
    nesterov: NesterovState
    accumulation: int
    alpha: float
    # model at t_last; the next outgoing delta is measured from here
    anchor: ParamVector
    t: int = 0
    t_last: int = 0
    # bumped by every model change (apply or merge)
    revision: int = 0
    # only merges restart the accumulation window
    strict: bool = False
    inbox: Deque[InboxItem] = field(default_factory=deque)

    @classmethod
    def create(
        cls,
        actor: str,
        model: ParamVector,
        nesterov: NesterovState,
        accumulation: int,
        alpha: float,
        strict: bool = False,
    ) -> "LpsState":
        if accumulation < 1:
            raise ValueError("accumulation K must be >= 1")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
        return cls(
            actor=actor,
            model=model,
            nesterov=nesterov,
            accumulation=accumulation,
            alpha=alpha,
            anchor=model,
            strict=strict,
        )

    @property
    def version(self) -> VersionId:
        return VersionId(self.actor, self.revision)


def halos_on_worker_delta(lps: LpsState, delta: ParamVector, worker: str) -> Tuple[LpsState, List[Message]]:
    """Apply a worker displacement, reschedule that worker, maybe push to the GPS."""
    same_dim(lps.model, delta)
    check_finite(delta, "worker delta")
    nesterov = lps.nesterov.copy()
    model = nesterov_apply(nesterov, lps.model, from_displacement(delta))
    t = lps.t + 1
    revision = lps.revision + 1
    version = VersionId(lps.actor, revision)

    outgoing = [Message(MessageKind.LOCAL_MODEL, lps.actor, worker, model, version)]
    t_last, anchor = lps.t_last, lps.anchor
    if t - t_last == lps.accumulation:
        outgoing.append(Message(MessageKind.LPS_DELTA, lps.actor, GPS, model - anchor, version))
        if not lps.strict:
            t_last, anchor = t, model

    new_state = replace(
        lps, model=model, nesterov=nesterov, t=t, t_last=t_last, anchor=anchor, revision=revision
    )
    return new_state, outgoing


def halos_on_global_model(lps: LpsState, global_model: ParamVector) -> LpsState:
    merged = convex_merge(lps.model, global_model, lps.alpha)
    return replace(lps, model=merged, anchor=merged, t_last=lps.t, revision=lps.revision + 1)


def gps_on_delta(gps: GpsState, delta: ParamVector, origin: str) -> Tuple[GpsState, Message]:
    """Apply a delta and address the new global model to *origin* only."""
    same_dim(gps.model, delta)
    nesterov = gps.nesterov.copy()
    model = nesterov_apply(nesterov, gps.model, from_displacement(delta))
    new_state = replace(gps, model=model, nesterov=nesterov, updates=gps.updates + 1)
    return new_state, Message(MessageKind.GLOBAL_MODEL, gps.actor, origin, model, new_state.version)


# ----- inbox -----

def enqueue(lps: LpsState, item: InboxItem) -> LpsState:
    inbox = deque(lps.inbox)
    inbox.append(item)
    return replace(lps, inbox=inbox)


def drain(lps: LpsState) -> Tuple[LpsState, List[Message]]:
    """Process queued items strictly in arrival order."""
    outgoing: List[Message] = []
    state = replace(lps, inbox=deque())
    for item in lps.inbox:
        if isinstance(item, WorkerDelta):
            state, sent = halos_on_worker_delta(state, item.delta, item.worker)
            outgoing.extend(sent)
        else:
            state = halos_on_global_model(state, item.model)
    return state, outgoing
