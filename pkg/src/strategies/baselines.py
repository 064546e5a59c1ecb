"""Synchronous SGD, DiLoCo (optionally with dynamic local steps) and Async-Local-SGD."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from src.errors import NonFiniteError
from src.optim import InnerOptState, NesterovState, clip_gradient, from_displacement, inner_step, nesterov_apply
from src.params import ParamVector, VersionId, check_finite
from src.strategies.base import GPS, Message
from src.strategies.halos import GpsState, gps_on_delta
from src.strategies.worker import WorkerState
from src.workloads.base import Workload


@dataclass(frozen=True)
class OuterState:
    """The synchronized model of a barrier method."""

    model: ParamVector
    # outer optimizer (DiLoCo) or the single global inner optimizer (sync SGD)
    nesterov: Optional[NesterovState] = None
    inner: Optional[InnerOptState] = None
    rounds: int = 0
    actor: str = GPS

    @property
    def version(self) -> VersionId:
        return VersionId(self.actor, self.rounds)


def _average(vectors: Sequence[ParamVector]) -> ParamVector:
    if not vectors:
        raise ValueError("nothing to average")
    return np.mean(np.stack(vectors), axis=0)


def worker_gradient(worker: WorkerState, model: ParamVector, workload: Workload, step: int) -> Tuple[ParamVector, float]:
    grad, loss = workload.grad(model, worker.shard, step)
    if not math.isfinite(loss):
        raise NonFiniteError("loss", step=step)
    return check_finite(grad, "gradient", step=step), loss


def sync_sgd_round(
    state: OuterState,
    grads: Sequence[ParamVector],
    lr: float,
    max_norm: Optional[float] = None,
) -> OuterState:
    """Average per-worker gradients, then take one global optimizer step."""
    if state.inner is None:
        raise ValueError("sync SGD needs a global inner optimizer state")
    g = _average(grads)
    if max_norm is not None:
        g = clip_gradient(g, max_norm)
    inner = state.inner.copy()
    model = inner_step(inner, state.model, g, lr)
    return replace(state, model=model, inner=inner, rounds=state.rounds + 1)


def diloco_round(state: OuterState, deltas: Sequence[ParamVector]) -> OuterState:
    """Average worker displacements and apply the outer Nesterov step."""
    if state.nesterov is None:
        raise ValueError("DiLoCo needs an outer optimizer state")
    nesterov = state.nesterov.copy()
    g = _average([from_displacement(d) for d in deltas])
    model = nesterov_apply(nesterov, state.model, g)
    return replace(state, model=model, nesterov=nesterov, rounds=state.rounds + 1)


def async_local_sgd_step(gps: GpsState, delta: ParamVector, worker: str) -> Tuple[GpsState, Message]:
    """The parameter server applies a worker delta and returns the model to that worker."""
    return gps_on_delta(gps, delta, worker)
