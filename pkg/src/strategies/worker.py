from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

from src.errors import NonFiniteError
from src.optim import InnerOptState, LrSchedule, clip_gradient, inner_step, lr_at
from src.params import ParamVector, check_finite
from src.workloads.base import Shard, Workload


@dataclass(frozen=True)
class WorkerState:
    index: int
    actor: str
    speed: float
    # LPS for halos, GPS for async, None under a barrier
    server: Optional[str]
    inner: InnerOptState
    local_steps: int
    shard: Shard
    # inner steps completed so far; indexes both the schedule and the data stream
    steps_done: int = 0


@dataclass(frozen=True)
class RoundResult:
    delta: ParamVector
    steps: int
    inner: InnerOptState
    mean_loss: float


def worker_round(
    worker: WorkerState,
    start_model: ParamVector,
    schedule: LrSchedule,
    workload: Workload,
    max_norm: Optional[float] = None,
    steps: Optional[int] = None,
) -> RoundResult:
    """Run one round of inner steps from *start_model*; the worker state is untouched."""
    check_finite(start_model, "start model")
    steps = worker.local_steps if steps is None else steps
    inner = worker.inner.copy()
    model = start_model
    total_loss = 0.0
    for i in range(steps):
        global_step = worker.steps_done + i
        grad, loss = workload.grad(model, worker.shard, global_step)
        if not math.isfinite(loss):
            raise NonFiniteError("loss", step=global_step)
        check_finite(grad, "gradient", step=global_step)
        if max_norm is not None:
            grad = clip_gradient(grad, max_norm)
        model = inner_step(inner, model, grad, lr_at(schedule, global_step))
        total_loss += loss
    return RoundResult(
        delta=model - start_model,
        steps=steps,
        inner=inner,
        mean_loss=total_loss / steps if steps else 0.0,
    )
