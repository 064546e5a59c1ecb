"""Update rules shared by every server and worker.

Servers consume *descent* pseudo-gradients ``g = old - new``. Worker and LPS
messages carry displacements (``new - old``), so they are negated when a
server ingests them; the Nesterov recursions below then read exactly like
their gradient-form definitions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from src.config import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    LR_FLOOR_FRACTION,
    WEIGHT_DECAY,
    InnerKind,
)
from src.params import ParamVector, check_finite, same_dim

# relative slack so that clipping an already clipped vector is a no-op
_CLIP_SLACK = 1e-12


def pseudo_gradient(old_model: ParamVector, new_model: ParamVector) -> ParamVector:
    same_dim(old_model, new_model)
    return old_model - new_model


def from_displacement(delta: ParamVector) -> ParamVector:
    """Descent pseudo-gradient for a displacement message (``-delta``)."""
    return -delta


# ---------------------------------------------------------------------------
# Server optimizer: (delayed) Nesterov momentum
# ---------------------------------------------------------------------------

@dataclass
class NesterovState:
    momentum: ParamVector
    accumulator: ParamVector
    lr: float
    beta: float
    delay: int = 1
    step_count: int = 0
    # False: hold the model still between momentum refreshes
    interpolate: bool = True

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"server lr must be positive, got {self.lr}")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.beta}")
        if self.delay < 1:
            raise ValueError(f"momentum delay must be >= 1, got {self.delay}")
        same_dim(self.momentum, self.accumulator)

    @classmethod
    def create(
        cls,
        dim: int,
        lr_per_step: float,
        beta: float,
        delay: int = 1,
        interpolate: bool = True,
    ) -> "NesterovState":
        """*lr_per_step* is the η/d rate; the state keeps η itself."""
        return cls(
            momentum=np.zeros(dim),
            accumulator=np.zeros(dim),
            lr=lr_per_step * delay,
            beta=beta,
            delay=delay,
            interpolate=interpolate,
        )

    def copy(self) -> "NesterovState":
        return NesterovState(
            momentum=self.momentum.copy(),
            accumulator=self.accumulator.copy(),
            lr=self.lr,
            beta=self.beta,
            delay=self.delay,
            step_count=self.step_count,
            interpolate=self.interpolate,
        )


def nesterov_apply(state: NesterovState, model: ParamVector, g: ParamVector) -> ParamVector:
    """Apply one server step in place on *state*; return the new model."""
    check_finite(g, "pseudo-gradient")
    same_dim(model, g)
    same_dim(state.momentum, g)
    eta, beta, d = state.lr, state.beta, state.delay
    state.step_count += 1

    if d == 1:
        state.momentum = beta * state.momentum + g
        return check_finite(model - eta * ((1.0 - beta) * g + beta * state.momentum), "server model")

    state.accumulator = state.accumulator + g
    if state.step_count % d != 0:
        if state.interpolate:
            model = model - (eta / d) * (1.0 - beta) * g
        return check_finite(model, "server model")

    averaged = state.accumulator / d
    state.momentum = beta * state.momentum + averaged
    if state.interpolate:
        model = model - (eta / d) * (1.0 - beta) * g - eta * beta * state.momentum
    else:
        model = model - eta * ((1.0 - beta) * averaged + beta * state.momentum)
    state.accumulator = np.zeros_like(state.accumulator)
    return check_finite(model, "server model")


# ---------------------------------------------------------------------------
# Worker (inner) optimizers
# ---------------------------------------------------------------------------

@dataclass
class InnerOptState:
    kind: InnerKind
    exp_avg: Optional[ParamVector] = None
    exp_avg_sq: Optional[ParamVector] = None
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    weight_decay: float = WEIGHT_DECAY
    step: int = 0

    @classmethod
    def create(
        cls,
        kind: InnerKind,
        dim: int,
        beta1: float = ADAM_BETA1,
        beta2: float = ADAM_BETA2,
        eps: float = ADAM_EPS,
        weight_decay: float = WEIGHT_DECAY,
    ) -> "InnerOptState":
        if kind is InnerKind.PLAIN_SGD:
            return cls(kind=kind, weight_decay=0.0)
        return cls(
            kind=kind,
            exp_avg=np.zeros(dim),
            exp_avg_sq=np.zeros(dim),
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            weight_decay=weight_decay,
        )

    def copy(self) -> "InnerOptState":
        return InnerOptState(
            kind=self.kind,
            exp_avg=None if self.exp_avg is None else self.exp_avg.copy(),
            exp_avg_sq=None if self.exp_avg_sq is None else self.exp_avg_sq.copy(),
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            weight_decay=self.weight_decay,
            step=self.step,
        )


def inner_step(state: InnerOptState, model: ParamVector, grad: ParamVector, lr: float) -> ParamVector:
    """One worker step. AdamW follows the decoupled-decay, bias-corrected form.

    ``lr == 0`` is accepted because warmup starts from exactly zero.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    check_finite(grad, "gradient")
    same_dim(model, grad)
    state.step += 1

    if state.kind is InnerKind.PLAIN_SGD:
        return check_finite(model - lr * grad, "worker model")

    b1, b2 = state.beta1, state.beta2
    model = model * (1.0 - lr * state.weight_decay)
    state.exp_avg = b1 * state.exp_avg + (1.0 - b1) * grad
    state.exp_avg_sq = b2 * state.exp_avg_sq + (1.0 - b2) * grad * grad
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    denom = np.sqrt(state.exp_avg_sq) / math.sqrt(bias2) + state.eps
    return check_finite(model - (lr / bias1) * state.exp_avg / denom, "worker model")


def clip_gradient(g: ParamVector, max_norm: float) -> ParamVector:
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norm = float(np.linalg.norm(g))
    if norm <= max_norm * (1.0 + _CLIP_SLACK):
        return g
    return g * (max_norm / norm)


# ---------------------------------------------------------------------------
# Learning-rate schedule: linear warmup, cosine decay to a floor
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LrSchedule:
    peak_lr: float
    total_steps: int
    warmup_steps: int = 0
    floor_fraction: float = LR_FLOOR_FRACTION

    def __post_init__(self) -> None:
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("warmup_steps must lie in [0, total_steps]")
        if not 0.0 <= self.floor_fraction <= 1.0:
            raise ValueError("floor_fraction must lie in [0, 1]")

    @classmethod
    def constant(cls, lr: float, total_steps: int = 1) -> "LrSchedule":
        return cls(peak_lr=lr, total_steps=total_steps, warmup_steps=0, floor_fraction=1.0)


def lr_at(schedule: LrSchedule, t: int) -> float:
    total, warmup = schedule.total_steps, schedule.warmup_steps
    if t < 0 or t > total:
        raise ValueError(f"step {t} outside schedule [0, {total}]")
    peak, floor = schedule.peak_lr, schedule.floor_fraction
    if warmup > 0 and t <= warmup:
        return peak * t / warmup
    if total == warmup:
        return peak * floor
    progress = (t - warmup) / (total - warmup)
    return peak * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress)))
