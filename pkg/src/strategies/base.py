"""Strategy configuration, presets and the messages actors exchange."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.config import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    CLIP_NORM,
    LR_FLOOR_FRACTION,
    WARMUP_FRACTION,
    WEIGHT_DECAY,
    InnerKind,
    StrategyKind,
)
from src.optim import InnerOptState, NesterovState
from src.params import ParamVector, VersionId

GPS = "gps"


def lps_actor(index: int) -> str:
    return f"lps{index}"


def worker_actor(index: int) -> str:
    return f"w{index}"


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

class NesterovConfig(BaseModel):
    """Server optimizer. ``lr`` is the per-step rate η/d."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    lr: float = Field(gt=0.0)
    beta: float = Field(ge=0.0, lt=1.0)
    delay: int = Field(default=1, ge=1)
    interpolate: bool = True

    def make_state(self, dim: int, beta_override: Optional[float] = None) -> NesterovState:
        beta = self.beta if beta_override is None else beta_override
        return NesterovState.create(dim, self.lr, beta, self.delay, self.interpolate)


class InnerConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: InnerKind = InnerKind.ADAMW
    lr: float = Field(default=0.01, gt=0.0)
    warmup_fraction: float = Field(default=WARMUP_FRACTION, ge=0.0, le=1.0)
    floor_fraction: float = Field(default=LR_FLOOR_FRACTION, ge=0.0, le=1.0)
    # None disables clipping
    max_norm: Optional[float] = Field(default=CLIP_NORM, gt=0.0)
    beta1: float = Field(default=ADAM_BETA1, ge=0.0, lt=1.0)
    beta2: float = Field(default=ADAM_BETA2, ge=0.0, lt=1.0)
    eps: float = Field(default=ADAM_EPS, gt=0.0)
    weight_decay: float = Field(default=WEIGHT_DECAY, ge=0.0)

    def make_state(self, dim: int) -> InnerOptState:
        return InnerOptState.create(
            self.kind, dim, self.beta1, self.beta2, self.eps, self.weight_decay
        )


class StrategyConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: StrategyKind
    local_steps: int = Field(default=1, ge=1)
    dyn_updates: bool = False
    inner: InnerConfig = Field(default_factory=InnerConfig)
    # GPS for halos, outer optimizer for diloco, parameter server for async
    server: Optional[NesterovConfig] = None
    # LPS optimizer (halos only)
    local_server: Optional[NesterovConfig] = None
    accumulation: int = Field(default=1, ge=1)
    merge_alpha: float = Field(default=1.0, ge=0.0, le=1.0)
    global_momentum_off: bool = False
    strict_single_inflight: bool = False

    @model_validator(mode="after")
    def _check_kind(self) -> "StrategyConfig":
        kind = self.kind
        if kind is StrategyKind.SYNC_SGD:
            if self.local_steps != 1:
                raise ValueError("sync_sgd takes exactly one local step per round")
            if self.dyn_updates:
                raise ValueError("sync_sgd does not support dynamic local steps")
        elif self.server is None:
            raise ValueError(f"{kind.value} needs a 'server' optimizer")
        if kind is StrategyKind.HALOS and self.local_server is None:
            raise ValueError("halos needs a 'local_server' optimizer")
        if kind is StrategyKind.DILOCO and self.dyn_updates:
            raise ValueError("diloco with dynamic local steps is 'diloco_dynupd'")
        if kind is StrategyKind.DILOCO_DYNUPD and not self.dyn_updates:
            raise ValueError("diloco_dynupd requires dyn_updates")
        return self

    @property
    def barrier(self) -> bool:
        return self.kind in (StrategyKind.SYNC_SGD, StrategyKind.DILOCO, StrategyKind.DILOCO_DYNUPD)

    def global_beta(self) -> Optional[float]:
        return 0.0 if self.global_momentum_off else None


# ---------------------------------------------------------------------------
# Presets (best hyperparameters from the sweep tables)
# ---------------------------------------------------------------------------

_HALOS_DEFAULT: Dict[str, Any] = {
    "kind": "halos",
    "local_steps": 8,
    "dyn_updates": True,
    "server": {"lr": 0.15, "beta": 0.5, "delay": 2},
    "local_server": {"lr": 0.2, "beta": 0.9, "delay": 16},
    "accumulation": 32,
    "merge_alpha": 0.25,
}

STRATEGY_PRESETS: Dict[str, Dict[str, Any]] = {
    "halos-paper": _HALOS_DEFAULT,
    # ablation ladder: momentum at both tiers without merging, then merging
    "halos-momentum-only": {**_HALOS_DEFAULT, "accumulation": 4, "merge_alpha": 1.0},
    "halos-merge": {**_HALOS_DEFAULT, "accumulation": 4},
    # two workers per LPS, so a shorter window and LPS momentum delay
    "halos-consistent-grouping": {
        **_HALOS_DEFAULT,
        "accumulation": 8,
        "local_server": {"lr": 0.2, "beta": 0.9, "delay": 4},
    },
    "async-paper": {
        "kind": "async_local_sgd",
        "local_steps": 32,
        "dyn_updates": True,
        "server": {"lr": 0.05, "beta": 0.9, "delay": 32},
    },
    "diloco-paper": {
        "kind": "diloco",
        "local_steps": 32,
        "server": {"lr": 0.7, "beta": 0.9, "delay": 1},
    },
    "diloco-dynupd-paper": {
        "kind": "diloco_dynupd",
        "local_steps": 32,
        "dyn_updates": True,
        "server": {"lr": 0.7, "beta": 0.9, "delay": 1},
    },
    "sync-paper": {"kind": "sync_sgd", "local_steps": 1},
}


def strategy_preset(name: str) -> Dict[str, Any]:
    try:
        return copy.deepcopy(STRATEGY_PRESETS[name])
    except KeyError:
        raise ValueError(f"unknown strategy preset {name!r}; expected one of {sorted(STRATEGY_PRESETS)}") from None


# ---------------------------------------------------------------------------
# Messages
# ---------------------------------------------------------------------------

class MessageKind(str, Enum):
    WORKER_DELTA = "worker_delta"
    LOCAL_MODEL = "local_model"
    LPS_DELTA = "lps_delta"
    GLOBAL_MODEL = "global_model"


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    src: str
    dst: str
    body: ParamVector
    # model version carried (model messages) or produced from (delta messages)
    version: Optional[VersionId] = None
