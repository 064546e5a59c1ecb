from __future__ import annotations

from src.strategies.base import (
    GPS,
    STRATEGY_PRESETS,
    InnerConfig,
    Message,
    MessageKind,
    NesterovConfig,
    StrategyConfig,
    lps_actor,
    strategy_preset,
    worker_actor,
)
from src.strategies.baselines import (
    OuterState,
    async_local_sgd_step,
    diloco_round,
    sync_sgd_round,
    worker_gradient,
)
from src.strategies.halos import (
    GlobalModel,
    GpsState,
    LpsState,
    WorkerDelta,
    drain,
    enqueue,
    gps_on_delta,
    halos_on_global_model,
    halos_on_worker_delta,
)
from src.strategies.worker import RoundResult, WorkerState, worker_round

__all__ = [
    "GPS",
    "STRATEGY_PRESETS",
    "GlobalModel",
    "GpsState",
    "InnerConfig",
    "LpsState",
    "Message",
    "MessageKind",
    "NesterovConfig",
    "OuterState",
    "RoundResult",
    "StrategyConfig",
    "WorkerDelta",
    "WorkerState",
    "async_local_sgd_step",
    "diloco_round",
    "drain",
    "enqueue",
    "gps_on_delta",
    "halos_on_global_model",
    "halos_on_worker_delta",
    "lps_actor",
    "strategy_preset",
    "sync_sgd_round",
    "worker_actor",
    "worker_gradient",
    "worker_round",
]
