from __future__ import annotations

from src.engine._worker import WorkerPool
from src.engine.events import (
    Event,
    EventKind,
    Trace,
    canonical_json,
    read_trace,
    trace_hash,
    write_trace,
)
from src.engine.generate import StopRule, generate_trace
from src.engine.metrics import (
    Breakdown,
    StalenessReport,
    mean_breakdown,
    measure_staleness,
    runtime_breakdown,
)
from src.engine.replay import ReplayOptions, ReplayResult, inner_schedule, replay

__all__ = [
    "Breakdown",
    "Event",
    "EventKind",
    "ReplayOptions",
    "ReplayResult",
    "StalenessReport",
    "StopRule",
    "Trace",
    "WorkerPool",
    "canonical_json",
    "generate_trace",
    "inner_schedule",
    "mean_breakdown",
    "measure_staleness",
    "read_trace",
    "replay",
    "runtime_breakdown",
    "trace_hash",
    "write_trace",
]
