"""Per-worker runtime breakdown and empirical staleness, measured on traces."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from src.engine.events import EventKind, Trace
from src.errors import SnapshotError
from src.params import SnapshotStore, VersionId


@dataclass(frozen=True)
class Breakdown:
    compute_fraction: float
    comm_fraction: float
    stall_fraction: float

    def to_json(self) -> Dict[str, float]:
        return asdict(self)


def runtime_breakdown(trace: Trace) -> Dict[str, Breakdown]:
    """Split each worker's timeline into compute, transfer and barrier stall.

    The window is ``[0, last WorkerStart]`` so only whole cycles count; a
    worker with a single round is measured up to its finish. Waiting between a
    WorkerFinish and the round's Barrier is stall; all other non-compute time
    is communication.
    """
    starts: Dict[str, Dict[int, float]] = defaultdict(dict)
    finishes: Dict[str, Dict[int, float]] = defaultdict(dict)
    barriers: Dict[int, float] = {}
    for event in trace:
        if event.kind is EventKind.WORKER_START:
            starts[event.actor][event.payload["round"]] = event.t
        elif event.kind is EventKind.WORKER_FINISH:
            finishes[event.actor][event.payload["round"]] = event.t
        elif event.kind is EventKind.BARRIER:
            barriers[event.payload["round"]] = event.t

    result: Dict[str, Breakdown] = {}
    for worker in trace.header.get("workers", sorted(starts)):
        rounds = sorted(starts.get(worker, {}))
        if len(rounds) >= 2:
            end = starts[worker][rounds[-1]]
            counted = rounds[:-1]
        else:
            counted = [r for r in rounds if r in finishes[worker]]
            end = finishes[worker][counted[0]] if counted else 0.0
        if end <= 0.0:
            result[worker] = Breakdown(1.0, 0.0, 0.0)
            continue
        compute = sum(finishes[worker][r] - starts[worker][r] for r in counted)
        stall = sum(barriers[r] - finishes[worker][r] for r in counted if r in barriers)
        comm = max(0.0, end - compute - stall)
        result[worker] = Breakdown(compute / end, comm / end, stall / end)
    return result


def mean_breakdown(breakdown: Dict[str, Breakdown]) -> Breakdown:
    if not breakdown:
        return Breakdown(0.0, 0.0, 0.0)
    rows = list(breakdown.values())
    return Breakdown(
        float(np.mean([b.compute_fraction for b in rows])),
        float(np.mean([b.comm_fraction for b in rows])),
        float(np.mean([b.stall_fraction for b in rows])),
    )


@dataclass
class StalenessReport:
    d_g_hat: float = 0.0
    d_l_hat: float = 0.0
    # (event seq, drift) per applied update
    global_series: List[Tuple[int, float]] = field(default_factory=list)
    local_series: List[Tuple[int, float]] = field(default_factory=list)

    def to_json(self) -> Dict[str, object]:
        return {
            "d_g_hat": self.d_g_hat,
            "d_l_hat": self.d_l_hat,
            "global_series": [list(p) for p in self.global_series],
            "local_series": [list(p) for p in self.local_series],
        }


def measure_staleness(trace: Trace, snapshots: SnapshotStore) -> StalenessReport:
    """Drift between the model an update was computed from and the model it lands on."""
    if not snapshots.retain_all:
        raise SnapshotError("staleness needs a replay that retained every snapshot")
    report = StalenessReport()
    for event in trace:
        if event.kind is EventKind.LPS_APPLY_DELTA:
            series, ref = report.local_series, "start_version"
        elif event.kind is EventKind.GPS_APPLY and "sync_version" in event.payload:
            series, ref = report.global_series, "sync_version"
        else:
            continue
        base = VersionId.from_json(event.payload["base_version"])
        origin = VersionId.from_json(event.payload[ref])
        if base not in snapshots or origin not in snapshots:
            # replay stopped before this event
            break
        drift = float(np.linalg.norm(snapshots.get(base) - snapshots.get(origin)))
        series.append((event.seq, drift))
    report.d_g_hat = max((d for _, d in report.global_series), default=0.0)
    report.d_l_hat = max((d for _, d in report.local_series), default=0.0)
    return report
