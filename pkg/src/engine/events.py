"""Trace records and their newline-delimited JSON form."""

from __future__ import annotations

import gzip
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import IO, Any, Dict, Iterator, List, Union

from src.errors import TraceError
from src.params import fnv1a64

TRACE_FORMAT = 1


class EventKind(str, Enum):
    WORKER_START = "WorkerStart"
    WORKER_FINISH = "WorkerFinish"
    MSG_SEND = "MsgSend"
    MSG_ARRIVE = "MsgArrive"
    LPS_APPLY_DELTA = "LpsApplyDelta"
    LPS_MERGE = "LpsMerge"
    GPS_APPLY = "GpsApply"
    BARRIER = "Barrier"


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


@dataclass(frozen=True)
class Event:
    seq: int
    t: float
    actor: str
    kind: EventKind
    payload: Dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> Dict[str, Any]:
        return {"seq": self.seq, "t": self.t, "actor": self.actor, "kind": self.kind.value, "payload": self.payload}

    @classmethod
    def from_json(cls, raw: Dict[str, Any]) -> "Event":
        try:
            return cls(
                seq=int(raw["seq"]),
                t=float(raw["t"]),
                actor=str(raw["actor"]),
                kind=EventKind(raw["kind"]),
                payload=dict(raw.get("payload") or {}),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise TraceError(f"malformed event record: {exc}") from None


@dataclass
class Trace:
    header: Dict[str, Any]
    events: List[Event] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[Event]:
        return iter(self.events)

    def of_kind(self, kind: EventKind) -> List[Event]:
        return [e for e in self.events if e.kind is kind]

    def lines(self) -> Iterator[str]:
        yield canonical_json({"type": "header", **self.header})
        for event in self.events:
            yield canonical_json(event.to_json())


def trace_hash(trace: Trace) -> str:
    data = "".join(line + "\n" for line in trace.lines()).encode("ascii")
    return f"{fnv1a64(data):016x}"


# ---------------------------------------------------------------------------
# File IO
# ---------------------------------------------------------------------------

def _open(path: Path, mode: str) -> IO[str]:
    if path.suffix == ".gz":
        return gzip.open(path, mode + "t", encoding="ascii")
    return open(path, mode, encoding="ascii")


def write_trace(trace: Trace, path: Union[str, Path]) -> Path:
    path = Path(path)
    with _open(path, "w") as fh:
        for line in trace.lines():
            fh.write(line + "\n")
    return path


def read_trace(path: Union[str, Path]) -> Trace:
    path = Path(path)
    with _open(path, "r") as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    if not records or records[0].get("type") != "header":
        raise TraceError(f"{path}: first record is not a trace header")
    header = {k: v for k, v in records[0].items() if k != "type"}
    if header.get("format") != TRACE_FORMAT:
        raise TraceError(f"{path}: unsupported trace format {header.get('format')!r}")
    return Trace(header=header, events=[Event.from_json(r) for r in records[1:]])
