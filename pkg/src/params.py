"""Dense parameter vectors, their arithmetic, and versioned snapshots."""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray

from src.errors import DimensionMismatch, NonFiniteError, SnapshotError

ParamVector = NDArray[np.float64]

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def as_vector(values: ArrayLike) -> ParamVector:
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1:
        raise ValueError(f"parameter vectors are 1-D, got shape {vec.shape}")
    return vec


def check_finite(vec: ParamVector, what: str = "vector", step: Optional[int] = None) -> ParamVector:
    if not np.all(np.isfinite(vec)):
        raise NonFiniteError(what, step=step)
    return vec


def same_dim(x: ParamVector, y: ParamVector) -> None:
    if x.shape != y.shape:
        raise DimensionMismatch(x.shape[0], y.shape[0])


def axpy(a: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """Return ``a*x + y`` as a new vector."""
    if not np.isfinite(a):
        raise NonFiniteError("scalar")
    same_dim(x, y)
    return check_finite(a * x + y, "axpy result")


def convex_merge(local: ParamVector, global_: ParamVector, alpha: float) -> ParamVector:
    """Blend a pulled global model into a local one: ``(1-alpha)*local + alpha*global``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    same_dim(local, global_)
    return check_finite((1.0 - alpha) * local + alpha * global_, "merged model")


# ---------------------------------------------------------------------------
# Hashing and binary export
# ---------------------------------------------------------------------------

def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def encode_vector(vec: ParamVector) -> bytes:
    """Length-prefixed little-endian float64 encoding."""
    body = np.ascontiguousarray(vec, dtype="<f8").tobytes()
    return struct.pack("<Q", vec.shape[0]) + body


SNAPSHOT_MAGIC = b"HSNP"
# magic, config hash, seed; the length-prefixed vector follows
_SNAPSHOT_HEADER = struct.Struct("<4sQq")


@dataclass(frozen=True)
class SnapshotHeader:
    config_hash: str
    seed: int
    length: int


def export_snapshot(vec: ParamVector, config_hash: str = "", seed: int = 0) -> bytes:
    """Model file: provenance header followed by :func:`encode_vector`."""
    digest = int(config_hash, 16) if config_hash else 0
    return _SNAPSHOT_HEADER.pack(SNAPSHOT_MAGIC, digest, seed) + encode_vector(vec)


def read_snapshot_header(blob: bytes) -> SnapshotHeader:
    size = _SNAPSHOT_HEADER.size
    if len(blob) < size + 8:
        raise ValueError("snapshot blob shorter than its header")
    magic, digest, seed = _SNAPSHOT_HEADER.unpack_from(blob, 0)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError(f"not a snapshot file (magic {magic!r})")
    (length,) = struct.unpack_from("<Q", blob, size)
    return SnapshotHeader(config_hash=f"{digest:016x}" if digest else "", seed=seed, length=length)


def import_snapshot(blob: bytes) -> ParamVector:
    header = read_snapshot_header(blob)
    offset = _SNAPSHOT_HEADER.size + 8
    carried = (len(blob) - offset) // 8
    if len(blob) != offset + 8 * header.length:
        raise ValueError(f"snapshot declares {header.length} values but carries {carried}")
    return np.frombuffer(blob, dtype="<f8", offset=offset, count=header.length).astype(np.float64)


def model_hash(vec: ParamVector) -> str:
    return f"{fnv1a64(encode_vector(vec)):016x}"


# ---------------------------------------------------------------------------
# Versioned snapshots
# ---------------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class VersionId:
    actor: str
    counter: int

    def to_json(self) -> List:
        return [self.actor, self.counter]

    @classmethod
    def from_json(cls, raw: List) -> "VersionId":
        actor, counter = raw
        return cls(str(actor), int(counter))

    def __str__(self) -> str:
        return f"{self.actor}@{self.counter}"


class SnapshotStore:
    """Immutable model snapshots keyed by :class:`VersionId`.

    Only the latest version per actor is kept unless *retain_all* is set.
    In-flight messages hold their own reference to the frozen array they
    carry, so dropping a version never invalidates a message body.
    *on_drop* is called with every version that leaves the store.
    """

    def __init__(self, retain_all: bool = False, on_drop: Optional[Callable[[VersionId], None]] = None) -> None:
        self.retain_all = retain_all
        self._snapshots: Dict[VersionId, ParamVector] = {}
        self._latest: Dict[str, VersionId] = {}
        self._on_drop = on_drop
        self._lock = threading.Lock()

    def commit(self, version: VersionId, vec: ParamVector) -> ParamVector:
        frozen = np.array(vec, dtype=np.float64, copy=True)
        frozen.flags.writeable = False
        with self._lock:
            previous = self._latest.get(version.actor)
            if previous is not None and version.counter <= previous.counter:
                raise SnapshotError(f"version {version} does not advance past {previous}")
            self._snapshots[version] = frozen
            self._latest[version.actor] = version
            if previous is not None:
                self._maybe_drop(previous)
        return frozen

    def get(self, version: VersionId) -> ParamVector:
        try:
            return self._snapshots[version]
        except KeyError:
            raise SnapshotError(f"no snapshot for version {version}") from None

    def latest(self, actor: str) -> VersionId:
        try:
            return self._latest[actor]
        except KeyError:
            raise SnapshotError(f"actor {actor!r} has no snapshot") from None

    def __contains__(self, version: object) -> bool:
        return version in self._snapshots

    def __iter__(self) -> Iterator[VersionId]:
        return iter(sorted(self._snapshots))

    def __len__(self) -> int:
        return len(self._snapshots)

    def _maybe_drop(self, version: VersionId) -> None:
        if self.retain_all or self._latest.get(version.actor) == version:
            return
        if self._snapshots.pop(version, None) is not None and self._on_drop is not None:
            self._on_drop(version)
