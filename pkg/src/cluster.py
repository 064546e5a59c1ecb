"""Cluster topology and the timing formulas every trace is built from."""

from __future__ import annotations

import itertools
import logging
import math
from typing import Dict, List, Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.config import (
    BYTES_PER_PARAM,
    MODEL_PARAMS,
    DEFAULT_BANDWIDTH_GBPS,
    DEFAULT_REGIONS,
    DEFAULT_WORKER_SPEEDS,
    HETEROGENEOUS_GROUP_SIZE,
    HETEROGENEOUS_WORKER_SPEEDS,
    PROFILED_STEP_S,
)
from src.errors import UnschedulableError

logger = logging.getLogger(__name__)

# exhaustive ring search up to this many distinct regions, greedy beyond
_EXHAUSTIVE_RING_REGIONS = 8


class WorkerSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    region: str
    speed: float = Field(ge=1.0, le=10.0)


class LpsSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    region: str
    members: List[int] = Field(min_length=1)


class ClusterSpec(BaseModel):
    """Regions, links, workers and server placement.

    Workers are identified by their index in ``workers``; LPSs by their index
    in ``lps``. ``model`` fills in ``profiled_step_s`` and ``message_bytes``
    when those are omitted.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    regions: List[str] = Field(min_length=1)
    bandwidth_gbps: List[List[float]]
    intra_gbps: Optional[List[float]] = None
    latency_s: Optional[List[List[float]]] = None
    workers: List[WorkerSpec]
    lps: List[LpsSpec]
    gps_region: str
    model: Optional[str] = None
    profiled_step_s: float = Field(gt=0.0)
    message_bytes: int = Field(gt=0)

    @model_validator(mode="before")
    @classmethod
    def _fill_from_model(cls, data):
        if not isinstance(data, dict) or data.get("model") is None:
            return data
        name = data["model"]
        if name not in PROFILED_STEP_S:
            raise ValueError(f"unknown model {name!r}; expected one of {sorted(PROFILED_STEP_S)}")
        data = dict(data)
        data.setdefault("profiled_step_s", PROFILED_STEP_S[name])
        data.setdefault("message_bytes", MODEL_PARAMS[name] * BYTES_PER_PARAM)
        return data

    @model_validator(mode="after")
    def _check_topology(self) -> "ClusterSpec":
        n = len(self.regions)
        if len(set(self.regions)) != n:
            raise ValueError("region ids must be unique")
        bw = self.bandwidth_gbps
        if len(bw) != n or any(len(row) != n for row in bw):
            raise ValueError(f"bandwidth_gbps must be {n}x{n}")
        for i in range(n):
            for j in range(n):
                if bw[i][j] <= 0:
                    raise ValueError(f"bandwidth_gbps[{i}][{j}] must be positive")
                if bw[i][j] != bw[j][i]:
                    raise ValueError(f"bandwidth_gbps is not symmetric at ({i}, {j})")
        if self.intra_gbps is not None:
            if len(self.intra_gbps) != n:
                raise ValueError(f"intra_gbps must have {n} entries")
            for i, value in enumerate(self.intra_gbps):
                if value != bw[i][i]:
                    raise ValueError(f"intra_gbps[{i}] disagrees with the bandwidth diagonal")
        if self.latency_s is not None:
            lat = self.latency_s
            if len(lat) != n or any(len(row) != n for row in lat):
                raise ValueError(f"latency_s must be {n}x{n}")
            if any(value < 0 for row in lat for value in row):
                raise ValueError("latency_s entries must be non-negative")

        known = set(self.regions)
        if self.gps_region not in known:
            raise ValueError(f"gps_region {self.gps_region!r} is not a known region")
        for i, worker in enumerate(self.workers):
            if worker.region not in known:
                raise ValueError(f"workers[{i}].region {worker.region!r} is not a known region")
        owners: Dict[int, int] = {}
        for j, server in enumerate(self.lps):
            if server.region not in known:
                raise ValueError(f"lps[{j}].region {server.region!r} is not a known region")
            for member in server.members:
                if not 0 <= member < len(self.workers):
                    raise ValueError(f"lps[{j}] lists unknown worker {member}")
                if member in owners:
                    raise ValueError(f"worker {member} belongs to lps {owners[member]} and lps {j}")
                owners[member] = j
        orphans = [i for i in range(len(self.workers)) if i not in owners]
        if orphans:
            raise ValueError(f"workers {orphans} are not assigned to any lps")
        return self

    # ----- derived views -----

    @property
    def fastest_speed(self) -> float:
        if not self.workers:
            raise UnschedulableError("cluster has no workers")
        return max(w.speed for w in self.workers)

    def region_index(self, region: str) -> int:
        try:
            return self.regions.index(region)
        except ValueError:
            raise UnschedulableError(f"unknown region {region!r}") from None

    def bandwidth(self, src: str, dst: str) -> float:
        return self.bandwidth_gbps[self.region_index(src)][self.region_index(dst)]

    def latency(self, src: str, dst: str) -> float:
        if self.latency_s is None:
            self.region_index(src)
            self.region_index(dst)
            return 0.0
        return self.latency_s[self.region_index(src)][self.region_index(dst)]

    def lps_of(self, worker: int) -> int:
        for j, server in enumerate(self.lps):
            if worker in server.members:
                return j
        raise UnschedulableError(f"worker {worker} has no lps")

    def worker_regions(self) -> List[str]:
        return [w.region for w in self.workers]


# ---------------------------------------------------------------------------
# Timing formulas
# ---------------------------------------------------------------------------

def p2p_time(src: str, dst: str, nbytes: int, spec: ClusterSpec) -> float:
    """Point-to-point transfer: latency plus bytes over link bandwidth."""
    if nbytes < 0:
        raise ValueError(f"bytes must be non-negative, got {nbytes}")
    return spec.latency(src, dst) + 8.0 * nbytes / (spec.bandwidth(src, dst) * 1e9)


def _ring_bottleneck(order: Sequence[str], counts: Dict[str, int], spec: ClusterSpec) -> float:
    links = [spec.bandwidth(a, b) for a, b in zip(order, list(order[1:]) + [order[0]])]
    links.extend(spec.bandwidth(r, r) for r in order if counts[r] >= 2)
    return min(links)


def _greedy_ring(regions: List[str], counts: Dict[str, int], spec: ClusterSpec) -> float:
    best = 0.0
    for start in regions:
        order = [start]
        remaining = [r for r in regions if r != start]
        while remaining:
            nxt = max(remaining, key=lambda r: spec.bandwidth(order[-1], r))
            order.append(nxt)
            remaining.remove(nxt)
        best = max(best, _ring_bottleneck(order, counts, spec))
    return best


def best_ring_bandwidth(participants: Sequence[str], spec: ClusterSpec) -> float:
    """Slowest-link bandwidth of the best ring over *participants* (region per member).

    Same-region members sit next to each other, so only region orderings are
    searched; the first region is fixed since rotations are equivalent.
    """
    counts: Dict[str, int] = {}
    for region in participants:
        spec.region_index(region)
        counts[region] = counts.get(region, 0) + 1
    regions = list(counts)
    if len(regions) == 1:
        return spec.bandwidth(regions[0], regions[0])
    if len(regions) > _EXHAUSTIVE_RING_REGIONS:
        return _greedy_ring(regions, counts, spec)
    head, rest = regions[0], regions[1:]
    return max(
        _ring_bottleneck([head, *perm], counts, spec)
        for perm in itertools.permutations(rest)
    )


def ring_allreduce_time(participants: Sequence[str], nbytes: int, spec: ClusterSpec) -> float:
    n = len(participants)
    if n == 0:
        raise ValueError("ring all-reduce needs at least one participant")
    if n == 1:
        return 0.0
    bandwidth = best_ring_bandwidth(participants, spec)
    return 2.0 * (n - 1) * 8.0 * nbytes / (n * bandwidth * 1e9)


def compute_time(steps: int, speed: float, spec: ClusterSpec) -> float:
    if steps < 1:
        raise ValueError(f"local steps must be >= 1, got {steps}")
    if speed <= 0:
        raise ValueError(f"speed must be positive, got {speed}")
    return steps * spec.profiled_step_s * (spec.fastest_speed / speed)


def dyn_local_steps(h_max: int, speed: float, s_fastest: float) -> int:
    """Local steps scaled by relative speed, rounded half up, at least one."""
    if h_max < 1:
        raise ValueError(f"H_max must be >= 1, got {h_max}")
    return max(1, math.floor(h_max * speed / s_fastest + 0.5))


# ---------------------------------------------------------------------------
# LPS grouping
# ---------------------------------------------------------------------------

def check_grouping(spec: ClusterSpec) -> bool:
    """True when every LPS serves the same number of workers; warns otherwise."""
    sizes = [len(server.members) for server in spec.lps]
    consistent = len(set(sizes)) <= 1
    if not consistent:
        logger.warning(
            "inconsistent LPS grouping (members per LPS: %s); asynchronous training may diverge",
            sizes,
        )
    return consistent


def consistent_grouping(spec: ClusterSpec, per_lps: int) -> ClusterSpec:
    """Regroup each region's workers into LPSs of *per_lps* members."""
    if per_lps < 1:
        raise ValueError(f"per_lps must be >= 1, got {per_lps}")
    groups: List[dict] = []
    for region in spec.regions:
        members = [i for i, w in enumerate(spec.workers) if w.region == region]
        for start in range(0, len(members), per_lps):
            groups.append({"region": region, "members": members[start:start + per_lps]})
    data = spec.model_dump()
    data["lps"] = groups
    regrouped = ClusterSpec.model_validate(data)
    check_grouping(regrouped)
    return regrouped


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

def _regional_cluster(speeds: Sequence[Sequence[float]], model: str, bandwidth_scale: float) -> ClusterSpec:
    """One LPS per region over *speeds*, GPS in the first region."""
    workers = []
    lps = []
    for r, region in enumerate(DEFAULT_REGIONS):
        members = []
        for speed in speeds[r]:
            members.append(len(workers))
            workers.append({"region": region, "speed": speed})
        lps.append({"region": region, "members": members})
    bandwidth = [[value * bandwidth_scale for value in row] for row in DEFAULT_BANDWIDTH_GBPS]
    return ClusterSpec.model_validate(
        {
            "regions": list(DEFAULT_REGIONS),
            "bandwidth_gbps": bandwidth,
            "workers": workers,
            "lps": lps,
            "gps_region": DEFAULT_REGIONS[0],
            "model": model,
        }
    )


def paper_default(model: str = "pythia-70m", bandwidth_scale: float = 1.0) -> ClusterSpec:
    """Four regions of four workers, GPS in the first region, one LPS per region."""
    return _regional_cluster(DEFAULT_WORKER_SPEEDS, model, bandwidth_scale)


def paper_heterogeneous(model: str = "pythia-70m", consistent: bool = True) -> ClusterSpec:
    """2, 4, 4 and 6 workers per region.

    With *consistent* the regions are split into LPSs of two workers each
    (1, 2, 2 and 3 LPSs); otherwise every region keeps a single LPS.
    """
    spec = _regional_cluster(HETEROGENEOUS_WORKER_SPEEDS, model, 1.0)
    return consistent_grouping(spec, HETEROGENEOUS_GROUP_SIZE) if consistent else spec


CLUSTER_PRESETS = {
    "paper-default": lambda: paper_default(),
    "paper-2x-bandwidth": lambda: paper_default(bandwidth_scale=2.0),
    "pythia-160m": lambda: paper_default(model="pythia-160m"),
    "pythia-410m": lambda: paper_default(model="pythia-410m"),
    "paper-heterogeneous": lambda: paper_heterogeneous(),
    "paper-heterogeneous-naive": lambda: paper_heterogeneous(consistent=False),
}


def cluster_preset(name: str) -> ClusterSpec:
    try:
        return CLUSTER_PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown cluster preset {name!r}; expected one of {sorted(CLUSTER_PRESETS)}") from None
