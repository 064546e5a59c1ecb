from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from numpy.typing import NDArray

from src.config import ShardMode
from src.params import ParamVector


def worker_rng(seed: int, worker: int, step: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, worker, step); order-independent."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, worker, step])))


@dataclass(frozen=True)
class Shard:
    """A worker's slice of the data: source components or sample indices."""

    worker: int
    indices: NDArray[np.int64]
    seed: int

    def __len__(self) -> int:
        return int(self.indices.shape[0])


class Workload(ABC):
    """Contract every desk-scale objective must satisfy."""

    dim: int
    # samples consumed by one inner step, for token accounting
    samples_per_step: int = 1

    @abstractmethod
    def init_params(self) -> ParamVector: ...

    @abstractmethod
    def shard(self, num_workers: int, mode: ShardMode, seed: int) -> List[Shard]: ...

    @abstractmethod
    def grad(self, theta: ParamVector, shard: Shard, step: int) -> Tuple[ParamVector, float]:
        """Stochastic gradient and loss for the *step*-th draw of *shard*."""

    @abstractmethod
    def full_loss(self, theta: ParamVector) -> float: ...
