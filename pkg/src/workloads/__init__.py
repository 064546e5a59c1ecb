from __future__ import annotations

from typing import Annotated, Union

from pydantic import Field

from src.workloads.base import Shard, Workload, worker_rng
from src.workloads.char_lm import CharLmSpec, CharLmTask, load_corpus, synthetic_corpus
from src.workloads.quadratic import QuadraticSpec, QuadraticTask

WorkloadSpec = Annotated[Union[QuadraticSpec, CharLmSpec], Field(discriminator="kind")]


def build_workload(spec: Union[QuadraticSpec, CharLmSpec]) -> Workload:
    return spec.build()


__all__ = [
    "CharLmSpec",
    "CharLmTask",
    "QuadraticSpec",
    "QuadraticTask",
    "Shard",
    "Workload",
    "WorkloadSpec",
    "build_workload",
    "load_corpus",
    "synthetic_corpus",
    "worker_rng",
]
