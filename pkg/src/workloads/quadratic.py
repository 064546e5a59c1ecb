"""Sum-of-quadratics objective with controllable heterogeneity and noise.

Source ``j`` has optimum ``c_j = theta_star + zeta * u_j`` and loss
``F_j(x) = 0.5 (x - c_j)^T A (x - c_j)``; the global objective is the mean
over sources.
"""

from __future__ import annotations

from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.config import ShardMode
from src.params import ParamVector, as_vector, check_finite
from src.workloads.base import Shard, Workload, worker_rng


class QuadraticSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["quadratic"] = "quadratic"
    dim: int = Field(default=32, ge=1)
    num_sources: int = Field(default=16, ge=1)
    eig_min: float = Field(default=0.05, gt=0.0)
    eig_max: float = Field(default=1.0, gt=0.0)
    full_matrix: bool = False
    zeta: float = Field(default=0.0, ge=0.0)
    noise: float = Field(default=0.0, ge=0.0)
    # 0 places the shared optimum at the origin
    optimum_scale: float = Field(default=1.0, ge=0.0)
    init_scale: float = Field(default=1.0, ge=0.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_spectrum(self) -> "QuadraticSpec":
        if self.eig_min > self.eig_max:
            raise ValueError("eig_min must not exceed eig_max")
        return self

    def build(self) -> "QuadraticTask":
        rng = np.random.default_rng(self.seed)
        eigs = np.sort(rng.uniform(self.eig_min, self.eig_max, self.dim))
        if self.full_matrix:
            q, _ = np.linalg.qr(rng.standard_normal((self.dim, self.dim)))
            hessian = (q * eigs) @ q.T
            hessian = 0.5 * (hessian + hessian.T)
        else:
            hessian = eigs
        theta_star = self.optimum_scale * rng.standard_normal(self.dim)
        offsets = rng.standard_normal((self.num_sources, self.dim))
        theta0 = theta_star + self.init_scale * rng.standard_normal(self.dim)
        return QuadraticTask(
            hessian=hessian,
            theta_star=theta_star,
            offsets=offsets,
            zeta=self.zeta,
            noise=self.noise,
            seed=self.seed,
            theta0=theta0,
        )


class QuadraticTask(Workload):
    def __init__(
        self,
        hessian: np.ndarray,
        theta_star: ParamVector,
        offsets: np.ndarray,
        zeta: float = 0.0,
        noise: float = 0.0,
        seed: int = 0,
        theta0: Optional[ParamVector] = None,
    ) -> None:
        self.hessian = np.asarray(hessian, dtype=np.float64)
        self.theta_star = as_vector(theta_star)
        self.dim = self.theta_star.shape[0]
        if self.hessian.ndim == 1:
            if self.hessian.shape != (self.dim,) or np.any(self.hessian <= 0):
                raise ValueError("diagonal Hessian must be positive with one entry per coordinate")
        elif self.hessian.shape != (self.dim, self.dim):
            raise ValueError(f"Hessian must be {self.dim}x{self.dim}")
        self.offsets = np.atleast_2d(np.asarray(offsets, dtype=np.float64))
        if self.offsets.shape[1] != self.dim:
            raise ValueError("offsets must have one row per source and one column per coordinate")
        if zeta < 0 or noise < 0:
            raise ValueError("zeta and noise must be non-negative")
        self.zeta = zeta
        self.noise = noise
        self.seed = seed
        self.centers = self.theta_star + zeta * self.offsets
        self._theta0 = self.theta_star.copy() if theta0 is None else as_vector(theta0)

    @property
    def num_sources(self) -> int:
        return self.offsets.shape[0]

    def _apply(self, vec: np.ndarray) -> np.ndarray:
        if self.hessian.ndim == 1:
            return self.hessian * vec
        return vec @ self.hessian.T

    def init_params(self) -> ParamVector:
        return self._theta0.copy()

    def optimum(self) -> ParamVector:
        return self.theta_star + self.zeta * self.offsets.mean(axis=0)

    def shard(self, num_workers: int, mode: ShardMode, seed: int) -> List[Shard]:
        """iid shards all see every source; non_iid deals sources out by index."""
        if num_workers < 1:
            raise ValueError("need at least one worker")
        sources = self.num_sources
        if ShardMode(mode) is ShardMode.NON_IID:
            if num_workers > sources:
                raise ValueError(f"more workers ({num_workers}) than sources ({sources})")
            return [
                Shard(w, np.arange(w, sources, num_workers, dtype=np.int64), seed)
                for w in range(num_workers)
            ]
        return [Shard(w, np.arange(sources, dtype=np.int64), seed) for w in range(num_workers)]

    def grad(self, theta: ParamVector, shard: Shard, step: int) -> Tuple[ParamVector, float]:
        check_finite(theta, "parameters", step=step)
        rng = worker_rng(shard.seed, shard.worker, step)
        if len(shard) == 1:
            j = int(shard.indices[0])
        else:
            j = int(shard.indices[rng.integers(len(shard))])
        r = theta - self.centers[j]
        ar = self._apply(r)
        loss = 0.5 * float(r @ ar)
        if self.noise > 0:
            ar = ar + self.noise * rng.standard_normal(self.dim)
        return ar, loss

    def full_loss(self, theta: ParamVector) -> float:
        check_finite(theta, "parameters")
        r = theta - self.centers
        return float(0.5 * np.mean(np.sum(r * self._apply(r), axis=1)))
