"""Convergence-bound evaluation and run metrics (time/tokens to a target loss, sweeps)."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

logger = logging.getLogger(__name__)

SWEEP_HEADER = ("axis", "value", "final_loss", "time_to_loss", "tokens_to_loss", "diverged", "config_hash", "seed")


# ---------------------------------------------------------------------------
# Theorem bound
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundInputs:
    f0_minus_fstar: float
    eta_0: float
    eta_m: float
    steps: int
    beta_g: float
    beta_l: float
    lipschitz: float
    grad_bound: float
    sigma_sq: float
    d_g_sq: float = 0.0
    d_l_sq: float = 0.0

    def __post_init__(self) -> None:
        if self.f0_minus_fstar < 0:
            raise ValueError("F0 - F* must be non-negative")
        if not 0 < self.eta_m <= self.eta_0:
            raise ValueError("need 0 < eta_m <= eta_0")
        if self.steps < 1:
            raise ValueError("T must be >= 1")
        if not 0 < self.beta_g < 1:
            raise ValueError("beta_g must lie strictly inside (0, 1)")
        if not 0 < self.beta_l < 1:
            raise ValueError("beta_l must lie strictly inside (0, 1)")
        if self.lipschitz <= 0:
            raise ValueError("L must be positive")
        if min(self.grad_bound, self.sigma_sq, self.d_g_sq, self.d_l_sq) < 0:
            raise ValueError("G, sigma^2, D_g^2 and D_l^2 must be non-negative")


def theorem_bound(b: BoundInputs, variant: str = "theorem") -> float:
    """Right-hand side of the non-convex convergence bound.

    ``variant="derivation"`` swaps the noise denominator's ``(1 - beta_g)`` for
    the ``(1 - beta_g**2)`` that appears in the intermediate steps.
    """
    if variant not in ("theorem", "derivation"):
        raise ValueError(f"unknown bound variant {variant!r}")
    bg, bl, lip, eta0 = b.beta_g, b.beta_l, b.lipschitz, b.eta_0
    initial = 4.0 * b.f0_minus_fstar / (b.eta_m * b.steps) * (1.0 + 1.0 / (1.0 - bg))
    coefficient = (eta0 / b.eta_m) / bg ** 3 * (3.0 + 12.0 * lip * eta0 + 6.0 * lip * eta0 / (1.0 - bg) ** 2)
    momentum_den = (1.0 - bg) if variant == "theorem" else (1.0 - bg * bg)
    noise = b.grad_bound * b.sigma_sq / ((1.0 - bl) * momentum_den)
    delay = lip ** 2 * b.d_g_sq + lip ** 2 * b.d_l_sq
    return initial + coefficient * (noise + delay)


def beta_g_tradeoff(x: float) -> float:
    if not 0 < x < 1:
        raise ValueError(f"x must lie strictly inside (0, 1), got {x}")
    return 1.0 / (x ** 3 * (1.0 - x) ** 3)


# ---------------------------------------------------------------------------
# Run reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossSample:
    time: float
    tokens: int
    loss: float
    updates: int


@dataclass
class RunReport:
    strategy: str
    config_hash: str
    seed: int
    samples: List[LossSample] = field(default_factory=list)
    breakdown: Dict[str, Dict[str, float]] = field(default_factory=dict)
    staleness: Optional[Dict[str, Any]] = None
    final_model_hash: str = ""
    trace_hash: str = ""
    total_tokens: int = 0
    global_updates: int = 0
    accuracy: Optional[float] = None
    diverged: bool = False
    diagnosis: Optional[str] = None
    divergence_seq: Optional[int] = None
    truncated_at_seq: Optional[int] = None

    @property
    def final_loss(self) -> float:
        return self.samples[-1].loss if self.samples else math.nan

    def to_json(self) -> Dict[str, Any]:
        body = asdict(self)
        body["samples"] = [[s.time, s.tokens, s.loss, s.updates] for s in self.samples]
        body["final_loss"] = self.final_loss if self.samples else None
        return body


def _first_crossing(report: RunReport, target: float, axis: str) -> Optional[float]:
    if report.diverged:
        logger.warning("%s run diverged (%s); target %.6g not reached", report.strategy, report.diagnosis, target)
        return None
    previous: Optional[LossSample] = None
    for sample in report.samples:
        if sample.loss <= target:
            x1 = float(getattr(sample, axis))
            if previous is None:
                return x1
            x0 = float(getattr(previous, axis))
            fraction = (previous.loss - target) / (previous.loss - sample.loss)
            return x0 + fraction * (x1 - x0)
        previous = sample
    return None


def time_to_loss(report: RunReport, target: float) -> Optional[float]:
    """Simulated seconds until the loss first reaches *target*; None if it never does."""
    return _first_crossing(report, target, "time")


def tokens_to_loss(report: RunReport, target: float) -> Optional[float]:
    return _first_crossing(report, target, "tokens")


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    axis: str
    value: Any
    final_loss: float
    time_to_loss: Optional[float]
    tokens_to_loss: Optional[float]
    diverged: bool
    config_hash: str = ""
    seed: int = 0

    def as_csv(self) -> Tuple[str, ...]:
        def cell(v: Optional[float]) -> str:
            return "" if v is None else repr(float(v))

        return (self.axis, str(self.value), cell(self.final_loss), cell(self.time_to_loss),
                cell(self.tokens_to_loss), "true" if self.diverged else "false", self.config_hash, str(self.seed))


@dataclass
class SweepSummary:
    axis: str
    rows: List[SweepRow]
    target: Optional[float]
    argmin: Optional[int]
    reports: List[RunReport] = field(default_factory=list)

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        for row in self.rows:
            writer.writerow(row.as_csv())
        return buffer.getvalue()


def summarize_sweep(
    axis: str,
    results: Sequence[Tuple[Any, RunReport]],
    target: Optional[float] = None,
) -> SweepSummary:
    """Tabulate finished ``(value, report)`` pairs along *axis*.

    Without a *target*, the worst final loss among non-diverged runs is used so
    that every surviving run reaches it.
    """
    if not results:
        raise ValueError("sweep needs at least one configuration")
    reports = [report for _, report in results]
    healthy = [r.final_loss for r in reports if not r.diverged and math.isfinite(r.final_loss)]
    if target is None and healthy:
        target = max(healthy)

    rows = []
    for value, report in results:
        reached_t = time_to_loss(report, target) if target is not None else None
        reached_n = tokens_to_loss(report, target) if target is not None else None
        rows.append(SweepRow(axis, value, report.final_loss, reached_t, reached_n, report.diverged,
                             report.config_hash, report.seed))
        logger.info("sweep %s=%s final_loss=%.6g diverged=%s", axis, value, report.final_loss, report.diverged)

    candidates = [i for i, r in enumerate(rows) if not r.diverged and math.isfinite(r.final_loss)]
    argmin = min(candidates, key=lambda i: rows[i].final_loss) if candidates else None
    return SweepSummary(axis=axis, rows=rows, target=target, argmin=argmin, reports=reports)
