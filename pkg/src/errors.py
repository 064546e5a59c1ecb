from __future__ import annotations

from typing import Optional


class HalosError(Exception):
    """Base class for every error raised by the simulator."""


class DimensionMismatch(HalosError, ValueError):
    def __init__(self, left: int, right: int) -> None:
        super().__init__(f"dimension mismatch: {left} != {right}")
        self.left = left
        self.right = right


class NonFiniteError(HalosError, ArithmeticError):
    """A vector picked up NaN or Inf. *step* / *seq* locate the offender."""

    def __init__(self, what: str, step: Optional[int] = None, seq: Optional[int] = None) -> None:
        where = []
        if step is not None:
            where.append(f"step {step}")
        if seq is not None:
            where.append(f"event seq {seq}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"non-finite {what}{suffix}")
        self.what = what
        self.step = step
        self.seq = seq


class LossBlowupError(HalosError, ArithmeticError):
    """The sampled global loss left the neighbourhood of its starting value."""

    def __init__(self, loss: float, reference: float, factor: float) -> None:
        super().__init__(f"global loss {loss:.6g} exceeds {factor:g} x the initial {reference:.6g}")
        self.loss = loss
        self.reference = reference
        self.factor = factor


class ConfigError(HalosError, ValueError):
    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class UnschedulableError(HalosError, ValueError):
    pass


class TraceError(HalosError):
    pass


class SnapshotError(HalosError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "snapshot error"
