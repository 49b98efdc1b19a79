"""Core value types shared across the simulator.

Times are continuous seconds. All types here are immutable (or close to it)
and safe to share; event ordering elsewhere breaks ties with a sequence
number so runs are reproducible under a fixed seed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping


class ConfigurationError(ValueError):
    """Bad input or configuration detected before the simulation runs."""


class InvariantViolation(RuntimeError):
    """Internal consistency check failed; indicates a bug, never expected."""


class ReplicaState(enum.Enum):
    SERVING = "serving"
    IDLE = "idle"
    COMBINED = "combined"


# Legal edges of the replica lifecycle; everything else is a bug.
ALLOWED_TRANSITIONS: frozenset[tuple[ReplicaState, ReplicaState]] = frozenset(
    {
        (ReplicaState.SERVING, ReplicaState.IDLE),
        (ReplicaState.IDLE, ReplicaState.SERVING),
        (ReplicaState.IDLE, ReplicaState.COMBINED),
        (ReplicaState.COMBINED, ReplicaState.SERVING),
    }
)


def validate_transition(old: ReplicaState, new: ReplicaState) -> None:
    if (old, new) not in ALLOWED_TRANSITIONS:
        raise InvariantViolation(f"illegal replica transition {old.value} -> {new.value}")


@dataclass(frozen=True)
class Request:
    """One inference query: arrives, must complete by its deadline."""

    id: int
    arrival: float
    deadline: float
    output_tokens: int
    stream_id: str = "default"

    def __post_init__(self) -> None:
        if self.deadline <= self.arrival:
            raise ConfigurationError(
                f"request {self.id}: deadline {self.deadline} must exceed arrival {self.arrival}"
            )
        if self.output_tokens < 1:
            raise ConfigurationError(f"request {self.id}: output_tokens must be >= 1")


@dataclass(frozen=True)
class Batch:
    """A group of same-stream requests dispatched together to one replica."""

    requests: tuple[Request, ...]
    replica_id: int
    dispatch_time: float

    def __post_init__(self) -> None:
        if not self.requests:
            raise ConfigurationError("batch must contain at least one request")
        streams = {r.stream_id for r in self.requests}
        if len(streams) != 1:
            raise ConfigurationError(f"batch mixes streams {sorted(streams)}")
        latest = max(r.arrival for r in self.requests)
        if self.dispatch_time < latest:
            raise ConfigurationError(
                f"batch dispatched at {self.dispatch_time} before member arrival {latest}"
            )

    @property
    def size(self) -> int:
        return len(self.requests)


@dataclass(frozen=True)
class BatchConfig:
    """Per-replica batch sizing knobs: training micro-batch and inference batch."""

    train_batch: int = 0
    infer_batch: int = 0

    def __post_init__(self) -> None:
        if self.train_batch < 0 or self.infer_batch < 0:
            raise ConfigurationError("batch sizes must be non-negative")


@dataclass
class QualityScore:
    """Multiplicative model-quality score, starts at 1."""

    value: float = 1.0


def batch_arrival(batch: Batch) -> float:
    """Arrival time of the most recent member."""
    return max(r.arrival for r in batch.requests)


def batch_deadline(batch: Batch) -> float:
    """Earliest deadline among members."""
    return min(r.deadline for r in batch.requests)


def batch_quality(batch: Batch, per_request_quality: Mapping[int, float]) -> float:
    """Mean quality over members; every member must have an entry."""
    total = 0.0
    for r in batch.requests:
        if r.id not in per_request_quality:
            raise ConfigurationError(f"no quality entry for request {r.id}")
        total += per_request_quality[r.id]
    return total / len(batch.requests)
