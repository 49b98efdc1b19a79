"""Per-replica activity statistics and serving/idle transition rules.

A replica leaves Serving only when both its smoothed utilization and its
smoothed demand signal (queue length, or recent batch fill when the paced
dispatcher is active) fall below cluster-relative thresholds. Thresholds are
quantiles of the smoothed metrics across serving replicas, with a constant
utilization ceiling so a busy cluster never idles replicas.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .domain import ReplicaState, validate_transition

logger = logging.getLogger(__name__)

UTIL_FLOOR_DEFAULT = 0.25


@dataclass
class ReplicaStats:
    """Ring buffers of recent activity samples plus the idle rollback counter."""

    window: int = 30
    decay: float = 0.1  # 1/seconds; 0 means a plain windowed mean
    util_history: deque = field(default_factory=deque)
    queue_history: deque = field(default_factory=deque)
    batch_history: deque = field(default_factory=deque)
    idle_unselected: int = 0

    def push(self, now: float, util: float, queue_len: float, batch_actual: float) -> None:
        for ring, value in (
            (self.util_history, util),
            (self.queue_history, queue_len),
            (self.batch_history, batch_actual),
        ):
            ring.append((now, value))
            while len(ring) > self.window:
                ring.popleft()

    @property
    def warm(self) -> bool:
        return len(self.util_history) >= self.window

    def util_ewma(self, now: float) -> float | None:
        return ewma(self.util_history, now, self.decay)

    def queue_ewma(self, now: float) -> float | None:
        return ewma(self.queue_history, now, self.decay)

    def batch_ewma(self, now: float) -> float | None:
        return ewma(self.batch_history, now, self.decay)


def ewma(history: Iterable[tuple[float, float]], now: float, decay: float) -> float | None:
    """Time-decayed average with weights exp(-decay*(now-t)), normalized to 1.

    Returns None on an empty ring ("insufficient history": callers skip
    transition checks). decay=0 reduces to the arithmetic mean of the window.
    """
    pairs = list(history)
    if not pairs:
        return None
    times = np.array([t for t, _ in pairs])
    values = np.array([v for _, v in pairs])
    # Shift by the max exponent for numerical safety; normalization cancels it.
    exponents = -decay * (now - times)
    weights = np.exp(exponents - exponents.max())
    return float(np.sum(weights * values) / np.sum(weights))


@dataclass(frozen=True)
class SwitchThresholds:
    util_switch: float
    queue_switch: float
    batch_switch: float
    util_floor: float = UTIL_FLOOR_DEFAULT
    quantile: float = 0.25


def compute_thresholds(
    util_ewmas: Sequence[float],
    queue_ewmas: Sequence[float],
    batch_ewmas: Sequence[float],
    quantile: float = 0.25,
    util_floor: float = UTIL_FLOOR_DEFAULT,
) -> SwitchThresholds:
    """Quantile thresholds over the population of smoothed metrics.

    Quantiles interpolate linearly between order statistics (numpy's default,
    the type-7 convention). The utilization threshold is additionally capped
    at ``util_floor``.
    """
    if len(util_ewmas) == 0:
        raise ValueError("at least one replica is required")
    return SwitchThresholds(
        util_switch=min(float(np.quantile(util_ewmas, quantile)), util_floor),
        queue_switch=float(np.quantile(queue_ewmas, quantile)),
        batch_switch=float(np.quantile(batch_ewmas, quantile)),
        util_floor=util_floor,
        quantile=quantile,
    )


def check_idle_transition(
    stats: ReplicaStats,
    thresholds: SwitchThresholds,
    now: float,
    mode: str = "queue",
) -> bool:
    """True when the replica should leave Serving for Idle.

    Both inequalities are strict: low utilization alone is not enough, the
    demand signal must also sit below the cluster quantile. A cold window
    (fewer than ``window`` samples) never transitions.
    """
    if mode not in ("queue", "batch"):
        raise ValueError(f"unknown transition mode {mode!r}")
    if not stats.warm:
        return False
    util = stats.util_ewma(now)
    if util is None or util >= thresholds.util_switch:
        return False
    if mode == "queue":
        demand = stats.queue_ewma(now)
        limit = thresholds.queue_switch
    else:
        demand = stats.batch_ewma(now)
        limit = thresholds.batch_switch
    return demand is not None and demand < limit


def tick_rollback(stats: ReplicaStats, selected: bool, t_prime: int) -> bool:
    """Count consecutive unselected launcher decisions for an Idle replica.

    Returns True exactly when the counter reaches ``t_prime``, meaning the
    replica should revert to Serving.
    """
    if selected:
        stats.idle_unselected = 0
        return False
    stats.idle_unselected += 1
    if stats.idle_unselected >= t_prime:
        stats.idle_unselected = 0
        return True
    return False


def force_promote(replica, now: float) -> bool:
    """Immediately return an Idle replica to Serving (overload relief).

    ``replica`` needs ``state``, ``stats`` and ``set_state(new, now)``.
    Non-idle replicas are left untouched (warning logged).
    """
    if replica.state is not ReplicaState.IDLE:
        logger.warning("force_promote ignored: replica %s is %s", replica.id, replica.state.value)
        return False
    validate_transition(ReplicaState.IDLE, ReplicaState.SERVING)
    replica.set_state(ReplicaState.SERVING, now)
    replica.stats.idle_unselected = 0
    return True
