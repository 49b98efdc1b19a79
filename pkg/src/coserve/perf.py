"""Ground-truth replica performance model.

This is the hidden truth the controllers must estimate at runtime: bivariate
linear latency surfaces for inference and training (each task's latency grows
with the co-located task's batch size), a sub-saturation drift term on the
inference slope, multiplicative latency noise, and a diminishing-returns
training convergence model driven by a gradient-noise scale that grows as the
loss falls.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .domain import BatchConfig, ConfigurationError

ASYMPTOTE_GUARD = 1e-6


@dataclass(frozen=True)
class ReplicaPerfProfile:
    # inference latency: (alpha_infer~(b) * b + beta_infer * B + gamma_infer) * noise
    alpha_infer: float = 0.02  # s per request at saturation
    beta_infer: float = 0.004  # s per co-located training sample
    gamma_infer: float = 0.08  # s fixed cost
    # training latency: (alpha_train * B + beta_train * b + gamma_train) * noise
    alpha_train: float = 0.05
    beta_train: float = 0.01
    gamma_train: float = 0.1
    saturation_batch: int = 16  # batch size where per-item inference cost stabilizes
    curvature: float = 0.5  # sub-saturation inflation of alpha_infer
    noise_cv: float = 0.0  # multiplicative latency noise, coefficient of variation
    capacity: float = 50.0  # work units per second the device can absorb
    work_infer: float = 1.0  # work units delivered per inference request
    work_train: float = 4.0  # work units delivered per training sample

    def __post_init__(self) -> None:
        for name in ("alpha_infer", "beta_infer", "gamma_infer", "alpha_train", "beta_train", "gamma_train"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"profile.{name} must be positive")
        if not 0.0 <= self.noise_cv <= 0.3:
            raise ConfigurationError("noise_cv must lie in [0, 0.3]")
        if self.saturation_batch < 1 or self.capacity <= 0:
            raise ConfigurationError("saturation_batch must be >= 1 and capacity positive")

    def alpha_infer_at(self, b: int) -> float:
        """Effective per-request slope: inflated below the saturation batch size."""
        drift = self.curvature * max(0.0, 1.0 - b / self.saturation_batch)
        return self.alpha_infer * (1.0 + drift)


def _noise_factor(profile: ReplicaPerfProfile, rng: np.random.Generator | None) -> float:
    if rng is None or profile.noise_cv == 0.0:
        return 1.0
    cv = profile.noise_cv
    eps = float(np.clip(rng.normal(0.0, cv), -3.0 * cv, 3.0 * cv))
    return 1.0 + eps


def true_infer_latency(
    profile: ReplicaPerfProfile, cfg: BatchConfig, rng: np.random.Generator | None = None
) -> float:
    """Latency of one inference batch of ``cfg.infer_batch`` requests while
    ``cfg.train_batch`` training samples run concurrently."""
    if cfg.infer_batch < 1:
        raise ConfigurationError("infer_batch must be >= 1")
    base = (
        profile.alpha_infer_at(cfg.infer_batch) * cfg.infer_batch
        + profile.beta_infer * cfg.train_batch
        + profile.gamma_infer
    )
    return base * _noise_factor(profile, rng)


def true_train_latency(
    profile: ReplicaPerfProfile, cfg: BatchConfig, rng: np.random.Generator | None = None
) -> float:
    """Latency of one training step of ``cfg.train_batch`` samples while
    ``cfg.infer_batch`` inference requests run concurrently."""
    if cfg.train_batch < 1:
        raise ConfigurationError("train_batch must be >= 1")
    base = (
        profile.alpha_train * cfg.train_batch
        + profile.beta_train * cfg.infer_batch
        + profile.gamma_train
    )
    return base * _noise_factor(profile, rng)


@dataclass(frozen=True)
class TrainState:
    """Simulated convergence state of one replica's adapter."""

    loss: float = 2.0
    initial_loss: float = 2.0
    asymptote_loss: float = 0.5
    steps: int = 0
    noise_scale0: float = 8.0  # gradient-noise scale at the initial loss
    progress_k: float = 0.01  # per-step progress constant
    step_noise: float = 0.0  # bounded multiplicative noise on the decrement
    last_decrement: float = 0.0

    @property
    def noise_scale(self) -> float:
        """Critical-batch proxy: grows as the loss approaches the asymptote."""
        return self.noise_scale0 * self.initial_loss / max(self.loss, self.asymptote_loss + ASYMPTOTE_GUARD)


def train_step(state: TrainState, batch: int, rng: np.random.Generator | None = None) -> TrainState:
    """Advance the convergence model by one step of ``batch`` samples.

    Expected decrement: k * (loss - asymptote) * B / (B + noise_scale), so
    per-sample returns diminish once B exceeds the (growing) noise scale.
    """
    if batch < 1:
        raise ConfigurationError("training batch must be >= 1")
    gap = state.loss - state.asymptote_loss
    expected = state.progress_k * gap * batch / (batch + state.noise_scale)
    factor = 1.0
    if rng is not None and state.step_noise > 0.0:
        factor = 1.0 + float(rng.uniform(-state.step_noise, state.step_noise))
    realized = max(0.0, expected * factor)
    new_loss = max(state.asymptote_loss, state.loss - realized)
    return replace(state, loss=new_loss, steps=state.steps + 1, last_decrement=state.loss - new_loss)


class WorkLog:
    """Delivered-work intervals for utilization accounting.

    Each execution contributes its work units spread uniformly over its
    duration; utilization over a window is delivered work divided by
    ``capacity * window``, clamped to [0, 1].
    """

    def __init__(self, capacity: float) -> None:
        self.capacity = capacity
        self._entries: list[tuple[float, float, float]] = []  # (start, end, units)

    def record(self, start: float, end: float, units: float) -> None:
        if end <= start:
            raise ConfigurationError("work interval must have positive duration")
        self._entries.append((start, end, units))

    def prune(self, horizon: float) -> None:
        self._entries = [e for e in self._entries if e[1] > horizon]

    def sample(self, now: float, window: float) -> float:
        if window <= 0:
            raise ConfigurationError("utilization window must be positive")
        lo = now - window
        delivered = 0.0
        for start, end, units in self._entries:
            overlap = min(end, now) - max(start, lo)
            if overlap > 0:
                delivered += units * overlap / (end - start)
        return min(1.0, delivered / (self.capacity * window))
