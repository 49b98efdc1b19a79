"""Per-process batch-size coordination.

After each fine-tuning round the coordinator fits bivariate linear latency
models from runtime samples, evaluates the training goodput objective
(throughput times statistical efficiency), and grid-searches the training
batch size; the inference batch rides along at the largest value that still
meets the latency budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .domain import BatchConfig, ConfigurationError
from .state import ewma

_CONST_EPS = 1e-12


class ModelSanityError(RuntimeError):
    """A fitted model predicted a non-positive latency; a refit is needed."""


@dataclass(frozen=True)
class LatencyModel:
    """Fitted latency surface y = alpha*x1 + beta*x2 + gamma.

    For training models x1 is the training batch and x2 the inference batch;
    for inference models the roles swap. ``gamma`` is always the intercept.
    ``degraded`` marks fits where one regressor was constant and its
    coefficient was pinned to zero.
    """

    alpha: float
    beta: float
    gamma: float
    r_squared: float = math.nan
    sample_count: int = 0
    degraded: bool = False

    def predict(self, x1: float, x2: float = 0.0) -> float:
        return self.alpha * x1 + self.beta * x2 + self.gamma

    @property
    def valid(self) -> bool:
        return self.sample_count >= 3 and not self.degraded


@dataclass(frozen=True)
class EfficiencyParams:
    scale_a: float = 10.0
    initial_batch: int = 4
    grad_noise: float = 0.0  # measured gradient-noise scale
    loss_reduction: float = 0.0  # smoothed per-step loss decrement

    def __post_init__(self) -> None:
        if self.scale_a <= 0 or self.initial_batch < 1:
            raise ConfigurationError("scale_a must be positive and initial_batch >= 1")
        if self.grad_noise < 0 or self.loss_reduction < 0:
            raise ConfigurationError("grad_noise and loss_reduction must be non-negative")


def _r_squared(y: np.ndarray, pred: np.ndarray) -> float:
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    if ss_tot == 0.0:
        return 1.0
    return 1.0 - ss_res / ss_tot


def fit_bivariate(samples: list[tuple[float, float, float]]) -> LatencyModel:
    """Ordinary least squares for y = alpha*x1 + beta*x2 + gamma.

    Requires at least 3 samples. When one regressor is constant the fit
    degrades to a univariate model on the other (the constant one's
    coefficient is zero and the model is flagged ``degraded``).
    """
    if len(samples) < 3:
        raise ConfigurationError("at least 3 samples are required for a bivariate fit")
    arr = np.asarray(samples, dtype=float)
    x1, x2, y = arr[:, 0], arr[:, 1], arr[:, 2]
    x1_const = float(np.ptp(x1)) < _CONST_EPS
    x2_const = float(np.ptp(x2)) < _CONST_EPS
    n = len(samples)

    if x1_const and x2_const:
        gamma = float(np.mean(y))
        return LatencyModel(0.0, 0.0, gamma, _r_squared(y, np.full_like(y, gamma)), n, True)
    if x2_const:
        alpha, gamma = _ols_univariate(x1, y)
        return LatencyModel(alpha, 0.0, gamma, _r_squared(y, alpha * x1 + gamma), n, True)
    if x1_const:
        beta, gamma = _ols_univariate(x2, y)
        return LatencyModel(0.0, beta, gamma, _r_squared(y, beta * x2 + gamma), n, True)

    design = np.column_stack([x1, x2, np.ones(n)])
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < 3:
        # collinear regressors: fall back to x1 alone
        alpha, gamma = _ols_univariate(x1, y)
        return LatencyModel(alpha, 0.0, gamma, _r_squared(y, alpha * x1 + gamma), n, True)
    alpha, beta, gamma = (float(c) for c in coef)
    return LatencyModel(alpha, beta, gamma, _r_squared(y, design @ coef), n, False)


def fit_univariate(samples: list[tuple[float, float]]) -> LatencyModel:
    """Least squares for y = alpha*x + gamma (beta fixed at zero)."""
    if len(samples) < 2:
        raise ConfigurationError("at least 2 samples are required for a univariate fit")
    arr = np.asarray(samples, dtype=float)
    x, y = arr[:, 0], arr[:, 1]
    if float(np.ptp(x)) < _CONST_EPS:
        raise ConfigurationError("univariate fit needs at least 2 distinct x values")
    alpha, gamma = _ols_univariate(x, y)
    return LatencyModel(alpha, 0.0, gamma, _r_squared(y, alpha * x + gamma), len(samples), False)


def _ols_univariate(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    design = np.column_stack([x, np.ones(len(x))])
    coef, _, _, _ = np.linalg.lstsq(design, y, rcond=None)
    return float(coef[0]), float(coef[1])


def throughput(train_batch: int, t_train: float) -> float:
    """Training samples processed per second."""
    if t_train <= 0:
        raise ConfigurationError("training step time must be positive")
    return train_batch / t_train


def efficiency(params: EfficiencyParams, train_batch: int) -> float:
    """Statistical efficiency of a step at batch B relative to the initial batch:
    (a*p*l + B0) / (a*p*l + B). Equal to 1 at B0, strictly decreasing beyond."""
    if train_batch < 1:
        raise ConfigurationError("train_batch must be >= 1")
    weight = params.scale_a * params.grad_noise * params.loss_reduction
    return (weight + params.initial_batch) / (weight + train_batch)


def goodput(
    params: EfficiencyParams,
    train_model: LatencyModel,
    train_batch: int,
    infer_batch: int,
) -> float:
    """Throughput times efficiency under the fitted training latency surface."""
    if train_batch == 0:
        return 0.0
    t_train = train_model.predict(train_batch, infer_batch)
    if t_train <= 0:
        raise ModelSanityError(
            f"fitted training model predicts {t_train:.6f}s at B={train_batch}, b={infer_batch}"
        )
    return throughput(train_batch, t_train) * efficiency(params, train_batch)


def max_feasible_b(infer_model: LatencyModel, train_batch: int, tau_prime: float) -> int:
    """Largest inference batch whose predicted latency fits in ``tau_prime``.

    Zero signals that no inference fits alongside this training batch.
    """
    if infer_model.alpha <= 0:
        raise ConfigurationError("inference latency slope must be positive")
    budget = tau_prime - infer_model.gamma - infer_model.beta * train_batch
    if budget < 0:
        return 0
    # tolerate float residue at the feasibility boundary
    return max(0, int(math.floor(round(budget / infer_model.alpha, 9))))


@dataclass
class SweepPoint:
    train_batch: int
    infer_batch: int
    goodput: float


@dataclass
class OptimizeResult:
    train_batch: int
    infer_batch: int
    goodput: float
    sweep: list[SweepPoint]
    inference_starved: bool = False

    @property
    def config(self) -> BatchConfig:
        return BatchConfig(self.train_batch, self.infer_batch)


def optimize(
    params: EfficiencyParams,
    train_model: LatencyModel,
    infer_model: LatencyModel,
    tau_prime: float,
    train_batch_cap: int = 64,
) -> OptimizeResult:
    """Grid search over the training batch; the inference batch is pinned to
    the largest SLO-feasible value for each candidate.

    Ties break toward the smaller training batch (less interference). When no
    candidate admits any inference, returns the goodput-maximizing training
    batch with b=0 and the ``inference_starved`` flag set.
    """
    if train_batch_cap < 1:
        raise ConfigurationError("train_batch_cap must be >= 1")
    sweep: list[SweepPoint] = []
    best: SweepPoint | None = None
    for train_b in range(1, train_batch_cap + 1):
        infer_b = max_feasible_b(infer_model, train_b, tau_prime)
        value = goodput(params, train_model, train_b, infer_b)
        point = SweepPoint(train_b, infer_b, value)
        sweep.append(point)
        if best is None or value > best.goodput:
            best = point
    assert best is not None
    starved = all(p.infer_batch == 0 for p in sweep)
    return OptimizeResult(best.train_batch, best.infer_batch, best.goodput, sweep, starved)


@dataclass
class RoundObservations:
    """Samples collected during one round, pooled across a process's replicas."""

    round_index: int
    train_samples: list[tuple[float, float, float]] = field(default_factory=list)  # (B, b, t)
    infer_samples: list[tuple[float, float, float]] = field(default_factory=list)  # (b, B, t)
    decrements: list[tuple[float, float]] = field(default_factory=list)  # (time, loss drop)
    noise_scales: list[float] = field(default_factory=list)
    queue_latencies: list[float] = field(default_factory=list)


class Coordinator:
    """Stateful controller for one fine-tuning process."""

    def __init__(
        self,
        slo: float,
        init_train_batch: int = 4,
        init_infer_batch: int = 12,
        init_steps: int = 50,
        scale_a: float = 10.0,
        train_batch_cap: int = 64,
        retention_rounds: int = 3,
        decrement_decay: float = 0.1,
    ) -> None:
        self.slo = slo
        self.init_train_batch = init_train_batch
        self.init_infer_batch = init_infer_batch
        self.init_steps = init_steps
        self.scale_a = scale_a
        self.train_batch_cap = train_batch_cap
        self.retention_rounds = retention_rounds
        self.decrement_decay = decrement_decay
        self.rounds: list[RoundObservations] = []
        self.train_model: LatencyModel | None = None
        self.infer_model: LatencyModel | None = None
        self.configs: dict[int, BatchConfig] = {}
        self.sweep_log: list[tuple[int, SweepPoint]] = []
        self.last_result: OptimizeResult | None = None

    def init_round(self, replica_ids: list[int]) -> dict[int, BatchConfig]:
        """Conservative first-round assignment: small training batch, large
        inference batch, a fixed step budget before the first optimization."""
        cfg = BatchConfig(self.init_train_batch, self.init_infer_batch)
        self.configs = {rid: cfg for rid in replica_ids}
        return dict(self.configs)

    def start_round(self, round_index: int) -> RoundObservations:
        obs = RoundObservations(round_index)
        self.rounds.append(obs)
        self.rounds = self.rounds[-self.retention_rounds :]
        return obs

    @property
    def current(self) -> RoundObservations:
        if not self.rounds:
            raise ConfigurationError("no round in progress")
        return self.rounds[-1]

    def record_train_sample(self, train_b: int, infer_b: int, latency: float) -> None:
        self.current.train_samples.append((float(train_b), float(infer_b), latency))

    def record_infer_sample(self, infer_b: int, train_b: int, latency: float) -> None:
        self.current.infer_samples.append((float(infer_b), float(train_b), latency))

    def record_decrement(self, time: float, drop: float) -> None:
        self.current.decrements.append((time, drop))

    def record_noise_scale(self, value: float) -> None:
        self.current.noise_scales.append(value)

    def record_queue_latency(self, value: float) -> None:
        self.current.queue_latencies.append(value)

    def _pooled(self, attr: str) -> list[tuple[float, float, float]]:
        out: list[tuple[float, float, float]] = []
        for obs in self.rounds:
            out.extend(getattr(obs, attr))
        return out

    def _exploration_configs(self, replica_ids: list[int]) -> dict[int, BatchConfig]:
        current = next(
            iter(self.configs.values()), BatchConfig(self.init_train_batch, self.init_infer_batch)
        )
        if self.train_model is not None and self.train_model.degraded:
            probe = BatchConfig(
                min(max(current.train_batch, 1) * 2, self.train_batch_cap), current.infer_batch
            )
        else:
            probe = current
        self.configs = {rid: probe for rid in replica_ids}
        return dict(self.configs)

    def tau_prime(self) -> float:
        """Latency budget left after observed queueing delay."""
        waits = [w for obs in self.rounds for w in obs.queue_latencies]
        mean_wait = float(np.mean(waits)) if waits else 0.0
        return self.slo - mean_wait

    def efficiency_params(self) -> EfficiencyParams:
        obs = self.current
        now = obs.decrements[-1][0] if obs.decrements else 0.0
        smoothed = ewma(obs.decrements, now, self.decrement_decay) if obs.decrements else 0.0
        noise = float(np.mean(obs.noise_scales)) if obs.noise_scales else 0.0
        return EfficiencyParams(
            scale_a=self.scale_a,
            initial_batch=self.init_train_batch,
            grad_noise=noise,
            loss_reduction=smoothed or 0.0,
        )

    def end_of_round(self, replica_ids: list[int]) -> dict[int, BatchConfig]:
        """Fit latency models from the pooled observations and push the new
        optimum to every remaining participant."""
        train_samples = self._pooled("train_samples")
        infer_samples = self._pooled("infer_samples")
        # a degraded fit (constant regressor) only replaces a missing model;
        # otherwise the last well-identified surface is retained
        if len(train_samples) >= 3:
            fitted = fit_bivariate(train_samples)
            if not fitted.degraded or self.train_model is None:
                self.train_model = fitted
        if len(infer_samples) >= 3:
            fitted = fit_bivariate(infer_samples)
            if not fitted.degraded or self.infer_model is None:
                self.infer_model = fitted
        if (
            self.train_model is None
            or self.infer_model is None
            or self.infer_model.alpha <= 0
            or self.train_model.degraded
        ):
            # the training surface is not identified yet (every pooled sample
            # shares one B): probe the next batch size up for one round, which
            # is cheap and keeps all clients on identical configurations
            return self._exploration_configs(replica_ids)
        try:
            result = optimize(
                self.efficiency_params(),
                self.train_model,
                self.infer_model,
                self.tau_prime(),
                self.train_batch_cap,
            )
        except ModelSanityError:
            # keep the previous configs; fresh samples next round trigger a refit
            self.train_model = None
            self.infer_model = None
            return {rid: self.configs.get(rid, BatchConfig(self.init_train_batch, self.init_infer_batch)) for rid in replica_ids}
        self.last_result = result
        round_index = self.current.round_index
        for point in result.sweep:
            self.sweep_log.append((round_index, point))
        cfg = result.config
        self.configs = {rid: cfg for rid in replica_ids}
        return dict(self.configs)
