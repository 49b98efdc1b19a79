"""Scenario configuration: schema, defaults, validation, fingerprinting.

A scenario is one YAML file with nested sections (workloads, cluster,
training, coordinator, state, dispatcher). Every constant the simulator uses
has a default here; the README documents which values are part of the control
algorithms and which are implementation defaults. Reports embed a hash of the
fully resolved configuration plus the seed so comparisons are verifiable.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .domain import ConfigurationError
from .perf import ReplicaPerfProfile
from .workload import BurstParams, TokenDist, WorkloadSpec


@dataclass
class StreamCfg:
    family: str
    slo: float


@dataclass
class WorkloadEntry:
    stream_id: str = "default"
    family: str = "default"
    kind: str = "poisson"
    base_rate: float = 4.0
    scale: float = 1.0
    slo_s: float = 0.5
    duration_s: float | None = None  # defaults to the scenario duration
    burst: BurstParams = field(default_factory=BurstParams)
    token_dist: TokenDist = field(default_factory=TokenDist)
    trace_path: str | None = None

    def to_spec(self, scenario_duration: float) -> WorkloadSpec:
        return WorkloadSpec(
            kind=self.kind,
            base_rate=self.base_rate,
            burst=self.burst,
            scale=self.scale,
            duration=self.duration_s if self.duration_s is not None else scenario_duration,
            slo=self.slo_s,
            token_dist=self.token_dist,
            stream_id=self.stream_id,
            trace_path=self.trace_path,
        )


@dataclass
class ClusterGroup:
    family: str = "default"
    count: int = 4
    profile: ReplicaPerfProfile = field(default_factory=ReplicaPerfProfile)


@dataclass
class TrainingCfg:
    enabled: bool = True
    initial_loss: float = 2.0
    asymptote_loss: float = 0.5
    progress_k: float = 0.01
    noise_scale0: float = 8.0
    step_noise: float = 0.0
    steps_per_round: int = 50
    comm_delay_s: float = 0.5
    early_stop_rel_tol: float = 1e-4
    quality_floor: float = 1e-3
    min_participants: int = 3
    adapter_dim: int = 64
    adapter_rank: int = 8
    jct_target_loss: float | None = None


@dataclass
class CoordinatorCfg:
    mode: str = "adaptive"  # adaptive | fixed
    fixed_train_batch: int = 8
    fixed_infer_batch: int = 12
    init_train_batch: int = 4
    init_infer_batch: int = 12
    scale_a: float = 10.0
    train_batch_cap: int = 64
    retention_rounds: int = 3


@dataclass
class StateCfg:
    window_steps: int = 30
    decay_per_s: float = 0.1
    quantile: float = 0.25
    util_floor: float = 0.25
    rollback_decisions: int = 5
    scan_interval_s: float = 1.0


@dataclass
class DispatcherCfg:
    macro_interval_s: float = 30.0
    micro_interval_s: float = 5.0
    smoothing: str = "corrected"  # corrected | literal
    initial_alpha: float = 0.05
    initial_beta: float = 0.1
    initial_target: int = 4
    tick_grid_s: float | None = None


@dataclass
class Scenario:
    duration_s: float = 600.0
    workloads: list[WorkloadEntry] = field(default_factory=lambda: [WorkloadEntry()])
    cluster: list[ClusterGroup] = field(default_factory=lambda: [ClusterGroup()])
    training: TrainingCfg = field(default_factory=TrainingCfg)
    coordinator: CoordinatorCfg = field(default_factory=CoordinatorCfg)
    state: StateCfg = field(default_factory=StateCfg)
    dispatcher: DispatcherCfg = field(default_factory=DispatcherCfg)

    def validate(self) -> None:
        if self.duration_s <= 0:
            raise ConfigurationError("duration_s must be positive")
        if not self.workloads:
            raise ConfigurationError("at least one workload entry is required")
        families = {g.family for g in self.cluster}
        seen_streams: set[str] = set()
        for wl in self.workloads:
            if wl.stream_id in seen_streams:
                raise ConfigurationError(f"duplicate stream_id {wl.stream_id!r}")
            seen_streams.add(wl.stream_id)
            if wl.family not in families:
                raise ConfigurationError(
                    f"workload {wl.stream_id!r} references unknown family {wl.family!r}"
                )
            if wl.kind not in ("poisson", "bursty", "trace"):
                raise ConfigurationError(f"workload kind {wl.kind!r} is not one of poisson|bursty|trace")
            if wl.kind == "trace" and not wl.trace_path:
                raise ConfigurationError(f"workload {wl.stream_id!r}: trace kind requires trace_path")
            if wl.slo_s <= 0:
                raise ConfigurationError("slo_s must be positive")
        for group in self.cluster:
            if group.count < 1:
                raise ConfigurationError("cluster group count must be >= 1")
        if self.coordinator.mode not in ("adaptive", "fixed"):
            raise ConfigurationError("coordinator.mode must be adaptive or fixed")
        if self.dispatcher.smoothing not in ("corrected", "literal"):
            raise ConfigurationError("dispatcher.smoothing must be corrected or literal")
        if self.training.min_participants < 1:
            raise ConfigurationError("training.min_participants must be >= 1")
        if self.state.window_steps < 1 or self.state.scan_interval_s <= 0:
            raise ConfigurationError("state window and scan interval must be positive")

    @property
    def stream_map(self) -> dict[str, StreamCfg]:
        return {wl.stream_id: StreamCfg(wl.family, wl.slo_s) for wl in self.workloads}

    def resolved(self) -> dict:
        out = asdict(self)
        return _jsonable(out)

    def config_hash(self) -> str:
        payload = json.dumps(self.resolved(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def override_scale(self, scale: float) -> None:
        if scale <= 0:
            raise ConfigurationError("scale must be positive")
        for wl in self.workloads:
            wl.scale = scale


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def _build(section: str, cls, data: dict, nested: dict | None = None):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{section}: expected a mapping, got {type(data).__name__}")
    nested = nested or {}
    known = {f for f in cls.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"{section}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in nested and isinstance(value, dict):
            kwargs[key] = _build(f"{section}.{key}", nested[key], value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ConfigurationError) as exc:
        raise ConfigurationError(f"{section}: {exc}") from exc


def scenario_from_dict(data: dict) -> Scenario:
    if not isinstance(data, dict):
        raise ConfigurationError("scenario: expected a mapping at the top level")
    known = {"duration_s", "workloads", "cluster", "training", "coordinator", "state", "dispatcher"}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"scenario: unknown keys {sorted(unknown)}")
    scenario = Scenario(
        duration_s=float(data.get("duration_s", 600.0)),
        workloads=[
            _build(f"workloads[{i}]", WorkloadEntry, wl, {"burst": BurstParams, "token_dist": TokenDist})
            for i, wl in enumerate(data.get("workloads", [{}]))
        ],
        cluster=[
            _build(f"cluster[{i}]", ClusterGroup, grp, {"profile": ReplicaPerfProfile})
            for i, grp in enumerate(data.get("cluster", [{}]))
        ],
        training=_build("training", TrainingCfg, data.get("training", {})),
        coordinator=_build("coordinator", CoordinatorCfg, data.get("coordinator", {})),
        state=_build("state", StateCfg, data.get("state", {})),
        dispatcher=_build("dispatcher", DispatcherCfg, data.get("dispatcher", {})),
    )
    scenario.validate()
    return scenario


def load_scenario(path: str | Path) -> Scenario:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: invalid YAML: {exc}") from exc
    return scenario_from_dict(data)
