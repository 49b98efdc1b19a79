"""coserve: discrete-event simulation of SLO-aware LLM serving with
co-located adapter fine-tuning on shared replicas."""

from .domain import (
    Batch,
    BatchConfig,
    ConfigurationError,
    InvariantViolation,
    QualityScore,
    ReplicaState,
    Request,
    batch_arrival,
    batch_deadline,
    batch_quality,
)
from .engine import Engine, run
from .metrics import MetricsLedger
from .scenario import Scenario, load_scenario, scenario_from_dict

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "BatchConfig",
    "ConfigurationError",
    "Engine",
    "InvariantViolation",
    "MetricsLedger",
    "QualityScore",
    "ReplicaState",
    "Request",
    "Scenario",
    "batch_arrival",
    "batch_deadline",
    "batch_quality",
    "load_scenario",
    "run",
    "scenario_from_dict",
]
