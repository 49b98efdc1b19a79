"""Experiment runner: scenario in, report directory out.

Exit codes: 0 success, 2 invalid configuration, 3 runtime invariant breach.
"""

from __future__ import annotations

import sys
from pathlib import Path

from .domain import ConfigurationError, InvariantViolation
from .engine import Engine
from .metrics import MetricsLedger
from .scenario import Scenario, load_scenario

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3


def run_scenario(
    scenario: Scenario, seed: int, policy: str, outdir: str | Path | None = None
) -> MetricsLedger:
    ledger = Engine(scenario, seed, policy).run()
    if outdir is not None:
        ledger.write(outdir)
    return ledger


def run_experiment(
    config_path: str | Path,
    seed: int,
    policy: str,
    outdir: str | Path,
    scale: float | None = None,
) -> int:
    """Load a scenario file, run one policy, and write the report directory."""
    try:
        scenario = load_scenario(config_path)
        if scale is not None:
            scenario.override_scale(scale)
        ledger = run_scenario(scenario, seed, policy, outdir)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    print((Path(outdir) / "summary.txt").read_text(), end="")
    return EXIT_OK
