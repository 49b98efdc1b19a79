"""Command-line entry points.

Subcommands::

    coserve run --config scenario.yaml --policy subflow --seed 1 --out report/
    coserve compare report_a/ report_b/ ...
    coserve oracle --instance instance.json [--method exhaustive] [--subsets]

Exit codes: 0 success, 2 invalid input, 3 runtime invariant breach.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

from .domain import ConfigurationError
from .experiment import EXIT_CONFIG, EXIT_OK, run_experiment
from .metrics import compare, format_compare
from .oracle import OracleInstance, enumerate_optimal


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coserve", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one scenario under one policy")
    run_p.add_argument("--config", required=True, help="scenario YAML file")
    run_p.add_argument(
        "--policy",
        required=True,
        choices=["subflow", "round_robin", "greedy", "ideal_ref"],
        help="dispatch policy",
    )
    run_p.add_argument("--seed", required=True, type=int)
    run_p.add_argument("--out", required=True, help="report output directory")
    run_p.add_argument("--scale", type=float, default=None, help="override workload scale")

    cmp_p = sub.add_parser("compare", help="ratio table across matching reports")
    cmp_p.add_argument("dirs", nargs="+", help="report directories (first is the baseline)")

    orc_p = sub.add_parser("oracle", help="solve an offline dispatch instance")
    orc_p.add_argument("--instance", required=True, help="instance JSON file")
    orc_p.add_argument(
        "--method", choices=["branch_and_bound", "exhaustive"], default="branch_and_bound"
    )
    orc_p.add_argument(
        "--subsets", action="store_true", help="enumerate arbitrary subsets (<= 6 requests)"
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        return run_experiment(args.config, args.seed, args.policy, args.out, args.scale)
    if args.command == "compare":
        try:
            table = compare(args.dirs)
        except ConfigurationError as exc:
            print(f"refused: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(format_compare(table), end="")
        return EXIT_OK
    if args.command == "oracle":
        try:
            instance = OracleInstance.load(args.instance)
            started = time.perf_counter()
            result = enumerate_optimal(instance, method=args.method, exhaustive_subsets=args.subsets)
            elapsed = time.perf_counter() - started
        except ConfigurationError as exc:
            print(f"refused: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(
            json.dumps(
                {
                    "q_goodput": result.q_goodput,
                    "method": result.method,
                    "nodes_explored": result.nodes_explored,
                    "runtime_s": round(elapsed, 6),
                    "schedule": [
                        {
                            "request_ids": list(b.request_ids),
                            "replica_id": b.replica_id,
                            "start": b.start,
                        }
                        for b in result.schedule
                    ],
                },
                indent=2,
            )
        )
        return EXIT_OK
    return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
