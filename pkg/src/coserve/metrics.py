"""Metrics ledger and report files.

The ledger is the complete record of one run: per-request outcomes, replica
utilization samples, fine-tuning round log, dispatch log, and the scenario
fingerprint (config hash + seed + policy). Summary metrics are always
recomputed from the raw records, never cached separately.

Report directory layout (see README for column documentation):

* ``ledger.json``: fingerprint, counts, summary, utilization series, config echo
* ``metrics.csv``: one row per request with its outcome
* ``dispatch.csv``: one row per dispatch tick
* ``fl_rounds.jsonl``: one JSON object per completed fine-tuning round
* ``sweeps.csv``: coordinator grid-search sweeps
* ``summary.txt``: human-readable table
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .domain import ConfigurationError

OUTCOME_SLO = "slo"
OUTCOME_LATE = "late"
OUTCOME_DROPPED = "dropped"
OUTCOME_QUEUED = "queued"


@dataclass
class RequestRecord:
    id: int
    stream_id: str
    arrival: float
    deadline: float
    tokens: int
    replica: int | None = None
    dispatch: float | None = None  # when the policy fetched the request
    start: float | None = None  # when execution began
    complete: float | None = None
    loss_at_serve: float | None = None
    outcome: str = OUTCOME_QUEUED


@dataclass
class MetricsLedger:
    fingerprint: dict
    duration: float
    config: dict = field(default_factory=dict)
    requests: list[RequestRecord] = field(default_factory=list)
    util_rows: list[tuple[float, int, float]] = field(default_factory=list)
    fl_rounds: list[dict] = field(default_factory=list)
    dispatch_rows: list[tuple[float, int, str, int, int, int]] = field(default_factory=list)
    sweep_rows: list[tuple[int, int, int, float]] = field(default_factory=list)
    events_processed: int = 0

    # -- counts -----------------------------------------------------------

    def counts(self) -> dict[str, int]:
        out = {OUTCOME_SLO: 0, OUTCOME_LATE: 0, OUTCOME_DROPPED: 0, OUTCOME_QUEUED: 0}
        for rec in self.requests:
            out[rec.outcome] += 1
        out["arrived"] = len(self.requests)
        return out

    # -- metric operations --------------------------------------------------

    def goodput(self, window: tuple[float, float] | None = None) -> float:
        """Output tokens per second from requests completing within their SLO."""
        lo, hi = self._window(window)
        tokens = sum(
            rec.tokens
            for rec in self.requests
            if rec.outcome == OUTCOME_SLO and rec.complete is not None and lo <= rec.complete <= hi
        )
        return tokens / (hi - lo)

    def q_goodput(self, window: tuple[float, float] | None = None) -> float:
        """Goodput with each request weighted by 1 / serving-model loss."""
        lo, hi = self._window(window)
        total = 0.0
        for rec in self.requests:
            if rec.outcome != OUTCOME_SLO or rec.complete is None:
                continue
            if not lo <= rec.complete <= hi:
                continue
            if rec.loss_at_serve is None or rec.loss_at_serve <= 0:
                raise ConfigurationError(f"request {rec.id}: non-positive loss at serve")
            total += rec.tokens / rec.loss_at_serve
        return total / (hi - lo)

    def slo_attainment(self) -> float:
        if not self.requests:
            return 0.0
        return self.counts()[OUTCOME_SLO] / len(self.requests)

    def mean_utilization(self) -> float:
        if not self.util_rows:
            return 0.0
        return sum(u for _, _, u in self.util_rows) / len(self.util_rows)

    def jct(self, target_loss: float) -> float:
        """Simulated seconds from the first fine-tuning process start until its
        mean loss reaches ``target_loss``; ``inf`` when never reached."""
        rounds = [r for r in self.fl_rounds if r.get("process_id") == 0]
        if not rounds:
            return math.inf
        start = rounds[0]["process_start"]
        if rounds[0]["prev_mean_loss"] <= target_loss:
            return 0.0
        for rnd in rounds:
            if rnd["mean_loss"] <= target_loss:
                return rnd["end_time"] - start
        return math.inf

    def summary(self) -> dict:
        counts = self.counts()
        jct_target = (self.config.get("training") or {}).get("jct_target_loss")
        jct_value = self.jct(jct_target) if jct_target is not None else None
        return {
            "goodput_tokens_per_s": self.goodput(),
            "q_goodput_per_s": self.q_goodput(),
            "slo_attainment": self.slo_attainment(),
            "mean_utilization": self.mean_utilization(),
            "jct_s": None if jct_value is None or math.isinf(jct_value) else jct_value,
            "jct_reached": None if jct_value is None else not math.isinf(jct_value),
            "counts": counts,
            "fl_rounds": len(self.fl_rounds),
        }

    def _window(self, window: tuple[float, float] | None) -> tuple[float, float]:
        if window is None:
            return 0.0, self.duration
        lo, hi = window
        if not 0.0 <= lo < hi <= self.duration + 1e-9:
            raise ConfigurationError(f"window {window} outside the simulation horizon")
        return lo, hi

    # -- persistence ---------------------------------------------------------

    def write(self, outdir: str | Path) -> None:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        payload = {
            "fingerprint": self.fingerprint,
            "duration": self.duration,
            "events_processed": self.events_processed,
            "summary": self.summary(),
            "utilization": [[t, rid, u] for t, rid, u in self.util_rows],
            "config": self.config,
        }
        (out / "ledger.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

        with open(out / "metrics.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                [
                    "id", "stream_id", "arrival", "deadline", "tokens", "replica",
                    "dispatch", "start", "complete", "loss_at_serve", "outcome",
                ]
            )
            for rec in self.requests:
                writer.writerow(
                    [
                        rec.id, rec.stream_id, repr(rec.arrival), repr(rec.deadline), rec.tokens,
                        "" if rec.replica is None else rec.replica,
                        "" if rec.dispatch is None else repr(rec.dispatch),
                        "" if rec.start is None else repr(rec.start),
                        "" if rec.complete is None else repr(rec.complete),
                        "" if rec.loss_at_serve is None else repr(rec.loss_at_serve),
                        rec.outcome,
                    ]
                )

        with open(out / "dispatch.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time", "replica", "stream_id", "b_target", "b_actual", "queue_depth"])
            for row in self.dispatch_rows:
                writer.writerow([repr(row[0]), row[1], row[2], row[3], row[4], row[5]])

        with open(out / "fl_rounds.jsonl", "w") as fh:
            for rnd in self.fl_rounds:
                fh.write(json.dumps(rnd, sort_keys=True) + "\n")

        with open(out / "sweeps.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["round_index", "train_batch", "infer_batch", "goodput"])
            for row in self.sweep_rows:
                writer.writerow([row[0], row[1], row[2], repr(row[3])])

        (out / "summary.txt").write_text(self._summary_table())

    def _summary_table(self) -> str:
        s = self.summary()
        lines = [
            f"policy:            {self.fingerprint.get('policy')}",
            f"config_hash:       {self.fingerprint.get('config_hash')}",
            f"seed:              {self.fingerprint.get('seed')}",
            f"horizon_s:         {self.duration}",
            f"goodput (tok/s):   {s['goodput_tokens_per_s']:.3f}",
            f"q_goodput (1/s):   {s['q_goodput_per_s']:.3f}",
            f"slo_attainment:    {s['slo_attainment']:.4f}",
            f"mean_utilization:  {s['mean_utilization']:.4f}",
            f"fl_rounds:         {s['fl_rounds']}",
        ]
        if s["jct_s"] is not None:
            lines.append(f"jct_s:             {s['jct_s']:.1f}")
        counts = s["counts"]
        lines.append(
            "outcomes:          "
            + ", ".join(f"{k}={counts[k]}" for k in ("arrived", OUTCOME_SLO, OUTCOME_LATE, OUTCOME_DROPPED, OUTCOME_QUEUED))
        )
        return "\n".join(lines) + "\n"


def load_report(outdir: str | Path) -> dict:
    path = Path(outdir) / "ledger.json"
    if not path.exists():
        raise ConfigurationError(f"no ledger.json under {outdir}")
    return json.loads(path.read_text())


COMPARE_METRICS = [
    ("goodput_tokens_per_s", "goodput"),
    ("q_goodput_per_s", "q_goodput"),
    ("mean_utilization", "mean_utilization"),
    ("slo_attainment", "slo_attainment"),
]


def compare(report_dirs: list[str | Path]) -> dict:
    """Ratio table across reports sharing a scenario fingerprint except policy.

    The first report is the denominator. Refuses mismatched scenarios naming
    the differing field.
    """
    if len(report_dirs) < 2:
        raise ConfigurationError("compare needs at least two report directories")
    reports = [load_report(d) for d in report_dirs]
    base = reports[0]
    for d, rep in zip(report_dirs[1:], reports[1:]):
        for fp_field in ("config_hash", "seed"):
            if rep["fingerprint"][fp_field] != base["fingerprint"][fp_field]:
                raise ConfigurationError(
                    f"{d}: fingerprint field {fp_field!r} does not match the first report"
                )
    rows = []
    for d, rep in zip(report_dirs, reports):
        row = {"dir": str(d), "policy": rep["fingerprint"]["policy"]}
        for key, label in COMPARE_METRICS:
            value = rep["summary"][key]
            baseline = base["summary"][key]
            row[label] = value
            row[f"{label}_ratio"] = math.nan if baseline == 0 else value / baseline
        rows.append(row)
    return {"baseline": str(report_dirs[0]), "rows": rows}


def format_compare(table: dict) -> str:
    headers = ["policy"] + [f"{label}_ratio" for _, label in COMPARE_METRICS]
    lines = ["  ".join(f"{h:>22}" for h in headers)]
    for row in table["rows"]:
        cells = [f"{row['policy']:>22}"]
        for _, label in COMPARE_METRICS:
            cells.append(f"{row[f'{label}_ratio']:>22.4f}")
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"
