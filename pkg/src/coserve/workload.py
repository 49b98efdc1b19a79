"""Request stream generation and trace replay.

Three sources are supported:

* ``generate_poisson``: memoryless arrivals at a constant rate.
* ``generate_bursty``: a two-state modulated Poisson process that alternates
  quiet and burst phases, reproducing minute-scale surges and dips.
* ``load_trace``: CSV replay with an optional scale multiplier.

All generators are pure functions of ``(spec, seed)``. Randomness comes from
numpy's PCG64 generator seeded through ``SeedSequence``; child streams are
spawned in a fixed order (phases, arrivals, tokens) so outputs are
bit-identical across runs and platforms for a given numpy version.

Trace CSV format: header ``timestamp_s,stream_id,output_tokens`` with
timestamps in seconds relative to trace start.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .domain import ConfigurationError

MAX_OUTPUT_TOKENS = 4096

# Jitter applied to replicated trace events is drawn from a stream with a
# fixed seed, independent of the user seed, so scaled traces are stable.
_TRACE_JITTER_SEED = 0x5CA1E
_TRACE_JITTER_MAX_S = 0.1


@dataclass(frozen=True)
class TraceEvent:
    timestamp: float
    stream_id: str
    output_tokens: int


@dataclass
class BurstParams:
    rate_multiplier: float = 4.4
    mean_quiet_s: float = 300.0
    mean_burst_s: float = 60.0


@dataclass
class TokenDist:
    """Lognormal output-length distribution (rounded up, clamped to [1, 4096])."""

    log_mean: float = math.log(100.0)
    log_sigma: float = 0.3


@dataclass
class WorkloadSpec:
    kind: str = "poisson"  # poisson | bursty | trace
    base_rate: float = 4.0
    burst: BurstParams = field(default_factory=BurstParams)
    scale: float = 1.0
    duration: float = 600.0
    slo: float = 0.5
    token_dist: TokenDist = field(default_factory=TokenDist)
    stream_id: str = "default"
    trace_path: str | None = None


@dataclass
class TraceLoad:
    """Result of ``load_trace``: events plus parse metadata."""

    events: list[TraceEvent]
    input_was_sorted: bool = True
    warnings: list[str] = field(default_factory=list)


class TraceParseError(ConfigurationError):
    pass


def sample_output_length(spec: WorkloadSpec, rng: np.random.Generator) -> int:
    """Draw one output length: ceil of a lognormal, clamped to [1, 4096]."""
    raw = rng.lognormal(spec.token_dist.log_mean, spec.token_dist.log_sigma)
    return int(min(max(math.ceil(round(raw, 9)), 1), MAX_OUTPUT_TOKENS))


def _spawn_streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(n)]


def generate_poisson(spec: WorkloadSpec, seed: int) -> list[TraceEvent]:
    """Homogeneous Poisson arrivals at rate ``base_rate * scale`` over ``duration``."""
    _validate_rate(spec)
    _phase_rng, arrival_rng, token_rng = _spawn_streams(seed, 3)
    rate = spec.base_rate * spec.scale
    events: list[TraceEvent] = []
    t = arrival_rng.exponential(1.0 / rate)
    while t < spec.duration:
        events.append(TraceEvent(t, spec.stream_id, sample_output_length(spec, token_rng)))
        t += arrival_rng.exponential(1.0 / rate)
    return events


def bursty_phase_schedule(spec: WorkloadSpec, seed: int) -> list[tuple[float, float, str]]:
    """Phase intervals ``(start, end, "quiet"|"burst")`` used by ``generate_bursty``.

    Exposed so empirical per-phase rates can be measured against the same
    schedule the generator used.
    """
    phase_rng = _spawn_streams(seed, 3)[0]
    schedule: list[tuple[float, float, str]] = []
    t = 0.0
    phase = "quiet"
    while t < spec.duration:
        mean = spec.burst.mean_quiet_s if phase == "quiet" else spec.burst.mean_burst_s
        end = min(t + phase_rng.exponential(mean), spec.duration)
        schedule.append((t, end, phase))
        t = end
        phase = "burst" if phase == "quiet" else "quiet"
    return schedule


def generate_bursty(spec: WorkloadSpec, seed: int) -> list[TraceEvent]:
    """Two-state modulated Poisson: quiet phases at the base rate, burst phases
    at ``base_rate * rate_multiplier``. Phase durations are exponential."""
    _validate_rate(spec)
    if spec.burst.rate_multiplier < 1.0:
        raise ConfigurationError("burst rate_multiplier must be >= 1")
    _phase_rng, arrival_rng, token_rng = _spawn_streams(seed, 3)
    quiet_rate = spec.base_rate * spec.scale
    burst_rate = quiet_rate * spec.burst.rate_multiplier
    events: list[TraceEvent] = []
    for start, end, phase in bursty_phase_schedule(spec, seed):
        rate = quiet_rate if phase == "quiet" else burst_rate
        # Memorylessness lets us redraw the gap at each phase boundary.
        t = start + arrival_rng.exponential(1.0 / rate)
        while t < end:
            events.append(TraceEvent(t, spec.stream_id, sample_output_length(spec, token_rng)))
            t += arrival_rng.exponential(1.0 / rate)
    return events


def load_trace(path: str | Path, scale: float = 1.0) -> TraceLoad:
    """Parse a trace CSV and replicate events by ``scale``.

    Integer scale k emits k copies of each event (the original plus k-1
    jittered copies); a fractional remainder adds one more jittered copy kept
    with probability ``frac(scale)``. Jitter comes from a fixed-seed stream so
    results do not depend on the run seed.
    """
    if scale <= 0:
        raise ConfigurationError("scale must be positive")
    rows = _parse_rows(Path(path))
    was_sorted = all(rows[i].timestamp <= rows[i + 1].timestamp for i in range(len(rows) - 1))
    warnings = []
    if not was_sorted:
        warnings.append("input timestamps were not sorted; sorted on load")
        rows = sorted(rows, key=lambda e: e.timestamp)

    whole = int(math.floor(scale))
    frac = scale - whole
    jitter_rng = np.random.Generator(np.random.PCG64(_TRACE_JITTER_SEED))
    out: list[TraceEvent] = []
    for ev in rows:
        if whole >= 1:
            out.append(ev)
        for _ in range(whole - 1):
            out.append(_jittered(ev, jitter_rng))
        if frac > 0.0 and jitter_rng.random() < frac:
            out.append(_jittered(ev, jitter_rng))
    out.sort(key=lambda e: (e.timestamp, e.stream_id))
    return TraceLoad(events=out, input_was_sorted=was_sorted, warnings=warnings)


def write_trace(path: str | Path, events: list[TraceEvent]) -> None:
    """Write events in the trace CSV format (inverse of ``load_trace`` at scale 1)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp_s", "stream_id", "output_tokens"])
        for ev in events:
            writer.writerow([repr(ev.timestamp), ev.stream_id, ev.output_tokens])


def _jittered(ev: TraceEvent, rng: np.random.Generator) -> TraceEvent:
    return TraceEvent(
        timestamp=ev.timestamp + rng.uniform(0.0, _TRACE_JITTER_MAX_S),
        stream_id=ev.stream_id,
        output_tokens=ev.output_tokens,
    )


def _parse_rows(path: Path) -> list[TraceEvent]:
    if not path.exists():
        raise TraceParseError(f"trace file not found: {path}")
    rows: list[TraceEvent] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return rows
        if [h.strip() for h in header] != ["timestamp_s", "stream_id", "output_tokens"]:
            raise TraceParseError(f"{path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                ts = float(row[0])
                stream = row[1].strip()
                tokens = int(row[2])
            except (ValueError, IndexError) as exc:
                raise TraceParseError(f"{path}: malformed row at line {lineno}: {row}") from exc
            if tokens < 1:
                raise TraceParseError(f"{path}: line {lineno}: output_tokens must be >= 1")
            rows.append(TraceEvent(ts, stream, tokens))
    return rows


def _validate_rate(spec: WorkloadSpec) -> None:
    if spec.base_rate <= 0 or spec.scale <= 0:
        raise ConfigurationError("base_rate and scale must be positive")
    if spec.duration < 0:
        raise ConfigurationError("duration must be non-negative")
