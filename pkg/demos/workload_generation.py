#!/usr/bin/env python3
"""Workload generation walkthrough: Poisson arrivals, two-state bursts, and
trace replay with a scale multiplier."""

import tempfile
from pathlib import Path

import numpy as np

from coserve.workload import (
    BurstParams,
    WorkloadSpec,
    bursty_phase_schedule,
    generate_bursty,
    generate_poisson,
    load_trace,
    write_trace,
)

spec = WorkloadSpec(kind="poisson", base_rate=10.0, duration=600.0, stream_id="chat")
events = generate_poisson(spec, seed=42)
gaps = np.diff([e.timestamp for e in events])
print(f"poisson: {len(events)} events over {spec.duration:.0f}s "
      f"(rate {len(events)/spec.duration:.2f}/s, mean gap {gaps.mean()*1e3:.1f}ms)")

tokens = np.array([e.output_tokens for e in events])
print(f"output lengths: median {np.median(tokens):.0f} tokens, p95 {np.percentile(tokens, 95):.0f}")

# bursty arrivals: quiet phases at the base rate, surges at 4.4x
burst_spec = WorkloadSpec(
    kind="bursty",
    base_rate=10.0,
    duration=3600.0,
    burst=BurstParams(rate_multiplier=4.4, mean_quiet_s=300.0, mean_burst_s=60.0),
)
burst_events = generate_bursty(burst_spec, seed=42)
phases = bursty_phase_schedule(burst_spec, seed=42)
times = np.array([e.timestamp for e in burst_events])
print(f"\nbursty: {len(burst_events)} events, {len(phases)} phases")
for start, end, phase in phases[:6]:
    count = int(np.sum((times >= start) & (times < end)))
    rate = count / (end - start) if end > start else 0.0
    bar = "#" * int(rate)
    print(f"  {phase:5s} [{start:7.1f}, {end:7.1f}) rate {rate:5.1f}/s {bar}")

# trace replay: write the poisson trace out, then replay it at 3x
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "demo_trace.csv"
    write_trace(path, events)
    for scale in (1.0, 2.0, 3.0):
        replayed = load_trace(path, scale=scale)
        print(f"\nreplay at {scale:.0f}x: {len(replayed.events)} events "
              f"(sorted={replayed.input_was_sorted}, warnings={replayed.warnings})")
