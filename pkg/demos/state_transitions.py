#!/usr/bin/env python3
"""Replica state lifecycle on a quiet afternoon.

Runs the full pipeline at low load and prints every state transition along
with when fine-tuning rounds begin, showing the serving -> idle -> combined
cascade and the rollback/promotion paths.
"""

from coserve.engine import Engine
from coserve.perf import ReplicaPerfProfile
from coserve.scenario import ClusterGroup, CoordinatorCfg, Scenario, TrainingCfg, WorkloadEntry

scenario = Scenario(
    duration_s=600.0,
    workloads=[WorkloadEntry(stream_id="chat", family="llama", kind="poisson", base_rate=5.0, slo_s=0.5)],
    cluster=[ClusterGroup(family="llama", count=4, profile=ReplicaPerfProfile(noise_cv=0.05))],
    training=TrainingCfg(enabled=True),
    coordinator=CoordinatorCfg(scale_a=300.0),
)
engine = Engine(scenario, seed=1)
ledger = engine.run()

transitions = []
for rid, replica in engine.replicas.items():
    for t, old, new in replica.state_log:
        transitions.append((t, rid, old, new))
transitions.sort()

print("state transitions (time, replica, edge):")
for t, rid, old, new in transitions:
    print(f"  {t:7.1f}s  replica {rid}: {old:8s} -> {new}")

print("\nfine-tuning rounds:")
for rnd in ledger.fl_rounds[:8]:
    print(
        f"  round {rnd['round_index']:2d} [{rnd['start_time']:6.1f}s - {rnd['end_time']:6.1f}s] "
        f"participants {rnd['participants']} mean loss {rnd['prev_mean_loss']:.3f} -> {rnd['mean_loss']:.3f}"
    )
if len(ledger.fl_rounds) > 8:
    print(f"  ... {len(ledger.fl_rounds) - 8} more rounds")

counts = ledger.counts()
print(
    f"\nserved in SLO {counts['slo']}, late {counts['late']}, dropped {counts['dropped']}; "
    f"mean utilization {ledger.mean_utilization():.2f}"
)
