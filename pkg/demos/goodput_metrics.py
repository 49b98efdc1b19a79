#!/usr/bin/env python3
"""Quality-weighted serving metrics on one full-pipeline run.

Shows the headline metrics side by side with fine-tuning on and off: token
goodput, quality-weighted goodput (tokens weighted by the inverse of the
serving model's loss), utilization, and the joint completion time of the
federated model.
"""

from coserve.engine import Engine
from coserve.perf import ReplicaPerfProfile
from coserve.scenario import ClusterGroup, CoordinatorCfg, Scenario, TrainingCfg, WorkloadEntry


def scenario(training):
    return Scenario(
        duration_s=1800.0,
        workloads=[
            WorkloadEntry(stream_id="chat", family="llama", kind="bursty", base_rate=15.0, slo_s=0.5)
        ],
        cluster=[ClusterGroup(family="llama", count=4, profile=ReplicaPerfProfile(noise_cv=0.05))],
        training=TrainingCfg(enabled=training, jct_target_loss=1.0),
        coordinator=CoordinatorCfg(scale_a=300.0),
    )


runs = {}
for label, training in (("fine-tuning on", True), ("inference only", False)):
    runs[label] = Engine(scenario(training), seed=1).run()

print(f"{'metric':<28} {'fine-tuning on':>16} {'inference only':>16}")
on, off = runs["fine-tuning on"], runs["inference only"]
rows = [
    ("goodput (tokens/s)", on.goodput(), off.goodput()),
    ("q-goodput (1/loss weighted)", on.q_goodput(), off.q_goodput()),
    ("slo attainment", on.slo_attainment(), off.slo_attainment()),
    ("mean utilization", on.mean_utilization(), off.mean_utilization()),
]
for name, a, b in rows:
    print(f"{name:<28} {a:>16.3f} {b:>16.3f}")

jct = on.jct(1.0)
print(f"\njoint completion time to loss 1.0: {jct:.1f}s over {len(on.fl_rounds)} rounds")
print(f"q-goodput gain from model sharing: {on.q_goodput() / off.q_goodput():.2f}x")

print("\nfirst rounds of the loss trajectory:")
for rnd in on.fl_rounds[:6]:
    print(f"  round {rnd['round_index']:2d}: {rnd['prev_mean_loss']:.4f} -> {rnd['mean_loss']:.4f}")
