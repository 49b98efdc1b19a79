#!/usr/bin/env python3
"""Federated fine-tuning rounds in isolation.

Drives the round protocol synchronously: broadcast, local steps with the
convergence model, parameter averaging, quality-score updates, and early
stopping once local improvements vanish.
"""

import numpy as np

from coserve.domain import QualityScore
from coserve.launcher import AdapterParams, FLProcess, run_round, scan_and_trigger
from coserve.perf import TrainState, train_step

idle_pool = {0: 1.0, 1: 1.0, 2: 1.0, 3: 1.0}
participants = scan_and_trigger(idle_pool, min_participants=3)
print(f"idle replicas {sorted(idle_pool)} -> participants {participants} (server {participants[0]})")

states = {
    rid: TrainState(loss=2.0, initial_loss=2.0, asymptote_loss=0.5, noise_scale0=8.0, progress_k=0.01)
    for rid in participants
}
adapters = {rid: AdapterParams.zeros(16, 16, 4) for rid in participants}
qualities = {rid: QualityScore() for rid in participants}
rng = np.random.default_rng(0)

process = FLProcess(
    family="llama",
    clients={rid: states[rid].loss for rid in participants},
    adapters=adapters,
    server=participants[0],
)


def local_training(rid, start_loss, global_adapter):
    state = states[rid]
    state = TrainState(**{**state.__dict__, "loss": start_loss})
    for _ in range(50):
        state = train_step(state, batch=4)
    states[rid] = state
    return state.loss, global_adapter.perturbed(0.01, rng)


print(f"\n{'round':>5} {'mean loss':>10} {'improvement':>12} {'qualities':>30} stopped")
for _ in range(60):
    if not process.active:
        break
    rnd = run_round(process, local_training, now=0.0, qualities=qualities)
    improvement = (rnd.prev_mean_loss - rnd.mean_loss) / rnd.prev_mean_loss
    shown = ", ".join(f"{qualities[r].value:.3f}" for r in rnd.participants)
    print(f"{rnd.round_index:>5} {rnd.mean_loss:>10.4f} {improvement:>11.2%} {shown:>30} {rnd.stopped}")

if process.completed:
    print(f"\nprocess completed after {process.round_index} rounds; all replicas returned to serving")
else:
    print(f"\nstill improving after {process.round_index} rounds (early stop fires once "
          f"relative improvement drops to 1e-4); active clients: {process.active}")
print(f"global adapter norm: {np.linalg.norm(process.global_adapter.b_mat):.4f}")
