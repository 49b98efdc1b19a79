"""Replay the online subflow dispatcher on an offline oracle instance.

The instance's requests become the workload, its replicas become noise-free
profiles whose batch latency matches the instance exactly, and subflow ticks
are aligned to the instance's slot grid so the realized schedule is feasible
under the oracle's constraints. The realized schedule is then scored with the
same evaluator as the oracle optimum, giving a like-for-like quality ratio.
"""

from __future__ import annotations

from collections import defaultdict

from .engine import Engine
from .metrics import OUTCOME_LATE, OUTCOME_SLO
from .oracle import OracleInstance, ScheduledBatch, evaluate_schedule
from .perf import ReplicaPerfProfile
from .scenario import (
    ClusterGroup,
    CoordinatorCfg,
    DispatcherCfg,
    Scenario,
    StateCfg,
    TrainingCfg,
    WorkloadEntry,
)
from .workload import TraceEvent, write_trace


def _instance_profile(alpha: float, gamma: float) -> ReplicaPerfProfile:
    # saturation_batch=1 removes the sub-saturation bend so batch latency is
    # exactly alpha*b + gamma, the instance's latency function
    return ReplicaPerfProfile(
        alpha_infer=alpha,
        gamma_infer=gamma,
        beta_infer=1e-9,
        saturation_batch=1,
        curvature=0.0,
        noise_cv=0.0,
    )


def replay_subflow(instance: OracleInstance, tmpdir) -> tuple[float, list[ScheduledBatch]]:
    """Run the subflow dispatcher over the instance and score the realized
    schedule with the oracle evaluator. Returns (q_goodput, schedule)."""
    taus = [r.deadline - r.arrival for r in instance.requests]
    if max(taus) - min(taus) > 1e-9:
        raise ValueError("replay requires a uniform SLO window across requests")
    tau = min(taus)
    horizon = instance.n_slots * instance.slot_width + tau + 1.0

    ordered_requests = sorted(instance.requests, key=lambda r: (r.arrival, r.id))
    trace_path = str(tmpdir / "instance_trace.csv")
    write_trace(trace_path, [TraceEvent(r.arrival, "replay", 1) for r in ordered_requests])
    ordered_replicas = sorted(instance.replicas, key=lambda r: r.id)
    groups = [
        ClusterGroup("replay", 1, _instance_profile(rep.alpha, rep.gamma))
        for rep in ordered_replicas
    ]
    scenario = Scenario(
        duration_s=horizon,
        workloads=[
            WorkloadEntry(
                stream_id="replay",
                family="replay",
                kind="trace",
                slo_s=tau,
                trace_path=trace_path,
            )
        ],
        cluster=groups,
        training=TrainingCfg(enabled=False),
        coordinator=CoordinatorCfg(),
        state=StateCfg(window_steps=10**6),  # no idle transitions on tiny horizons
        dispatcher=DispatcherCfg(
            macro_interval_s=horizon,  # trust the exact prior model throughout
            micro_interval_s=instance.slot_width,
            initial_alpha=min(r.alpha for r in instance.replicas),
            initial_beta=min(r.gamma for r in instance.replicas),
            initial_target=max(1, len(instance.requests) // max(1, len(instance.replicas))),
            tick_grid_s=instance.slot_width,
        ),
    )
    # engine ids are assigned in group / trace order, matching the sorted lists
    replica_id_map = {i: rep.id for i, rep in enumerate(ordered_replicas)}
    request_id_map = {i: req.id for i, req in enumerate(ordered_requests)}
    ledger = Engine(scenario, seed=0, policy_name="subflow").run()

    grouped: dict[tuple[int, float], list[int]] = defaultdict(list)
    for rec in ledger.requests:
        if rec.outcome in (OUTCOME_SLO, OUTCOME_LATE) and rec.start is not None:
            grouped[(replica_id_map[rec.replica], rec.start)].append(request_id_map[rec.id])
    schedule = [
        ScheduledBatch(tuple(sorted(ids)), rep_id, start)
        for (rep_id, start), ids in sorted(grouped.items())
    ]
    return evaluate_schedule(instance, schedule), schedule
