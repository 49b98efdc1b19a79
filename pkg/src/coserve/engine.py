"""Deterministic discrete-event engine.

Binds the workload, the ground-truth performance model, replica state
management, fine-tuning orchestration, batch-size coordination and the
dispatch policy into one run. Events are processed in (time, sequence)
order; all randomness flows from named child streams of the run seed, so a
(scenario, seed, policy) triple always produces byte-identical output.
"""

from __future__ import annotations

import heapq
import itertools
from collections import deque
from dataclasses import dataclass, field, replace as dc_replace
from typing import Any

import numpy as np

from .coordinator import Coordinator, LatencyModel
from .dispatcher import POLICIES, SubflowDispatcher
from .domain import (
    BatchConfig,
    ConfigurationError,
    InvariantViolation,
    QualityScore,
    ReplicaState,
    Request,
    validate_transition,
)
from .launcher import AdapterParams, FLProcess, scan_and_trigger
from .metrics import (
    OUTCOME_DROPPED,
    OUTCOME_LATE,
    OUTCOME_QUEUED,
    OUTCOME_SLO,
    MetricsLedger,
    RequestRecord,
)
from .perf import ReplicaPerfProfile, TrainState, WorkLog, train_step, true_infer_latency, true_train_latency
from .scenario import Scenario
from .state import ReplicaStats, check_idle_transition, compute_thresholds, force_promote, tick_rollback
from .workload import generate_bursty, generate_poisson, load_trace

ARRIVAL = "RequestArrival"
BATCH_COMPLETE = "BatchComplete"
TRAIN_STEP_START = "TrainStepStart"
TRAIN_STEP_DONE = "TrainStepComplete"
MACRO_CYCLE = "MacroCycle"
MICRO_CYCLE = "MicroCycle"
ROUND_BOUNDARY = "RoundBoundary"
STATE_SCAN = "StateScan"
SUBFLOW_TICK = "SubflowTick"


@dataclass(order=True)
class Event:
    time: float
    seq: int
    kind: str = field(compare=False)
    payload: Any = field(compare=False, default=None)


class ReplicaSim:
    """Simulated replica: execution chains, hidden truth, controller state."""

    def __init__(
        self,
        rid: int,
        family: str,
        profile: ReplicaPerfProfile,
        scenario: Scenario,
        seed: int,
    ) -> None:
        self.id = rid
        self.family = family
        self.profile = profile
        self.state = ReplicaState.SERVING
        self.quality = QualityScore()
        self.stats = ReplicaStats(
            window=scenario.state.window_steps, decay=scenario.state.decay_per_s
        )
        tr = scenario.training
        self.train = TrainState(
            loss=tr.initial_loss,
            initial_loss=tr.initial_loss,
            asymptote_loss=tr.asymptote_loss,
            noise_scale0=tr.noise_scale0,
            progress_k=tr.progress_k,
            step_noise=tr.step_noise,
        )
        self.adapter = AdapterParams.zeros(tr.adapter_dim, tr.adapter_dim, tr.adapter_rank)
        self.batch_cfg = BatchConfig(0, 0)
        self.combined_b_max: int | None = None
        self.pushed_infer_model: LatencyModel | None = None
        self.infer_busy_until = 0.0
        self.current_infer_b = 0
        self.pending: deque[tuple[list[Request], float]] = deque()
        self.work = WorkLog(profile.capacity)
        self.last_batch_actual = 0
        self.round_steps_left = 0
        self.state_log: list[tuple[float, str, str]] = []
        self.on_change = None  # set by the engine
        children = np.random.SeedSequence((seed, 1, rid)).spawn(3)
        self.latency_rng = np.random.Generator(np.random.PCG64(children[0]))
        self.train_rng = np.random.Generator(np.random.PCG64(children[1]))
        self.adapter_rng = np.random.Generator(np.random.PCG64(children[2]))

    def infer_free(self, now: float) -> bool:
        return self.infer_busy_until <= now and not self.pending

    def pending_batch_count(self) -> int:
        return len(self.pending) + (1 if self.current_infer_b > 0 else 0)

    def set_state(self, new: ReplicaState, now: float) -> None:
        old = self.state
        if old is new:
            return
        validate_transition(old, new)
        self.state = new
        self.state_log.append((now, old.value, new.value))
        if new is not ReplicaState.IDLE:
            self.stats.idle_unselected = 0
        if self.on_change is not None:
            self.on_change(self, old, new, now)

    @property
    def interference_train_batch(self) -> int:
        # combined replicas carry their training config's interference
        return self.batch_cfg.train_batch if self.state is ReplicaState.COMBINED else 0


@dataclass
class _ProcessRuntime:
    process: FLProcess
    coordinator: Coordinator
    process_id: int
    start_time: float
    sweeps_emitted: int = 0


class Engine:
    """One simulation run. Build it, call :meth:`run`, read the ledger."""

    def __init__(self, scenario: Scenario, seed: int, policy_name: str = "subflow") -> None:
        if policy_name not in POLICIES:
            raise ConfigurationError(
                f"unknown policy {policy_name!r}; expected one of {sorted(POLICIES)}"
            )
        scenario.validate()
        self.scenario = scenario
        self.seed = seed
        self.policy_name = policy_name
        self.now = 0.0
        self._heap: list[Event] = []
        self._seq = itertools.count()
        self.stream_map = scenario.stream_map
        self.replicas: dict[int, ReplicaSim] = {}
        rid = 0
        for group in scenario.cluster:
            for _ in range(group.count):
                replica = ReplicaSim(rid, group.family, group.profile, scenario, seed)
                replica.on_change = self._on_replica_change
                self.replicas[rid] = replica
                rid += 1
        self._families = sorted({g.family for g in scenario.cluster})
        self.processes: dict[str, _ProcessRuntime] = {}
        self._process_counter = 0
        self.policy = self._make_policy(policy_name)
        self.ledger = MetricsLedger(
            fingerprint={
                "config_hash": scenario.config_hash(),
                "seed": seed,
                "policy": policy_name,
            },
            duration=scenario.duration_s,
            config=scenario.resolved(),
        )
        self._records: dict[int, RequestRecord] = {}
        self._arrived = 0

    # ------------------------------------------------------------------
    # construction helpers

    def _make_policy(self, name: str):
        if name == "subflow":
            d = self.scenario.dispatcher
            return SubflowDispatcher(
                macro_interval=d.macro_interval_s,
                micro_interval=d.micro_interval_s,
                smoothing=d.smoothing,
                initial_alpha=d.initial_alpha,
                initial_beta=d.initial_beta,
                initial_target=d.initial_target,
                tick_grid=d.tick_grid_s,
            )
        return POLICIES[name]()

    def family_replicas(self, family: str) -> list[int]:
        return sorted(r.id for r in self.replicas.values() if r.family == family)

    def slo_for_family(self, family: str) -> float:
        for cfg in self.stream_map.values():
            if cfg.family == family:
                return cfg.slo
        raise ConfigurationError(f"no stream serves family {family!r}")

    def _workload_events(self) -> list[tuple[float, str, int]]:
        out: list[tuple[float, str, int]] = []
        for idx, entry in enumerate(self.scenario.workloads):
            spec = entry.to_spec(self.scenario.duration_s)
            wl_seed = int(np.random.SeedSequence((self.seed, 0, idx)).generate_state(1)[0])
            if spec.kind == "poisson":
                events = generate_poisson(spec, wl_seed)
            elif spec.kind == "bursty":
                events = generate_bursty(spec, wl_seed)
            else:
                events = [
                    ev
                    for ev in load_trace(spec.trace_path, spec.scale).events
                    if ev.timestamp < spec.duration
                ]
            for ev in events:
                out.append((ev.timestamp, entry.stream_id, ev.output_tokens))
        out.sort(key=lambda e: (e[0], e[1]))
        return out

    # ------------------------------------------------------------------
    # scheduling API (used by policies too)

    def schedule(self, time: float, kind: str, payload: Any = None) -> None:
        heapq.heappush(self._heap, Event(time, next(self._seq), kind, payload))

    def schedule_tick(self, stream_id: str, replica_id: int, gen: int, time: float) -> None:
        self.schedule(time, SUBFLOW_TICK, (stream_id, replica_id, gen))

    def schedule_macro(self, time: float) -> None:
        self.schedule(time, MACRO_CYCLE)

    def schedule_micro(self, time: float) -> None:
        self.schedule(time, MICRO_CYCLE)

    # ------------------------------------------------------------------
    # run loop

    def run(self) -> MetricsLedger:
        horizon = self.scenario.duration_s
        slo_by_stream = {sid: cfg.slo for sid, cfg in self.stream_map.items()}
        next_id = 0
        for ts, stream_id, tokens in self._workload_events():
            req = Request(
                id=next_id,
                arrival=ts,
                deadline=ts + slo_by_stream[stream_id],
                output_tokens=tokens,
                stream_id=stream_id,
            )
            self.schedule(ts, ARRIVAL, req)
            next_id += 1
        self.schedule(self.scenario.state.scan_interval_s, STATE_SCAN)
        self.policy.start(self)

        handlers = {
            ARRIVAL: self._handle_arrival,
            BATCH_COMPLETE: self._handle_batch_complete,
            TRAIN_STEP_START: self._handle_train_start,
            TRAIN_STEP_DONE: self._handle_train_done,
            ROUND_BOUNDARY: self._handle_round_boundary,
            STATE_SCAN: self._handle_state_scan,
            SUBFLOW_TICK: self._handle_tick,
            MACRO_CYCLE: self._handle_macro,
            MICRO_CYCLE: self._handle_micro,
        }
        while self._heap:
            if self._heap[0].time > horizon:
                break
            ev = heapq.heappop(self._heap)
            if ev.time < self.now - 1e-9:
                raise InvariantViolation(f"event time regression: {ev.time} < {self.now}")
            self.now = max(self.now, ev.time)
            self.ledger.events_processed += 1
            handlers[ev.kind](ev)
        self._finalize(horizon)
        return self.ledger

    # ------------------------------------------------------------------
    # event handlers

    def _handle_arrival(self, ev: Event) -> None:
        req: Request = ev.payload
        self._records[req.id] = RequestRecord(
            id=req.id,
            stream_id=req.stream_id,
            arrival=req.arrival,
            deadline=req.deadline,
            tokens=req.output_tokens,
        )
        self._arrived += 1
        self.policy.on_arrival(req, self.now)

    def execute_batch(self, replica: ReplicaSim, requests: list[Request], now: float) -> None:
        """Dispatch a batch to a replica; queues behind an in-flight batch."""
        for req in requests:
            rec = self._records[req.id]
            rec.replica = replica.id
            rec.dispatch = now
        if replica.infer_busy_until > now or replica.pending:
            replica.pending.append((requests, now))
            return
        self._start_batch(replica, requests, now)

    def _start_batch(self, replica: ReplicaSim, requests: list[Request], now: float) -> None:
        b = len(requests)
        interference = replica.interference_train_batch
        latency = true_infer_latency(
            replica.profile, BatchConfig(interference, b), replica.latency_rng
        )
        replica.infer_busy_until = now + latency
        replica.current_infer_b = b
        replica.work.record(now, now + latency, replica.profile.work_infer * b)
        loss_at_serve = replica.train.loss
        for req in requests:
            rec = self._records[req.id]
            rec.start = now
            rec.loss_at_serve = loss_at_serve
        runtime = self.processes.get(replica.family)
        if runtime is not None and replica.state is ReplicaState.COMBINED:
            runtime.coordinator.record_infer_sample(b, interference, latency)
        self.schedule(
            now + latency,
            BATCH_COMPLETE,
            (replica.id, [r.id for r in requests], requests[0].stream_id, b, latency),
        )

    def _handle_batch_complete(self, ev: Event) -> None:
        replica_id, request_ids, stream_id, b, latency = ev.payload
        replica = self.replicas[replica_id]
        replica.current_infer_b = 0
        for rid in request_ids:
            rec = self._records[rid]
            rec.complete = self.now
            rec.outcome = OUTCOME_SLO if self.now <= rec.deadline else OUTCOME_LATE
        self.policy.record_infer_observation(replica, stream_id, b, latency, self.now)
        if replica.pending:
            requests, _dispatched = replica.pending.popleft()
            self._start_batch(replica, requests, self.now)
        self.policy.on_batch_complete(replica, self.now)

    def record_drop(self, req: Request, now: float) -> None:
        rec = self._records[req.id]
        rec.outcome = OUTCOME_DROPPED
        rec.dispatch = now

    def log_dispatch(
        self, now: float, replica_id: int, stream_id: str, target: int, actual: int, depth: int
    ) -> None:
        self.ledger.dispatch_rows.append((now, replica_id, stream_id, target, actual, depth))

    def promote_idle(self, family: str, now: float) -> int | None:
        for rid in self.family_replicas(family):
            replica = self.replicas[rid]
            if replica.state is ReplicaState.IDLE:
                force_promote(replica, now)
                return rid
        return None

    def _on_replica_change(self, replica, old, new, now) -> None:
        self.policy.on_state_change(replica, old, new, now)

    # -- training ----------------------------------------------------------

    def _handle_train_start(self, ev: Event) -> None:
        replica = self.replicas[ev.payload]
        runtime = self.processes.get(replica.family)
        if runtime is None or replica.round_steps_left <= 0:
            return
        cfg = replica.batch_cfg
        concurrent_b = replica.current_infer_b
        latency = true_train_latency(
            replica.profile,
            BatchConfig(cfg.train_batch, concurrent_b),
            replica.latency_rng,
        )
        replica.work.record(
            self.now, self.now + latency, replica.profile.work_train * cfg.train_batch
        )
        runtime.coordinator.record_train_sample(cfg.train_batch, concurrent_b, latency)
        self.schedule(self.now + latency, TRAIN_STEP_DONE, replica.id)

    def _handle_train_done(self, ev: Event) -> None:
        replica = self.replicas[ev.payload]
        runtime = self.processes.get(replica.family)
        if runtime is None:
            return
        replica.train = train_step(replica.train, replica.batch_cfg.train_batch, replica.train_rng)
        runtime.coordinator.record_decrement(self.now, replica.train.last_decrement)
        runtime.coordinator.record_noise_scale(replica.train.noise_scale)
        replica.round_steps_left -= 1
        if replica.round_steps_left > 0:
            self._handle_train_start(Event(self.now, -1, TRAIN_STEP_START, replica.id))
            return
        scale = 0.05 * max(replica.train.last_decrement, 0.0) + 1e-4
        replica.adapter = replica.adapter.perturbed(scale, replica.adapter_rng)
        runtime.process.report_client(replica.id, replica.train.loss, replica.adapter)
        if runtime.process.round_done:
            self.schedule(
                self.now + self.scenario.training.comm_delay_s, ROUND_BOUNDARY, replica.family
            )

    def _handle_round_boundary(self, ev: Event) -> None:
        family = ev.payload
        runtime = self.processes.get(family)
        if runtime is None or not runtime.process.round_done:
            return
        process = runtime.process
        qualities = {rid: self.replicas[rid].quality for rid in self.replicas}
        rnd = process.finalize_round(self.now, qualities)
        for rid in rnd.client_losses:
            self.replicas[rid].quality = qualities[rid]
        self.ledger.fl_rounds.append(
            {
                "process_id": runtime.process_id,
                "process_start": runtime.start_time,
                "family": family,
                "round_index": rnd.round_index,
                "participants": rnd.participants,
                "server": rnd.server,
                "start_time": rnd.start_time,
                "end_time": rnd.end_time,
                "prev_mean_loss": rnd.prev_mean_loss,
                "mean_loss": rnd.mean_loss,
                "client_losses": {str(k): v for k, v in sorted(rnd.client_losses.items())},
                "stopped": rnd.stopped,
                "withdrawn": rnd.withdrawn,
                "qualities": {
                    str(rid): self.replicas[rid].quality.value for rid in sorted(rnd.client_losses)
                },
            }
        )
        for rid in rnd.stopped:
            self._release_replica(self.replicas[rid])
        if process.active:
            configs = runtime.coordinator.end_of_round(process.active)
            self._emit_sweeps(runtime)
            if self.scenario.coordinator.mode == "fixed":
                fixed = BatchConfig(
                    self.scenario.coordinator.fixed_train_batch,
                    self.scenario.coordinator.fixed_infer_batch,
                )
                configs = {rid: fixed for rid in process.active}
                runtime.coordinator.configs = dict(configs)
            for rid, cfg in configs.items():
                replica = self.replicas[rid]
                replica.batch_cfg = cfg
                replica.combined_b_max = cfg.infer_batch
                replica.pushed_infer_model = runtime.coordinator.infer_model
            self._begin_round(family)
        else:
            del self.processes[family]

    def _release_replica(self, replica: ReplicaSim) -> None:
        replica.set_state(ReplicaState.SERVING, self.now)
        replica.batch_cfg = BatchConfig(0, 0)
        replica.combined_b_max = None
        replica.pushed_infer_model = None
        replica.round_steps_left = 0

    def _begin_round(self, family: str) -> None:
        runtime = self.processes[family]
        process = runtime.process
        process.begin_round(self.now)
        runtime.coordinator.start_round(process.round_index)
        steps = self.scenario.training.steps_per_round
        start = self.now + self.scenario.training.comm_delay_s
        for rid in process.active:
            replica = self.replicas[rid]
            replica.round_steps_left = steps
            # broadcast: the client resumes from the global model's loss
            replica.train = dc_replace(replica.train, loss=process.global_loss)
            self.schedule(start, TRAIN_STEP_START, rid)

    def _emit_sweeps(self, runtime: _ProcessRuntime) -> None:
        log = runtime.coordinator.sweep_log
        for round_index, point in log[runtime.sweeps_emitted :]:
            self.ledger.sweep_rows.append(
                (round_index, point.train_batch, point.infer_batch, point.goodput)
            )
        runtime.sweeps_emitted = len(log)

    # -- state scans ---------------------------------------------------------

    def _handle_state_scan(self, ev: Event) -> None:
        interval = self.scenario.state.scan_interval_s
        for rid in sorted(self.replicas):
            replica = self.replicas[rid]
            util = replica.work.sample(self.now, interval)
            replica.work.prune(self.now - 5 * interval)
            queue_len = self.policy.replica_queue_len(replica)
            replica.stats.push(self.now, util, queue_len, replica.last_batch_actual)
            self.ledger.util_rows.append((self.now, rid, util))
        self._check_idle_transitions()
        if self.scenario.training.enabled:
            self._launcher_scan()
        next_scan = self.now + interval
        if next_scan <= self.scenario.duration_s:
            self.schedule(next_scan, STATE_SCAN)

    def _check_idle_transitions(self) -> None:
        if not self.scenario.training.enabled:
            return  # idle state exists only to feed the fine-tune launcher
        serving = [r for r in self.replicas.values() if r.state is ReplicaState.SERVING]
        population = [
            (r, r.stats.util_ewma(self.now), r.stats.queue_ewma(self.now), r.stats.batch_ewma(self.now))
            for r in serving
        ]
        population = [(r, u, q, b) for r, u, q, b in population if u is not None]
        if not population:
            return
        thresholds = compute_thresholds(
            [u for _, u, _, _ in population],
            [q for _, _, q, _ in population],
            [b for _, _, _, b in population],
            quantile=self.scenario.state.quantile,
            util_floor=self.scenario.state.util_floor,
        )
        mode = self.policy.transition_mode
        for replica, _, _, _ in sorted(population, key=lambda x: x[0].id):
            if replica.state is not ReplicaState.SERVING:
                continue
            peers_serving = sum(
                1
                for other in self.replicas.values()
                if other.family == replica.family and other.state is ReplicaState.SERVING
            )
            if peers_serving <= 1:
                continue  # never idle the last serving replica of a family
            if check_idle_transition(replica.stats, thresholds, self.now, mode):
                replica.set_state(ReplicaState.IDLE, self.now)

    def _launcher_scan(self) -> None:
        tr = self.scenario.training
        for family in self._families:
            idle = [
                self.replicas[rid]
                for rid in self.family_replicas(family)
                if self.replicas[rid].state is ReplicaState.IDLE
            ]
            if family in self.processes:
                for replica in idle:
                    if tick_rollback(replica.stats, False, self.scenario.state.rollback_decisions):
                        replica.set_state(ReplicaState.SERVING, self.now)
                continue
            participants = scan_and_trigger(
                {r.id: r.quality.value for r in idle}, tr.min_participants
            )
            if participants is None:
                for replica in idle:
                    if tick_rollback(replica.stats, False, self.scenario.state.rollback_decisions):
                        replica.set_state(ReplicaState.SERVING, self.now)
                continue
            self._trigger_process(family, participants)

    def _trigger_process(self, family: str, participants: list[int]) -> None:
        tr = self.scenario.training
        process = FLProcess(
            family=family,
            clients={rid: self.replicas[rid].train.loss for rid in participants},
            adapters={rid: self.replicas[rid].adapter for rid in participants},
            server=participants[0],
            start_time=self.now,
            rel_tol=tr.early_stop_rel_tol,
            quality_floor=tr.quality_floor,
        )
        coord_cfg = self.scenario.coordinator
        coordinator = Coordinator(
            slo=self.slo_for_family(family),
            init_train_batch=coord_cfg.init_train_batch,
            init_infer_batch=coord_cfg.init_infer_batch,
            init_steps=tr.steps_per_round,
            scale_a=coord_cfg.scale_a,
            train_batch_cap=coord_cfg.train_batch_cap,
            retention_rounds=coord_cfg.retention_rounds,
        )
        runtime = _ProcessRuntime(
            process=process,
            coordinator=coordinator,
            process_id=self._process_counter,
            start_time=self.now,
        )
        self._process_counter += 1
        self.processes[family] = runtime
        configs = coordinator.init_round(participants)
        if self.scenario.coordinator.mode == "fixed":
            fixed = BatchConfig(coord_cfg.fixed_train_batch, coord_cfg.fixed_infer_batch)
            configs = {rid: fixed for rid in participants}
            coordinator.configs = dict(configs)
        for rid in participants:
            replica = self.replicas[rid]
            replica.set_state(ReplicaState.COMBINED, self.now)
            replica.stats.idle_unselected = 0
            replica.batch_cfg = configs[rid]
            replica.combined_b_max = configs[rid].infer_batch
        self._begin_round(family)

    # -- policy-driven events -------------------------------------------------

    def _handle_tick(self, ev: Event) -> None:
        stream_id, replica_id, gen = ev.payload
        self.policy.on_tick(stream_id, replica_id, gen, self.now)

    def _handle_macro(self, ev: Event) -> None:
        self.policy.on_macro(self.now)

    def _handle_micro(self, ev: Event) -> None:
        self.policy.on_micro(self.now)

    # ------------------------------------------------------------------

    def _finalize(self, horizon: float) -> None:
        # fixed-config coordinator runs can leave processes mid-round at the
        # horizon; anything not completed counts as still queued
        self.policy.pending_requests()
        for replica in self.replicas.values():
            replica.pending.clear()
        self.ledger.requests = [self._records[rid] for rid in sorted(self._records)]
        for rec in self.ledger.requests:
            if rec.outcome in (OUTCOME_SLO, OUTCOME_LATE, OUTCOME_DROPPED):
                continue
            rec.outcome = OUTCOME_QUEUED
        counts = self.ledger.counts()
        if counts["arrived"] != self._arrived or counts["arrived"] != (
            counts[OUTCOME_SLO] + counts[OUTCOME_LATE] + counts[OUTCOME_DROPPED] + counts[OUTCOME_QUEUED]
        ):
            raise InvariantViolation("request conservation check failed")


def run(scenario: Scenario, seed: int, policy: str = "subflow") -> MetricsLedger:
    """Run one scenario to completion and return its metrics ledger."""
    return Engine(scenario, seed, policy).run()
