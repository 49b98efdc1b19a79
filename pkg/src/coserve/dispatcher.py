"""Request dispatching policies.

The primary policy turns each unpredictable request stream into paced
per-replica subflows: every flow samples up to its target batch from the
stream queue at an interval matched to the replica's predicted batch latency.
A slow macro cycle refits the exclusive inference latency model and bounds
batch sizes by the remaining latency budget; a fast micro cycle reallocates
batch targets across flows by model quality and observed fill. Round-robin,
greedy earliest-deadline, and a fixed ideal-pace reference are provided as
comparison baselines.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field

from .coordinator import LatencyModel, fit_univariate
from .domain import ConfigurationError, Request, ReplicaState
from .perf import ReplicaPerfProfile

MIN_TICK_INTERVAL = 1e-3
HISTORY_RETENTION_FACTOR = 4  # tick history kept for a few macro windows


class SLOInfeasible(ConfigurationError):
    """No batch size of at least one request meets the latency target."""


def ideal_mode_reference(profile: ReplicaPerfProfile, tau: float) -> tuple[int, float]:
    """Ideal serving pace for a replica under a noise-free profile.

    Returns ``(b_star, rate)``: the largest batch whose true latency fits in
    ``tau`` (no co-located training) and the arrival rate ``b_star / tau``
    that exactly refills it each cycle.
    """
    b_linear = round((tau - profile.gamma_infer) / profile.alpha_infer, 9)
    if b_linear >= profile.saturation_batch:
        b_star = int(math.floor(b_linear))
    else:
        # below saturation the per-request slope is inflated; scan the bend
        b_star = 0
        for b in range(1, profile.saturation_batch + 1):
            if profile.alpha_infer_at(b) * b + profile.gamma_infer <= tau:
                b_star = b
    if b_star < 1:
        raise SLOInfeasible(f"no batch size meets tau={tau}s under this profile")
    return b_star, b_star / tau


class StreamQueue:
    """FIFO of pending requests for one stream."""

    def __init__(self, stream_id: str) -> None:
        self.stream_id = stream_id
        self._pending: deque[Request] = deque()

    def push(self, request: Request) -> None:
        self._pending.append(request)

    def __len__(self) -> int:
        return len(self._pending)

    def pop_up_to(
        self, n: int, now: float, horizon: float = 0.0
    ) -> tuple[list[Request], list[Request]]:
        """Take up to ``n`` requests in arrival order, shedding any that can
        no longer finish in time. ``horizon`` extends the cutoff by the
        minimum predicted service time, so certain-miss requests are dropped
        instead of burning capacity. Returns (taken, dropped)."""
        taken: list[Request] = []
        dropped: list[Request] = []
        cutoff = now + horizon
        while self._pending and len(taken) < n:
            head = self._pending.popleft()
            if head.deadline <= cutoff:
                dropped.append(head)
            else:
                taken.append(head)
        return taken, dropped

    def drain(self) -> list[Request]:
        out = list(self._pending)
        self._pending.clear()
        return out


@dataclass
class SubflowState:
    """One paced dispatch channel from a stream to a replica."""

    replica_id: int
    stream_id: str
    target: int
    interval: float
    b_max: int
    history: deque = field(default_factory=deque)  # (tick_time, target, actual)
    unsaturation: float = 0.0
    priority: float = 1.0
    suspended: bool = False
    tick_gen: int = 0


@dataclass
class MacroCycleResult:
    model: LatencyModel
    tau_prime: float
    mean_queue_latency: float
    b_max: int
    overload: bool = False
    promoted: int | None = None
    saturated: bool = False
    refit_flag: str | None = None


def unsaturation_rate(history: deque, window_start: float, now: float) -> float:
    """Mean fractional shortfall of actual versus target fill over the window.

    Ticks with a zero target are excluded; an empty window counts as fully
    saturated (zero).
    """
    shortfalls = [
        (target - actual) / target
        for t, target, actual in history
        if window_start < t <= now and target >= 1
    ]
    if not shortfalls:
        return 0.0
    return sum(shortfalls) / len(shortfalls)


def allocate_targets(
    flows: list[SubflowState],
    qualities: dict[int, float],
    smoothing: str = "corrected",
) -> dict[int, int]:
    """Split the total batch capacity across flows by quality and unsaturation.

    Raw shares are ``sum(b_max) * priority / sum(priorities)`` with
    ``priority = Q * (1 + u)``, then smoothed against each flow's previous
    target. The corrected smoothing range is
    ``[max(0.5*prev, 1), min(1.5*prev, b_max)]``; ``smoothing="literal"``
    instead uses ``[min(0.5*prev, 2), max(1.5*prev, b_max)]``, which can
    exceed the SLO-derived bound and exists for comparison only.
    """
    if smoothing not in ("corrected", "literal"):
        raise ConfigurationError(f"unknown smoothing mode {smoothing!r}")
    if not flows:
        return {}
    total = float(sum(f.b_max for f in flows))
    priorities: dict[int, float] = {}
    for f in flows:
        q = qualities.get(f.replica_id, 1.0)
        priorities[f.replica_id] = q * (1.0 + f.unsaturation)
    sum_p = sum(priorities.values())
    out: dict[int, int] = {}
    for f in flows:
        share = total / len(flows) if sum_p <= 0 else total * priorities[f.replica_id] / sum_p
        prev = f.target
        if smoothing == "corrected":
            lo = max(0.5 * prev, 1.0)
            hi = min(1.5 * prev, float(f.b_max))
        else:
            lo = min(0.5 * prev, 2.0)
            hi = max(1.5 * prev, float(f.b_max))
        value = hi if hi < lo else min(max(share, lo), hi)
        target = int(math.floor(value + 0.5))
        if smoothing == "corrected":
            target = min(target, f.b_max)
            if f.b_max >= 1:
                target = max(target, 1)
        out[f.replica_id] = max(target, 0)
        f.priority = priorities[f.replica_id]
    return out


class _StreamState:
    def __init__(self, stream_id: str, family: str, slo: float, initial_model: LatencyModel) -> None:
        self.stream_id = stream_id
        self.family = family
        self.slo = slo
        self.queue = StreamQueue(stream_id)
        self.flows: dict[int, SubflowState] = {}
        self.model = initial_model
        self.tau_prime = slo  # no queueing observed yet
        self.b_max_serving = 0
        self.queue_waits: list[tuple[float, float]] = []  # (dispatch time, wait)
        self.infer_obs: list[tuple[float, int, float]] = []  # (time, batch, latency)
        self.last_macro: MacroCycleResult | None = None


class SubflowDispatcher:
    """Subflow-based dispatching with macro/micro adjustment cycles."""

    transition_mode = "batch"

    def __init__(
        self,
        macro_interval: float = 30.0,
        micro_interval: float = 5.0,
        smoothing: str = "corrected",
        initial_alpha: float = 0.05,
        initial_beta: float = 0.1,
        initial_target: int = 4,
        tick_grid: float | None = None,
    ) -> None:
        self.macro_interval = macro_interval
        self.micro_interval = micro_interval
        self.smoothing = smoothing
        self.initial_model = LatencyModel(alpha=initial_alpha, beta=0.0, gamma=initial_beta)
        self.initial_target = initial_target
        self.tick_grid = tick_grid
        self.streams: dict[str, _StreamState] = {}
        self.engine = None

    # -- engine lifecycle -------------------------------------------------

    def start(self, engine) -> None:
        self.engine = engine
        for stream_id, stream_cfg in engine.stream_map.items():
            st = _StreamState(stream_id, stream_cfg.family, stream_cfg.slo, self.initial_model)
            st.b_max_serving = self._b_max(st.model, st.tau_prime)
            for rid in engine.family_replicas(stream_cfg.family):
                st.flows[rid] = SubflowState(
                    replica_id=rid,
                    stream_id=stream_id,
                    target=min(self.initial_target, max(st.b_max_serving, 1)),
                    interval=st.model.gamma,
                    b_max=st.b_max_serving,
                )
            self.streams[stream_id] = st
        for st in self.streams.values():
            for flow in st.flows.values():
                self._schedule_tick(flow, engine.now)
        engine.schedule_macro(self.macro_interval)
        engine.schedule_micro(self.micro_interval)

    def _grid(self, t: float) -> float:
        if self.tick_grid is None:
            return t
        return math.ceil(round(t / self.tick_grid, 9)) * self.tick_grid

    def _schedule_tick(self, flow: SubflowState, t: float) -> None:
        flow.tick_gen += 1
        self.engine.schedule_tick(flow.stream_id, flow.replica_id, flow.tick_gen, self._grid(t))

    @staticmethod
    def _b_max(model: LatencyModel, tau_prime: float) -> int:
        if model.alpha <= 0:
            return 0
        return max(0, int(math.floor(round((tau_prime - model.gamma) / model.alpha, 9))))

    # -- event handlers ---------------------------------------------------

    def on_arrival(self, request: Request, now: float) -> None:
        self.streams[request.stream_id].queue.push(request)

    def on_batch_complete(self, replica, now: float) -> None:
        pass  # pacing is tick-driven

    def record_infer_observation(self, replica, stream_id: str, b: int, latency: float, now: float) -> None:
        # macro fitting uses exclusive-inference samples only
        if replica.state is ReplicaState.SERVING:
            self.streams[stream_id].infer_obs.append((now, b, latency))

    def on_state_change(self, replica, old: ReplicaState, new: ReplicaState, now: float) -> None:
        for st in self.streams.values():
            flow = st.flows.get(replica.id)
            if flow is None:
                continue
            if new is ReplicaState.IDLE:
                flow.suspended = True
                flow.tick_gen += 1
            elif old is ReplicaState.IDLE and flow.suspended:
                flow.suspended = False
                self._schedule_tick(flow, now)

    def on_tick(self, stream_id: str, replica_id: int, gen: int, now: float) -> None:
        st = self.streams[stream_id]
        flow = st.flows[replica_id]
        if flow.suspended or gen != flow.tick_gen:
            return
        replica = self.engine.replicas[replica_id]
        if replica.state is ReplicaState.IDLE:
            flow.suspended = True
            flow.tick_gen += 1
            return
        # shed requests that cannot survive the batch about to be formed
        size_estimate = min(flow.target, len(st.queue))
        horizon = max(st.model.predict(size_estimate), 0.0) if size_estimate >= 1 else 0.0
        taken, dropped = st.queue.pop_up_to(flow.target, now, horizon=horizon)
        for req in dropped:
            self.engine.record_drop(req, now)
        actual = len(taken)
        flow.history.append((now, flow.target, actual))
        cutoff = now - HISTORY_RETENTION_FACTOR * self.macro_interval
        while flow.history and flow.history[0][0] < cutoff:
            flow.history.popleft()
        replica.last_batch_actual = actual
        if actual >= 1:
            for req in taken:
                st.queue_waits.append((now, now - req.arrival))
            self.engine.execute_batch(replica, taken, now)
        self.engine.log_dispatch(now, replica_id, stream_id, flow.target, actual, len(st.queue))
        flow.interval = self._next_interval(st, flow, replica, actual)
        self._schedule_tick(flow, now + flow.interval)

    def _next_interval(self, st: _StreamState, flow: SubflowState, replica, actual: int) -> float:
        if actual == 0:
            return max(st.model.gamma, MIN_TICK_INTERVAL)
        if replica.state is ReplicaState.COMBINED and replica.pushed_infer_model is not None:
            predicted = replica.pushed_infer_model.predict(actual, replica.batch_cfg.train_batch)
        else:
            predicted = st.model.predict(actual)
        return max(predicted, MIN_TICK_INTERVAL)

    def on_macro(self, now: float) -> None:
        for st in self.streams.values():
            self.macro_cycle(st, now)
        self.engine.schedule_macro(now + self.macro_interval)

    def macro_cycle(self, st: _StreamState, now: float) -> MacroCycleResult:
        """Refit the serving latency model, rebound batch sizes, and engage
        overload mitigation when the queueing delay has eaten the budget."""
        window_start = now - self.macro_interval
        st.infer_obs = [o for o in st.infer_obs if o[0] > window_start]
        st.queue_waits = [w for w in st.queue_waits if w[0] > window_start]
        samples = [(float(b), lat) for _, b, lat in st.infer_obs]
        refit_flag = None
        model = st.model
        if len({s[0] for s in samples}) >= 2:
            fitted = fit_univariate(samples)
            if fitted.alpha > 0:
                model = fitted
            else:
                refit_flag = "non-positive slope; previous model retained"
        else:
            refit_flag = "insufficient distinct batch sizes; previous model retained"
        mean_wait = (
            sum(w for _, w in st.queue_waits) / len(st.queue_waits) if st.queue_waits else 0.0
        )
        overload = mean_wait >= st.slo - model.gamma
        promoted = None
        saturated = False
        if overload:
            promoted = self.engine.promote_idle(st.family, now)
            if promoted is not None:
                mean_wait = 0.1 * st.slo
            else:
                saturated = True
        if saturated:
            # no capacity to add: keep the previous feasible bounds instead of
            # collapsing b_max to zero on a window of hopeless queue waits
            tau_prime = st.tau_prime
            b_max = st.b_max_serving
        else:
            tau_prime = st.slo - mean_wait
            b_max = self._b_max(model, tau_prime)
        st.model = model
        st.tau_prime = tau_prime
        st.b_max_serving = b_max
        result = MacroCycleResult(
            model=model,
            tau_prime=tau_prime,
            mean_queue_latency=mean_wait,
            b_max=b_max,
            overload=overload,
            promoted=promoted,
            saturated=saturated,
            refit_flag=refit_flag,
        )
        st.last_macro = result
        self._refresh_bounds(st)
        return result

    def _refresh_bounds(self, st: _StreamState) -> None:
        for flow in st.flows.values():
            replica = self.engine.replicas[flow.replica_id]
            if replica.state is ReplicaState.COMBINED and replica.combined_b_max is not None:
                flow.b_max = replica.combined_b_max
            else:
                flow.b_max = st.b_max_serving
            if flow.target > flow.b_max:
                flow.target = max(flow.b_max, 0)

    def on_micro(self, now: float) -> None:
        for st in self.streams.values():
            self.micro_cycle(st, now)
        self.engine.schedule_micro(now + self.micro_interval)

    def micro_cycle(self, st: _StreamState, now: float) -> None:
        self._refresh_bounds(st)
        active = [
            f
            for f in st.flows.values()
            if self.engine.replicas[f.replica_id].state is not ReplicaState.IDLE
        ]
        if not active:
            return
        window_start = now - self.micro_interval
        for f in active:
            f.unsaturation = unsaturation_rate(f.history, window_start, now)
        qualities = {
            f.replica_id: self.engine.replicas[f.replica_id].quality.value for f in active
        }
        targets = allocate_targets(active, qualities, self.smoothing)
        for f in active:
            f.target = targets[f.replica_id]

    # -- state-scan hooks ---------------------------------------------------

    def replica_queue_len(self, replica) -> float:
        return float(replica.pending_batch_count())

    def pending_requests(self) -> list[Request]:
        out: list[Request] = []
        for st in self.streams.values():
            out.extend(st.queue.drain())
        return out


class RoundRobinPolicy:
    """Cyclic assignment; replicas batch whatever queued locally when free."""

    transition_mode = "queue"

    def __init__(self) -> None:
        self.engine = None
        self.queues: dict[int, deque[Request]] = {}
        self.cursor: dict[str, int] = {}
        self.b_cap: dict[int, int] = {}

    def start(self, engine) -> None:
        self.engine = engine
        for rid, replica in engine.replicas.items():
            self.queues[rid] = deque()
            self.b_cap[rid] = ideal_mode_reference(
                replica.profile, engine.slo_for_family(replica.family)
            )[0]

    def on_arrival(self, request: Request, now: float) -> None:
        family = self.engine.stream_map[request.stream_id].family
        ring = self.engine.family_replicas(family)
        candidates = [rid for rid in ring if self.engine.replicas[rid].state is not ReplicaState.IDLE]
        if not candidates:
            candidates = ring
        key = request.stream_id
        idx = self.cursor.get(key, 0) % len(candidates)
        self.cursor[key] = self.cursor.get(key, 0) + 1
        rid = candidates[idx]
        self.queues[rid].append(request)
        self._try_start(self.engine.replicas[rid], now)

    def _try_start(self, replica, now: float) -> None:
        if not replica.infer_free(now) or replica.state is ReplicaState.IDLE:
            return
        queue = self.queues[replica.id]
        taken: list[Request] = []
        cap = self.b_cap[replica.id]
        while queue and len(taken) < cap:
            head = queue.popleft()
            if head.deadline <= now:
                self.engine.record_drop(head, now)
            else:
                taken.append(head)
        if taken:
            replica.last_batch_actual = len(taken)
            self.engine.execute_batch(replica, taken, now)
            self.engine.log_dispatch(now, replica.id, taken[0].stream_id, cap, len(taken), len(queue))

    def on_batch_complete(self, replica, now: float) -> None:
        self._try_start(replica, now)

    def on_state_change(self, replica, old, new, now) -> None:
        if new is ReplicaState.SERVING:
            self._try_start(replica, now)

    def record_infer_observation(self, replica, stream_id, b, latency, now) -> None:
        pass

    def replica_queue_len(self, replica) -> float:
        return float(len(self.queues[replica.id]) + replica.pending_batch_count())

    def pending_requests(self) -> list[Request]:
        out: list[Request] = []
        for q in self.queues.values():
            out.extend(q)
            q.clear()
        return out


class GreedyEDFPolicy:
    """Earliest-deadline-first with latency-aware batch sizing.

    Requests pool centrally per stream; whenever a replica is free it takes
    the earliest-deadline run whose predicted (saturated linear) latency still
    fits the head request's remaining slack. Requests that cannot make their
    deadline even alone are dropped.
    """

    transition_mode = "queue"
    hard_cap = 64

    def __init__(self) -> None:
        self.engine = None
        self.heaps: dict[str, list[tuple[float, int, Request]]] = {}
        self._seq = 0

    def start(self, engine) -> None:
        self.engine = engine
        for stream_id in engine.stream_map:
            self.heaps[stream_id] = []

    def on_arrival(self, request: Request, now: float) -> None:
        self._seq += 1
        heapq.heappush(self.heaps[request.stream_id], (request.deadline, self._seq, request))
        self._feed_stream(request.stream_id, now)

    def _feed_stream(self, stream_id: str, now: float) -> None:
        family = self.engine.stream_map[stream_id].family
        for rid in self.engine.family_replicas(family):
            replica = self.engine.replicas[rid]
            if replica.state is ReplicaState.IDLE or not replica.infer_free(now):
                continue
            if not self.heaps[stream_id]:
                break
            self._feed_replica(replica, stream_id, now)

    def _feed_replica(self, replica, stream_id: str, now: float) -> None:
        heap = self.heaps[stream_id]
        profile = replica.profile
        while heap:
            deadline, _, head = heap[0]
            slack = deadline - now
            k_max = int(math.floor((slack - profile.gamma_infer) / profile.alpha_infer))
            if k_max < 1:
                heapq.heappop(heap)
                self.engine.record_drop(head, now)
                continue
            size = min(k_max, len(heap), self.hard_cap)
            taken = [heapq.heappop(heap)[2] for _ in range(size)]
            replica.last_batch_actual = len(taken)
            self.engine.execute_batch(replica, taken, now)
            self.engine.log_dispatch(now, replica.id, stream_id, size, len(taken), len(heap))
            return

    def on_batch_complete(self, replica, now: float) -> None:
        for stream_id, cfg in self.engine.stream_map.items():
            if cfg.family == replica.family and self.heaps[stream_id]:
                if replica.state is not ReplicaState.IDLE and replica.infer_free(now):
                    self._feed_replica(replica, stream_id, now)

    def on_state_change(self, replica, old, new, now) -> None:
        if new is ReplicaState.SERVING:
            self.on_batch_complete(replica, now)

    def record_infer_observation(self, replica, stream_id, b, latency, now) -> None:
        pass

    def replica_queue_len(self, replica) -> float:
        total = sum(
            len(self.heaps[sid])
            for sid, cfg in self.engine.stream_map.items()
            if cfg.family == replica.family
        )
        peers = max(1, len(self.engine.family_replicas(replica.family)))
        return total / peers + replica.pending_batch_count()

    def pending_requests(self) -> list[Request]:
        out: list[Request] = []
        for heap in self.heaps.values():
            out.extend(req for _, _, req in heap)
            heap.clear()
        return out


class IdealReferencePolicy:
    """Fixed-pace reference: each replica receives up to its ideal batch every
    SLO interval. Matches the operating point the subflow policy adapts toward
    when arrivals exactly refill each cycle."""

    transition_mode = "batch"

    def __init__(self) -> None:
        self.engine = None
        self.streams: dict[str, StreamQueue] = {}
        self.flows: dict[tuple[str, int], SubflowState] = {}

    def start(self, engine) -> None:
        self.engine = engine
        for stream_id, cfg in engine.stream_map.items():
            self.streams[stream_id] = StreamQueue(stream_id)
            for rid in engine.family_replicas(cfg.family):
                replica = engine.replicas[rid]
                b_star, _ = ideal_mode_reference(replica.profile, cfg.slo)
                flow = SubflowState(
                    replica_id=rid,
                    stream_id=stream_id,
                    target=b_star,
                    interval=cfg.slo,
                    b_max=b_star,
                )
                self.flows[(stream_id, rid)] = flow
                flow.tick_gen += 1
                engine.schedule_tick(stream_id, rid, flow.tick_gen, engine.now)

    def on_arrival(self, request: Request, now: float) -> None:
        self.streams[request.stream_id].push(request)

    def on_tick(self, stream_id: str, replica_id: int, gen: int, now: float) -> None:
        flow = self.flows[(stream_id, replica_id)]
        if gen != flow.tick_gen:
            return
        replica = self.engine.replicas[replica_id]
        if replica.state is not ReplicaState.IDLE:
            taken, dropped = self.streams[stream_id].pop_up_to(flow.target, now)
            for req in dropped:
                self.engine.record_drop(req, now)
            replica.last_batch_actual = len(taken)
            if taken:
                self.engine.execute_batch(replica, taken, now)
            self.engine.log_dispatch(
                now, replica_id, stream_id, flow.target, len(taken), len(self.streams[stream_id])
            )
        flow.tick_gen += 1
        self.engine.schedule_tick(stream_id, replica_id, flow.tick_gen, now + flow.interval)

    def on_batch_complete(self, replica, now: float) -> None:
        pass

    def on_state_change(self, replica, old, new, now) -> None:
        pass

    def record_infer_observation(self, replica, stream_id, b, latency, now) -> None:
        pass

    def replica_queue_len(self, replica) -> float:
        return float(replica.pending_batch_count())

    def pending_requests(self) -> list[Request]:
        out: list[Request] = []
        for q in self.streams.values():
            out.extend(q.drain())
        return out


POLICIES = {
    "subflow": SubflowDispatcher,
    "round_robin": RoundRobinPolicy,
    "greedy": GreedyEDFPolicy,
    "ideal_ref": IdealReferencePolicy,
}
