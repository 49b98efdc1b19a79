"""Offline brute-force dispatch oracle.

Solves the zero-one assignment problem exactly on tiny instances: pick
batches, replicas, and slot-aligned start times to maximize total
quality-weighted served requests, subject to

(a) each request dispatched at most once,
(b) no batch starting before its latest member arrival,
(c) only batches finishing by their earliest member deadline contribute,
(d) at most one batch executing per replica at a time.

Two solvers are provided: pure exhaustive enumeration (the trusted
reference) and a branch-and-bound variant that prunes branches whose
optimistic bound cannot beat the incumbent; both return the same optimum.
Batch candidates are contiguous runs of the arrival order by default; the
``exhaustive_subsets`` flag enumerates arbitrary subsets for instances of at
most 6 requests.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path

from .domain import ConfigurationError

MAX_REQUESTS = 10
MAX_REPLICAS = 3
MAX_SLOTS = 8
MAX_POWERSET_REQUESTS = 6


class InstanceTooLarge(ConfigurationError):
    pass


class ScheduleViolation(ValueError):
    """A schedule broke constraint (a), (b) or (d); the message names it."""

    def __init__(self, constraint: str, detail: str) -> None:
        self.constraint = constraint
        super().__init__(f"constraint ({constraint}): {detail}")


@dataclass(frozen=True)
class OracleRequest:
    id: int
    arrival: float
    deadline: float


@dataclass(frozen=True)
class OracleReplica:
    id: int
    alpha: float  # seconds per request
    gamma: float  # fixed seconds per batch

    def latency(self, batch_size: int) -> float:
        return self.alpha * batch_size + self.gamma


@dataclass
class OracleInstance:
    requests: list[OracleRequest]
    replicas: list[OracleReplica]
    slot_width: float
    n_slots: int
    qualities: dict[tuple[int, int], float]  # (replica_id, request_id) -> quality

    def __post_init__(self) -> None:
        if len(self.requests) > MAX_REQUESTS:
            raise InstanceTooLarge(f"{len(self.requests)} requests exceeds the {MAX_REQUESTS} limit")
        if len(self.replicas) > MAX_REPLICAS:
            raise InstanceTooLarge(f"{len(self.replicas)} replicas exceeds the {MAX_REPLICAS} limit")
        if self.n_slots > MAX_SLOTS:
            raise InstanceTooLarge(f"{self.n_slots} slots exceeds the {MAX_SLOTS} limit")
        if self.slot_width <= 0 or self.n_slots < 1:
            raise ConfigurationError("slot grid must be positive")
        for rep in self.replicas:
            for req in self.requests:
                if (rep.id, req.id) not in self.qualities:
                    raise ConfigurationError(f"missing quality for replica {rep.id}, request {req.id}")

    @property
    def slots(self) -> list[float]:
        return [k * self.slot_width for k in range(self.n_slots)]

    def quality(self, replica_id: int, request_id: int) -> float:
        return self.qualities[(replica_id, request_id)]

    def to_json(self) -> str:
        payload = {
            "slot_width": self.slot_width,
            "n_slots": self.n_slots,
            "requests": [
                {"id": r.id, "arrival": r.arrival, "deadline": r.deadline} for r in self.requests
            ],
            "replicas": [
                {"id": r.id, "alpha": r.alpha, "gamma": r.gamma} for r in self.replicas
            ],
            "qualities": {
                str(rep.id): {str(req.id): self.qualities[(rep.id, req.id)] for req in self.requests}
                for rep in self.replicas
            },
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "OracleInstance":
        payload = json.loads(text)
        requests = [OracleRequest(r["id"], r["arrival"], r["deadline"]) for r in payload["requests"]]
        replicas = [OracleReplica(r["id"], r["alpha"], r["gamma"]) for r in payload["replicas"]]
        qualities = {
            (int(rep_id), int(req_id)): q
            for rep_id, per_req in payload["qualities"].items()
            for req_id, q in per_req.items()
        }
        return OracleInstance(requests, replicas, payload["slot_width"], payload["n_slots"], qualities)

    @staticmethod
    def load(path: str | Path) -> "OracleInstance":
        return OracleInstance.from_json(Path(path).read_text())


@dataclass(frozen=True)
class ScheduledBatch:
    request_ids: tuple[int, ...]
    replica_id: int
    start: float


@dataclass
class OracleResult:
    q_goodput: float
    schedule: list[ScheduledBatch]
    nodes_explored: int = 0
    method: str = "branch_and_bound"


def evaluate_schedule(instance: OracleInstance, schedule: list[ScheduledBatch]) -> float:
    """Score a schedule under the oracle objective.

    Raises ``ScheduleViolation`` on a broken hard constraint; late batches
    are legal and simply contribute nothing.
    """
    by_request: dict[int, OracleRequest] = {r.id: r for r in instance.requests}
    by_replica: dict[int, OracleReplica] = {r.id: r for r in instance.replicas}
    seen: set[int] = set()
    busy: dict[int, list[tuple[float, float]]] = {r.id: [] for r in instance.replicas}
    total = 0.0
    for batch in schedule:
        if batch.replica_id not in by_replica:
            raise ConfigurationError(f"unknown replica {batch.replica_id}")
        members = []
        for rid in batch.request_ids:
            if rid not in by_request:
                raise ConfigurationError(f"unknown request {rid}")
            if rid in seen:
                raise ScheduleViolation("a", f"request {rid} dispatched more than once")
            seen.add(rid)
            members.append(by_request[rid])
        if not members:
            continue
        arrival = max(m.arrival for m in members)
        if batch.start < arrival - 1e-12:
            raise ScheduleViolation(
                "b", f"batch on replica {batch.replica_id} starts at {batch.start} before arrival {arrival}"
            )
        latency = by_replica[batch.replica_id].latency(len(members))
        busy[batch.replica_id].append((batch.start, batch.start + latency))
        deadline = min(m.deadline for m in members)
        if batch.start + latency <= deadline + 1e-12:
            total += sum(instance.quality(batch.replica_id, m.id) for m in members)
    for rid, intervals in busy.items():
        intervals.sort()
        for (s1, e1), (s2, _) in zip(intervals, intervals[1:]):
            if s2 < e1 - 1e-12:
                raise ScheduleViolation("d", f"overlapping batches on replica {rid}")
    return total


def enumerate_optimal(
    instance: OracleInstance,
    method: str = "branch_and_bound",
    exhaustive_subsets: bool = False,
) -> OracleResult:
    """Exhaustively search for the maximum-Q-goodput schedule.

    ``method="exhaustive"`` visits every candidate; ``"branch_and_bound"``
    prunes branches whose optimistic completion cannot beat the incumbent
    (the returned optimum is identical). Batches are contiguous runs of the
    arrival order unless ``exhaustive_subsets`` is set (allowed only for
    instances of at most 6 requests).
    """
    if method not in ("branch_and_bound", "exhaustive"):
        raise ConfigurationError(f"unknown oracle method {method!r}")
    if exhaustive_subsets and len(instance.requests) > MAX_POWERSET_REQUESTS:
        raise InstanceTooLarge(
            f"subset enumeration limited to {MAX_POWERSET_REQUESTS} requests, got {len(instance.requests)}"
        )
    reqs = sorted(instance.requests, key=lambda r: (r.arrival, r.id))
    best_quality = [max(instance.quality(rep.id, r.id) for rep in instance.replicas) for r in reqs]
    # suffix upper bound: every remaining request served at its best quality
    suffix = [0.0] * (len(reqs) + 1)
    for i in range(len(reqs) - 1, -1, -1):
        suffix[i] = suffix[i + 1] + best_quality[i]

    searcher = _Search(instance, reqs, suffix, method == "branch_and_bound")
    if exhaustive_subsets:
        searcher.run_subsets()
    else:
        searcher.run_contiguous()
    return OracleResult(
        q_goodput=searcher.best_score,
        schedule=sorted(searcher.best_schedule, key=lambda b: (b.start, b.replica_id)),
        nodes_explored=searcher.nodes,
        method=method,
    )


class _Search:
    def __init__(
        self,
        instance: OracleInstance,
        reqs: list[OracleRequest],
        suffix: list[float],
        prune: bool,
    ) -> None:
        self.instance = instance
        self.reqs = reqs
        self.suffix = suffix
        self.prune = prune
        self.best_score = 0.0
        self.best_schedule: list[ScheduledBatch] = []
        self.nodes = 0
        self.busy: dict[int, list[tuple[float, float]]] = {r.id: [] for r in instance.replicas}
        self.current: list[ScheduledBatch] = []

    # ---- shared helpers ----

    def _placements(self, members: list[OracleRequest]):
        """Feasible (replica, slot, latency, score) placements for a batch."""
        arrival = max(m.arrival for m in members)
        deadline = min(m.deadline for m in members)
        for rep in self.instance.replicas:
            latency = rep.latency(len(members))
            score = sum(self.instance.quality(rep.id, m.id) for m in members)
            for t in self.instance.slots:
                if t + 1e-12 < arrival:
                    continue
                if t + latency > deadline + 1e-12:
                    continue
                if any(t < e - 1e-12 and s < t + latency - 1e-12 for s, e in self.busy[rep.id]):
                    continue
                yield rep.id, t, latency, score

    def _commit(self, score: float) -> None:
        if score > self.best_score:
            self.best_score = score
            self.best_schedule = list(self.current)

    # ---- contiguous-run enumeration ----

    def run_contiguous(self) -> None:
        self._dfs_contiguous(0, 0.0)

    def _dfs_contiguous(self, pos: int, score: float) -> None:
        self.nodes += 1
        if self.prune and score + self.suffix[pos] <= self.best_score and self.best_schedule:
            return
        if pos == len(self.reqs):
            self._commit(score)
            return
        # option 1: leave request pos unserved
        self._dfs_contiguous(pos + 1, score)
        # option 2: serve a contiguous run starting at pos; deadline and
        # per-replica scores extend incrementally with the run
        slots = self.instance.slots
        deadline = math.inf
        run_scores = {rep.id: 0.0 for rep in self.instance.replicas}
        for end in range(pos, len(self.reqs)):
            member = self.reqs[end]
            deadline = min(deadline, member.deadline)
            arrival = member.arrival  # requests are arrival-sorted
            size = end - pos + 1
            ids = tuple(m.id for m in self.reqs[pos : end + 1])
            for rep in self.instance.replicas:
                run_scores[rep.id] += self.instance.quality(rep.id, member.id)
                latency = rep.latency(size)
                busy = self.busy[rep.id]
                for t in slots:
                    if t + 1e-12 < arrival:
                        continue
                    if t + latency > deadline + 1e-12:
                        break  # slots ascend; later starts only finish later
                    if any(t < e - 1e-12 and s < t + latency - 1e-12 for s, e in busy):
                        continue
                    interval = (t, t + latency)
                    busy.append(interval)
                    self.current.append(ScheduledBatch(ids, rep.id, t))
                    self._dfs_contiguous(end + 1, score + run_scores[rep.id])
                    self.current.pop()
                    busy.remove(interval)

    # ---- arbitrary-subset enumeration ----

    def run_subsets(self) -> None:
        self._dfs_subsets(frozenset(range(len(self.reqs))), 0.0)

    def _bound_subset(self, remaining: frozenset[int]) -> float:
        return sum(self.suffix[i] - self.suffix[i + 1] for i in remaining)

    def _dfs_subsets(self, remaining: frozenset[int], score: float) -> None:
        self.nodes += 1
        if self.prune and score + self._bound_subset(remaining) <= self.best_score and self.best_schedule:
            return
        if not remaining:
            self._commit(score)
            return
        anchor = min(remaining)
        rest = sorted(remaining - {anchor})
        # option 1: drop the anchor request
        self._dfs_subsets(remaining - {anchor}, score)
        # option 2: serve a batch containing the anchor
        for size in range(0, len(rest) + 1):
            for extra in itertools.combinations(rest, size):
                idxs = (anchor, *extra)
                members = [self.reqs[i] for i in idxs]
                for rep_id, t, latency, batch_score in self._placements(members):
                    interval = (t, t + latency)
                    self.busy[rep_id].append(interval)
                    self.current.append(
                        ScheduledBatch(tuple(m.id for m in members), rep_id, t)
                    )
                    self._dfs_subsets(remaining - set(idxs), score + batch_score)
                    self.current.pop()
                    self.busy[rep_id].remove(interval)


def random_instance(
    seed: int,
    n_requests: int = 8,
    n_replicas: int = 2,
    n_slots: int = 6,
    slo_slack: float = 3.0,
) -> OracleInstance:
    """Generate a feasible random instance for regression and replay studies.

    Arrivals land on the first two-thirds of the slot grid; each instance uses
    one shared deadline window sized so small batches are servable in time.
    Qualities vary moderately around 1 per (replica, request) pair.
    """
    import numpy as np

    rng = np.random.Generator(np.random.PCG64(seed))
    replicas = [
        OracleReplica(
            id=i,
            alpha=float(rng.uniform(0.015, 0.04)),
            gamma=float(rng.uniform(0.05, 0.1)),
        )
        for i in range(n_replicas)
    ]
    slot_width = min(r.gamma for r in replicas)
    horizon = slot_width * max(1, n_slots - 2)
    mean_latency = sum(r.latency(3) for r in replicas) / n_replicas
    tau = float(mean_latency * (slo_slack + rng.uniform(0.0, 1.0)))
    requests = []
    arrivals = sorted(float(rng.uniform(0.0, horizon)) for _ in range(n_requests))
    for i, arrival in enumerate(arrivals):
        requests.append(OracleRequest(id=i, arrival=arrival, deadline=arrival + tau))
    qualities = {
        (rep.id, req.id): float(rng.uniform(0.8, 1.2)) for rep in replicas for req in requests
    }
    return OracleInstance(requests, replicas, slot_width, n_slots, qualities)
