"""Fine-tuning orchestration across idle replicas.

When at least three Idle replicas serve the same model family, a collaborative
fine-tuning process starts: the highest-quality replica acts as server, every
participant trains locally on a fixed step budget per round, and adapters are
combined by unweighted parameter averaging. Quality scores track relative loss
improvement per round, and replicas whose local loss plateaus drop out and
return to serving.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .domain import ConfigurationError, QualityScore

QUALITY_FLOOR = 1e-3
EARLY_STOP_REL_TOL = 1e-4


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class AdapterParams:
    """Low-rank adapter pair: full update is b_mat @ a_mat."""

    b_mat: np.ndarray  # (d, r)
    a_mat: np.ndarray  # (r, l)

    @property
    def rank(self) -> int:
        return self.b_mat.shape[1]

    @staticmethod
    def zeros(d: int = 64, l: int = 64, rank: int = 8) -> "AdapterParams":
        return AdapterParams(np.zeros((d, rank)), np.zeros((rank, l)))

    def perturbed(self, scale: float, rng: np.random.Generator) -> "AdapterParams":
        return AdapterParams(
            self.b_mat + rng.normal(0.0, scale, self.b_mat.shape),
            self.a_mat + rng.normal(0.0, scale, self.a_mat.shape),
        )


@dataclass
class FLRound:
    """Record of one completed federated round."""

    round_index: int
    participants: list[int]
    server: int
    global_adapter: AdapterParams | None
    client_losses: dict[int, float] = field(default_factory=dict)
    start_losses: dict[int, float] = field(default_factory=dict)
    mean_loss: float = math.nan
    prev_mean_loss: float = math.nan
    withdrawn: list[int] = field(default_factory=list)
    stopped: list[int] = field(default_factory=list)
    start_time: float = 0.0
    end_time: float = 0.0


def fedavg(client_adapters: list[AdapterParams]) -> AdapterParams:
    """Element-wise mean of the B and A matrices, separately."""
    if not client_adapters:
        raise AggregationError("no adapters to aggregate")
    first = client_adapters[0]
    for idx, adapter in enumerate(client_adapters):
        if adapter.b_mat.shape != first.b_mat.shape or adapter.a_mat.shape != first.a_mat.shape:
            raise AggregationError(f"client {idx} adapter dimensions do not match the first client")
    if len(client_adapters) == 1:
        return first
    b = np.mean(np.stack([a.b_mat for a in client_adapters]), axis=0)
    a = np.mean(np.stack([a.a_mat for a in client_adapters]), axis=0)
    return AdapterParams(b, a)


def update_quality(
    score: QualityScore, f_prev: float, f_curr: float, floor: float = QUALITY_FLOOR
) -> QualityScore:
    """Multiplicative quality update by the round's relative loss improvement.

    The raw update drives the score to zero (or negative, when the loss rises)
    once training stops improving; the result is floored at ``floor`` so
    downstream priority weights stay positive.
    """
    if f_prev <= 0:
        raise ConfigurationError("previous round loss must be positive")
    raw = score.value * (f_prev - f_curr) / f_prev
    return QualityScore(value=max(raw, floor))


def early_stop_check(start_loss: float, end_loss: float, rel_tol: float = EARLY_STOP_REL_TOL) -> bool:
    """True when the round's local improvement is within ``rel_tol`` (exit next round)."""
    if start_loss <= 0:
        return True
    return (start_loss - end_loss) / start_loss <= rel_tol


def select_server(candidates: dict[int, float]) -> int:
    """Replica with the highest quality score; ties go to the lowest id."""
    if not candidates:
        raise ConfigurationError("no candidates for server selection")
    return min(candidates, key=lambda rid: (-candidates[rid], rid))


def scan_and_trigger(idle_qualities: dict[int, float], min_participants: int = 3) -> list[int] | None:
    """Return the participant set for a new process, or None when the trigger
    condition (at least ``min_participants`` idle replicas of one family) is unmet.
    The first listed participant is the selected server."""
    if len(idle_qualities) < min_participants:
        return None
    server = select_server(idle_qualities)
    rest = sorted(rid for rid in idle_qualities if rid != server)
    return [server] + rest


@dataclass
class _ClientRoundState:
    start_loss: float
    end_loss: float | None = None
    adapter: AdapterParams | None = None


class FLProcess:
    """Round bookkeeping for one federated fine-tuning process.

    The event-driven engine drives rounds through ``begin_round``,
    ``report_client``, ``withdraw`` and ``finalize_round``; the synchronous
    ``run_round`` helper composes the same calls for offline use.
    """

    def __init__(
        self,
        family: str,
        clients: dict[int, float],
        adapters: dict[int, AdapterParams],
        server: int,
        start_time: float = 0.0,
        rel_tol: float = EARLY_STOP_REL_TOL,
        quality_floor: float = QUALITY_FLOOR,
    ) -> None:
        if server not in clients:
            raise ConfigurationError("server must be a participant")
        self.family = family
        self.server = server
        self.active: list[int] = [server] + sorted(c for c in clients if c != server)
        self.rel_tol = rel_tol
        self.quality_floor = quality_floor
        self.round_index = 0
        self.global_adapter = adapters[server]
        self.global_loss = clients[server]
        self.start_time = start_time
        self.rounds: list[FLRound] = []
        self._round: FLRound | None = None
        self._clients: dict[int, _ClientRoundState] = {}

    @property
    def in_round(self) -> bool:
        return self._round is not None

    @property
    def completed(self) -> bool:
        return not self.active and not self.in_round

    def begin_round(self, now: float) -> FLRound:
        """Broadcast the global adapter: every active client restarts from the
        global model, so its local loss becomes the global loss."""
        if self.in_round:
            raise ConfigurationError("previous round not finalized")
        if not self.active:
            raise ConfigurationError("no active clients")
        self.round_index += 1
        self._round = FLRound(
            round_index=self.round_index,
            participants=list(self.active),
            server=self.server,
            global_adapter=self.global_adapter,
            prev_mean_loss=self.global_loss,
            start_time=now,
        )
        self._clients = {
            rid: _ClientRoundState(start_loss=self.global_loss) for rid in self.active
        }
        for rid in self.active:
            self._round.start_losses[rid] = self.global_loss
        return self._round

    def report_client(self, replica_id: int, end_loss: float, adapter: AdapterParams) -> None:
        if self._round is None or replica_id not in self._clients:
            raise ConfigurationError(f"client {replica_id} is not part of the current round")
        entry = self._clients[replica_id]
        entry.end_loss = end_loss
        entry.adapter = adapter

    def withdraw(self, replica_id: int) -> None:
        """Remove a participant mid-round; the round completes with the rest."""
        if self._round is not None and replica_id in self._clients:
            del self._clients[replica_id]
            self._round.withdrawn.append(replica_id)
        if replica_id in self.active:
            self.active.remove(replica_id)

    @property
    def round_done(self) -> bool:
        return self._round is not None and all(
            c.end_loss is not None for c in self._clients.values()
        )

    def finalize_round(self, now: float, qualities: dict[int, QualityScore]) -> FLRound:
        """Aggregate adapters, advance quality scores, apply early stopping."""
        if self._round is None:
            raise ConfigurationError("no round in progress")
        rnd = self._round
        reporting = [rid for rid in rnd.participants if rid in self._clients]
        if not reporting:
            raise ConfigurationError("round lost all participants")
        adapters = [self._clients[rid].adapter for rid in reporting]
        if any(a is None for a in adapters):
            raise ConfigurationError("round finalized before all clients reported")
        self.global_adapter = fedavg(adapters)  # type: ignore[arg-type]
        losses = [self._clients[rid].end_loss for rid in reporting]
        rnd.client_losses = {rid: self._clients[rid].end_loss for rid in reporting}  # type: ignore[misc]
        rnd.mean_loss = _exact_mean(losses)  # type: ignore[arg-type]
        rnd.end_time = now
        for rid in reporting:
            qualities[rid] = update_quality(
                qualities[rid], rnd.prev_mean_loss, rnd.mean_loss, self.quality_floor
            )
            if early_stop_check(
                self._clients[rid].start_loss, self._clients[rid].end_loss, self.rel_tol  # type: ignore[arg-type]
            ):
                rnd.stopped.append(rid)
        self.global_loss = rnd.mean_loss
        self.active = [rid for rid in reporting if rid not in rnd.stopped]
        if self.server not in self.active and self.active:
            self.server = select_server({rid: qualities[rid].value for rid in self.active})
        self.rounds.append(rnd)
        self._round = None
        self._clients = {}
        return rnd


def run_round(process: FLProcess, trainer, now: float, qualities: dict[int, QualityScore]) -> FLRound:
    """Execute one full round synchronously.

    ``trainer(replica_id, start_loss, adapter)`` performs the local training
    and returns ``(end_loss, adapter)``. Used by tests and offline studies;
    the engine drives the same process event by event.
    """
    rnd = process.begin_round(now)
    for rid in list(rnd.participants):
        if rid not in process._clients:  # withdrawn while iterating
            continue
        end_loss, adapter = trainer(rid, process._clients[rid].start_loss, process.global_adapter)
        process.report_client(rid, end_loss, adapter)
    return process.finalize_round(now, qualities)


def _exact_mean(values: list[float]) -> float:
    # Identical inputs must average to themselves exactly so noise-free
    # homogeneous runs keep bitwise-equal loss trajectories.
    first = values[0]
    if all(v == first for v in values):
        return first
    return float(math.fsum(values) / len(values))
