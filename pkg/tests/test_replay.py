import pytest

from coserve.oracle import enumerate_optimal, evaluate_schedule, random_instance
from coserve.replay import replay_subflow


class TestReplay:
    def test_realized_schedule_is_feasible_and_dominated(self, tmp_path):
        for seed in (0, 3, 11):
            instance = random_instance(seed, n_requests=8, n_replicas=2, n_slots=6)
            optimum = enumerate_optimal(instance)
            realized, schedule = replay_subflow(instance, tmp_path)
            # the evaluator enforces constraints (a), (b), (d); a violation raises
            assert evaluate_schedule(instance, schedule) == pytest.approx(realized)
            assert realized <= optimum.q_goodput + 1e-9

    def test_replay_starts_on_slot_grid(self, tmp_path):
        instance = random_instance(1, n_requests=6, n_replicas=2, n_slots=6)
        _, schedule = replay_subflow(instance, tmp_path)
        assert schedule
        for batch in schedule:
            multiple = batch.start / instance.slot_width
            assert abs(multiple - round(multiple)) < 1e-6

    def test_replay_deterministic(self, tmp_path):
        instance = random_instance(2, n_requests=8, n_replicas=2, n_slots=6)
        a = replay_subflow(instance, tmp_path)
        b = replay_subflow(instance, tmp_path)
        assert a == b
