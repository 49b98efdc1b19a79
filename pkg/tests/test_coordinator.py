import math

import numpy as np
import pytest

from coserve.coordinator import (
    EfficiencyParams,
    LatencyModel,
    ModelSanityError,
    efficiency,
    fit_bivariate,
    fit_univariate,
    goodput,
    max_feasible_b,
    optimize,
    throughput,
)
from coserve.domain import BatchConfig, ConfigurationError
from coserve.perf import ReplicaPerfProfile, true_infer_latency


def brute_force_optimum(params, train_model, infer_model, tau_prime, cap):
    """Independent double-loop sweep over the feasible (B, b) grid.

    Feasibility is tested directly against the latency constraint; a pair is
    a candidate when its b cannot be increased without breaking the budget,
    mirroring the serve-as-much-as-possible rule.
    """
    def feasible(train_b, infer_b):
        return infer_model.alpha * infer_b + infer_model.beta * train_b + infer_model.gamma <= tau_prime

    best = None
    for train_b in range(1, cap + 1):
        for infer_b in range(0, 10000):
            if infer_b > 0 and not feasible(train_b, infer_b):
                continue
            if feasible(train_b, infer_b + 1):
                continue  # not the maximal b for this B
            t_train = train_model.predict(train_b, infer_b)
            value = (train_b / t_train) * efficiency(params, train_b)
            if best is None or value > best[2] or (value == best[2] and train_b < best[0]):
                best = (train_b, infer_b, value)
            break
    return best


class TestFitting:
    def test_exact_recovery_from_clean_bivariate_data(self):
        rng = np.random.default_rng(0)
        samples = []
        for _ in range(40):
            x1, x2 = float(rng.integers(1, 30)), float(rng.integers(0, 20))
            samples.append((x1, x2, 0.05 * x1 + 0.01 * x2 + 0.1))
        model = fit_bivariate(samples)
        assert model.alpha == pytest.approx(0.05, abs=1e-9)
        assert model.beta == pytest.approx(0.01, abs=1e-9)
        assert model.gamma == pytest.approx(0.1, abs=1e-9)
        assert model.r_squared == pytest.approx(1.0, abs=1e-12)
        assert not model.degraded

    def test_constant_x2_degrades_to_univariate(self):
        samples = [(float(x), 7.0, 0.05 * x + 0.3) for x in range(1, 8)]
        model = fit_bivariate(samples)
        assert model.degraded and model.beta == 0.0
        assert model.alpha == pytest.approx(0.05, abs=1e-9)
        assert model.gamma == pytest.approx(0.3, abs=1e-9)  # absorbs the x2 term

    def test_constant_x1_fits_x2_slope(self):
        samples = [(4.0, float(x), 0.01 * x + 0.5) for x in range(1, 8)]
        model = fit_bivariate(samples)
        assert model.degraded and model.alpha == 0.0
        assert model.beta == pytest.approx(0.01, abs=1e-9)

    def test_bivariate_beats_univariate_on_interference_data(self):
        # noisy samples with real cross-task interference: the bivariate fit
        # must explain strictly more variance than batch-size alone
        profile = ReplicaPerfProfile(noise_cv=0.05)
        rng = np.random.default_rng(7)
        samples = []
        for _ in range(200):
            b = int(rng.integers(16, 30))
            train_b = int(rng.integers(0, 17))
            latency = true_infer_latency(profile, BatchConfig(train_b, b), rng)
            samples.append((float(b), float(train_b), latency))
        bivariate = fit_bivariate(samples)
        univariate = fit_univariate([(b, y) for b, _, y in samples])
        assert bivariate.r_squared > univariate.r_squared

    def test_minimum_sample_count(self):
        with pytest.raises(ConfigurationError):
            fit_bivariate([(1.0, 1.0, 1.0), (2.0, 2.0, 2.0)])


class TestThroughputEfficiency:
    def test_throughput_fixture(self):
        assert throughput(8, 2.0) == pytest.approx(4.0, abs=1e-12)

    def test_throughput_zero_batch(self):
        assert throughput(0, 2.0) == 0.0

    def test_throughput_linear_in_batch(self):
        assert throughput(16, 2.0) == pytest.approx(2 * throughput(8, 2.0), abs=1e-12)

    def test_throughput_guards_time(self):
        with pytest.raises(ConfigurationError):
            throughput(8, 0.0)

    def test_efficiency_identity_at_initial_batch(self):
        params = EfficiencyParams(scale_a=10.0, initial_batch=4, grad_noise=2.0, loss_reduction=0.1)
        assert efficiency(params, 4) == pytest.approx(1.0, abs=1e-15)

    def test_efficiency_fixture(self):
        # (10*2*0.1 + 4) / (10*2*0.1 + 8) = 6/10
        params = EfficiencyParams(scale_a=10.0, initial_batch=4, grad_noise=2.0, loss_reduction=0.1)
        assert efficiency(params, 8) == pytest.approx(0.6, abs=1e-12)

    def test_efficiency_vanishes_for_huge_batches(self):
        params = EfficiencyParams(scale_a=10.0, initial_batch=4, grad_noise=2.0, loss_reduction=0.1)
        assert efficiency(params, 10**9) < 1e-6

    def test_efficiency_strictly_decreasing_beyond_initial_batch(self):
        params = EfficiencyParams(scale_a=10.0, initial_batch=4, grad_noise=1.0, loss_reduction=0.2)
        values = [efficiency(params, b) for b in range(4, 40)]
        assert all(a > b for a, b in zip(values, values[1:]))


class TestGoodput:
    train_model = LatencyModel(alpha=0.05, beta=0.01, gamma=0.1)
    params = EfficiencyParams(scale_a=10.0, initial_batch=4, grad_noise=2.0, loss_reduction=0.1)

    def test_zero_batch_zero_goodput(self):
        assert goodput(self.params, self.train_model, 0, 10) == 0.0

    def test_initial_batch_equals_raw_throughput(self):
        value = goodput(self.params, self.train_model, 4, 12)
        assert value == pytest.approx(4 / self.train_model.predict(4, 12), abs=1e-12)

    def test_interference_lowers_goodput(self):
        assert goodput(self.params, self.train_model, 8, 20) < goodput(
            self.params, self.train_model, 8, 4
        )

    def test_nonpositive_prediction_raises_sanity_error(self):
        broken = LatencyModel(alpha=-0.1, beta=0.0, gamma=0.05)
        with pytest.raises(ModelSanityError):
            goodput(self.params, broken, 8, 0)


class TestMaxFeasibleB:
    infer_model = LatencyModel(alpha=0.02, beta=0.004, gamma=0.1)

    def test_fixture(self):
        assert max_feasible_b(self.infer_model, 25, 0.5) == 15

    def test_no_budget_gives_zero(self):
        assert max_feasible_b(self.infer_model, 0, 0.05) == 0

    def test_b_zero_matches_serving_bound_formula(self):
        # with B=0 this is exactly floor((tau' - intercept) / slope)
        model = LatencyModel(alpha=0.02, beta=0.004, gamma=0.1)
        assert max_feasible_b(model, 0, 0.5) == math.floor((0.5 - 0.1) / 0.02)

    def test_requires_positive_slope(self):
        with pytest.raises(ConfigurationError):
            max_feasible_b(LatencyModel(alpha=0.0, beta=0.0, gamma=0.1), 0, 0.5)


class TestOptimize:
    def test_single_feasible_candidate(self):
        params = EfficiencyParams(scale_a=10.0, initial_batch=1, grad_noise=0.0, loss_reduction=0.0)
        train_model = LatencyModel(alpha=0.05, beta=0.01, gamma=0.1)
        infer_model = LatencyModel(alpha=0.02, beta=0.004, gamma=0.08)
        result = optimize(params, train_model, infer_model, tau_prime=0.5, train_batch_cap=1)
        assert result.train_batch == 1

    def test_matches_independent_brute_force_on_100_draws(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            params = EfficiencyParams(
                scale_a=float(rng.uniform(1.0, 50.0)),
                initial_batch=int(rng.integers(1, 8)),
                grad_noise=float(rng.uniform(0.0, 20.0)),
                loss_reduction=float(rng.uniform(0.0, 0.1)),
            )
            train_model = LatencyModel(
                alpha=float(rng.uniform(0.01, 0.1)),
                beta=float(rng.uniform(0.001, 0.05)),
                gamma=float(rng.uniform(0.01, 0.2)),
            )
            infer_model = LatencyModel(
                alpha=float(rng.uniform(0.005, 0.05)),
                beta=float(rng.uniform(0.001, 0.02)),
                gamma=float(rng.uniform(0.01, 0.2)),
            )
            tau_prime = float(rng.uniform(0.1, 1.0))
            cap = int(rng.integers(4, 64))
            result = optimize(params, train_model, infer_model, tau_prime, cap)
            expected = brute_force_optimum(params, train_model, infer_model, tau_prime, cap)
            assert (result.train_batch, result.infer_batch) == expected[:2]
            assert result.goodput == pytest.approx(expected[2], abs=1e-12)

    def test_growing_budget_admits_more_inference(self):
        # the serve-as-much-as-possible rule pins b to the largest feasible
        # value, so a larger budget always admits at least as much inference
        # (goodput itself may drop: more co-located inference slows training)
        params = EfficiencyParams(scale_a=10.0, initial_batch=4, grad_noise=2.0, loss_reduction=0.05)
        train_model = LatencyModel(alpha=0.05, beta=0.01, gamma=0.1)
        infer_model = LatencyModel(alpha=0.02, beta=0.004, gamma=0.08)
        results = [
            optimize(params, train_model, infer_model, tau, 32)
            for tau in (0.2, 0.3, 0.5, 0.8, 1.2)
        ]
        for narrow, wide in zip(results, results[1:]):
            for p_narrow, p_wide in zip(narrow.sweep, wide.sweep):
                assert p_wide.infer_batch >= p_narrow.infer_batch

    def test_unit_rescaling_invariance(self):
        # measuring time in milliseconds instead of seconds must not move the argmax
        params = EfficiencyParams(scale_a=10.0, initial_batch=4, grad_noise=2.0, loss_reduction=0.05)
        train_model = LatencyModel(alpha=0.05, beta=0.01, gamma=0.1)
        infer_model = LatencyModel(alpha=0.02, beta=0.004, gamma=0.08)
        scaled_train = LatencyModel(alpha=50.0, beta=10.0, gamma=100.0)
        scaled_infer = LatencyModel(alpha=20.0, beta=4.0, gamma=80.0)
        a = optimize(params, train_model, infer_model, 0.5, 32)
        b = optimize(params, scaled_train, scaled_infer, 500.0, 32)
        assert (a.train_batch, a.infer_batch) == (b.train_batch, b.infer_batch)

    def test_inference_starved_flag(self):
        params = EfficiencyParams(scale_a=10.0, initial_batch=4, grad_noise=2.0, loss_reduction=0.05)
        train_model = LatencyModel(alpha=0.05, beta=0.01, gamma=0.1)
        infer_model = LatencyModel(alpha=0.02, beta=0.004, gamma=0.08)
        result = optimize(params, train_model, infer_model, tau_prime=0.05, train_batch_cap=16)
        assert result.inference_starved and result.infer_batch == 0
