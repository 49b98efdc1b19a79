#!/usr/bin/env python3
"""Batch-size coordination: the goodput surface and its constrained optimum.

Fits latency surfaces from clean ground-truth samples, then sweeps the
training batch size; each candidate carries the largest inference batch that
still meets the latency budget.
"""

from coserve.coordinator import EfficiencyParams, fit_bivariate, goodput, max_feasible_b, optimize
from coserve.domain import BatchConfig
from coserve.perf import ReplicaPerfProfile, true_infer_latency, true_train_latency

profile = ReplicaPerfProfile(noise_cv=0.0)

train_samples, infer_samples = [], []
for train_b in (1, 4, 8, 16):
    for b in (0, 4, 8, 12):
        train_samples.append((float(train_b), float(b), true_train_latency(profile, BatchConfig(train_b, b))))
for b in (16, 20, 24, 28):
    for train_b in (0, 4, 8, 16):
        infer_samples.append((float(b), float(train_b), true_infer_latency(profile, BatchConfig(train_b, b))))

train_model = fit_bivariate(train_samples)
infer_model = fit_bivariate(infer_samples)
print(f"fitted T_train = {train_model.alpha:.3f} B + {train_model.beta:.3f} b + {train_model.gamma:.3f}")
print(f"fitted T_infer = {infer_model.alpha:.3f} b + {infer_model.beta:.3f} B + {infer_model.gamma:.3f}")

tau_prime = 0.45
print(f"\nlatency budget tau' = {tau_prime}s")
print(f"{'B':>3} {'b_max(B)':>9} {'goodput':>9}")
params = EfficiencyParams(scale_a=300.0, initial_batch=4, grad_noise=8.0, loss_reduction=0.004)
for train_b in (1, 2, 4, 6, 8, 12, 16, 24, 32):
    b = max_feasible_b(infer_model, train_b, tau_prime)
    value = goodput(params, train_model, train_b, b)
    bar = "#" * int(value * 4)
    print(f"{train_b:>3} {b:>9} {value:>9.3f} {bar}")

result = optimize(params, train_model, infer_model, tau_prime, train_batch_cap=64)
print(f"\noptimum: B*={result.train_batch}, b*={result.infer_batch}, goodput {result.goodput:.3f}")

print("\nshrinking budget shifts the frontier:")
for tau in (0.45, 0.3, 0.2, 0.15):
    r = optimize(params, train_model, infer_model, tau, train_batch_cap=64)
    flag = " (inference starved)" if r.inference_starved else ""
    print(f"  tau'={tau:4.2f}s -> B*={r.train_batch:2d}, b*={r.infer_batch:2d}{flag}")
