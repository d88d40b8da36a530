#!/usr/bin/env python3
"""How often does the bootstrap gate fire?

The gate compares the whitened distance of the observed features to a bank
of K simulations run at the current estimate. Under the null (observation
drawn from the same simulator at that parameter) the rejection rate should
sit close to alpha. We check that directly, skipping the regressor: the bank
is built at the true parameter, so any miscalibration comes from the test
itself (finite K, the ridge on the covariance) rather than from estimation
error.
"""
import numpy as np

from tsfine.harness import preset
from tsfine.ood import build_bank, ood_test

cfg = preset("vdp")
twin = cfg.twin()
rng = np.random.default_rng(3)

trials = 300
for alpha in (0.05, 0.10, 0.20):
    hits = 0
    for i in range(trials):
        nu = rng.uniform(0.0, 2.5)
        x = twin.features([[nu]], [50_000 + i])[0]
        bank = build_bank([nu], cfg.ood.bank_size, twin, base_seed=10_000 * (i + 1))
        hits += ood_test(x, bank, alpha=alpha).is_ood
    rate = hits / trials
    se = np.sqrt(alpha * (1 - alpha) / trials)
    print(f"alpha={alpha:.2f}  rejection rate {rate:.3f}  (+/- {2 * se:.3f} at 2 s.e.)")

# And the power side: a plant at nu = 5 judged against a bank at nu = 2.5,
# roughly what a regressor clipped to the edge of its box would hand us.
x = twin.features([[5.0]], [77])[0]
bank = build_bank([2.5], cfg.ood.bank_size, twin, base_seed=99)
dec = ood_test(x, bank, alpha=0.10)
print(f"\nnu=5 against a nu=2.5 bank: S_obs={dec.s_obs:.3g}, threshold {dec.threshold:.3g}")
