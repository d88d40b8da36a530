#!/usr/bin/env python3
# Van der Pol, end to end on a laptop budget.
#
# The full experiment trains on 10 000 simulations for 200 epochs. Here we
# shrink both so the whole script finishes in well under a minute, then walk
# one out-of-distribution observation (nu = 3, outside the [0, 2.5] training
# box) through estimate -> OOD gate -> Gauss-Newton -> head fine-tuning.
from tsfine.harness import preset, pretrain, estimate, finetune_observation

cfg = preset("vdp", m=2000, training={"epochs": 30},
             finetune={"m_ft": 200, "epochs": 40})
twin = cfg.twin()

# %% offline stage
params, bank, history = pretrain(cfg)
print(f"trained on {bank.features.shape[0]} simulations, "
      f"{bank.features.shape[1]} AR coefficients each")
print(f"best validation loss {history['best_val_loss']:.4f} at epoch {history['best_epoch']}")

# %% a quick in-distribution sanity check
for nu in (0.5, 1.5, 2.3):
    x = twin.features([[nu]], [1000 + int(10 * nu)])[0]
    print(f"nu={nu:.1f}  TS-pre={estimate(params, x, cfg)[0]:.3f}")

# %% the shifted plant
truth = 3.0
z = twin.simulate([truth], seed=424242)
x_obs = twin.compress(z.outputs)[0]
print(f"\nobserved plant nu={truth}; the regressor never saw anything above 2.5")

out = finetune_observation(x_obs, params, cfg, key=7)
d = out.decision
print(f"TS-pre estimate   {out.theta_pre[0]:.3f}")
print(f"gate: S_obs={d.s_obs:.3g}, bootstrap threshold={d.threshold:.3g} -> "
      f"{'OOD' if d.is_ood else 'in-distribution'}")

if not out.skipped:
    g = out.gn
    print("GN objective:", "  ".join(f"{v:.3g}" for v in g.trace))
    print(f"GN estimate       {g.theta_gn[0]:.3f}")
    print(f"fine-tune cloud   {out.cloud.samples.shape[0]} samples")
    print(f"TS-fine estimate  {out.theta_fine[0]:.3f}")
    err_pre = (out.theta_pre[0] - truth) ** 2
    err_fine = (out.theta_fine[0] - truth) ** 2
    print(f"squared error {err_pre:.3g} -> {err_fine:.3g}")

# The fine-tuned network stays sharp near the new operating point but is not
# meant to be used back inside the original box; the gate decides which copy
# to deploy for each new observation.
