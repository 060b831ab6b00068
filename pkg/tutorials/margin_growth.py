"""
Norm growth and the effective step on separable data
=====================================================

Train a linear predictor and a two-layer ReLU net with full-batch gradient
descent on the exponential loss, then look at how the weight norm, the loss
and the effective step behave once the data is separated.
"""

import numpy as np

from marginflow.datasets import gen_linear_separable
from marginflow.dynamics import effective_step_report, fit_log_growth, fit_loss_decay
from marginflow.losses import EXP
from marginflow.net import NetSpec
from marginflow.optimizer import ExperimentConfig, StepSchedule, run

# 20 points in the unit disc, at least 0.3 away from a random line through 0
data = gen_linear_separable(seed=0, n=20, d=2, margin=0.3)
print("certified margin of the generating direction:", data.meta["certified_margin"])

###############################################################################
# Two homogeneous predictors: degree 1 and degree 2 in the weights.

nets = {
    "linear": NetSpec((2, 1), "linear"),
    "relu": NetSpec((2, 16, 1), "relu"),
}

trajectories = {}
for name, spec in nets.items():
    cfg = ExperimentConfig(net=spec, loss=EXP, gamma=StepSchedule("constant", 0.1),
                           iterations=50_000, record_stride=50, snapshot_stride=5_000)
    trajectories[name] = run(cfg, data)
    print(f"{name}: separated at k = {trajectories[name].k_sep}")

###############################################################################
# After separation ||w||^L grows like log k and the loss decays roughly
# like 1/k, so both look like straight lines against log k.

for name, traj in trajectories.items():
    L = traj.config.net.depth
    window = (traj.k_sep, traj.records[-1].k)
    g = fit_log_growth(traj.records, L, window, traj.k_sep)
    slope, _, r2 = fit_loss_decay(traj.records, window)
    print(f"{name}: ||w||^{L} vs log k slope {g.slope:.3f} (R^2 {g.r_squared:.4f}); "
          f"log loss vs log k slope {slope:.3f} (R^2 {r2:.4f})")

###############################################################################
# The effective step is the step the normalized direction u = w/||w|| sees.
# It shrinks, roughly like 1/k, but not fast enough to be summable: each
# decade of iterations still moves the direction by a comparable amount.

for name, traj in trajectories.items():
    rep = effective_step_report(traj.records, traj.k_sep)
    print(f"{name}: power-law exponent {rep['power_law_exponent']:.3f}, "
          f"last decade / previous decade {rep['decade_ratio']:.3f}")

# the records are plain arrays, ready for any plotting tool
k = trajectories["relu"].ks
norm = trajectories["relu"].column("norm_w")
margin = trajectories["relu"].column("normalized_margin")
print(np.column_stack([k, norm, margin])[::200])
