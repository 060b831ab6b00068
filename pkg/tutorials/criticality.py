"""
Critical directions of the margin
=================================

The normalized margin of a homogeneous net is a nonsmooth function on the
unit sphere. A direction is critical when the projected gradients of the
samples attaining the margin have 0 in their convex hull. This script
computes that distance on a few hand-checkable cases and on a max-margin
linear classifier.
"""

import numpy as np
from scipy.optimize import minimize

from marginflow.criticality import criticality_residual, min_norm_in_hull
from marginflow.datasets import Dataset, gen_linear_separable
from marginflow.net import NetSpec

linear = NetSpec((2, 1), "linear")

###############################################################################
# The distance from 0 to a convex hull, by Wolfe's algorithm

point, weights, norm = min_norm_in_hull([[1.0, 0.0], [0.0, 1.0]])
print("hull of e1, e2:", point, weights, norm)
print("hull of (1,0), (-1,0) contains 0:", min_norm_in_hull([[1.0, 0.0], [-1.0, 0.0]]).norm)

###############################################################################
# Two mirrored samples. Along (1, 0) both outputs equal 1 and are maximal.
# Along (0, 1) both outputs are 0 and tied, yet both gradients are (1, 0):
# the margin still grows when tilting towards (1, 0), so that direction is
# not critical.

pair = Dataset([[1.0, 0.0], [-1.0, 0.0]], [1, -1])
for u in ([1.0, 0.0], [0.0, 1.0]):
    rep = criticality_residual(linear, u, pair)
    print(f"u = {u}: margin {rep.active_set.margin:+.3f}, residual {rep.residual:.3f} "
          f"({rep.residual_kind})")

# a direction that minimizes the margin is critical too
single = Dataset([[1.0, 0.0]], [1])
print("worst direction of a single sample:", criticality_residual(linear, [-1.0, 0.0], single).residual)

###############################################################################
# The max-margin direction of a separable dataset, from a small QP:
# minimize ||w||^2 subject to y_i <w, x_i> >= 1.

data = gen_linear_separable(seed=3, n=15, d=2, margin=0.2)
Z = data.y[:, None] * data.X
qp = minimize(lambda w: w @ w, x0=np.array(data.meta["nu"]) * 10, jac=lambda w: 2 * w,
              constraints=[{"type": "ineq", "fun": lambda w: Z @ w - 1, "jac": lambda w: Z}],
              method="SLSQP", options={"ftol": 1e-15, "maxiter": 500})
u_star = qp.x / np.linalg.norm(qp.x)

rep = criticality_residual(linear, u_star, data)
print("at the QP direction: residual", rep.residual, "KKT residual", rep.kkt_residual)
print("samples on the margin:", rep.active_set.indices, "hull weights", rep.hull_weights)

for deg in (1, 5, 20):
    t = np.radians(deg)
    R = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    rep = criticality_residual(linear, R @ u_star, data)
    print(f"rotated by {deg:2d} deg: residual {rep.residual:.4f}")

# reports serialize to JSON for later inspection
print(sorted(rep.to_dict()))
