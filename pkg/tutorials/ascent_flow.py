"""
Following the margin uphill on the sphere
=========================================

Integrate the ascent flow of the margin with forward Euler steps along the
minimum-norm element of the projected hull, and compare the limit with the
max-margin direction of a linear classifier and with a two-layer net.
"""

import numpy as np

from marginflow.criticality import criticality_residual, euler_di_flow
from marginflow.datasets import gen_linear_separable, gen_xor_ring
from marginflow.net import NetSpec, init_weights

rng = np.random.default_rng(0)

###############################################################################
# A linear classifier. Started anywhere the margin is positive, the flow
# ends at the unique max-margin direction.

data = gen_linear_separable(seed=0, n=20, d=2, margin=0.3)
spec = NetSpec((2, 1), "linear")
nu = np.array(data.meta["nu"])
t = np.radians(20)
u0 = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]]) @ nu

path = euler_di_flow(spec, u0, data, h=1e-3, horizon=20.0)
print(f"steps {path.steps}, converged {path.converged}, rejected steps {path.rejections}")
print(f"margin from {path.margin[0]:.4f} to {path.margin[-1]:.6f}")
print("smallest change of the margin between steps:", np.diff(path.margin).min())

###############################################################################
# Started on the wrong side the flow can stop at a critical direction with a
# negative margin: the margin of a linear classifier on the circle is a
# minimum of shifted cosines and has several local maxima.

path = euler_di_flow(spec, -u0, data)
print(f"from the opposite side: margin {path.margin[-1]:.4f}, residual {path.final_residual:.1e}")

###############################################################################
# A two-layer ReLU net on XOR-like data. Kinks are crossed along the way;
# the step size is halved whenever a step would lower the margin.

xor = gen_xor_ring(seed=0, n=16)
net = NetSpec((2, 4, 1), "relu")
w0 = init_weights(net, rng).data
path = euler_di_flow(net, w0 / np.linalg.norm(w0), xor, horizon=1.0)
print(f"relu net: margin {path.margin[0]:.4f} -> {path.margin[-1]:.4f} after {path.steps} steps, "
      f"final step {path.final_h:.1e}")
rep = criticality_residual(net, path.u[-1], xor)
print("residual at the end:", rep.residual, rep.residual_kind)

# the path is a table of (t, u, margin, residual)
path.to_csv("ascent_flow.csv")
