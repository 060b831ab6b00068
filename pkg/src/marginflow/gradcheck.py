"""Randomized checks of the homogeneity identities and of backprop against finite differences."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from .net import NetSpec, batch_outputs, batch_signed_and_grads, homogeneity_check, init_weights, split_layers

EULER_THRESHOLD = 1e-9
HOMOGENEITY_THRESHOLD = 1e-9
FD_THRESHOLD = 1e-5
HOMOGENEITY_SCALES = (0.5, 2.0, 10.0)


@dataclass
class GradCheckReport:
    spec: dict
    cases: int
    max_euler_error: float
    max_homogeneity_error: float
    max_field_homogeneity_error: float
    max_fd_error: float
    fd_cases: int

    @property
    def passed(self) -> bool:
        return (self.max_euler_error <= EULER_THRESHOLD
                and self.max_homogeneity_error <= HOMOGENEITY_THRESHOLD
                and self.max_field_homogeneity_error <= HOMOGENEITY_THRESHOLD
                and self.max_fd_error <= FD_THRESHOLD)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        d["thresholds"] = {"euler": EULER_THRESHOLD, "homogeneity": HOMOGENEITY_THRESHOLD,
                           "finite_difference": FD_THRESHOLD}
        return d


def min_abs_preactivation(spec: NetSpec, w, x) -> float:
    """Distance of the nearest hidden pre-activation to its kink."""
    a = np.atleast_2d(x)
    best = np.inf
    mats = split_layers(np.asarray(w, float), spec.shapes)
    for j, W in enumerate(mats):
        z = a @ W.T
        if j < spec.depth - 1 or spec.output_activation:
            if spec.activation != "linear":
                best = min(best, float(np.min(np.abs(z))))
            a = np.where(z > 0, z, 0.0 if spec.activation == "relu" else spec.slope * z)
        else:
            a = z
    return best


def finite_difference_grad(spec: NetSpec, w, x, y, h: float = 1e-6) -> np.ndarray:
    """Central differences of ``y Phi(x; w)``."""
    w = np.asarray(w, float)
    X = np.atleast_2d(x)
    out = np.empty_like(w)
    for j in range(w.size):
        e = np.zeros_like(w)
        e[j] = h
        out[j] = y * (batch_outputs(spec, w + e, X)[0] - batch_outputs(spec, w - e, X)[0]) / (2 * h)
    return out


def relative_error(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(1.0, np.linalg.norm(b)))


def check_gradients(spec: NetSpec, cases: int = 200, seed: int = 0, kink: float = None,
                    fault: Optional[Callable] = None, off_kink: float = 1e-3,
                    fd_step: float = 1e-6) -> GradCheckReport:
    """Euler identity, output and field homogeneity, and finite differences.

    ``fault`` maps a gradient to a corrupted one before it is compared; it is
    a test hook for confirming that broken gradients are caught.
    """
    rng = np.random.default_rng(seed)
    L = spec.depth
    e = spec.default_kink().e if kink is None else kink
    eu = hom = fhom = fd = 0.0
    fd_cases = 0
    for _ in range(cases):
        w = init_weights(spec, rng).data
        x = rng.standard_normal(spec.input_dim)
        y = float(rng.choice((-1.0, 1.0)))
        p, G = batch_signed_and_grads(spec, w, x[None, :], np.array([y]), e)
        g = G[0] if fault is None else fault(G[0])
        lp = L * p[0]
        eu = max(eu, abs(float(g @ w) - lp) / (1.0 + abs(lp)))
        hom = max(hom, homogeneity_check(spec, w, x, HOMOGENEITY_SCALES))
        for lam in HOMOGENEITY_SCALES:
            _, Gl = batch_signed_and_grads(spec, lam * w, x[None, :], np.array([y]), e)
            gl = Gl[0] if fault is None else fault(Gl[0])
            fhom = max(fhom, relative_error(gl, lam ** (L - 1) * g))
        if min_abs_preactivation(spec, w, x) > off_kink:
            fd = max(fd, relative_error(g, finite_difference_grad(spec, w, x, y, fd_step)))
            fd_cases += 1
    return GradCheckReport(spec.to_dict(), cases, eu, hom, fhom, fd, fd_cases)
