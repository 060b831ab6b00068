"""Bias-free homogeneous feedforward networks.

Forward evaluation, backpropagation with an explicit choice of the activation
derivative at its kink, and helpers that check positive homogeneity and the
Euler identity ``<a(w), w> = L p(w)``.

Weights are stored as one flat array. Layer ``j`` holds a matrix of shape
``(layer_widths[j + 1], layer_widths[j])`` in row-major order, so the network
computes ``W_L s(W_{L-1} ... s(W_1 x))``.
"""

from __future__ import annotations

import itertools
from functools import cached_property
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "leaky_relu", "linear")


class ShapeError(ValueError):
    """Dimension mismatch between a network, its weights and its inputs."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


@dataclass(frozen=True)
class NetSpec:
    """Architecture of a bias-free fully-connected network.

    Parameters
    ----------
    layer_widths : sequence of int
        ``(d_in, h_1, ..., h_{L-1}, 1)``.
    activation : {"relu", "leaky_relu", "linear"}
    slope : float
        Negative-side slope of the leaky ReLU, in (0, 1).
    output_activation : bool
        Apply the activation to the output unit as well. Keeps the network
        L-homogeneous and allows one-layer nets such as ``relu(w . x)``.
    """

    layer_widths: tuple
    activation: str = "relu"
    slope: float = 0.01
    output_activation: bool = False

    def __post_init__(self):
        widths = tuple(int(h) for h in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("need at least an input and an output width")
        if any(h < 1 for h in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        if widths[-1] != 1:
            raise ValueError("output width must be 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.activation == "leaky_relu" and not 0.0 < self.slope < 1.0:
            raise ValueError("leaky ReLU slope must lie in (0, 1)")

    @property
    def depth(self) -> int:
        """Number of weight layers, which is also the homogeneity degree."""
        return len(self.layer_widths) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @cached_property
    def shapes(self) -> list:
        w = self.layer_widths
        return [(w[j + 1], w[j]) for j in range(self.depth)]

    @cached_property
    def n_params(self) -> int:
        return sum(r * c for r, c in self.shapes)

    def kink_interval(self) -> tuple:
        """Clarke subdifferential of the activation at 0."""
        if self.activation == "relu":
            return (0.0, 1.0)
        if self.activation == "leaky_relu":
            return (self.slope, 1.0)
        return (1.0, 1.0)

    def default_kink(self) -> "KinkSelection":
        return KinkSelection(self.kink_interval()[0])

    def to_dict(self) -> dict:
        return {
            "layer_widths": list(self.layer_widths),
            "activation": self.activation,
            "slope": self.slope,
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        return cls(
            layer_widths=tuple(d["layer_widths"]),
            activation=d.get("activation", "relu"),
            slope=float(d.get("slope", 0.01)),
            output_activation=bool(d.get("output_activation", False)),
        )


@dataclass(frozen=True)
class KinkSelection:
    """The value used for the activation derivative at exactly zero."""

    e: float = 0.0

    def validate(self, spec: NetSpec):
        lo, hi = spec.kink_interval()
        if not lo <= self.e <= hi:
            raise ValueError(
                f"kink selection {self.e} outside the subdifferential [{lo}, {hi}]"
            )
        return self


@dataclass
class WeightVector:
    data: np.ndarray
    shapes: list = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float).ravel()
        self.shapes = [tuple(int(v) for v in s) for s in self.shapes]
        total = sum(r * c for r, c in self.shapes)
        if total != self.data.size:
            raise ShapeError(
                f"shape table covers {total} entries but data has {self.data.size}"
            )

    @classmethod
    def from_layers(cls, layers: Sequence) -> "WeightVector":
        mats = [np.atleast_2d(np.asarray(m, dtype=float)) for m in layers]
        return cls(np.concatenate([m.ravel() for m in mats]), [m.shape for m in mats])

    def layers(self) -> list:
        return split_layers(self.data, self.shapes)

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))

    def scaled(self, lam: float) -> "WeightVector":
        return WeightVector(lam * self.data, list(self.shapes))

    def __len__(self):
        return self.data.size


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    y: int

    def __post_init__(self):
        if self.y not in (-1, 1):
            raise ValueError(f"label must be -1 or +1, got {self.y}")


def split_layers(flat: np.ndarray, shapes) -> list:
    out, start = [], 0
    for r, c in shapes:
        out.append(flat[start:start + r * c].reshape(r, c))
        start += r * c
    return out


def as_flat(spec: NetSpec, w) -> np.ndarray:
    """Validate ``w`` against ``spec`` and return the flat float array.

    ``w`` may be a :class:`WeightVector`, a list of layer matrices or any
    array with the right number of entries.
    """
    if isinstance(w, WeightVector):
        for j, (got, want) in enumerate(zip(w.shapes, spec.shapes)):
            if tuple(got) != tuple(want):
                raise ShapeError(
                    f"layer {j}: weight shape {tuple(got)} does not match {want}", layer=j
                )
        if len(w.shapes) != spec.depth:
            raise ShapeError(
                f"weights have {len(w.shapes)} layers, network has {spec.depth}",
                layer=min(len(w.shapes), spec.depth),
            )
        return w.data
    if isinstance(w, (list, tuple)) and w and np.ndim(w[0]) == 2:
        return as_flat(spec, WeightVector.from_layers(w))
    flat = np.asarray(w, dtype=float).ravel()
    if flat.size != spec.n_params:
        # locate the first layer that cannot be filled
        start = 0
        for j, (r, c) in enumerate(spec.shapes):
            start += r * c
            if start > flat.size:
                break
        raise ShapeError(
            f"expected {spec.n_params} weights, got {flat.size} (runs out at layer {j})",
            layer=j,
        )
    return flat


def _check_inputs(spec: NetSpec, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != spec.input_dim:
        raise ShapeError(
            f"layer 0: input has dimension {X.shape[1]}, expected {spec.input_dim}",
            layer=0,
        )
    return X


def _activate(spec: NetSpec, z: np.ndarray, e: float):
    """Return activation values and the selected derivative."""
    if spec.activation == "linear":
        return z, np.ones_like(z)
    pos = z > 0
    if spec.activation == "relu":
        deriv = pos.astype(float)
        a = z * deriv
    else:
        deriv = np.where(pos, 1.0, spec.slope)
        a = z * deriv
    # literal equality: only constructed inputs land exactly on a kink
    at_kink = z == 0
    if at_kink.any():
        deriv[at_kink] = e
    return a, deriv


def _forward_trace(spec: NetSpec, mats, X, e):
    """Forward pass keeping layer inputs and activation derivatives."""
    L = spec.depth
    inputs, derivs, pre = [], [], []
    a = X
    for j, W in enumerate(mats):
        inputs.append(a)
        z = a @ W.T
        pre.append(z)
        if j < L - 1 or spec.output_activation:
            a, d = _activate(spec, z, e)
        else:
            a, d = z, np.ones_like(z)
        derivs.append(d)
    return a[:, 0], inputs, derivs, pre


def _backward(mats, inputs, derivs, y):
    """Per-sample gradients of y * Phi, flattened in weight order."""
    n = y.shape[0]
    delta = y[:, None] * derivs[-1]
    grads = [None] * len(mats)
    for j in range(len(mats) - 1, -1, -1):
        grads[j] = (delta[:, :, None] * inputs[j][:, None, :]).reshape(n, -1)
        if j > 0:
            delta = (delta @ mats[j]) * derivs[j - 1]
    return np.concatenate(grads, axis=1)


def batch_outputs(spec: NetSpec, w, X) -> np.ndarray:
    """Network outputs for each row of ``X``."""
    flat = as_flat(spec, w)
    X = _check_inputs(spec, X)
    out, _, _, _ = _forward_trace(spec, split_layers(flat, spec.shapes), X, 0.0)
    return out


def batch_signed_and_grads(spec: NetSpec, w, X, y, kink: KinkSelection | float = None):
    """Signed outputs ``p_i = y_i Phi(x_i; w)`` and their backprop gradients.

    Returns
    -------
    p : ndarray, shape (n,)
    G : ndarray, shape (n, n_params)
        Row ``i`` is the conservative-field selection for sample ``i``.
    """
    flat = as_flat(spec, w)
    X = _check_inputs(spec, X)
    y = np.asarray(y, dtype=float).reshape(-1)
    return _signed_grads(spec, flat, X, y, _kink_value(spec, kink))


def _signed_grads(spec, flat, X, y, e):
    # unchecked kernel used inside the training loop
    mats = split_layers(flat, spec.shapes)
    out, inputs, derivs, _ = _forward_trace(spec, mats, X, e)
    return y * out, _backward(mats, inputs, derivs, y)


def _kink_value(spec, kink):
    if kink is None:
        return spec.default_kink().e
    if isinstance(kink, KinkSelection):
        return kink.validate(spec).e
    return KinkSelection(float(kink)).validate(spec).e


def forward(spec: NetSpec, w, x) -> float:
    """Network output ``Phi(x; w)`` for a single input."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ShapeError("forward expects a single feature vector", layer=0)
    return float(batch_outputs(spec, w, x)[0])


def signed_output(spec: NetSpec, w, sample: Sample) -> float:
    return sample.y * forward(spec, w, sample.x)


def conservative_grad(spec: NetSpec, w, sample: Sample, kink=None) -> WeightVector:
    """Backprop selection of the conservative field of ``p(w) = y Phi(x; w)``.

    Any activation derivative at exactly zero pre-activation is replaced by
    ``kink.e``.
    """
    _, G = batch_signed_and_grads(spec, w, np.asarray(sample.x)[None, :], [sample.y], kink)
    return WeightVector(G[0], spec.shapes)


def zero_preactivations(spec: NetSpec, w, x) -> list:
    """Positions ``(layer, unit)`` whose pre-activation is exactly zero.

    Only layers followed by a kinked activation are reported.
    """
    if spec.activation == "linear":
        return []
    flat = as_flat(spec, w)
    X = _check_inputs(spec, x)
    _, _, _, pre = _forward_trace(spec, split_layers(flat, spec.shapes), X, 0.0)
    L = spec.depth
    out = []
    for j, z in enumerate(pre):
        if j == L - 1 and not spec.output_activation:
            continue
        out.extend((j, int(u)) for u in np.flatnonzero(z[0] == 0))
    return out


def kink_enumerated_grads(spec: NetSpec, w, x, y, kink=None, max_kinks: int = 8):
    """All backprop outcomes at extreme kink selections for one sample.

    Each zero pre-activation independently takes either endpoint of the
    activation's subdifferential at 0. The backprop output is multilinear in
    these per-unit choices, so the hull of the vertex outcomes is the hull of
    the whole set-valued field.

    Returns
    -------
    grads : ndarray, shape (m, n_params)
    complete : bool
        False when more than ``max_kinks`` units sit on a kink; then only the
        configured selection is returned.
    """
    flat = as_flat(spec, w)
    X = _check_inputs(spec, x)
    yv = np.array([float(y)])
    e = _kink_value(spec, kink)
    mats = split_layers(flat, spec.shapes)
    _, inputs, derivs, pre = _forward_trace(spec, mats, X, e)
    zeros = zero_preactivations(spec, flat, X[0])
    if not zeros:
        return _backward(mats, inputs, derivs, yv), True
    if len(zeros) > max_kinks:
        return _backward(mats, inputs, derivs, yv), False
    lo, hi = spec.kink_interval()
    outs = []
    for combo in itertools.product((lo, hi), repeat=len(zeros)):
        ds = [d.copy() for d in derivs]
        for (j, u), val in zip(zeros, combo):
            ds[j][0, u] = val
        outs.append(_backward(mats, inputs, ds, yv)[0])
    return np.unique(np.array(outs), axis=0), True


def homogeneity_check(spec: NetSpec, w, x, lambdas) -> float:
    """Largest relative deviation from ``Phi(x; lam w) = lam^L Phi(x; w)``."""
    flat = as_flat(spec, w)
    lambdas = np.asarray(lambdas, dtype=float)
    if np.any(lambdas <= 0):
        raise ValueError("lambdas must be positive")
    L = spec.depth
    base = forward(spec, flat, x)
    worst = 0.0
    for lam in lambdas:
        scaled = forward(spec, lam * flat, x)
        err = abs(scaled - lam ** L * base) / (1.0 + abs(base) * lam ** L)
        worst = max(worst, err)
    return worst


def euler_identity_error(spec: NetSpec, w, sample: Sample, kink=None) -> float:
    """Relative gap in ``<a(w), w> = L p(w)``."""
    flat = as_flat(spec, w)
    a = conservative_grad(spec, flat, sample, kink).data
    lp = spec.depth * signed_output(spec, flat, sample)
    return abs(float(a @ flat) - lp) / (1.0 + abs(lp))


def init_weights(spec: NetSpec, rng: np.random.Generator, scale: float = 1.0,
                 target_norm: float | None = None) -> WeightVector:
    """I.i.d. uniform weights on [-scale, scale], optionally rescaled to a norm."""
    data = rng.uniform(-scale, scale, size=spec.n_params)
    if target_norm is not None:
        nrm = np.linalg.norm(data)
        if nrm == 0:
            raise ValueError("cannot rescale a zero weight vector")
        data *= target_norm / nrm
    return WeightVector(data, spec.shapes)


def output_bound(spec: NetSpec, X) -> float:
    """A constant C with ``|p_i(w)| <= C ||w||^L`` for every row of X.

    The activations are 1-Lipschitz with s(0) = 0, so ``|Phi(x; w)|`` is at
    most ``||x|| prod_j ||W_j||``. Under ``sum_j ||W_j||^2 = ||w||^2`` the
    product peaks at equal layer norms, giving ``L^{-L/2} ||w||^L``.
    """
    X = _check_inputs(spec, X)
    L = spec.depth
    return float(np.max(np.linalg.norm(X, axis=1)) * L ** (-L / 2))


def grad_bound(spec: NetSpec, X) -> float:
    """A constant G with ``||a_i(u)|| <= G`` on the unit sphere."""
    X = _check_inputs(spec, X)
    L = spec.depth
    # each layer block is bounded by ||x|| times the product of the other
    # layer norms, which is at most 1 on the unit sphere
    return float(np.max(np.linalg.norm(X, axis=1)) * np.sqrt(L))
