"""Margin-critical directions on the unit sphere.

The margin ``m(u) = min_i p_i(u)`` has the set-valued field given by the
convex hull of the conservative gradients of the samples attaining the
minimum. Projecting onto the tangent space of the sphere gives the
spherical field, whose zeros are the critical directions. The distance from
the origin to the projected hull is the criticality residual.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import nnls

from .net import NetSpec, as_flat, batch_signed_and_grads, kink_enumerated_grads, zero_preactivations

DEFAULT_ACTIVE_TOL = 1e-6


@dataclass
class ActiveSet:
    indices: np.ndarray
    tol: float
    margin: float

    def __len__(self):
        return len(self.indices)


def active_set(p_values, tol: float = DEFAULT_ACTIVE_TOL) -> ActiveSet:
    """Indices within ``tol * (1 + |min|)`` of the smallest signed output."""
    p = np.atleast_1d(np.asarray(p_values, dtype=float))
    if p.size == 0:
        raise ValueError("no signed outputs")
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    m = float(p.min())
    idx = np.flatnonzero(p <= m + tol * (1.0 + abs(m)))
    return ActiveSet(idx, float(tol), m)


@dataclass
class MinNormResult:
    point: np.ndarray
    weights: np.ndarray
    norm: float
    converged: bool = True
    iterations: int = 0

    def __iter__(self):
        return iter((self.point, self.weights, self.norm))


def _affine_minimizer(P):
    # argmin ||alpha @ P|| subject to sum(alpha) = 1
    k = P.shape[0]
    A = np.zeros((k + 1, k + 1))
    A[:k, :k] = P @ P.T
    A[:k, k] = 1.0
    A[k, :k] = 1.0
    b = np.zeros(k + 1)
    b[k] = 1.0
    sol = np.linalg.lstsq(A, b, rcond=None)[0]
    return sol[:k]


def min_norm_in_hull(generators, tol: float = 1e-12, max_iter: Optional[int] = None) -> MinNormResult:
    """Wolfe's minimum-norm-point algorithm over the convex hull of the rows.

    Stops when ``||x||^2 - min_j <x, g_j>`` drops below ``tol`` times the
    largest squared generator norm. The iteration cap defaults to ``10 m^2``;
    hitting it returns the best point with ``converged=False``.
    """
    P = np.atleast_2d(np.asarray(generators, dtype=float))
    m = P.shape[0]
    if m == 0:
        raise ValueError("need at least one generator")
    if m == 1:
        return MinNormResult(P[0].copy(), np.ones(1), float(np.linalg.norm(P[0])), True, 0)
    if max_iter is None:
        max_iter = 10 * m * m
    sq = np.einsum("ij,ij->i", P, P)
    scale = max(float(sq.max()), 1e-300)
    i0 = int(np.argmin(sq))
    S = [i0]
    lam = np.array([1.0])
    x = P[i0].copy()
    it = 0
    converged = False
    while it < max_iter:
        it += 1
        xx = float(x @ x)
        if xx <= 1e-30 * scale:
            converged = True
            break
        dots = P @ x
        j = int(np.argmin(dots))
        if xx - dots[j] <= tol * scale or j in S:
            converged = True
            break
        S.append(j)
        lam = np.append(lam, 0.0)
        while it < max_iter:
            it += 1
            alpha = _affine_minimizer(P[S])
            if np.all(alpha > 1e-15):
                lam = alpha
                break
            neg = alpha <= 1e-15
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios = np.where(neg, lam / (lam - alpha), np.inf)
            theta = float(np.clip(np.min(ratios), 0.0, 1.0))
            lam = lam + theta * (alpha - lam)
            keep = lam > 1e-15
            if not np.any(keep):
                keep[np.argmax(lam)] = True
            S = [s for s, kp in zip(S, keep) if kp]
            lam = lam[keep]
            lam = lam / lam.sum()
        x = lam @ P[S]
    weights = np.zeros(m)
    np.add.at(weights, S, lam)
    weights = np.clip(weights, 0.0, None)
    weights /= weights.sum()
    point = weights @ P
    return MinNormResult(point, weights, float(np.linalg.norm(point)), converged, it)


def _as_direction(spec, w):
    flat = as_flat(spec, w)
    nw = float(np.linalg.norm(flat))
    if nw == 0:
        raise ValueError("direction undefined at w = 0")
    return flat / nw


def margin_generators(spec: NetSpec, w, dataset, active: ActiveSet, kink=None,
                      enumerate_kinks: bool = True, max_kinks: int = 8) -> tuple:
    """Conservative gradients of the active samples at ``w`` (not projected).

    With ``enumerate_kinks`` every active sample with exactly-zero
    pre-activations contributes one generator per extreme kink selection.

    Returns
    -------
    generators : ndarray, shape (m, n_params)
    owners : ndarray of sample indices, one per generator
    complete : bool
        False if some sample had more than ``max_kinks`` units on a kink and
        only the configured selection was used for it.
    """
    flat = as_flat(spec, w)
    gens, owners, complete = [], [], True
    for i in active.indices:
        x, y = dataset.X[i], dataset.y[i]
        if enumerate_kinks and zero_preactivations(spec, flat, x):
            G, ok = kink_enumerated_grads(spec, flat, x, y, kink, max_kinks)
            complete &= ok
        else:
            _, G = batch_signed_and_grads(spec, flat, x[None, :], np.array([y]), kink)
        gens.append(G)
        owners.extend([int(i)] * G.shape[0])
    return np.vstack(gens), np.array(owners), bool(complete)


def spherical_generators(spec: NetSpec, u, dataset, active: ActiveSet, kink=None,
                         enumerate_kinks: bool = True, max_kinks: int = 8) -> tuple:
    """Active generators at the unit vector ``u`` projected onto its tangent space."""
    u = as_flat(spec, u)
    if abs(np.linalg.norm(u) - 1.0) > 1e-12:
        raise ValueError("u must have unit norm")
    G, owners, complete = margin_generators(spec, u, dataset, active, kink,
                                            enumerate_kinks, max_kinks)
    return G - np.outer(G @ u, u), owners, complete


@dataclass
class CriticalityReport:
    u: np.ndarray
    active_set: ActiveSet
    generators: np.ndarray
    owners: np.ndarray
    min_norm_point: np.ndarray
    residual: float
    hull_weights: np.ndarray
    converged: bool
    hull_complete: bool
    kink: float
    enumerate_kinks: bool
    kkt_residual: Optional[float] = None
    kkt_constant: Optional[float] = None
    zero_tol: float = 1e-10
    notes: list = field(default_factory=list)

    @property
    def certified_critical(self) -> bool:
        """0 lies in the (possibly under-approximated) projected hull."""
        return self.converged and self.residual <= self.zero_tol

    @property
    def residual_kind(self) -> str:
        if self.certified_critical:
            return "certified critical"
        return "exact residual" if self.hull_complete else "residual upper bound"

    def to_dict(self) -> dict:
        return {
            "u": self.u.tolist(),
            "margin": self.active_set.margin,
            "active_indices": self.active_set.indices.tolist(),
            "active_tol": self.active_set.tol,
            "generators": self.generators.tolist(),
            "generator_owners": self.owners.tolist(),
            "min_norm_point": self.min_norm_point.tolist(),
            "residual": self.residual,
            "hull_weights": self.hull_weights.tolist(),
            "converged": self.converged,
            "hull_complete": self.hull_complete,
            "residual_kind": self.residual_kind,
            "field": {"kink_selection": self.kink, "kink_enumeration": self.enumerate_kinks},
            "kkt_residual": self.kkt_residual,
            "kkt_constant": self.kkt_constant,
            "notes": list(self.notes),
        }

    def to_json(self, path=None, indent: int = 2) -> str:
        text = json.dumps(self.to_dict(), indent=indent)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _kink_e(spec, kink):
    if kink is None:
        return spec.default_kink().e
    return float(getattr(kink, "e", kink))


def criticality_residual(spec: NetSpec, w, dataset, tol: float = DEFAULT_ACTIVE_TOL,
                         kink=None, enumerate_kinks: bool = True,
                         with_kkt: bool = True) -> CriticalityReport:
    """Distance from 0 to the hull of projected active generators at ``w / ||w||``.

    When the margin is positive the KKT residual of the rescaled point is
    attached, along with ``kkt_constant = 1 / (L m^{1 + 1/L})``: for exactly
    tied active samples the KKT residual is at most this constant times the
    criticality residual.
    """
    u = _as_direction(spec, w)
    p, _ = batch_signed_and_grads(spec, u, dataset.X, dataset.y, kink)
    act = active_set(p, tol)
    G, owners, complete = spherical_generators(spec, u, dataset, act, kink, enumerate_kinks)
    res = min_norm_in_hull(G)
    rep = CriticalityReport(u, act, G, owners, res.point, res.norm, res.weights,
                            res.converged, complete, _kink_e(spec, kink), enumerate_kinks)
    if not complete:
        rep.notes.append("hull under-approximated")
    if with_kkt and act.margin > 0:
        rep.kkt_residual = kkt_residual(spec, u, dataset, tol, kink, enumerate_kinks)
        L = spec.depth
        rep.kkt_constant = 1.0 / (L * act.margin ** (1.0 + 1.0 / L))
    return rep


def kkt_residual(spec: NetSpec, w, dataset, tol: float = DEFAULT_ACTIVE_TOL, kink=None,
                 enumerate_kinks: bool = True) -> float:
    """``min_{alpha >= 0} ||w* - sum_i alpha_i v_i||`` over active generators at
    ``w* = u / m(u)^{1/L}``; zero at stationary points of
    ``min ||w||^2 / 2`` subject to ``m(w) >= 1``.

    Raises
    ------
    ValueError
        If the margin at ``w`` is not positive.
    """
    u = _as_direction(spec, w)
    p, _ = batch_signed_and_grads(spec, u, dataset.X, dataset.y, kink)
    act = active_set(p, tol)
    if act.margin <= 0:
        raise ValueError(f"margin {act.margin:.3g} is not positive; no rescaled point")
    w_star = u / act.margin ** (1.0 / spec.depth)
    V, _, _ = margin_generators(spec, w_star, dataset, act, kink, enumerate_kinks)
    _, rnorm = nnls(V.T, w_star)
    return float(rnorm)


@dataclass
class FlowPath:
    t: np.ndarray
    u: np.ndarray
    margin: np.ndarray
    residual: np.ndarray
    converged: bool
    steps: int
    final_h: float
    rejections: int = 0

    @property
    def final_residual(self) -> float:
        return float(self.residual[-1])

    def to_csv(self, path):
        d = self.u.shape[1]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["t"] + [f"u{j + 1}" for j in range(d)] + ["margin", "residual"])
            for t, u, m, r in zip(self.t, self.u, self.margin, self.residual):
                wr.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in u] + [f"{m:.17g}", f"{r:.17g}"])


class _FieldCache:
    """Projected generators at one direction, reused across band widths.

    Rows of the batch gradient matrix are used as they are; only samples with
    an exactly-zero pre-activation are re-expanded over kink selections.
    """

    def __init__(self, spec, u, dataset, G, kink, enumerate_kinks):
        self.spec, self.u, self.dataset = spec, u, dataset
        self.Gs = G - np.outer(G @ u, u)
        self.kink, self.enumerate_kinks = kink, enumerate_kinks
        self._expanded = {}
        self._hulls = {}
        self._kinked = None

    def _rows(self, i):
        if not self.enumerate_kinks:
            return self.Gs[i:i + 1]
        if i not in self._expanded:
            x = self.dataset.X[i]
            if zero_preactivations(self.spec, self.u, x):
                G, _ = kink_enumerated_grads(self.spec, self.u, x, self.dataset.y[i], self.kink)
                self._expanded[i] = G - np.outer(G @ self.u, self.u)
            else:
                self._expanded[i] = self.Gs[i:i + 1]
        return self._expanded[i]

    def rates(self, v):
        """Slowest first-order change of each sample's output along ``v``."""
        r = self.Gs @ v
        if self.enumerate_kinks:
            if self._kinked is None:
                self._kinked = [i for i, x in enumerate(self.dataset.X)
                                if zero_preactivations(self.spec, self.u, x)]
            for i in self._kinked:
                r[i] = float(np.min(self._rows(i) @ v))
        return r

    def min_norm(self, indices):
        key = tuple(int(i) for i in indices)
        if key not in self._hulls:
            self._hulls[key] = min_norm_in_hull(np.vstack([self._rows(i) for i in key]))
        return self._hulls[key]



def euler_di_flow(spec: NetSpec, u0, dataset, h: float = 1e-3, horizon: float = 20.0,
                  tol: float = 1e-8, kink=None, active_tol: float = DEFAULT_ACTIVE_TOL,
                  enumerate_kinks: bool = True, min_h: float = 1e-12,
                  max_steps: int = 200_000) -> FlowPath:
    """Forward Euler for the ascent inclusion of the margin on the sphere.

    Each step moves along the minimum-norm element of the projected hull over
    a band of samples near the margin, then renormalizes. The band starts at
    the active set and grows, one gap at a time, until every sample left
    outside it is predicted, to first order and with a second-order allowance
    ``(L^2 + 1) h^2 G^2`` (``G`` twice the largest projected gradient norm),
    to stay above the rise ``h |v|^2`` guaranteed inside the band. A band that pulls the direction far below the active-set
    direction means the step is too coarse to resolve a near tie, and ``h`` is
    halved; it grows back, up to its initial value, after steps on the active
    set alone. Steps that still lower the margin are rejected and retried with
    half the step. Stops once the residual drops below ``tol``, at ``horizon``
    or when ``h < min_h``.
    """
    u = _as_direction(spec, u0)
    L = spec.depth
    h0 = h
    t = 0.0
    ts, us, ms, rs = [], [], [], []
    p, G = batch_signed_and_grads(spec, u, dataset.X, dataset.y, kink)
    cache = _FieldCache(spec, u, dataset, G, kink, enumerate_kinks)
    strict = active_set(p, active_tol).indices
    res = cache.min_norm(strict).norm
    ts.append(t)
    us.append(u.copy())
    ms.append(float(p.min()))
    rs.append(res)
    converged = res < tol
    steps = rejections = 0
    while not converged and t < horizon and h >= min_h and steps < max_steps:
        Gs = cache.Gs
        gmax = 2.0 * float(np.sqrt(np.max(np.einsum("ij,ij->i", Gs, Gs)))) + 1e-300
        slack = (L * L + 1) * h * h * gmax * gmax
        gaps = p - p.min()
        order = np.argsort(gaps, kind="stable")
        v_strict = cache.min_norm(strict).point
        j, v = len(strict), v_strict
        while j < len(p):
            # band outputs rise by at least h |v|^2; nobody outside may end below that
            vv = float(v @ v)
            out = order[j:]
            if np.all(gaps[out] + h * (cache.rates(v)[out] - vv) >= slack):
                break
            j = int(np.searchsorted(gaps[order], gaps[order[j]], side="right"))
            v = cache.min_norm(np.sort(order[:j])).point
        widened = j > len(strict)
        if widened and np.linalg.norm(v) < 0.5 * np.linalg.norm(v_strict):
            h /= 2.0
            continue
        u_new = u + h * v
        u_new /= np.linalg.norm(u_new)
        p_new, G_new = batch_signed_and_grads(spec, u_new, dataset.X, dataset.y, kink)
        if p_new.min() < p.min() - 1e-12:
            # a kink crossed inside the step; retry with a shorter one
            rejections += 1
            h /= 2.0
            continue
        u, p = u_new, p_new
        cache = _FieldCache(spec, u, dataset, G_new, kink, enumerate_kinks)
        t += h
        steps += 1
        if not widened:
            h = min(2.0 * h, h0)
        strict = active_set(p, active_tol).indices
        res = cache.min_norm(strict).norm
        ts.append(t)
        us.append(u.copy())
        ms.append(float(p.min()))
        rs.append(res)
        converged = res < tol
    return FlowPath(np.array(ts), np.array(us), np.array(ms), np.array(rs),
                    bool(converged), steps, h, rejections)
