"""Reparametrized dynamics of the normalized iterates.

The (S)GD step is rewritten as

    w_{k+1} = w_k + gamma_tilde_k (g_bar_k + eta_tilde_{k+1}),
    u_{k+1} = u_k + gamma_bar_k g_bar_s_k + gamma_bar_k eta_bar_{k+1} + gamma_bar_k^2 r_k,

where ``g_bar_k`` is a simplex-weighted mix of per-sample gradients at
``u_k``, the ``_s``/``bar`` quantities are projections onto the tangent
space of the sphere at ``u_k`` and ``r_k`` is the second-order remainder.
The step sizes use the mean over samples, matching the 1/n of the update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Optional

import numpy as np

from .losses import LossKind, _log_neg_deriv_unchecked
from .net import NetSpec, as_flat, batch_signed_and_grads


@dataclass
class DecompositionRecord:
    k: int
    gamma_bar: float
    log_gamma_bar: float
    g_bar: np.ndarray
    g_bar_s: np.ndarray
    eta_tilde: np.ndarray
    eta_bar: np.ndarray
    r: Optional[np.ndarray]
    r_direct: Optional[np.ndarray]
    lam: np.ndarray
    u: np.ndarray
    reconstruction_error: float
    skipped: bool = False

    @property
    def r_norm(self) -> float:
        return math.nan if self.r is None else float(np.linalg.norm(self.r))

    @property
    def r_direct_norm(self) -> float:
        return math.nan if self.r_direct is None else float(np.linalg.norm(self.r_direct))

    def tangency_errors(self) -> tuple:
        """``|<g_bar_s, u>| / ||g_bar_s||`` and the same for ``eta_bar``."""
        out = []
        for v in (self.g_bar_s, self.eta_bar):
            nv = np.linalg.norm(v)
            out.append(0.0 if nv == 0 else abs(float(v @ self.u)) / nv)
        return tuple(out)


@dataclass
class GrowthFit:
    """Least-squares fit ``||w_k||^L ~ slope log k + intercept``.

    ``c1_hat``/``c2_hat`` are the smallest and largest ratios
    ``||w_k||^L / log k`` over the window.
    """

    c1_hat: float
    c2_hat: float
    slope: float
    intercept: float
    r_squared: float
    window: tuple
    violation: bool


def normalize(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    nw = np.linalg.norm(w)
    if nw == 0:
        raise ValueError("cannot normalize the zero vector")
    return w / nw


def _lse(v):
    v = np.asarray(v, dtype=float)
    m = np.max(v)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(v - m))))


def simplex_weights(loss: LossKind, p_values, scale: float = 1.0) -> np.ndarray:
    """``lambda_i = l'(scale p_i) / sum_j l'(scale p_j)`` via log-sum-exp.

    ``p_values`` are signed outputs at the direction and ``scale`` is
    ``||w||^L``. For the exponential loss this is softmax(-scale p).
    """
    logs = _log_neg_deriv_unchecked(loss, scale * np.asarray(p_values, dtype=float))
    logs = np.atleast_1d(logs)
    # shift by the max and normalize directly; subtracting a large log-sum
    # would leave an absolute rounding error of one ulp of that sum
    e = np.exp(logs - np.max(logs))
    return e / e.sum()


def log_effective_steps(gamma_k: float, norm_w: float, loss: LossKind, p_values,
                        depth: int) -> tuple:
    """Logs of ``gamma_tilde = gamma ||w||^{L-1} mean_j(-l'(p_j))`` and
    ``gamma_bar = gamma_tilde / ||w||``."""
    if norm_w <= 0:
        raise ValueError("norm_w must be positive")
    p = np.atleast_1d(np.asarray(p_values, dtype=float))
    lse = _lse(_log_neg_deriv_unchecked(loss, p))
    lg = math.log(gamma_k) if gamma_k > 0 else -math.inf
    log_gt = lg - math.log(p.size) + (depth - 1) * math.log(norm_w) + lse
    return log_gt, log_gt - math.log(norm_w)


def effective_steps(gamma_k: float, norm_w: float, loss: LossKind, p_values,
                    depth: int) -> tuple:
    """``(gamma_tilde, gamma_bar)``; both underflow to 0 rather than erroring."""
    lt, lb = log_effective_steps(gamma_k, norm_w, loss, p_values, depth)
    return math.exp(lt), math.exp(lb)


def project_tangent(u, v) -> np.ndarray:
    """``v - <v, u> u`` (row-wise when ``v`` is 2-d)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    return v - np.outer(v @ u, u) if v.ndim == 2 else v - (v @ u) * u


def aggregated_direction(grads, lam, u) -> tuple:
    """``g_bar = sum_i lam_i g_i`` and its tangential part at ``u``."""
    grads = np.atleast_2d(np.asarray(grads, dtype=float))
    lam = np.asarray(lam, dtype=float)
    if grads.shape[0] != lam.size:
        raise ValueError(f"{grads.shape[0]} gradients but {lam.size} weights")
    g = lam @ grads
    return g, project_tangent(u, g)


def decompose_update(u_k, u_next, gamma_bar, g_bar_s, eta_bar) -> np.ndarray:
    """Remainder ``r_k`` solved from the update identity by subtraction.

    Loses precision as ``gamma_bar`` shrinks; see :func:`remainder_exact`.
    """
    if not gamma_bar > 0:
        raise ValueError("remainder undefined for a zero effective step")
    u_k, u_next = np.asarray(u_k, float), np.asarray(u_next, float)
    return (u_next - u_k - gamma_bar * np.asarray(g_bar_s) - gamma_bar * np.asarray(eta_bar)) / gamma_bar ** 2


def remainder_exact(u, gamma_bar, h) -> np.ndarray:
    """Remainder of ``(u + g h) / ||u + g h||`` about ``u + g h_s``, in closed form.

    With ``a = <h, u>`` and ``N = ||u + g h||`` the remainder is
    ``u (a (2a + g|h|^2)(N + 2)/(N + 1) - |h|^2) / (N (N + 1)) - h (2a + g|h|^2) / (N (N + 1))``,
    which contains no cancelling differences of nearly equal unit vectors.
    As ``g -> 0`` it tends to ``u (3a^2 - |h|^2)/2 - a h``.
    """
    u = np.asarray(u, float)
    h = np.asarray(h, float)
    g = float(gamma_bar)
    a = float(h @ u)
    hh = float(h @ h)
    N = math.sqrt(1.0 + 2.0 * g * a + g * g * hh)
    s = 2.0 * a + g * hh
    denom = N * (N + 1.0)
    return u * ((a * s * (N + 2.0) / (N + 1.0) - hh) / denom) - h * (s / denom)


def _noise_tilde(lam_all, G, batch, n):
    """``eta_tilde`` for one batch; ``(n/n_b) sum_B lam g - g_bar``."""
    batch = np.asarray(batch)
    n_b = batch.size
    if n_b == n:
        return np.zeros(G.shape[1])
    return (n / n_b) * (lam_all[batch] @ G[batch]) - lam_all @ G


def noise_term(spec: NetSpec, w, batch, dataset, loss: LossKind, kink=None,
               return_tilde: bool = False):
    """Projected minibatch noise ``eta_bar_{k+1}`` at ``w``.

    ``eta_tilde`` is the minibatch direction minus the full-batch direction,
    both in units of the full-batch effective step, and ``eta_bar`` is its
    tangential part at ``u = w / ||w||``. Zero for the full batch.
    """
    flat = as_flat(spec, w)
    u = normalize(flat)
    nw = np.linalg.norm(flat)
    pu, G = batch_signed_and_grads(spec, u, dataset.X, dataset.y, kink)
    lam = simplex_weights(loss, pu, nw ** spec.depth)
    tilde = _noise_tilde(lam, G, batch, dataset.n)
    bar = project_tangent(u, tilde)
    return (bar, tilde) if return_tilde else bar


def exact_noise_mean(spec: NetSpec, w, dataset, loss: LossKind, n_b: int, kink=None) -> tuple:
    """Average of ``eta_bar`` over every batch of size ``n_b``.

    Returns ``(mean_vector, full_batch_direction_norm, n_batches)``.
    """
    flat = as_flat(spec, w)
    u = normalize(flat)
    nw = np.linalg.norm(flat)
    pu, G = batch_signed_and_grads(spec, u, dataset.X, dataset.y, kink)
    lam = simplex_weights(loss, pu, nw ** spec.depth)
    total = np.zeros(G.shape[1])
    count = 0
    for batch in combinations(range(dataset.n), n_b):
        total += project_tangent(u, _noise_tilde(lam, G, list(batch), dataset.n))
        count += 1
    return total / count, float(np.linalg.norm(lam @ G)), count


def decompose_step(spec: NetSpec, w_k, w_next, batch, dataset, loss: LossKind,
                   gamma_k: float, k: int = 0, kink=None) -> DecompositionRecord:
    """Full reparametrization of one recorded step ``w_k -> w_next``."""
    w_k = as_flat(spec, w_k)
    L = spec.depth
    nw = float(np.linalg.norm(w_k))
    u = w_k / nw
    pu, G = batch_signed_and_grads(spec, u, dataset.X, dataset.y, kink)
    p = pu * nw ** L
    lam = simplex_weights(loss, pu, nw ** L)
    log_gt, log_gb = log_effective_steps(gamma_k, nw, loss, p, L)
    gb = math.exp(log_gb)
    g_bar, g_bar_s = aggregated_direction(G, lam, u)
    eta_t = _noise_tilde(lam, G, batch, dataset.n)
    eta_b = project_tangent(u, eta_t)
    u_next = normalize(w_next)
    # the reparametrized step from u_k reproduces u_{k+1}
    recon = normalize(u + gb * (g_bar + eta_t))
    rec_err = float(np.linalg.norm(recon - u_next))
    if gb > 0:
        r = remainder_exact(u, gb, g_bar + eta_t)
        r_direct = decompose_update(u, u_next, gb, g_bar_s, eta_b)
        skipped = False
    else:
        r = r_direct = None
        skipped = True
    return DecompositionRecord(k, gb, log_gb, g_bar, g_bar_s, eta_t, eta_b, r, r_direct,
                               lam, u, rec_err, skipped)


def _linfit(x, y):
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + intercept)
    ss_res = float(resid @ resid)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return float(slope), float(intercept), r2


def post_separation(records, k_sep):
    if k_sep is None:
        return []
    return [r for r in records if r.k >= k_sep]


def default_window(records, k_sep) -> tuple:
    """Last half of the post-separation records."""
    post = [r for r in post_separation(records, k_sep) if r.k > 0]
    if len(post) < 2:
        raise ValueError("not enough post-separation records")
    return (post[len(post) // 2].k, post[-1].k)


def _in_window(records, window):
    lo, hi = window
    return [r for r in records if lo <= r.k <= hi and r.k > 1]


def fit_log_growth(records, depth: int, window=None, k_sep=None) -> GrowthFit:
    """Fit ``||w_k||^L`` against ``log k``.

    Raises
    ------
    ValueError
        If the window starts before ``k_sep``.
    """
    if window is None:
        if k_sep is None:
            raise ValueError("need a window or a separation index")
        window = default_window(records, k_sep)
    if k_sep is not None and window[0] < k_sep:
        raise ValueError(f"window starts at {window[0]}, before separation at {k_sep}")
    sel = _in_window(records, window)
    if len(sel) < 2:
        raise ValueError("window holds fewer than two usable records")
    logk = np.log([r.k for r in sel])
    m = np.array([r.norm_w for r in sel]) ** depth
    slope, intercept, r2 = _linfit(logk, m)
    ratio = m / logk
    return GrowthFit(float(ratio.min()), float(ratio.max()), slope, intercept, r2,
                     tuple(int(v) for v in window), bool(slope <= 0 or r2 < 0.9))


def fit_loss_decay(records, window) -> tuple:
    """Slope, intercept and R^2 of ``log L(w_k)`` against ``log k``."""
    sel = _in_window(records, window)
    return _linfit(np.log([r.k for r in sel]), [r.log_loss for r in sel])


def _cumsum_at(records, k):
    # exact running sum of effective steps stored at the latest record <= k
    best = None
    for r in records:
        if r.k <= k:
            best = r
        else:
            break
    return best.gamma_bar_cumsum if best is not None else 0.0


def effective_step_report(records, k_sep, window=None, max_violation=0.01,
                          decade_ratio=0.1) -> dict:
    """Eventual decrease, power-law exponent and non-summability of gamma_bar."""
    if k_sep is None:
        return {"status": "not applicable (no separation detected)"}
    window = window or default_window(records, k_sep)
    sel = _in_window(records, window)
    lgb = np.array([r.log_gamma_bar for r in sel])
    increases = np.diff(lgb) > 0
    frac = float(increases.mean()) if increases.size else 0.0
    exponent, _, r2 = _linfit(np.log([r.k for r in sel]), lgb)
    K = records[-1].k
    last = _cumsum_at(records, K) - _cumsum_at(records, K // 10)
    prev = _cumsum_at(records, K // 10) - _cumsum_at(records, K // 100)
    ratio = last / prev if prev > 0 else math.inf
    ok = frac <= max_violation and exponent < 0 and ratio > decade_ratio
    return {
        "status": "holds" if ok else "violated",
        "window": list(window),
        "increase_fraction": frac,
        "power_law_exponent": exponent,
        "power_law_r_squared": r2,
        "last_decade_sum": last,
        "previous_decade_sum": prev,
        "decade_ratio": ratio,
    }


def bounded_remainder_report(decomps, k_sep, factor: float = 2.0) -> dict:
    """Compare the largest ``||r_k||`` in the last and first post-separation quartiles."""
    if k_sep is None:
        return {"status": "not applicable (no separation detected)"}
    vals = [(d.k, d.r_norm) for d in decomps if d.k >= k_sep and not d.skipped]
    if len(vals) < 4:
        return {"status": "not applicable (fewer than 4 post-separation snapshots)"}
    norms = np.array([v for _, v in vals])
    q = len(norms) // 4
    first, last = norms[:q].max(), norms[-q:].max()
    ok = last <= factor * first
    return {
        "status": "holds" if ok else "violated",
        "first_quartile_max": float(first),
        "last_quartile_max": float(last),
        "overall_max": float(norms.max()),
        "n_snapshots": len(vals),
    }


def margin_oscillation(records, decade: bool = True) -> float:
    """Spread of the normalized margin over the last decade of iterations."""
    K = records[-1].k
    lo = K // 10 if decade else 0
    m = np.array([r.normalized_margin for r in records if r.k >= lo])
    return float(m.max() - m.min())


def eprime_diagnostics(records, depth: int, n: int, q0: float = 0.0,
                       n_windows: int = 4) -> dict:
    """Windowed checks of the relaxed late-training conditions.

    1. the norm grows: positive slope of ``log ||w_k||`` against ``log k``;
    2. ``||w_k||^{L-2} sum_i -l'(p_i(w_k))`` decays: negative slope of its log
       and a smaller value at the window end than at its start;
    3. the unnormalized margin stays at or above ``q0``.

    The last window is the one reported as ``late``.
    """
    recs = [r for r in records if r.k > 0 and r.norm_w > 0]
    if len(recs) < 2 * n_windows:
        n_windows = max(1, len(recs) // 2)
    chunks = np.array_split(np.arange(len(recs)), n_windows)
    windows = []
    for idx in chunks:
        if idx.size < 2:
            continue
        sel = [recs[i] for i in idx]
        logk = np.log([r.k for r in sel])
        lognorm = np.log([r.norm_w for r in sel])
        # log of ||w||^{L-2} sum -l' recovered from the stored effective step
        logq = np.array([r.log_gamma_bar - math.log(r.gamma_k) + math.log(n)
                         if r.gamma_k > 0 else math.nan for r in sel])
        margins = np.array([r.norm_w ** depth * r.normalized_margin for r in sel])
        s1, _, _ = _linfit(logk, lognorm)
        if np.all(np.isfinite(logq)):
            s2, _, _ = _linfit(logk, logq)
            c2 = bool(s2 < 0 and logq[-1] < logq[0])
        else:
            s2, c2 = math.nan, False
        windows.append({
            "k_range": [sel[0].k, sel[-1].k],
            "norm_growth": bool(s1 > 0 and lognorm[-1] > lognorm[0]),
            "norm_slope": s1,
            "decay": c2,
            "decay_slope": s2,
            "margin_above_q0": bool(np.min(margins) >= q0),
            "min_margin": float(np.min(margins)),
        })
    late = windows[-1]
    return {
        "windows": windows,
        "late": {
            "norm_growth": late["norm_growth"],
            "decay": late["decay"],
            "margin_above_q0": late["margin_above_q0"],
        },
        "all_late_conditions": bool(late["norm_growth"] and late["decay"]
                                    and late["margin_above_q0"]),
    }
