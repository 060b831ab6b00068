"""Post-processing of a trajectory: decomposition, growth law, claims, criticality."""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb

import numpy as np

from .criticality import DEFAULT_ACTIVE_TOL, active_set, criticality_residual, min_norm_in_hull, spherical_generators
from .dynamics import (
    bounded_remainder_report,
    decompose_step,
    default_window,
    effective_step_report,
    eprime_diagnostics,
    exact_noise_mean,
    fit_log_growth,
    fit_loss_decay,
    margin_oscillation,
)
from .net import batch_signed_and_grads
from .optimizer import Trajectory

NOT_APPLICABLE = "not applicable (no separation detected)"

ROW_FIELDS = (
    "k", "post_separation", "norm_w", "normalized_margin", "gamma_bar", "r_norm",
    "r_direct_norm", "reconstruction_error", "g_bar_s_norm", "eta_bar_norm",
    "tangency_g", "tangency_eta", "residual", "lambda_sum",
)

MAX_NOISE_BATCHES = 10_000


@dataclass
class Analysis:
    rows: list
    summary: dict
    decomps: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


def _distance_to_hull(point, generators):
    return min_norm_in_hull(np.asarray(generators) - point).norm


def analyze_trajectory(traj: Trajectory, dataset, active_tol: float = DEFAULT_ACTIVE_TOL,
                       window=None) -> Analysis:
    cfg = traj.config
    spec, loss, kink = cfg.net, cfg.loss, cfg.kink
    L = spec.depth
    k_sep = traj.k_sep
    records = traj.records
    warnings = []
    if not traj.snapshots:
        warnings.append("no snapshots stored; remainder and noise checks skipped")

    decomps, rows = [], []
    for s in traj.snapshots:
        d = decompose_step(spec, s.w, s.w_next, s.batch, dataset, loss, cfg.gamma(s.k), s.k, kink)
        decomps.append(d)
        rep = criticality_residual(spec, s.w, dataset, active_tol, kink, with_kkt=False)
        tg, te = d.tangency_errors()
        rows.append((s.k, k_sep is not None and s.k >= k_sep, float(np.linalg.norm(s.w)),
                     rep.active_set.margin, d.gamma_bar, d.r_norm, d.r_direct_norm,
                     d.reconstruction_error, float(np.linalg.norm(d.g_bar_s)),
                     float(np.linalg.norm(d.eta_bar)), tg, te, rep.residual, float(d.lam.sum())))

    summary = {
        "k_sep": k_sep,
        "separation": "separation detected" if k_sep is not None else "no separation detected",
        "iterations": cfg.iterations,
        "batch_size": cfg.batch_size_for(dataset.n),
        "loss": str(loss),
        "net": spec.to_dict(),
    }

    final = criticality_residual(spec, traj.final_w, dataset, active_tol, kink)
    summary["final_margin"] = final.active_set.margin
    summary["final_residual"] = final.residual
    summary["final_residual_kind"] = final.residual_kind
    summary["final_kkt_residual"] = final.kkt_residual
    summary["kkt_constant"] = final.kkt_constant
    summary["last_decade_margin_oscillation"] = margin_oscillation(records)
    if decomps:
        summary["max_reconstruction_error"] = max(d.reconstruction_error for d in decomps)
        summary["residual_series"] = {"k": [r[0] for r in rows], "residual": [r[12] for r in rows]}

    if k_sep is None:
        for c in ("growth_fit", "loss_decay", "claim1", "claim2", "claim3", "claim4"):
            summary[c] = {"status": NOT_APPLICABLE}
        if cfg.batch_size_for(dataset.n) == dataset.n:
            summary["claim3"] = {"status": "holds trivially (full batch, noise is zero)"}
    else:
        try:
            win = window or default_window(records, k_sep)
            g = fit_log_growth(records, L, win, k_sep)
            summary["growth_fit"] = {
                "status": "violated" if g.violation else "holds",
                "c1_hat": g.c1_hat, "c2_hat": g.c2_hat, "slope": g.slope,
                "intercept": g.intercept, "r_squared": g.r_squared, "window": list(g.window),
            }
            ls, li, lr2 = fit_loss_decay(records, win)
            summary["loss_decay"] = {"slope": ls, "intercept": li, "r_squared": lr2}
        except ValueError as exc:
            summary["growth_fit"] = {"status": f"not computed ({exc})"}
            summary["loss_decay"] = {"status": f"not computed ({exc})"}
        summary["claim1"] = bounded_remainder_report(decomps, k_sep)
        summary["claim2"] = effective_step_report(records, k_sep, window)
        summary["claim3"] = _noise_claim(traj, dataset, warnings)
        summary["claim4"] = _limit_field_claim(traj, dataset, decomps, active_tol)
    summary["eprime"] = eprime_diagnostics(records, L, dataset.n, loss.q0)
    summary["warnings"] = warnings
    return Analysis(rows, summary, decomps, warnings)


def _noise_claim(traj, dataset, warnings, n_checks: int = 5) -> dict:
    cfg = traj.config
    n, n_b = dataset.n, cfg.batch_size_for(dataset.n)
    if n_b == n:
        return {"status": "holds trivially (full batch, noise is zero)"}
    if not traj.snapshots:
        return {"status": "not checked (no snapshots)"}
    if comb(n, n_b) > MAX_NOISE_BATCHES:
        warnings.append(f"C({n},{n_b}) batches too many for exact noise averaging")
        return {"status": "not checked (too many batches for exact enumeration)"}
    idx = np.linspace(0, len(traj.snapshots) - 1, min(n_checks, len(traj.snapshots))).astype(int)
    rel = []
    for i in idx:
        mean, gnorm, _ = exact_noise_mean(cfg.net, traj.snapshots[i].w, dataset, cfg.loss, n_b, cfg.kink)
        rel.append(float(np.linalg.norm(mean) / gnorm) if gnorm > 0 else 0.0)
    return {"status": "holds" if max(rel) <= 1e-12 else "violated",
            "max_relative_mean": max(rel), "checked_snapshots": [traj.snapshots[i].k for i in idx]}


def _limit_field_claim(traj, dataset, decomps, active_tol) -> dict:
    cfg = traj.config
    post = [d for d in decomps if d.k >= traj.k_sep]
    if len(post) < 4:
        return {"status": "not applicable (fewer than 4 post-separation snapshots)"}
    u_K = traj.final_w / np.linalg.norm(traj.final_w)
    p, _ = batch_signed_and_grads(cfg.net, u_K, dataset.X, dataset.y, cfg.kink)
    act = active_set(p, active_tol)
    G, _, _ = spherical_generators(cfg.net, u_K, dataset, act, cfg.kink)
    dist = np.array([_distance_to_hull(d.g_bar_s, G) for d in post])
    q = len(dist) // 4
    first, last = float(np.mean(dist[:q])), float(np.mean(dist[-q:]))
    return {"status": "holds" if last <= first else "violated",
            "first_quartile_mean_distance": first, "last_quartile_mean_distance": last,
            "final_distance": float(dist[-1])}


def rows_as_dicts(rows) -> list:
    return [dict(zip(ROW_FIELDS, r)) for r in rows]
