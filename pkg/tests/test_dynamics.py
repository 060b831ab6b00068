import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marginflow.analysis import NOT_APPLICABLE, analyze_trajectory
from marginflow.datasets import Dataset, gen_linear_separable, gen_xor_ring
from marginflow.dynamics import (
    aggregated_direction,
    bounded_remainder_report,
    decompose_step,
    decompose_update,
    effective_step_report,
    effective_steps,
    eprime_diagnostics,
    exact_noise_mean,
    fit_log_growth,
    log_effective_steps,
    noise_term,
    normalize,
    project_tangent,
    remainder_exact,
    simplex_weights,
)
from marginflow.losses import EXP, LOGISTIC
from marginflow.net import NetSpec, batch_signed_and_grads, init_weights
from marginflow.optimizer import ExperimentConfig, StepRecord, StepSchedule, run


def rec(k, norm_w, **kw):
    base = dict(normalized_margin=0.1, log_loss=0.0, gamma_k=0.1, log_gamma_tilde=0.0,
                log_gamma_bar=0.0, gamma_bar_cumsum=0.0, active_gap=0.0)
    base.update(kw)
    return StepRecord(k=k, norm_w=norm_w, **base)


def test_normalize():
    u = normalize([3.0, 4.0])
    assert abs(np.linalg.norm(u) - 1) <= 1e-15
    with pytest.raises(ValueError):
        normalize([0.0, 0.0])


def test_simplex_weight_examples():
    assert np.allclose(simplex_weights(EXP, [0.7, 0.7]), [0.5, 0.5])
    lam = simplex_weights(EXP, [0.5, 0.6], scale=1000.0)
    assert lam[0] == pytest.approx(1.0)
    assert lam[1] == pytest.approx(math.exp(-100), rel=1e-10)
    assert np.allclose(simplex_weights(LOGISTIC, [0.0, 0.0, 0.0]), [1 / 3] * 3)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=12), st.floats(1e-3, 1e6))
def test_simplex_weights_on_simplex(p, scale):
    for loss in (EXP, LOGISTIC):
        lam = simplex_weights(loss, p, scale)
        assert np.all(lam >= 0)
        assert abs(lam.sum() - 1) <= 1e-12


def test_effective_step_examples():
    gt, gb = effective_steps(0.1, 2.0, LOGISTIC, [0.0], 2)
    assert gt == pytest.approx(0.1) and gb == pytest.approx(0.05)
    assert effective_steps(0.1, 2.0, EXP, [1e4], 2) == (0.0, 0.0)
    with pytest.raises(ValueError):
        effective_steps(0.1, 0.0, EXP, [1.0], 2)


def test_effective_step_tail_bound():
    rng = np.random.default_rng(0)
    spec = NetSpec((2, 6, 1), "relu")
    ds = gen_linear_separable(0, 10, 2, 0.3)
    # find a direction with positive margin by short training
    cfg = ExperimentConfig(net=spec, loss=EXP, gamma=StepSchedule("constant", 0.2), iterations=3000,
                           seed=1, record_stride=3000)
    u = normalize(run(cfg, ds).final_w)
    pu, _ = batch_signed_and_grads(spec, u, ds.X, ds.y)
    eps = pu.min()
    assert eps > 0
    for norm_w in (10.0, 1e3, 1e6):
        _, lgb = log_effective_steps(0.1, norm_w, EXP, pu * norm_w ** 2, 2)
        assert lgb <= math.log(0.1) + 0 * math.log(norm_w) - eps * norm_w ** 2 + 1e-9
    assert rng is not None


def test_aggregated_direction_examples():
    u = np.array([1.0, 0.0])
    g, gs = aggregated_direction([[2.0, 3.0]], [1.0], u)
    assert np.allclose(gs, [0.0, 3.0])
    _, gs = aggregated_direction([[5.0, 0.0], [1.0, 0.0]], [0.3, 0.7], u)
    assert np.allclose(gs, 0.0)
    with pytest.raises(ValueError):
        aggregated_direction([[1.0, 0.0]], [0.5, 0.5], u)


def test_decompose_update_manufactured():
    rng = np.random.default_rng(1)
    u = normalize(rng.standard_normal(4))
    gs = project_tangent(u, rng.standard_normal(4))
    eb = project_tangent(u, rng.standard_normal(4))
    gb = 0.01
    assert np.allclose(decompose_update(u, u + gb * gs, gb, gs, np.zeros(4)), 0.0)
    v = rng.standard_normal(4)
    r = decompose_update(u, u + gb * gs + gb * eb + gb ** 2 * v, gb, gs, eb)
    assert np.allclose(r, v, atol=1e-9)
    with pytest.raises(ValueError):
        decompose_update(u, u, 0.0, gs, eb)


def test_remainder_two_ways_on_circle():
    # one sample, L = 1, GD on the unit circle
    spec = NetSpec((2, 1), "linear")
    ds = Dataset([[0.6, 0.8]], [1])
    w = np.array([2.0, -1.0])
    p, G = batch_signed_and_grads(spec, w, ds.X, ds.y)
    cfg = ExperimentConfig(net=spec, loss=EXP, gamma=StepSchedule("constant", 0.05), iterations=1,
                           snapshot_stride=1)
    tr = run(cfg, ds, w0=w)
    s = tr.snapshots[0]
    d = decompose_step(spec, s.w, s.w_next, s.batch, ds, EXP, 0.05)
    assert d.gamma_bar > 1e-3
    assert np.linalg.norm(d.r - d.r_direct) <= 1e-10
    assert d.reconstruction_error <= 1e-15


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), log_g=st.floats(-3, 0))
def test_remainder_closed_form_matches_subtraction(seed, log_g):
    rng = np.random.default_rng(seed)
    u = normalize(rng.standard_normal(3))
    h = rng.standard_normal(3)
    g = 10 ** log_g
    u_next = normalize(u + g * h)
    hs = project_tangent(u, h)
    r_sub = (u_next - u - g * hs) / g ** 2
    assert np.linalg.norm(remainder_exact(u, g, h) - r_sub) <= 1e-13 / g ** 2 + 1e-12


def test_remainder_small_step_limit():
    rng = np.random.default_rng(2)
    u = normalize(rng.standard_normal(5))
    h = rng.standard_normal(5)
    a = h @ u
    limit = u * (3 * a * a - h @ h) / 2 - a * h
    assert np.allclose(remainder_exact(u, 1e-12, h), limit, atol=1e-10)
    assert np.allclose(remainder_exact(u, 0.0, h), limit, atol=1e-15)


def test_noise_examples():
    spec = NetSpec((2, 3, 1), "relu")
    rng = np.random.default_rng(0)
    w = init_weights(spec, rng).data
    ds = gen_xor_ring(0, 8)
    assert np.all(noise_term(spec, w, np.arange(8), ds, EXP) == 0)
    twin = Dataset([[1.0, 0.5], [1.0, 0.5]], [1, 1])
    assert np.allclose(noise_term(spec, w, [0], twin, EXP), 0.0, atol=1e-15)


def test_noise_exact_mean_zero_small():
    spec = NetSpec((2, 4, 1), "relu")
    ds = gen_xor_ring(3, 8).subset([0, 2, 4, 6])
    rng = np.random.default_rng(4)
    for _ in range(5):
        w = init_weights(spec, rng).data
        mean, gnorm, count = exact_noise_mean(spec, w, ds, EXP, 2)
        assert count == 6
        assert np.linalg.norm(mean) <= 1e-12 * gnorm


def test_noise_tilde_matches_direct_formula():
    # eta from the raw minibatch and full-batch updates, rescaled by the effective step
    spec = NetSpec((2, 4, 1), "relu")
    ds = gen_xor_ring(1, 8)
    rng = np.random.default_rng(7)
    w = 3 * init_weights(spec, rng).data
    batch = np.array([1, 4, 5])
    p, G = batch_signed_and_grads(spec, w, ds.X, ds.y)
    c = np.exp(-p)  # -l'(p) for the exponential loss
    eta = (c @ G) / ds.n - (c[batch] @ G[batch]) / len(batch)
    nw = np.linalg.norm(w)
    eta_tilde = -eta * ds.n / (nw ** (spec.depth - 1) * c.sum())
    _, tilde = noise_term(spec, w, batch, ds, EXP, return_tilde=True)
    assert np.allclose(tilde, eta_tilde, rtol=1e-11, atol=1e-13)


def test_reconstruction_identity_gd_and_sgd():
    ds = gen_linear_separable(0, 8, 2, 0.3)
    spec = NetSpec((2, 5, 1), "relu")
    for nb in (None, 3):
        cfg = ExperimentConfig(net=spec, loss=EXP, gamma=StepSchedule("constant", 0.2), batch_size=nb,
                               iterations=2000, seed=3, record_stride=50, snapshot_stride=100)
        tr = run(cfg, ds)
        for s in tr.snapshots:
            d = decompose_step(spec, s.w, s.w_next, s.batch, ds, EXP, 0.2, s.k)
            assert d.reconstruction_error <= 1e-9
            assert abs(d.lam.sum() - 1) <= 1e-12 and np.all(d.lam >= 0)
            tg, te = d.tangency_errors()
            assert tg <= 1e-9 and te <= 1e-9
            # the update identity holds with the computed remainder
            pred = d.u + d.gamma_bar * d.g_bar_s + d.gamma_bar * d.eta_bar + d.gamma_bar ** 2 * d.r
            assert np.linalg.norm(pred - normalize(s.w_next)) <= 1e-12
            if nb is None:
                assert np.all(d.eta_bar == 0)


def test_growth_fit_exact_and_noisy():
    ks = np.arange(2, 2001)
    exact = [rec(int(k), 3 * math.log(k)) for k in ks]
    g = fit_log_growth(exact, 1, (2, 2000))
    assert g.c1_hat == pytest.approx(3.0) and g.c2_hat == pytest.approx(3.0)
    assert g.r_squared == pytest.approx(1.0)
    rng = np.random.default_rng(0)
    noisy = [rec(int(k), 3 * math.log(k) + rng.uniform(-0.01, 0.01)) for k in ks]
    g = fit_log_growth(noisy, 1, (2, 2000))
    assert abs(g.c1_hat - 3) <= 0.05 and abs(g.slope - 3) <= 0.05 and g.r_squared >= 0.99
    assert not g.violation


def test_growth_fit_depth_uses_power():
    ks = np.arange(2, 500)
    recs = [rec(int(k), math.sqrt(2 * math.log(k))) for k in ks]
    assert fit_log_growth(recs, 2, (2, 499)).slope == pytest.approx(2.0)


def test_growth_fit_flags_constant_and_early_window():
    recs = [rec(k, 4.0) for k in range(2, 200)]
    g = fit_log_growth(recs, 1, (2, 199))
    assert g.slope == pytest.approx(0.0, abs=1e-12) and g.violation
    with pytest.raises(ValueError):
        fit_log_growth(recs, 1, (10, 199), k_sep=50)


def test_effective_step_report_synthetic():
    ks = np.arange(1, 100_001, 10)
    gb = 1.0 / (ks * np.log(ks + 1))
    cum = np.concatenate([[0.0], np.cumsum(gb)[:-1] * 10])
    recs = [rec(int(k), 1.0, log_gamma_bar=float(np.log(g)), gamma_bar_cumsum=float(c))
            for k, g, c in zip(ks, gb, cum)]
    rep = effective_step_report(recs, 1)
    assert rep["status"] == "holds"
    assert rep["power_law_exponent"] < 0
    # a summable sequence plateaus
    gb2 = ks ** -2.0
    cum2 = np.concatenate([[0.0], np.cumsum(gb2)[:-1] * 10])
    recs2 = [rec(int(k), 1.0, log_gamma_bar=float(np.log(g)), gamma_bar_cumsum=float(c))
             for k, g, c in zip(ks, gb2, cum2)]
    assert effective_step_report(recs2, 1)["decade_ratio"] < 0.1


def test_bounded_remainder_report_synthetic():
    class D:
        skipped = False

        def __init__(self, k, v):
            self.k, self.r_norm = k, v

    flat = [D(k, 1.0 + 0.1 * math.sin(k)) for k in range(40)]
    assert bounded_remainder_report(flat, 0)["status"] == "holds"
    growing = [D(k, float(k + 1)) for k in range(40)]
    assert bounded_remainder_report(growing, 0)["status"] == "violated"
    assert bounded_remainder_report(flat, None)["status"] == NOT_APPLICABLE


def test_eprime_on_separating_run():
    ds = gen_linear_separable(0, 10, 2, 0.3)
    cfg = ExperimentConfig(net=NetSpec((2, 1), "linear"), loss=EXP, gamma=StepSchedule("constant", 0.5),
                           iterations=20_000, record_stride=20)
    rep = eprime_diagnostics(run(cfg, ds).records, 1, ds.n)
    assert rep["all_late_conditions"]


def test_eprime_constant_weights():
    ds = gen_linear_separable(0, 10, 2, 0.3)
    cfg = ExperimentConfig(net=NetSpec((2, 1), "linear"), loss=EXP, gamma=StepSchedule("constant", 0.0),
                           iterations=200, record_stride=1)
    rep = eprime_diagnostics(run(cfg, ds).records, 1, ds.n)
    assert not rep["late"]["norm_growth"]


def test_eprime_oscillating_loss():
    # overlapping classes and a huge step: GD bounces between two states
    ds = Dataset([[1.0], [1.0]], [1, -1])
    cfg = ExperimentConfig(net=NetSpec((1, 1), "linear"), loss=LOGISTIC, gamma=StepSchedule("constant", 50.0),
                           iterations=400, record_stride=1)
    tr = run(cfg, ds, w0=[3.0])
    rep = eprime_diagnostics(tr.records, 1, ds.n)
    assert not rep["late"]["decay"]


def test_analysis_without_separation_reports_not_applicable():
    ds = gen_xor_ring(0, 8)
    cfg = ExperimentConfig(net=NetSpec((2, 1), "linear"), loss=EXP, gamma=StepSchedule("constant", 0.1),
                           iterations=300, record_stride=10, snapshot_stride=50)
    res = analyze_trajectory(run(cfg, ds), ds)
    assert res.summary["k_sep"] is None
    for c in ("claim1", "claim2", "claim4", "growth_fit"):
        assert res.summary[c]["status"] == NOT_APPLICABLE


def test_analysis_sgd_noise_claim_checked_exactly():
    ds = gen_linear_separable(1, 8, 2, 0.3)
    cfg = ExperimentConfig(net=NetSpec((2, 1), "linear"), loss=EXP, gamma=StepSchedule("constant", 0.3),
                           batch_size=4, iterations=3000, record_stride=10, snapshot_stride=100)
    res = analyze_trajectory(run(cfg, ds), ds)
    assert res.summary["claim3"]["status"] == "holds"
    assert all(r[7] <= 1e-9 for r in res.rows)
    assert math.comb(8, 4) == len(list(combinations(range(8), 4)))
