import numpy as np
import pytest

from meta_attack import diagnostics as dg, env, estimators as est, meta, policy as pol, synthetic as syn
from meta_attack.errors import AlignmentError, DomainError

from oracles import micro_task


def test_fosp_examples():
    assert dg.fosp_residuals(0.0, np.zeros(3), 0.0, (-5, 5)) == dg.FospResidual(0.0, 0.0)
    assert dg.fosp_residuals(2.0, [3.0, 4.0], 0.0, (-5, 5)) == dg.FospResidual(2.0, 5.0)
    assert dg.fosp_residuals(2.0, [0.0], -5.0, (-5, 5)).e_delta == 0.0
    assert dg.fosp_residuals(-2.0, [0.0], 5.0, (-5, 5)).e_delta == 0.0
    assert dg.fosp_residuals(2.0, [0.0], -4.5, (-5, 5)).e_delta == pytest.approx(1.0)
    with pytest.raises(DomainError):
        dg.fosp_residuals(0.0, [0.0], 6.0, (-5, 5))


def test_fosp_within():
    r = dg.FospResidual(1e-7, 2e-7)
    assert r.within(1e-6) and not r.within(1e-7)


def test_fosp_zero_at_synthetic_solution():
    p = syn.QuadraticPL(a=[1.0, 2.0], delta0=0.3, lo=-5, hi=5)
    d0, t0 = syn.closed_forms(p, 1.0).fosp
    gd, gt = p.exact_grads(d0, t0)
    r = dg.fosp_residuals(gd, gt, d0, p.bounds)
    assert r.e_delta <= 1e-10 and r.e_theta <= 1e-10


def test_pl_rsi_quadratic_gives_unit_mu():
    p = syn.QuadraticPL(a=[1.0, -1.0], lo=-5, hi=5)
    delta = 0.8
    rng = np.random.default_rng(0)
    thetas = p.theta_star(delta) + rng.normal(size=(50, 2))
    f = [p.value(delta, t) for t in thetas]
    g = [p.exact_grads(delta, t)[1] for t in thetas]
    rows = dg.pl_rsi_log(f, g, thetas, p.theta_star(delta), p.phi(delta))
    fit = dg.fit_pl_rsi(rows)
    assert fit["mu_pl"] == pytest.approx(1.0, abs=1e-12)
    assert fit["mu_rsi"] == pytest.approx(1.0, abs=1e-12)


def test_pl_rsi_blank_reference_columns():
    rows = dg.pl_rsi_log([1.0, 2.0], [0.5, 0.1])
    assert rows[0]["rsi_inner"] is None and rows[0]["gap"] == 1.0
    assert np.isnan(dg.fit_pl_rsi(rows)["mu_rsi"])
    with pytest.raises(AlignmentError):
        dg.pl_rsi_log([1.0], [0.5, 0.1])


def test_fit_mu_percentile():
    lhs = np.arange(1, 101, dtype=float)
    mu, frac = dg.fit_mu(lhs, np.ones(100))
    assert mu == pytest.approx(np.percentile(lhs, 5))
    assert frac >= 0.95


def _tab_config(**kw):
    base = dict(meta_batch=2, inner_batch=3, outer_batch=3, iterations=2, hidden=(4,), estimator=est.VANILLA, alpha=0.3)
    base.update(kw)
    return meta.MetaConfig(**base)


def test_loss_decomposition_identity_at_delta_one(tab_task):
    dist = env.TabularFixedSet([tab_task])
    cfg = _tab_config()
    p0 = meta.initial_params(cfg, dist)
    ckpts = [p0, p0.with_theta(p0.theta + 0.1)]
    out = dg.loss_decomposition(ckpts, ckpts, [1.0, 1.0], dist, cfg)
    assert np.array_equal(out["attacked"], out["actual"])
    assert np.array_equal(out["benchmark"], out["actual"])
    flipped = dg.loss_decomposition(ckpts, ckpts, [-2.0, -2.0], dist, cfg)
    assert not np.array_equal(flipped["attacked"], flipped["actual"])


def test_loss_decomposition_alignment(tab_task):
    dist = env.TabularFixedSet([tab_task])
    cfg = _tab_config()
    p0 = meta.initial_params(cfg, dist)
    with pytest.raises(AlignmentError):
        dg.loss_decomposition([p0], [p0, p0], [1.0, 1.0], dist, cfg)
    with pytest.raises(ValueError):
        dg.loss_decomposition([], [], [], dist, cfg)


def test_meta_objective_grad_matches_fd():
    rng = np.random.default_rng(0)
    tasks = [micro_task(rng) for _ in range(2)]
    params = pol.init_params(env.policy_shape_for(tasks[0], (2,)), np.random.default_rng(1))
    _, g = dg._meta_objective_grad(tasks, params, 0.3, 1.5)
    h = 1e-5
    fd = np.array([
        (dg._meta_objective_grad(tasks, params.with_theta(params.theta + h * e), 0.3, 1.5)[0]
         - dg._meta_objective_grad(tasks, params.with_theta(params.theta - h * e), 0.3, 1.5)[0]) / (2 * h)
        for e in np.eye(params.dim)
    ])
    np.testing.assert_allclose(g, fd, atol=1e-7)


def test_prop1_identity_at_delta_one():
    rng = np.random.default_rng(0)
    tasks = [micro_task(rng)]
    params = pol.init_params(env.policy_shape_for(tasks[0], (2,)), np.random.default_rng(1))
    rep = dg.prop1_check(tasks, params, 0.2, deltas=(1.0,), iterations=5, segment_points=2)
    assert rep.lhs == rep.rhs and rep.c_needed == [0.0]
    assert rep.holds


def test_line_chart_is_deterministic(tmp_path):
    dg.line_chart(tmp_path / "a.svg", {"x": [1.0, 2.0, None, 3.0]}, title="t")
    dg.line_chart(tmp_path / "b.svg", {"x": [1.0, 2.0, None, 3.0]}, title="t")
    a = (tmp_path / "a.svg").read_bytes()
    assert a == (tmp_path / "b.svg").read_bytes()
    assert a.lstrip().startswith(b"<?xml")
    with pytest.raises(ValueError):
        dg.line_chart(tmp_path / "c.svg", {})


def test_plot_csv_missing_column(tmp_path):
    (tmp_path / "r.csv").write_text("iter,delta\n0,1.0\n1,0.5\n")
    dg.plot_csv(tmp_path / "r.csv", tmp_path / "r.svg", ["delta"])
    assert (tmp_path / "r.svg").exists()
    with pytest.raises(KeyError):
        dg.plot_csv(tmp_path / "r.csv", tmp_path / "r.svg", ["nope"])
