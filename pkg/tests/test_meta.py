import numpy as np
import pytest

from meta_attack import attack, env, estimators as est, meta, policy as pol
from meta_attack.errors import ConfigError, ShapeError

from oracles import expected_meta_grad, fd_grad, meta_objective, micro_task


@pytest.fixture
def micro():
    task = micro_task(np.random.default_rng(0))
    params = pol.init_params(env.policy_shape_for(task, (3,)), np.random.default_rng(1))
    return task, params


def _tab_config(**kw):
    base = dict(meta_batch=2, inner_batch=3, outer_batch=3, iterations=3, hidden=(4,), estimator=est.VANILLA, alpha=0.3, eta1=0.5)
    base.update(kw)
    return meta.MetaConfig(**base)


def test_adapt_formula(tab_task, tab_params):
    b = env.rollout_batch(tab_task, tab_params, 4, np.random.default_rng(0))
    out = meta.adapt(tab_params, b, 0.2, 1.5, gamma=0.9)
    expect = tab_params.theta + 0.2 * 1.5 * est.raw_estimate(tab_params, b, 0.9)
    np.testing.assert_allclose(out.theta, expect, rtol=0, atol=1e-15)


def test_alpha_zero_reduces_to_policy_gradient(tab_task, tab_params):
    b1 = env.rollout_batch(tab_task, tab_params, 4, np.random.default_rng(0))
    b2 = env.rollout_batch(tab_task, tab_params, 4, np.random.default_rng(1))
    g = meta.task_meta_grad(tab_params, [b1, b2], 0.0, gamma=0.9)
    expect = est.raw_estimate(tab_params, b2, 0.9) + est.mean_discounted_return(b2, 0.9) * est.mean_score(tab_params, b1)
    np.testing.assert_allclose(g, expect, atol=1e-14)


def test_meta_grad_unbiased_by_enumeration(micro):
    task, params = micro
    g = expected_meta_grad(task, params, 0.5)
    fd = fd_grad(lambda th: meta_objective(task, params.with_theta(th), 0.5), params.theta)
    np.testing.assert_allclose(g, fd, atol=1e-6)


def test_chain_is_backpropagated_through_two_steps(micro):
    task, params = micro
    rng = np.random.default_rng(5)
    b1 = env.rollout_batch(task, params, 2, rng)
    b2 = env.rollout_batch(task, params, 2, rng)
    b3 = env.rollout_batch(task, params, 2, rng)

    # with the batches frozen, the chain rule part of the estimator is the gradient of
    # the surrogate J_hat(theta''), where J_hat is the batch's score-weighted objective
    def surrogate(th):
        chain = meta.adapt_chain(params.with_theta(th), [b1, b2], 0.4, gamma=1.0)
        w = est.raw_step_weights(b3, 1.0)
        return float(w @ pol.log_prob_batch(chain[-1], b3.states, b3.actions)) / len(b3)

    j3 = est.mean_discounted_return(b3, 1.0)
    chain = meta.adapt_chain(params, [b1, b2], 0.4, gamma=1.0)
    full = meta.task_meta_grad(params, [b1, b2, b3], 0.4, gamma=1.0)
    # subtract the score terms, each propagated back through the later adaptation Jacobians
    s1 = est.mean_score(chain[0], b1)
    s2 = est.mean_score(chain[1], b2)
    s2_back = s2 + 0.4 * est.raw_estimate_hvp(chain[0], b1, 1.0, s2)
    chain_part = full - j3 * (s1 + s2_back)
    np.testing.assert_allclose(chain_part, fd_grad(surrogate, params.theta, 1e-6), atol=1e-6)


def test_meta_grad_shape_errors(tab_task, tab_params):
    b = env.rollout_batch(tab_task, tab_params, 2, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        meta.task_meta_grad(tab_params, [b], 0.1)


def test_config_validation():
    with pytest.raises(ConfigError):
        meta.MetaConfig(alpha=-1)
    with pytest.raises(ConfigError):
        meta.MetaConfig(adaptation_depth=3)
    with pytest.raises(ConfigError):
        meta.MetaConfig(estimator="td")


def test_sg_mrl_deterministic_and_logged(tab_task):
    dist = env.TabularFixedSet([tab_task])
    cfg = _tab_config()
    p1, log1 = meta.sg_mrl(cfg, dist)
    p2, log2 = meta.sg_mrl(cfg, dist)
    assert np.array_equal(p1.theta, p2.theta)
    assert log1.deterministic_rows() == log2.deterministic_rows()
    assert len(log1) == 3
    assert set(log1.rows[0]) >= {"iter", "delta", "train_return", "grad_norm_theta", "wall_ms"}


def test_zero_iterations_returns_init(tab_task):
    dist = env.TabularFixedSet([tab_task])
    cfg = _tab_config(iterations=0)
    p, log = meta.sg_mrl(cfg, dist)
    assert np.array_equal(p.theta, meta.initial_params(cfg, dist).theta)
    assert len(log) == 0


def test_two_step_variant_runs(tab_task):
    dist = env.TabularFixedSet([tab_task])
    with pytest.raises(ConfigError):
        meta.sg_mrl_two_step(_tab_config(), dist)
    p, log = meta.sg_mrl_two_step(_tab_config(adaptation_depth=2, iterations=2), dist)
    assert len(log) == 2 and np.all(np.isfinite(p.theta))


def test_inner_delta_matches_corruption_hook(tab_task):
    dist = env.TabularFixedSet([tab_task])
    cfg = _tab_config(log_losses=True)
    hook = attack.SamplingAttack(attack.AttackState(delta=-0.7, model=attack.ISA))
    p1, log1 = meta.sg_mrl(cfg, dist, attack_hook=hook)
    p2, log2 = meta.sg_mrl(cfg, dist, inner_delta=-0.7)
    assert np.array_equal(p1.theta, p2.theta)
    assert log1.deterministic_rows() == log2.deterministic_rows()


def test_loss_pair_equal_without_attack(tab_task):
    dist = env.TabularFixedSet([tab_task])
    cfg = _tab_config(iterations=2, log_losses=True)
    _, log = meta.sg_mrl(cfg, dist)
    for row in log.rows:
        assert row["attacked_loss"] == pytest.approx(row["actual_loss"], abs=1e-12)


def test_checkpoints_written(tmp_path, tab_task):
    cfg = _tab_config(checkpoint_every=2, iterations=4, out_dir=str(tmp_path))
    p, _ = meta.sg_mrl(cfg, env.TabularFixedSet([tab_task]))
    back, extra = pol.load_checkpoint(tmp_path / "checkpoint_00004.bin")
    assert np.array_equal(back.theta, p.theta) and extra["iter"] == 4


def test_evaluate_is_deterministic():
    dist = env.Nav2DUniform()
    cfg = meta.MetaConfig(hidden=(8,), eval_tasks=3, inner_batch=3, outer_batch=3)
    params = meta.initial_params(cfg, dist)
    a = meta.evaluate(params, dist, cfg, [0, 1])
    assert a == meta.evaluate(params, dist, cfg, [0, 1])
    assert a[0] < 0
