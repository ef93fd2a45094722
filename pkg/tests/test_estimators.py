import numpy as np
import pytest

from meta_attack import env, estimators as est, policy as pol

from oracles import fd_grad


def test_rewards_to_go_and_reward_to_go():
    r = [1.0, 2.0, 3.0]
    np.testing.assert_allclose(est.rewards_to_go(r, 0.5), [2.75, 3.5, 3.0])
    t = env.Trajectory(np.zeros((3, 2)), np.zeros((3, 2)), np.array(r), np.zeros(3))
    assert est.reward_to_go(t, 1, 0.5) == pytest.approx(2.75)
    assert est.reward_to_go(t, 3, 0.5) == pytest.approx(3.0)
    with pytest.raises(IndexError):
        est.reward_to_go(t, 4, 0.5)


def test_exact_gradient_matches_fd_of_exact_return(tab_task, tab_params):
    task = env.TabularTask(tab_task.transition, tab_task.reward, tab_task.initial, horizon=3, discount=1.0)
    f = lambda th: env.exact_return(task, tab_params.with_theta(th))
    np.testing.assert_allclose(est.exact_gradient(task, tab_params), fd_grad(f, tab_params.theta), atol=1e-8)


def test_pg_estimate_unbiased_on_tabular(tab_task, tab_params):
    task = env.TabularTask(tab_task.transition, tab_task.reward, tab_task.initial, horizon=3, discount=1.0)
    batch = env.rollout_batch(task, tab_params, 20000, np.random.default_rng(0))
    g = est.pg_estimate(tab_params, batch, 1.0)
    exact = est.exact_gradient(task, tab_params)
    assert np.linalg.norm(g - exact) < 0.1 * np.linalg.norm(exact) + 0.05


def test_raw_estimate_scales_linearly(tab_task, tab_params):
    batch = env.rollout_batch(tab_task, tab_params, 5, np.random.default_rng(0))
    for estimator in (est.VANILLA, est.GAE):
        raw = est.raw_estimate(tab_params, batch, 0.9, estimator)
        scaled = est.raw_estimate(tab_params, batch, 0.9, estimator, objective_scale=0.25)
        np.testing.assert_allclose(scaled, 0.25 * raw, rtol=1e-12)


def test_gae_with_baseline_matches_raw_estimate(tab_task, tab_params):
    batch = env.scale_rewards(env.rollout_batch(tab_task, tab_params, 6, np.random.default_rng(0)), -2.0)
    fit = est.fit_baseline(batch, gamma=0.9, horizon=3)
    gae = est.gae_estimate(tab_params, batch, fit, 0.9)
    np.testing.assert_allclose(gae, -2.0 * est.raw_estimate(tab_params, batch, 0.9, est.GAE), atol=1e-10)


def test_baseline_reduces_variance(nav_params):
    task = env.Nav2DTask([0.4, -0.3])
    rng = np.random.default_rng(0)
    van, gae = [], []
    for _ in range(30):
        b = env.rollout_batch(task, nav_params, 10, rng)
        van.append(est.raw_estimate(nav_params, b, 0.99, est.VANILLA))
        gae.append(est.raw_estimate(nav_params, b, 0.99, est.GAE))
    assert np.var(gae, axis=0).sum() < np.var(van, axis=0).sum()


def test_hvp_matches_fd_of_estimate(tab_task, tab_params, rng):
    batch = env.rollout_batch(tab_task, tab_params, 4, np.random.default_rng(0))
    v = rng.normal(size=tab_params.dim)
    h = 1e-6
    fd = (est.raw_estimate(tab_params.with_theta(tab_params.theta + h * v), batch, 0.9)
          - est.raw_estimate(tab_params.with_theta(tab_params.theta - h * v), batch, 0.9)) / (2 * h)
    np.testing.assert_allclose(est.raw_estimate_hvp(tab_params, batch, 0.9, v), fd, atol=1e-6)


def test_mean_discounted_return_honours_scale(tab_task, tab_params):
    batch = env.rollout_batch(tab_task, tab_params, 4, np.random.default_rng(0))
    base = est.mean_discounted_return(batch, 0.9)
    assert est.mean_discounted_return(env.scale_rewards(batch, 3.0), 0.9, 0.5) == pytest.approx(1.5 * base)
