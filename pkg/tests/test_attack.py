import warnings

import numpy as np
import pytest

from meta_attack import attack, env, estimators as est, meta, policy as pol
from meta_attack.errors import ConfigError, DomainError

from oracles import micro_task, single


@pytest.fixture
def micro():
    task = micro_task(np.random.default_rng(3))
    params = pol.init_params(env.policy_shape_for(task, (3,)), np.random.default_rng(4))
    return task, params


def _tab_config(**kw):
    base = dict(meta_batch=2, inner_batch=3, outer_batch=3, iterations=6, hidden=(4,), estimator=est.VANILLA, alpha=0.3, eta1=0.5)
    base.update(kw)
    return meta.MetaConfig(**base)


def test_corrupt_targets(tab_task, tab_params):
    b = env.rollout_batch(tab_task, tab_params, 2, np.random.default_rng(0))
    assert attack.corrupt(b, 2.0, attack.ISA, "inner").reward_scale == 2.0
    assert attack.corrupt(b, 2.0, attack.ISA, "outer") is b
    assert attack.corrupt(b, 2.0, attack.OSA, "outer").reward_scale == 2.0
    assert attack.corrupt(b, 2.0, attack.CSA, "inner").reward_scale == 2.0
    with pytest.raises(ConfigError):
        attack.corrupt(b, 2.0, attack.NONE, "inner")
    with pytest.raises(ValueError):
        attack.corrupt(b, 2.0, attack.ISA, "middle")


def test_corrupt_example_rewards():
    t = env.Trajectory(np.zeros((2, 2)), np.zeros((2, 2)), np.array([1.0, 2.0]), np.zeros(2))
    b = attack.corrupt(env.TrajectoryBatch((t,)), 0.5, attack.CSA, "outer")
    np.testing.assert_array_equal(b.observed()[0].rewards, [0.5, 1.0])
    flipped = attack.corrupt(env.TrajectoryBatch((t,)), -1.0, attack.OSA, "outer")
    np.testing.assert_array_equal(flipped.observed()[0].rewards, [-1.0, -2.0])


def test_state_validation():
    with pytest.raises(ConfigError):
        attack.AttackState(lo=1, hi=1)
    with pytest.raises(ConfigError):
        attack.AttackState(lo=0, hi=0.5, delta=0.2)
    with pytest.raises(DomainError):
        attack.AttackState(delta=60)
    with pytest.raises(ConfigError):
        attack.AttackState(model="xsa")


def test_project_and_regularizer():
    assert attack.project(60, (-50, 50)) == 50
    assert attack.project(0, (-50, 50)) == 0
    assert attack.project(-50, (-50, 50)) == -50
    assert attack.regularizer_grad(3.0, 1.0) == 1.0
    assert attack.regularizer_grad(1.0, 1.0) == 0.0
    assert attack.regularizer_grad(-2.0, 0.5) == -0.5


def _rollouts(task, params, b1, alpha, model, delta, t2):
    if attack._hits(model, "inner"):
        b1 = env.scale_rewards(b1, delta)
    adapted = meta.adapt(params, b1, alpha, gamma=1.0)
    b2 = single(t2, task, adapted)
    if attack._hits(model, "outer"):
        b2 = env.scale_rewards(b2, delta)
    return meta.TaskRollouts(task, [b1, b2], [params, adapted])


def _expected_agrad(task, params, b1, alpha, model, delta):
    b1c = env.scale_rewards(b1, delta) if attack._hits(model, "inner") else b1
    adapted = meta.adapt(params, b1c, alpha, gamma=1.0)
    return sum(
        p * attack.task_attacker_grad(params, _rollouts(task, params, b1, alpha, model, delta, t2), alpha, model, gamma=1.0)
        for t2, p in env.enumerate_trajectories(task, adapted)
    )


@pytest.mark.parametrize("model", [attack.ISA, attack.OSA, attack.CSA])
def test_attacker_grad_matches_enumeration_fd(micro, model):
    task, params = micro
    b1 = env.rollout_batch(task, params, 3, np.random.default_rng(0))
    alpha, delta = 0.4, 0.7

    def f(d):
        b = env.scale_rewards(b1, d) if attack._hits(model, "inner") else b1
        j = env.exact_return(task, meta.adapt(params, b, alpha, gamma=1.0))
        return d * j if attack._hits(model, "outer") else j

    fd = (f(delta + 1e-6) - f(delta - 1e-6)) / 2e-6
    got = _expected_agrad(task, params, b1, alpha, model, delta)
    assert got == pytest.approx(fd, rel=1e-3, abs=1e-9)


def test_attacker_grad_zero_for_zero_rewards(micro):
    task, params = micro
    zero = env.TabularTask(task.transition, np.zeros_like(task.reward), task.initial, horizon=2, discount=1.0)
    b1 = env.rollout_batch(zero, params, 2, np.random.default_rng(0))
    t2 = env.rollout(zero, params, np.random.default_rng(1))
    r = _rollouts(zero, params, b1, 0.3, attack.ISA, 1.0, t2)
    assert attack.attacker_grad(params, 1.0, [r], 0.3, 0.0) == 0.0
    assert attack.attacker_grad(params, 3.0, [r], 0.3, 1.0) == 1.0


def test_attacker_grad_checks_rollout_origin(micro):
    task, params = micro
    b1 = env.rollout_batch(task, params, 2, np.random.default_rng(0))
    r = _rollouts(task, params, b1, 0.3, attack.ISA, 1.0, env.rollout(task, params, np.random.default_rng(1)))
    other = params.with_theta(params.theta + 1.0)
    with pytest.raises(ValueError):
        attack.attacker_grad(other, 1.0, [r], 0.3)
    with pytest.raises(ValueError):
        attack.attacker_grad(params, 1.0, [], 0.3)


def test_osa_flip_negates_meta_grad(tab_task, tab_params):
    rng = np.random.default_rng(0)
    b1 = env.rollout_batch(tab_task, tab_params, 3, rng)
    adapted = meta.adapt(tab_params, b1, 0.3, gamma=0.9)
    b2 = env.rollout_batch(tab_task, adapted, 3, rng)
    benign = meta.task_meta_grad(tab_params, [b1, b2], 0.3, gamma=0.9)
    flipped = meta.task_meta_grad(tab_params, [b1, attack.corrupt(b2, -1.0, attack.OSA, "outer")], 0.3, gamma=0.9)
    assert np.array_equal(flipped, -benign)


def test_eta2_zero_is_benign(tab_task):
    dist = env.TabularFixedSet([tab_task])
    cfg = _tab_config()
    p_benign, log_benign = meta.sg_mrl(cfg, dist)
    for fn in (attack.persistent_attack, attack.intermittent_attack):
        acfg = attack.AttackConfig(attack.AttackState(eta2=0.0), rounds=3, inner_k=2)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = fn(cfg, dist, acfg)
        assert set(res.deltas) == {1.0}
        assert np.array_equal(res.params.theta, p_benign.theta)
        assert res.runlog.column("train_return") == log_benign.column("train_return")


@pytest.mark.filterwarnings("ignore::UserWarning")
def test_persistent_trace_stays_in_box(tab_task):
    cfg = _tab_config(iterations=8)
    acfg = attack.AttackConfig(attack.AttackState(eta2=100.0, lo=-2.0, hi=3.0))
    res = attack.persistent_attack(cfg, env.TabularFixedSet([tab_task]), acfg)
    assert len(res.trace) == 9
    assert all(-2.0 <= d <= 3.0 for d in res.deltas)
    assert {"grad_delta", "step_delta", "step_theta", "e_delta", "e_theta"} <= set(res.runlog.rows[0])


def test_persistent_warns_and_robust_checks_timescales(tab_task):
    dist = env.TabularFixedSet([tab_task])
    acfg = attack.AttackConfig(attack.AttackState(eta2=1.0))
    with pytest.warns(UserWarning):
        attack.persistent_attack(_tab_config(iterations=1, eta1=0.5), dist, acfg)
    with pytest.raises(ConfigError):
        attack.robust_train(_tab_config(iterations=1, eta1=2.0), dist, attack.AttackConfig(attack.AttackState(eta2=1.0)))
    res = attack.robust_train(_tab_config(iterations=2, eta1=0.1), dist, attack.AttackConfig(attack.AttackState(eta2=1.0)))
    assert len(res.runlog) == 2


def test_intermittent_descent_and_literal_sign(tab_task):
    dist = env.TabularFixedSet([tab_task])
    cfg = _tab_config()
    out = {}
    for literal in (False, True):
        acfg = attack.AttackConfig(attack.AttackState(eta2=0.5), rounds=2, inner_k=3, literal_sign=literal)
        out[literal] = attack.intermittent_attack(cfg, dist, acfg)
    g0 = out[False].trace[0]["attacker_grad"]
    assert out[False].deltas[1] == pytest.approx(1.0 - 0.5 * g0)
    assert out[True].deltas[1] == pytest.approx(1.0 + 0.5 * g0)
    assert len(out[False].runlog) == 6
    assert len(out[False].checkpoints) == 2


def test_stabilization_detector_cuts_rounds(tab_task):
    cfg = _tab_config()
    acfg = attack.AttackConfig(attack.AttackState(eta2=0.0), rounds=1, inner_k=50, stabilize=True,
                               stabilize_window=2, stabilize_tol=10.0)
    res = attack.intermittent_attack(cfg, env.TabularFixedSet([tab_task]), acfg)
    assert len(res.runlog) == 4


def test_trace_csv(tmp_path, tab_task):
    acfg = attack.AttackConfig(attack.AttackState(eta2=0.1), rounds=2, inner_k=1)
    res = attack.intermittent_attack(_tab_config(), env.TabularFixedSet([tab_task]), acfg)
    res.write_trace(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == ",".join(attack.TRACE_COLUMNS)
    assert len(lines) == 4
