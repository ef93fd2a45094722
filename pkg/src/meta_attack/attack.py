"""Reward-scaling sampling attacks and the attacker/learner game loops.

The attacker multiplies rewards by a scalar ``delta`` confined to an interval.
ISA corrupts the inner (adaptation) batches, OSA the outer batch and CSA both.
The attacker descends on the learner's (corrupted) meta objective
``f(delta, theta)`` while the learner ascends on it.
"""
from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import estimators as est
from .diagnostics import fosp_residuals
from .env import TaskDistribution, TrajectoryBatch, scale_rewards
from .errors import ConfigError, DomainError
from .meta import MetaConfig, StepResult, TaskRollouts, TrainingAborted, _checkpoint, initial_params, meta_step
from . import policy as pol
from .runlog import RunLog

log = logging.getLogger(__name__)

ISA, OSA, CSA, NONE = "isa", "osa", "csa", "none"
MODELS = (ISA, OSA, CSA, NONE)
TRACE_COLUMNS = ("iter", "delta", "attacker_grad", "train_return", "eval_return")


def _hits(model: str, which: str) -> bool:
    if which not in ("inner", "outer"):
        raise ValueError(f"which must be 'inner' or 'outer', got {which!r}")
    return model == CSA or (model == ISA and which == "inner") or (model == OSA and which == "outer")


@dataclass
class AttackState:
    delta: float = 1.0
    lo: float = -50.0
    hi: float = 50.0
    model: str = ISA
    lambda_reg: float = 0.0
    eta2: float = 0.01

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"unknown attack model {self.model!r}")
        if not self.lo < self.hi:
            raise ConfigError(f"empty interval [{self.lo}, {self.hi}]")
        if self.hi - self.lo < 1:
            raise ConfigError("the admissible interval must have diameter >= 1")
        if self.lambda_reg < 0 or self.eta2 < 0:
            raise ConfigError("lambda_reg and eta2 must be nonnegative")
        if not self.lo <= self.delta <= self.hi:
            raise DomainError(f"delta={self.delta} outside [{self.lo}, {self.hi}]")

    @property
    def bounds(self) -> tuple[float, float]:
        return self.lo, self.hi


def corrupt(batch: TrajectoryBatch, delta: float, model: str, which: str) -> TrajectoryBatch:
    """Scale every reward of ``batch`` by ``delta`` if ``model`` targets ``which``."""
    if model == NONE:
        raise ConfigError("corrupt needs an attack model")
    return scale_rewards(batch, delta) if _hits(model, which) else batch


class SamplingAttack:
    """Hook that sits between the sampler and the learner (see ``meta.AttackHook``)."""

    def __init__(self, state: AttackState):
        self.state = state

    @property
    def delta(self) -> float:
        return self.state.delta

    def corrupt(self, batch: TrajectoryBatch, which: str) -> TrajectoryBatch:
        if self.state.model == NONE:
            return batch
        return corrupt(batch, self.state.delta, self.state.model, which)


def project(delta: float, bounds: tuple[float, float]) -> float:
    lo, hi = bounds
    return float(min(max(delta, lo), hi))


def regularizer_grad(delta: float, lam: float) -> float:
    """Subgradient of ``lam * |delta - 1|`` (zero at delta = 1)."""
    return float(lam * np.sign(delta - 1.0))


def task_attacker_grad(
    params: pol.PolicyParams,
    rollouts: TaskRollouts,
    alpha: float,
    model: str = ISA,
    gamma: float = 0.99,
    estimator: str = est.VANILLA,
    objective_scale: float = 1.0,
) -> float:
    """d f / d delta for one task, with the learner's data held fixed.

    ``f = s_out * J(theta'(delta))`` where ``s_out`` is delta if the outer batch is
    attacked. Inner corruption contributes ``alpha * <grad J(theta'), g>`` (chained
    through every adaptation step); outer corruption contributes ``J(theta')``.
    """
    inner = rollouts.batches[:-1]
    outer = rollouts.outer
    chain = rollouts.chain
    if chain[0].digest() != params.digest():
        raise ValueError("rollouts were not collected at these parameters")
    total = 0.0
    if _hits(model, "inner"):
        w = outer.reward_scale * est.raw_estimate(chain[-1], outer, gamma, estimator, objective_scale)
        for j in range(len(inner) - 1, -1, -1):
            b, theta_j = inner[j], chain[j]
            g = est.raw_estimate(theta_j, b, gamma, estimator, objective_scale)
            total += alpha * float(w @ g)
            if j:
                coef = alpha * b.reward_scale
                w = w + coef * est.raw_estimate_hvp(theta_j, b, gamma, w, estimator, objective_scale)
    if _hits(model, "outer"):
        total += est.mean_discounted_return(replace(outer, reward_scale=1.0), gamma, objective_scale)
    return total


def attacker_grad(
    params: pol.PolicyParams,
    delta: float,
    rollouts: Sequence[TaskRollouts],
    alpha: float,
    lam: float = 0.0,
    model: str = ISA,
    gamma: float = 0.99,
    estimator: str = est.VANILLA,
    objective_scale: float = 1.0,
) -> float:
    """Task-averaged attacker gradient plus the ``|delta - 1|`` subgradient."""
    if not rollouts:
        raise ValueError("attacker_grad needs at least one task")
    per_task = [task_attacker_grad(params, r, alpha, model, gamma, estimator, objective_scale) for r in rollouts]
    return float(np.mean(per_task)) + regularizer_grad(delta, lam)


@dataclass
class AttackConfig:
    """Attacker schedule on top of a learner ``MetaConfig``."""

    state: AttackState = field(default_factory=AttackState)
    rounds: int = 30
    inner_k: int = 10
    literal_sign: bool = False
    stabilize: bool = False
    stabilize_window: int = 20
    stabilize_tol: float = 1e-2
    eval_every: int = 0
    eval_seeds: tuple[int, ...] = (0,)


@dataclass
class AttackResult:
    params: pol.PolicyParams
    runlog: RunLog
    trace: list[dict]
    checkpoints: list[pol.PolicyParams]

    @property
    def deltas(self) -> list[float]:
        return [r["delta"] for r in self.trace]

    def write_trace(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for r in self.trace:
                w.writerow(["" if r.get(c) is None else repr(r[c]) if isinstance(r[c], float) else r[c] for c in TRACE_COLUMNS])


def _stabilized(returns: list[float], window: int, tol: float) -> bool:
    if len(returns) < 2 * window:
        return False
    prev = np.mean(returns[-2 * window : -window])
    last = np.mean(returns[-window:])
    return abs(last - prev) <= tol * max(abs(prev), 1e-12)


def _learner_step(params, dist, config, it, hook, runlog: RunLog) -> StepResult:
    try:
        return meta_step(params, dist, config, it, 1.0, hook)
    except FloatingPointError as exc:
        _checkpoint(params, config, "checkpoint_last.bin", it)
        raise TrainingAborted(str(exc), runlog, params, iteration=it, delta=hook.delta) from exc


def _agrad(params, step: StepResult, config: MetaConfig, state: AttackState) -> float:
    return attacker_grad(
        params, state.delta, step.rollouts, config.alpha, state.lambda_reg, state.model,
        config.gamma, config.estimator, config.objective_scale,
    )


def _maybe_eval(params, dist, config, acfg: AttackConfig, index: int):
    if acfg.eval_every and index % acfg.eval_every == 0:
        from .meta import evaluate

        return evaluate(params, dist, config, acfg.eval_seeds)[0]
    return None


def intermittent_attack(
    config: MetaConfig, dist: TaskDistribution, acfg: AttackConfig, params: pol.PolicyParams | None = None
) -> AttackResult:
    """Dormant attacker: K corrupted meta-iterations at fixed delta, then one delta step.

    The delta step is projected descent on the learner's objective, computed
    from the learner's own last batch (no extra sampling). ``literal_sign``
    switches it to ascent for fidelity experiments.
    """
    state = acfg.state
    hook = SamplingAttack(state)
    params = initial_params(config, dist) if params is None else params
    runlog, trace, ckpts = RunLog(), [], []
    sign = 1.0 if acfg.literal_sign else -1.0
    it = 0
    for rnd in range(acfg.rounds):
        returns = []
        step = None
        theta_eval = params
        for _ in range(acfg.inner_k):
            t0 = time.perf_counter()
            theta_eval = params
            step = _learner_step(params, dist, config, it, hook, runlog)
            returns.append(step.train_return())
            runlog.append(
                iter=it,
                delta=state.delta,
                train_return=returns[-1],
                objective=step.objective(config.gamma, config.objective_scale),
                inner_return=step.inner_return(),
                grad_norm_theta=float(np.linalg.norm(step.grad.grad)),
                step_theta=float(np.linalg.norm(step.params.theta - params.theta)),
                wall_ms=(time.perf_counter() - t0) * 1e3,
            )
            params = step.params
            it += 1
            if acfg.stabilize and _stabilized(returns, acfg.stabilize_window, acfg.stabilize_tol):
                break
        ckpts.append(params)
        if step is None:
            break
        g = _agrad(theta_eval, step, config, state)
        new = project(state.delta + sign * state.eta2 * g, state.bounds)
        row = runlog.rows[-1]
        res = fosp_residuals(g, step.grad.grad, state.delta, state.bounds)
        row.update(grad_delta=g, step_delta=abs(new - state.delta), e_delta=res.e_delta, e_theta=res.e_theta)
        trace.append(
            dict(iter=rnd, delta=state.delta, attacker_grad=g, train_return=float(np.mean(returns)),
                 eval_return=_maybe_eval(params, dist, config, acfg, rnd))
        )
        log.info("round %d delta %.4f grad %.3g", rnd, state.delta, g)
        state.delta = new
    trace.append(dict(iter=len(trace), delta=state.delta, attacker_grad=None, train_return=None, eval_return=None))
    return AttackResult(params, runlog, trace, ckpts)


def _simultaneous(config, dist, acfg: AttackConfig, params) -> AttackResult:
    state = acfg.state
    hook = SamplingAttack(state)
    params = initial_params(config, dist) if params is None else params
    runlog, trace = RunLog(), []
    for it in range(config.iterations):
        t0 = time.perf_counter()
        step = _learner_step(params, dist, config, it, hook, runlog)
        g = _agrad(params, step, config, state)
        new = project(state.delta - state.eta2 * g, state.bounds)
        res = fosp_residuals(g, step.grad.grad, state.delta, state.bounds)
        runlog.append(
            iter=it,
            delta=state.delta,
            train_return=step.train_return(),
            objective=step.objective(config.gamma, config.objective_scale),
            inner_return=step.inner_return(),
            grad_norm_theta=float(np.linalg.norm(step.grad.grad)),
            grad_delta=g,
            step_theta=float(np.linalg.norm(step.params.theta - params.theta)),
            step_delta=abs(new - state.delta),
            e_delta=res.e_delta,
            e_theta=res.e_theta,
            wall_ms=(time.perf_counter() - t0) * 1e3,
        )
        trace.append(
            dict(iter=it, delta=state.delta, attacker_grad=g, train_return=runlog.rows[-1]["train_return"],
                 eval_return=_maybe_eval(step.params, dist, config, acfg, it))
        )
        params = step.params
        state.delta = new
    trace.append(dict(iter=len(trace), delta=state.delta, attacker_grad=None, train_return=None, eval_return=None))
    return AttackResult(params, runlog, trace, [params])


def persistent_attack(
    config: MetaConfig, dist: TaskDistribution, acfg: AttackConfig, params: pol.PolicyParams | None = None
) -> AttackResult:
    """Learner ascent and attacker projected descent every iteration on the same batches."""
    if config.eta1 <= acfg.state.eta2:
        warnings.warn("persistent attack expects eta1 > eta2 (learner on the fast timescale)", stacklevel=2)
    return _simultaneous(config, dist, acfg, params)


def robust_train(
    config: MetaConfig, dist: TaskDistribution, acfg: AttackConfig, params: pol.PolicyParams | None = None
) -> AttackResult:
    """The persistent loop with the attacker on the fast timescale (eta1 < eta2)."""
    if not config.eta1 < acfg.state.eta2:
        raise ConfigError("robust training needs eta1 < eta2")
    return _simultaneous(config, dist, acfg, params)
