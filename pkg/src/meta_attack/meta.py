"""SG-MRL meta-training with one- or two-step policy-gradient adaptation."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import estimators as est
from . import policy as pol
from .env import (
    Task,
    TaskDistribution,
    TrajectoryBatch,
    policy_shape_for_dist,
    rollout_batch,
    sample_tasks,
)
from .errors import ConfigError, NumericalError, ShapeError
from .runlog import RunLog

log = logging.getLogger(__name__)

# stream tags for seed derivation: (seed, iteration, tag, task index, ...)
_TASKS, _INNER, _OUTER, _FRESH = 0, 1, 2, 3
_EVAL = 7919


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator addressed by integer keys (schedule independent)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


@dataclass(frozen=True)
class MetaConfig:
    alpha: float = 0.1
    eta1: float = 0.1
    meta_batch: int = 10
    inner_batch: int = 10
    outer_batch: int = 10
    iterations: int = 300
    adaptation_depth: int = 1
    gamma: float = 0.99
    estimator: str = est.GAE
    hidden: tuple[int, ...] = (64, 64)
    init_log_std: float = -1.0
    seed: int = 0
    eq3_literal: bool = False
    score_reduction: str = "mean"
    checkpoint_every: int = 0
    out_dir: str | None = None
    log_losses: bool = False
    eval_tasks: int = 20
    objective_scale: float = 1.0
    output_init_scale: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.eta1 < 0:
            raise ConfigError("alpha and eta1 must be nonnegative")
        if self.meta_batch < 1 or self.inner_batch < 1 or self.outer_batch < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.adaptation_depth not in (1, 2):
            raise ConfigError("adaptation_depth must be 1 or 2")
        if self.estimator not in (est.VANILLA, est.GAE):
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if self.score_reduction not in ("mean", "sum"):
            raise ConfigError("score_reduction must be 'mean' or 'sum'")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        object.__setattr__(self, "hidden", tuple(self.hidden))


class AttackHook(Protocol):
    """Reward corruption applied by whoever sits between sampler and learner."""

    def corrupt(self, batch: TrajectoryBatch, which: str) -> TrajectoryBatch: ...


@dataclass
class MetaGradEstimate:
    grad: np.ndarray
    per_task: list[np.ndarray]


@dataclass
class TaskRollouts:
    """Everything one task contributed to an iteration.

    ``chain[j]`` is the policy that sampled ``batches[j]``; the last batch is
    the outer batch collected under the fully adapted policy ``chain[-1]``.
    """

    task: Task
    batches: list[TrajectoryBatch]
    chain: list[pol.PolicyParams]

    @property
    def inner(self) -> TrajectoryBatch:
        return self.batches[0]

    @property
    def outer(self) -> TrajectoryBatch:
        return self.batches[-1]

    @property
    def adapted(self) -> pol.PolicyParams:
        return self.chain[-1]


@dataclass
class StepResult:
    params: pol.PolicyParams
    grad: MetaGradEstimate
    rollouts: list[TaskRollouts]

    def train_return(self) -> float:
        return float(np.mean([r.outer.mean_total_reward() for r in self.rollouts]))

    def objective(self, gamma: float, objective_scale: float = 1.0) -> float:
        """Batch estimate of the (possibly corrupted) meta objective the learner ascends."""
        return float(np.mean([est.mean_discounted_return(r.outer, gamma, objective_scale) for r in self.rollouts]))

    def inner_return(self) -> float:
        return float(np.mean([r.inner.mean_total_reward() for r in self.rollouts]))


def _inner_coef(alpha: float, delta: float, batch: TrajectoryBatch) -> float:
    # single canonical product: corrupting the batch by d or passing delta=d gives the same bits
    return alpha * delta * batch.reward_scale


def adapt(
    params: pol.PolicyParams,
    batch: TrajectoryBatch,
    alpha: float,
    delta: float = 1.0,
    gamma: float = 0.99,
    estimator: str = est.VANILLA,
    objective_scale: float = 1.0,
) -> pol.PolicyParams:
    """theta' = theta + alpha * delta * grad J_hat(theta, D)."""
    step = _inner_coef(alpha, delta, batch) * est.raw_estimate(params, batch, gamma, estimator, objective_scale)
    theta = params.theta + step
    if not np.all(np.isfinite(theta)):
        raise NumericalError("non-finite adapted parameters", alpha=alpha, delta=delta, task=batch.source_task_id)
    return params.with_theta(theta)


def adapt_chain(
    params, inner_batches, alpha, delta=1.0, gamma=0.99, estimator=est.VANILLA, objective_scale=1.0
) -> list[pol.PolicyParams]:
    chain = [params]
    for b in inner_batches:
        chain.append(adapt(chain[-1], b, alpha, delta, gamma, estimator, objective_scale))
    return chain


def task_meta_grad(
    params: pol.PolicyParams,
    batches: Sequence[TrajectoryBatch],
    alpha: float,
    delta: float = 1.0,
    gamma: float = 0.99,
    estimator: str = est.VANILLA,
    eq3_literal: bool = False,
    score_reduction: str = "mean",
    chain: Sequence[pol.PolicyParams] | None = None,
    objective_scale: float = 1.0,
) -> np.ndarray:
    """One task's meta-gradient term, back-propagated through the adaptation chain.

    For a single inner batch this is
    ``gJ(theta', D2) (I + a*d*dg) + J(theta', D2) * score(theta, D1)``.
    """
    inner, outer = list(batches[:-1]), batches[-1]
    if not inner:
        raise ShapeError("need at least one inner batch and one outer batch")
    if chain is None:
        chain = adapt_chain(params, inner, alpha, delta, gamma, estimator, objective_scale)
    elif len(chain) != len(batches):
        raise ShapeError(f"{len(chain)} chain entries for {len(batches)} batches")
    jac_alpha = 1.0 if eq3_literal else alpha
    u = outer.reward_scale * est.raw_estimate(chain[-1], outer, gamma, estimator, objective_scale)
    j_out = est.mean_discounted_return(outer, gamma, objective_scale)
    for j in range(len(inner) - 1, -1, -1):
        b, theta_j = inner[j], chain[j]
        coef = _inner_coef(jac_alpha, delta, b)
        score = est.mean_score(theta_j, b)
        if score_reduction == "sum":
            score = score * len(b)
        u = u + coef * est.raw_estimate_hvp(theta_j, b, gamma, u, estimator, objective_scale) + j_out * score
    return u


def meta_grad(
    params: pol.PolicyParams,
    task_batches: Sequence[Sequence[TrajectoryBatch]],
    alpha: float,
    delta: float = 1.0,
    gamma: float = 0.99,
    estimator: str = est.VANILLA,
    eq3_literal: bool = False,
    score_reduction: str = "mean",
    chains: Sequence[Sequence[pol.PolicyParams]] | None = None,
    objective_scale: float = 1.0,
) -> MetaGradEstimate:
    per_task = [
        task_meta_grad(
            params, b, alpha, delta, gamma, estimator, eq3_literal, score_reduction,
            None if chains is None else chains[i], objective_scale,
        )
        for i, b in enumerate(task_batches)
    ]
    return MetaGradEstimate(np.mean(per_task, axis=0), per_task)


def collect(
    task: Task,
    params: pol.PolicyParams,
    config: MetaConfig,
    it: int,
    index: int,
    delta: float = 1.0,
    hook: AttackHook | None = None,
) -> TaskRollouts:
    """Sample inner batches (adapting after each) and the outer batch for one task."""
    chain, batches = [params], []
    for j in range(config.adaptation_depth):
        b = rollout_batch(task, chain[-1], config.inner_batch, stream(config.seed, it, _INNER, index, j))
        if hook is not None:
            b = hook.corrupt(b, "inner")
        batches.append(b)
        chain.append(adapt(chain[-1], b, config.alpha, delta, config.gamma, config.estimator, config.objective_scale))
    b = rollout_batch(task, chain[-1], config.outer_batch, stream(config.seed, it, _OUTER, index))
    if hook is not None:
        b = hook.corrupt(b, "outer")
    batches.append(b)
    return TaskRollouts(task, batches, chain)


def meta_step(
    params: pol.PolicyParams,
    dist: TaskDistribution,
    config: MetaConfig,
    it: int,
    delta: float = 1.0,
    hook: AttackHook | None = None,
    eta1: float | None = None,
) -> StepResult:
    """One SG-MRL iteration: sample tasks, adapt, estimate and apply the meta-gradient."""
    eta1 = config.eta1 if eta1 is None else eta1
    tasks = sample_tasks(dist, config.meta_batch, stream(config.seed, it, _TASKS))
    rollouts = [collect(t, params, config, it, i, delta, hook) for i, t in enumerate(tasks)]
    mg = meta_grad(
        params,
        [r.batches for r in rollouts],
        config.alpha,
        delta,
        config.gamma,
        config.estimator,
        config.eq3_literal,
        config.score_reduction,
        chains=[r.chain for r in rollouts],
        objective_scale=config.objective_scale,
    )
    theta = params.theta + eta1 * mg.grad
    if not np.all(np.isfinite(theta)):
        raise NumericalError("non-finite meta update", iteration=it)
    return StepResult(params.with_theta(theta), mg, rollouts)


def initial_params(config: MetaConfig, dist: TaskDistribution) -> pol.PolicyParams:
    shape = policy_shape_for_dist(dist, config.hidden)
    return pol.init_params(
        shape, stream(config.seed, 10**6), log_std=config.init_log_std, output_scale=config.output_init_scale
    )


def reinforce_loss(params: pol.PolicyParams, batch: TrajectoryBatch, gamma: float) -> float:
    """Empirical reinforce loss: mean over trajectories of sum_h log pi(a_h|s_h) * A(s_h)."""
    baseline = est.fit_baseline(batch, gamma=gamma)
    adv = batch.reward_scale * est.batch_rewards_to_go(batch, gamma) - baseline.predict(batch.states, batch.time_index)
    return float(adv @ pol.log_prob_batch(params, batch.states, batch.actions)) / len(batch)


def loss_pair(step: StepResult, params: pol.PolicyParams, config: MetaConfig, it: int) -> tuple[float, float]:
    """(attacked, actual) reinforce losses for the tasks of one iteration.

    Attacked: the learner's own (possibly corrupted) adaptation scored on its
    outer batch. Actual: clean adaptation from the same inner data, scored on a
    fresh clean outer batch drawn from the outer stream of the iteration.
    """
    attacked, actual = [], []
    for i, r in enumerate(step.rollouts):
        attacked.append(reinforce_loss(r.adapted, r.outer, config.gamma))
        clean_inner = [TrajectoryBatch(b.trajectories, b.source_task_id, b.source_params_hash) for b in r.batches[:-1]]
        clean_chain = adapt_chain(
            params, clean_inner, config.alpha, 1.0, config.gamma, config.estimator, config.objective_scale
        )
        fresh = rollout_batch(r.task, clean_chain[-1], config.outer_batch, stream(config.seed, it, _OUTER, i))
        actual.append(reinforce_loss(clean_chain[-1], fresh, config.gamma))
    return float(np.mean(attacked)), float(np.mean(actual))


class TrainingAborted(NumericalError):
    """Raised when training blows up; carries the partial log and last good params."""

    def __init__(self, message, runlog: RunLog, params: pol.PolicyParams, **context):
        super().__init__(message, **context)
        self.runlog = runlog
        self.params = params


def _checkpoint(params: pol.PolicyParams, config: MetaConfig, name: str, it: int) -> None:
    if config.out_dir:
        Path(config.out_dir).mkdir(parents=True, exist_ok=True)
        pol.save_checkpoint(params, Path(config.out_dir) / name, {"iter": it, "seed": config.seed})


def sg_mrl(
    config: MetaConfig,
    dist: TaskDistribution,
    attack_hook: AttackHook | None = None,
    inner_delta: float = 1.0,
    params: pol.PolicyParams | None = None,
    runlog: RunLog | None = None,
) -> tuple[pol.PolicyParams, RunLog]:
    """Run ``config.iterations`` SG-MRL iterations from ``params`` (or a fresh init)."""
    params = initial_params(config, dist) if params is None else params
    runlog = RunLog() if runlog is None else runlog
    delta_col = getattr(attack_hook, "delta", inner_delta)
    for it in range(config.iterations):
        t0 = time.perf_counter()
        try:
            step = meta_step(params, dist, config, it, inner_delta, attack_hook)
        except FloatingPointError as exc:
            _checkpoint(params, config, "checkpoint_last.bin", it)
            raise TrainingAborted(str(exc), runlog, params, iteration=it) from exc
        row = dict(
            iter=it,
            delta=float(delta_col),
            train_return=step.train_return(),
            objective=step.objective(config.gamma, config.objective_scale),
            inner_return=step.inner_return(),
            grad_norm_theta=float(np.linalg.norm(step.grad.grad)),
            step_theta=float(np.linalg.norm(step.params.theta - params.theta)),
        )
        if config.log_losses:
            row["attacked_loss"], row["actual_loss"] = loss_pair(step, params, config, it)
        params = step.params
        row["wall_ms"] = (time.perf_counter() - t0) * 1e3
        runlog.append(**row)
        if config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            _checkpoint(params, config, f"checkpoint_{it + 1:05d}.bin", it + 1)
        if it % 25 == 0:
            log.info("iter %d train_return %.3f", it, row["train_return"])
    return params, runlog


def sg_mrl_two_step(config: MetaConfig, dist: TaskDistribution, **kwargs) -> tuple[pol.PolicyParams, RunLog]:
    if config.adaptation_depth != 2:
        raise ConfigError("sg_mrl_two_step needs adaptation_depth=2")
    return sg_mrl(config, dist, **kwargs)


def evaluate_seed(params: pol.PolicyParams, dist: TaskDistribution, config: MetaConfig, seed: int) -> float:
    """Mean post-adaptation cumulative reward over a fresh batch of test tasks (no attack)."""
    cfg = replace(config, seed=seed)
    tasks = sample_tasks(dist, config.eval_tasks, stream(seed, _EVAL, _TASKS))
    returns = []
    for i, task in enumerate(tasks):
        chain = [params]
        for j in range(cfg.adaptation_depth):
            b = rollout_batch(task, chain[-1], cfg.inner_batch, stream(seed, _EVAL, _INNER, i, j))
            chain.append(adapt(chain[-1], b, cfg.alpha, 1.0, cfg.gamma, cfg.estimator, cfg.objective_scale))
        out = rollout_batch(task, chain[-1], cfg.outer_batch, stream(seed, _EVAL, _OUTER, i))
        returns.append(out.mean_total_reward())
    return float(np.mean(returns))


def evaluate(params: pol.PolicyParams, dist: TaskDistribution, config: MetaConfig, seeds: Sequence[int]) -> tuple[float, float]:
    """Mean and standard deviation over seeds of the sampled post-adaptation return."""
    if not np.all(np.isfinite(params.theta)):
        raise NumericalError("cannot evaluate non-finite parameters")
    vals = [evaluate_seed(params, dist, config, s) for s in seeds]
    return float(np.mean(vals)), float(np.std(vals))
