"""Returns, score-function gradients and the baseline-subtracted (GAE-style) estimator.

Reward corruption is stored lazily on a batch as ``reward_scale``; the helpers
with a ``raw_`` prefix work on the stored (unscaled) rewards so callers can
fold the scale into a single scalar coefficient. That keeps corrupted and
delta-weighted code paths bit-for-bit identical.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import policy as pol
from .env import Trajectory, TrajectoryBatch
from .errors import NumericalError, ShapeError

VANILLA = "vanilla"
GAE = "gae"
DEFAULT_RIDGE = 1e-5


def rewards_to_go(rewards, gamma: float) -> np.ndarray:
    """Vector of sum_{t>=h} gamma^(t-h) r_t for every h (0-based)."""
    r = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(r)
    acc = 0.0
    for h in range(len(r) - 1, -1, -1):
        acc = r[h] + gamma * acc
        out[h] = acc
    return out


def reward_to_go(traj: Trajectory, h: int, gamma: float) -> float:
    """Discounted reward-to-go from the 1-based step ``h``."""
    if not 1 <= h <= len(traj):
        raise IndexError(f"step {h} outside 1..{len(traj)}")
    r = np.asarray(traj.rewards[h - 1 :], dtype=np.float64)
    return float(np.sum(r * gamma ** np.arange(len(r))))


def discounted_return(traj: Trajectory, gamma: float) -> float:
    return float(rewards_to_go(traj.rewards, gamma)[0])


def batch_rewards_to_go(batch: TrajectoryBatch, gamma: float) -> np.ndarray:
    """Raw (unscaled) rewards-to-go of every step, concatenated over the batch."""
    return np.concatenate([rewards_to_go(t.rewards, gamma) for t in batch])


def score_gradient(params: pol.PolicyParams, traj: Trajectory, gamma: float) -> np.ndarray:
    """g(tau; theta) = sum_h grad log pi(a_h|s_h) * R^h."""
    return pol.weighted_score(params, traj.states, traj.actions, rewards_to_go(traj.rewards, gamma))


def trajectory_score(params: pol.PolicyParams, traj: Trajectory) -> np.ndarray:
    """Gradient of the full-trajectory log-density sum_h log pi(a_h|s_h)."""
    return pol.weighted_score(params, traj.states, traj.actions, np.ones(len(traj)))


def raw_pg_estimate(params: pol.PolicyParams, batch: TrajectoryBatch, gamma: float) -> np.ndarray:
    return pol.weighted_score(params, batch.states, batch.actions, batch_rewards_to_go(batch, gamma)) / len(batch)


def pg_estimate(params: pol.PolicyParams, batch: TrajectoryBatch, gamma: float) -> np.ndarray:
    """Monte Carlo policy gradient: mean of ``score_gradient`` over the batch."""
    return batch.reward_scale * raw_pg_estimate(params, batch, gamma)


@dataclass(frozen=True)
class BaselineFit:
    """Linear value baseline over ``[s, s*s, t/H, (t/H)^2, (t/H)^3, 1]``."""

    coef: np.ndarray
    ridge: float
    horizon: int

    def predict(self, states, time_index) -> np.ndarray:
        F = baseline_features(states, time_index, self.horizon)
        if F.shape[1] != self.coef.size:
            raise ShapeError(f"feature dimension {F.shape[1]} != baseline dimension {self.coef.size}")
        return F @ self.coef


def baseline_features(states, time_index, horizon: int) -> np.ndarray:
    S = np.asarray(states, dtype=np.float64)
    t = np.asarray(time_index, dtype=np.float64)[:, None] / horizon
    return np.hstack([S, S * S, t, t**2, t**3, np.ones_like(t)])


def _solve_ridge(F: np.ndarray, y: np.ndarray, ridge: float) -> np.ndarray:
    A = F.T @ F + ridge * np.eye(F.shape[1])
    try:
        coef = np.linalg.solve(A, F.T @ y)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular baseline normal equations", ridge=ridge) from exc
    if not np.all(np.isfinite(coef)):
        raise NumericalError("non-finite baseline coefficients", ridge=ridge)
    return coef


def _horizon_of(batch: TrajectoryBatch) -> int:
    return max(len(t) for t in batch)


def fit_baseline(batch: TrajectoryBatch, ridge: float = DEFAULT_RIDGE, gamma: float = 0.99, horizon: int | None = None) -> BaselineFit:
    """Ridge least-squares fit of the (scaled) rewards-to-go."""
    H = horizon or _horizon_of(batch)
    F = baseline_features(batch.states, batch.time_index, H)
    y = batch.reward_scale * batch_rewards_to_go(batch, gamma)
    return BaselineFit(_solve_ridge(F, y, ridge), ridge, H)


def gae_estimate(params: pol.PolicyParams, batch: TrajectoryBatch, baseline: BaselineFit, gamma: float) -> np.ndarray:
    """Mean over trajectories of sum_h grad log pi * (R^h - V(s_h))."""
    adv = batch.reward_scale * batch_rewards_to_go(batch, gamma) - baseline.predict(batch.states, batch.time_index)
    return pol.weighted_score(params, batch.states, batch.actions, adv) / len(batch)


def raw_step_weights(
    batch: TrajectoryBatch,
    gamma: float,
    estimator: str = VANILLA,
    objective_scale: float = 1.0,
    ridge: float = DEFAULT_RIDGE,
) -> np.ndarray:
    """Per-step weights (corruption scale not applied) of the chosen estimator.

    ``objective_scale`` multiplies every weight, i.e. it rescales the
    objective (1/H turns total return into per-step average return). For
    ``gae`` the baseline is refit on this batch's unscaled targets, so the
    corrupted estimate equals ``reward_scale`` times this one exactly.
    """
    rtg = batch_rewards_to_go(batch, gamma)
    if estimator == VANILLA:
        w = rtg
    elif estimator == GAE:
        F = baseline_features(batch.states, batch.time_index, _horizon_of(batch))
        w = rtg - F @ _solve_ridge(F, rtg, ridge)
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    return w * objective_scale if objective_scale != 1.0 else w


def raw_estimate(
    params: pol.PolicyParams, batch: TrajectoryBatch, gamma: float, estimator: str = VANILLA, objective_scale: float = 1.0
) -> np.ndarray:
    w = raw_step_weights(batch, gamma, estimator, objective_scale)
    return pol.weighted_score(params, batch.states, batch.actions, w) / len(batch)


def raw_estimate_hvp(
    params: pol.PolicyParams, batch: TrajectoryBatch, gamma: float, v, estimator: str = VANILLA, objective_scale: float = 1.0
) -> np.ndarray:
    """``v^T`` times the theta-Jacobian of ``raw_estimate`` (weights held fixed)."""
    w = raw_step_weights(batch, gamma, estimator, objective_scale)
    return pol.weighted_score_hvp(params, batch.states, batch.actions, w, v) / len(batch)


def mean_discounted_return(batch: TrajectoryBatch, gamma: float, objective_scale: float = 1.0) -> float:
    """Batch estimate of J in the batch's (possibly corrupted) reward units."""
    raw = float(np.mean([discounted_return(t, gamma) for t in batch]))
    return batch.reward_scale * (raw * objective_scale if objective_scale != 1.0 else raw)


def mean_score(params: pol.PolicyParams, batch: TrajectoryBatch) -> np.ndarray:
    """Average full-trajectory log-density gradient over the batch."""
    return pol.weighted_score(params, batch.states, batch.actions, np.ones(len(batch.states))) / len(batch)


def table_rewards_to_go(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """Row-wise discounted rewards-to-go of an (n_paths, H) reward array."""
    out = np.empty_like(rewards, dtype=np.float64)
    acc = np.zeros(rewards.shape[0])
    for h in range(rewards.shape[1] - 1, -1, -1):
        acc = rewards[:, h] + gamma * acc
        out[:, h] = acc
    return out


def exact_gradient(task, params: pol.PolicyParams) -> np.ndarray:
    """E_{tau ~ q(.; theta)}[g(tau; theta)] by enumeration (equals grad J when gamma = 1)."""
    from .env import trajectory_table

    table = trajectory_table(task, params)
    w = table.prob[:, None] * table_rewards_to_go(table.rewards, task.discount)
    S = np.eye(task.n_states)[table.states.reshape(-1)]
    return pol.weighted_score(params, S, table.actions.reshape(-1), w.reshape(-1))
