"""Task distributions, 2D point navigation, tabular oracle MDPs and rollouts."""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Sequence, Union

import numpy as np

from . import policy as pol
from .errors import ConfigError, EnumerationTooLarge, NumericalError, ShapeError

NAV_ACTION_LIMIT = 0.1
NAV_GOAL_RADIUS = 0.01
ENUMERATION_GUARD = 10**6


@dataclass(frozen=True, eq=False)
class Nav2DTask:
    goal: np.ndarray
    horizon: int = 100
    discount: float = 0.99

    def __post_init__(self):
        goal = np.array(self.goal, dtype=np.float64).reshape(2)
        if not np.all(np.abs(goal) <= 0.5):
            raise ConfigError(f"goal {goal} outside the unit square [-0.5, 0.5]^2")
        goal.setflags(write=False)
        object.__setattr__(self, "goal", goal)
        _check_common(self.horizon, self.discount)

    obs_dim = 2

    @property
    def task_id(self) -> str:
        return "nav2d:" + ",".join(f"{g:.17g}" for g in self.goal)


@dataclass(frozen=True, eq=False)
class TabularTask:
    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A)
    initial: np.ndarray  # (S,)
    horizon: int = 3
    discount: float = 1.0

    def __post_init__(self):
        P = np.array(self.transition, dtype=np.float64)
        R = np.array(self.reward, dtype=np.float64)
        rho = np.array(self.initial, dtype=np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or R.shape != P.shape[:2] or rho.shape != (P.shape[0],):
            raise ShapeError(f"inconsistent tabular tables: P{P.shape} R{R.shape} rho{rho.shape}")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=2) - 1.0) > 1e-12):
            raise ConfigError("transition rows must be probability vectors")
        if np.any(rho < 0) or abs(rho.sum() - 1.0) > 1e-12:
            raise ConfigError("initial distribution must sum to 1")
        if not np.all(np.isfinite(R)):
            raise ConfigError("rewards must be finite")
        for name, arr in (("transition", P), ("reward", R), ("initial", rho)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        _check_common(self.horizon, self.discount)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.n_states

    @property
    def task_id(self) -> str:
        h = hashlib.sha256()
        for arr in (self.transition, self.reward, self.initial):
            h.update(arr.tobytes())
        return "tabular:" + h.hexdigest()[:12]

    def to_json(self) -> str:
        return json.dumps(
            {
                "transition": self.transition.tolist(),
                "reward": self.reward.tolist(),
                "initial": self.initial.tolist(),
                "horizon": self.horizon,
                "discount": self.discount,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "TabularTask":
        d = json.loads(text)
        return cls(d["transition"], d["reward"], d["initial"], int(d["horizon"]), float(d["discount"]))


Task = Union[Nav2DTask, TabularTask]


def _check_common(horizon: int, discount: float) -> None:
    if int(horizon) < 1:
        raise ConfigError(f"horizon must be positive, got {horizon}")
    if not 0.0 < discount <= 1.0:
        raise ConfigError(f"discount must lie in (0, 1], got {discount}")


@dataclass(frozen=True)
class Nav2DUniform:
    low: float = -0.5
    high: float = 0.5
    horizon: int = 100
    discount: float = 0.99


@dataclass(frozen=True)
class TabularFixedSet:
    tasks: tuple[TabularTask, ...]
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if not self.tasks:
            raise ConfigError("TabularFixedSet needs at least one task")
        w = np.ones(len(self.tasks)) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(self.tasks),) or np.any(w < 0) or w.sum() <= 0:
            raise ConfigError("task weights must be nonnegative, one per task, not all zero")
        w = w / w.sum()
        object.__setattr__(self, "weights", tuple(float(x) for x in w))


TaskDistribution = Union[Nav2DUniform, TabularFixedSet]


def sample_tasks(dist: TaskDistribution, count: int, rng: np.random.Generator) -> list[Task]:
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    if isinstance(dist, Nav2DUniform):
        goals = rng.uniform(dist.low, dist.high, size=(count, 2))
        return [Nav2DTask(g, dist.horizon, dist.discount) for g in goals]
    if isinstance(dist, TabularFixedSet):
        idx = rng.choice(len(dist.tasks), size=count, p=np.asarray(dist.weights))
        return [dist.tasks[i] for i in idx]
    raise ConfigError(f"unknown task distribution {dist!r}")


def random_tabular_task(
    rng: np.random.Generator,
    n_states: int = 2,
    n_actions: int = 2,
    horizon: int = 3,
    discount: float = 1.0,
    denominator: int = 8,
) -> TabularTask:
    """Tables with rational entries (integer numerators over small denominators)."""
    counts = rng.integers(1, denominator, size=(n_states, n_actions, n_states)).astype(np.float64)
    P = counts / counts.sum(axis=2, keepdims=True)
    R = rng.integers(-denominator, denominator + 1, size=(n_states, n_actions)) / denominator
    init = rng.integers(1, denominator, size=n_states).astype(np.float64)
    return TabularTask(P, R, init / init.sum(), horizon, discount)


def nav2d_step(state, action, goal) -> tuple[np.ndarray, float, bool]:
    """Move by the clipped velocity command; reward is evaluated after the move."""
    a = np.clip(np.asarray(action, dtype=np.float64), -NAV_ACTION_LIMIT, NAV_ACTION_LIMIT)
    nxt = np.asarray(state, dtype=np.float64) + a
    diff = nxt - np.asarray(goal, dtype=np.float64)
    d2 = float(diff @ diff)
    return nxt, -d2, bool(np.sqrt(d2) < NAV_GOAL_RADIUS)


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    logps: np.ndarray

    def __post_init__(self):
        n = len(self.rewards)
        if n < 1 or not (len(self.states) == len(self.actions) == len(self.logps) == n):
            raise ShapeError("trajectory fields must have equal, nonzero length")
        for name in ("states", "actions", "rewards", "logps"):
            arr = np.array(getattr(self, name))
            if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite {name} in trajectory")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.rewards)

    def with_rewards(self, rewards) -> "Trajectory":
        return Trajectory(self.states, self.actions, np.asarray(rewards, dtype=np.float64), self.logps)

    @property
    def total_reward(self) -> float:
        return float(np.sum(self.rewards))

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("states", "actions", "rewards", "logps")}


@dataclass(frozen=True, eq=False)
class TrajectoryBatch:
    trajectories: tuple[Trajectory, ...]
    source_task_id: str = ""
    source_params_hash: str = ""
    reward_scale: float = 1.0  # uniform corruption factor applied on read

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        if not self.trajectories:
            raise ShapeError("a trajectory batch must be nonempty")
        if not np.isfinite(self.reward_scale):
            raise NumericalError("non-finite reward scale")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    @cached_property
    def states(self) -> np.ndarray:
        return np.concatenate([t.states for t in self.trajectories])

    @cached_property
    def actions(self) -> np.ndarray:
        return np.concatenate([t.actions for t in self.trajectories])

    @cached_property
    def time_index(self) -> np.ndarray:
        return np.concatenate([np.arange(len(t)) for t in self.trajectories])

    def with_trajectories(self, trajectories) -> "TrajectoryBatch":
        return TrajectoryBatch(tuple(trajectories), self.source_task_id, self.source_params_hash, self.reward_scale)

    def observed(self) -> list[Trajectory]:
        """Trajectories with rewards as the learner sees them (scale applied)."""
        if self.reward_scale == 1.0:
            return list(self.trajectories)
        return [t.with_rewards(self.reward_scale * t.rewards) for t in self.trajectories]

    def mean_total_reward(self) -> float:
        """Mean undiscounted return of the clean (unscaled) rewards."""
        return float(np.mean([t.total_reward for t in self.trajectories]))

    def serialize(self) -> str:
        return json.dumps(
            {
                "task": self.source_task_id,
                "params": self.source_params_hash,
                "reward_scale": self.reward_scale,
                "trajectories": [t.to_dict() for t in self.trajectories],
            },
            sort_keys=True,
        )


def scale_rewards(batch: TrajectoryBatch, delta: float) -> TrajectoryBatch:
    """Uniform reward scaling r <- delta * r; states, actions and log-densities untouched.

    The factor is accumulated on the batch rather than written into the
    trajectories, so ``scale_rewards(scale_rewards(D, a), b)`` and
    ``scale_rewards(D, a * b)`` are identical.
    """
    return TrajectoryBatch(batch.trajectories, batch.source_task_id, batch.source_params_hash, batch.reward_scale * float(delta))


def _one_hot(idx: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(idx), n))
    out[np.arange(len(idx)), idx] = 1.0
    return out


def _check_policy(task: Task, params: pol.PolicyParams) -> None:
    shape = params.shape
    if isinstance(task, Nav2DTask):
        ok = shape.head == pol.GAUSSIAN and shape.input_dim == 2 and shape.output_dim == 2
    else:
        ok = shape.head == pol.CATEGORICAL and shape.input_dim == task.n_states and shape.output_dim == task.n_actions
    if not ok:
        raise ShapeError(f"policy shape {shape} does not fit task {type(task).__name__}")


def _draw_noise(task: Task, rng: np.random.Generator) -> dict:
    if isinstance(task, Nav2DTask):
        return {"action": rng.standard_normal((task.horizon, 2))}
    return {
        "init": rng.random(),
        "action": rng.random(task.horizon),
        "transition": rng.random(task.horizon),
    }


def _rollout_nav(task: Nav2DTask, params: pol.PolicyParams, noises: list[dict]) -> list[Trajectory]:
    n, H = len(noises), task.horizon
    eps = np.stack([nz["action"] for nz in noises], axis=1)  # (H, n, 2)
    S = np.zeros((H, n, 2))
    A = np.zeros((H, n, 2))
    Rw = np.zeros((H, n))
    LP = np.zeros((H, n))
    length = np.full(n, H)
    alive = np.ones(n, dtype=bool)
    s = np.zeros((n, 2))
    for h in range(H):
        a, lp = pol.sample_actions(params, s, eps[h])
        nxt = s + np.clip(a, -NAV_ACTION_LIMIT, NAV_ACTION_LIMIT)
        diff = nxt - task.goal
        d2 = np.einsum("ij,ij->i", diff, diff)
        S[h], A[h], Rw[h], LP[h] = s, a, -d2, lp
        done = alive & (np.sqrt(d2) < NAV_GOAL_RADIUS)
        length[done] = h + 1
        alive &= ~done
        s = nxt
        if not alive.any():
            break
    return [Trajectory(S[: length[i], i], A[: length[i], i], Rw[: length[i], i], LP[: length[i], i]) for i in range(n)]


def _sample_categorical(probs: np.ndarray, u: float) -> int:
    return int(min(np.searchsorted(np.cumsum(probs), u, side="right"), len(probs) - 1))


def _rollout_tab(task: TabularTask, params: pol.PolicyParams, noise: dict) -> Trajectory:
    probs = pol.forward(params, np.eye(task.n_states)).probs
    if not np.all(np.isfinite(probs)):
        raise NumericalError("policy produced non-finite action probabilities")
    H = task.horizon
    states = np.zeros(H, dtype=np.int64)
    actions = np.zeros(H, dtype=np.int64)
    rewards = np.zeros(H)
    s = _sample_categorical(task.initial, noise["init"])
    for h in range(H):
        a = _sample_categorical(probs[s], noise["action"][h])
        states[h], actions[h], rewards[h] = s, a, task.reward[s, a]
        s = _sample_categorical(task.transition[s, a], noise["transition"][h])
    logps = np.log(probs[states, actions])
    return Trajectory(_one_hot(states, task.n_states), actions, rewards, logps)


def rollout(task: Task, params: pol.PolicyParams, rng: np.random.Generator) -> Trajectory:
    """One episode under ``params``; Nav2D may stop early, tabular runs exactly H steps."""
    _check_policy(task, params)
    noise = _draw_noise(task, rng)
    try:
        if isinstance(task, Nav2DTask):
            return _rollout_nav(task, params, [noise])[0]
        return _rollout_tab(task, params, noise)
    except FloatingPointError as exc:
        raise NumericalError(str(exc), task=task.task_id, params=params.digest()) from exc


def rollout_batch(task: Task, params: pol.PolicyParams, n: int, rng: np.random.Generator) -> TrajectoryBatch:
    """``n`` episodes, each driven by its own child stream spawned from ``rng``.

    Trajectory ``k`` depends only on the k-th child stream, so the result does
    not depend on how episodes are scheduled.
    """
    _check_policy(task, params)
    noises = [_draw_noise(task, child) for child in rng.spawn(n)]
    try:
        if isinstance(task, Nav2DTask):
            trajs = _rollout_nav(task, params, noises)
        else:
            trajs = [_rollout_tab(task, params, nz) for nz in noises]
    except FloatingPointError as exc:
        raise NumericalError(str(exc), task=task.task_id, params=params.digest()) from exc
    return TrajectoryBatch(tuple(trajs), task.task_id, params.digest())


@dataclass(frozen=True)
class TrajectoryTable:
    """All length-H paths of a tabular task as index arrays, with their probabilities.

    ``states`` and ``actions`` have shape (n_paths, H); ``prob`` is q(tau; theta).
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    prob: np.ndarray

    def __len__(self) -> int:
        return len(self.prob)


@lru_cache(maxsize=32)
def _path_indices(S: int, A: int, H: int) -> tuple[np.ndarray, np.ndarray]:
    st = np.array(list(itertools.product(range(S), repeat=H)), dtype=np.intp).reshape(-1, H)
    ac = np.array(list(itertools.product(range(A), repeat=H)), dtype=np.intp).reshape(-1, H)
    # every state path combined with every action path, state-major
    return np.repeat(st, len(ac), axis=0), np.tile(ac, (len(st), 1))


def trajectory_table(task: TabularTask, params: pol.PolicyParams, guard: int = ENUMERATION_GUARD) -> TrajectoryTable:
    if not isinstance(task, TabularTask):
        raise TypeError("enumeration needs a tabular task")
    _check_policy(task, params)
    S, A, H = task.n_states, task.n_actions, task.horizon
    size = (S * A) ** H
    if size > guard:
        raise EnumerationTooLarge(f"{size} trajectories exceed the guard of {guard}; need |S|^H*|A|^H <= {guard}")
    st, ac = _path_indices(S, A, H)
    probs = pol.forward(params, np.eye(S)).probs
    p = task.initial[st[:, 0]] * np.prod(probs[st, ac], axis=1)
    if H > 1:
        p = p * np.prod(task.transition[st[:, :-1], ac[:, :-1], st[:, 1:]], axis=1)
    return TrajectoryTable(st, ac, task.reward[st, ac], p)


def enumerate_trajectories(
    task: TabularTask, params: pol.PolicyParams, guard: int = ENUMERATION_GUARD
) -> list[tuple[Trajectory, float]]:
    """Every (s_1, a_1, ..., s_H, a_H) path with its probability under ``params``."""
    table = trajectory_table(task, params, guard)
    logpi = np.log(pol.forward(params, np.eye(task.n_states)).probs)
    S = task.n_states
    return [
        (Trajectory(_one_hot(st, S), ac, r, logpi[st, ac]), float(p))
        for st, ac, r, p in zip(table.states, table.actions, table.rewards, table.prob)
    ]


def exact_return(task: TabularTask, params: pol.PolicyParams) -> float:
    """J(theta) = sum_tau q(tau; theta) * sum_t gamma^(t-1) r_t, by enumeration."""
    table = trajectory_table(task, params)
    disc = task.discount ** np.arange(task.horizon)
    return float(table.prob @ (table.rewards @ disc))


def policy_shape_for(task: Task, hidden: Sequence[int] = (64, 64)) -> pol.PolicyShape:
    if isinstance(task, Nav2DTask):
        return pol.PolicyShape(2, tuple(hidden), 2, pol.GAUSSIAN)
    return pol.PolicyShape(task.n_states, tuple(hidden), task.n_actions, pol.CATEGORICAL)


def policy_shape_for_dist(dist: TaskDistribution, hidden: Sequence[int] = (64, 64)) -> pol.PolicyShape:
    if isinstance(dist, Nav2DUniform):
        return pol.PolicyShape(2, tuple(hidden), 2, pol.GAUSSIAN)
    return policy_shape_for(dist.tasks[0], hidden)
