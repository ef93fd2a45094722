"""Closed-form minimax test problems for the attacker/learner schemes.

Both problems have the form ``f(delta, theta) = -h(theta - delta * a) + (c/2)(delta - delta0)^2``
with ``h >= 0`` minimised at zero, so ``theta*(delta) = delta * a`` and
``Phi(delta) = max_theta f = (c/2)(delta - delta0)^2``. The attacker minimises
``Phi`` over the interval, the learner maximises ``f`` over ``theta``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .diagnostics import fosp_residuals
from .errors import ConfigError, DomainError

ITERATION_CAP = 10**7


@dataclass(frozen=True)
class TheoryConstants:
    mu: float
    L11: float
    L12: float
    L22: float
    sigma2: float
    diameter: float

    @property
    def L(self) -> float:
        return self.L11 + self.L12**2 / (2 * self.mu)

    @property
    def kappa(self) -> float:
        return self.L22 / self.mu


@dataclass(frozen=True)
class _Problem:
    c: float = 1.0
    delta0: float = 0.5
    lo: float = -50.0
    hi: float = 50.0
    sigma: float = 0.0
    M: int = 1

    def _check(self):
        if self.c <= 0:
            raise ConfigError("c must be positive")
        if not self.lo < self.delta0 < self.hi:
            raise ConfigError("delta0 must lie in the interior of the interval")
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ConfigError("sigma must be finite and nonnegative")
        if self.M < 1:
            raise ConfigError("M must be >= 1")

    @property
    def bounds(self) -> tuple[float, float]:
        return self.lo, self.hi

    def check_delta(self, delta: float) -> None:
        if not self.lo <= delta <= self.hi:
            raise DomainError(f"delta={delta} outside [{self.lo}, {self.hi}]")

    def phi(self, delta: float) -> float:
        return 0.5 * self.c * (delta - self.delta0) ** 2

    def grad_phi(self, delta: float) -> float:
        return self.c * (delta - self.delta0)


@dataclass(frozen=True)
class QuadraticPL(_Problem):
    """``h(u) = |u|^2 / 2``: strongly concave in theta (PL and RSI with mu = 1)."""

    a: np.ndarray = field(default_factory=lambda: np.array([1.0]))

    def __post_init__(self):
        object.__setattr__(self, "a", np.atleast_1d(np.asarray(self.a, dtype=np.float64)))
        self._check()

    @property
    def dim(self) -> int:
        return self.a.size

    def theta_star(self, delta: float) -> np.ndarray:
        return delta * self.a

    def value(self, delta, theta) -> float:
        u = np.asarray(theta) - delta * self.a
        return -0.5 * float(u @ u) + self.phi(delta)

    def exact_grads(self, delta, theta) -> tuple[float, np.ndarray]:
        u = np.asarray(theta, dtype=np.float64) - delta * self.a
        return float(u @ self.a) + self.grad_phi(delta), -u

    def constants(self) -> TheoryConstants:
        na = float(np.linalg.norm(self.a))
        return TheoryConstants(1.0, na**2 + self.c, na, 1.0, self.sigma**2, self.hi - self.lo)


@dataclass(frozen=True)
class NonconvexPL(_Problem):
    """``h(u) = u^2 + 3 sin^2 u``: nonconcave in theta but PL (scalar theta)."""

    a: float = 1.0

    def __post_init__(self):
        self._check()

    @property
    def dim(self) -> int:
        return 1

    def theta_star(self, delta: float) -> np.ndarray:
        # canonical branch u = 0 (the unique maximiser)
        return np.array([delta * self.a])

    @staticmethod
    def h(u):
        return u**2 + 3 * np.sin(u) ** 2

    @staticmethod
    def dh(u):
        return 2 * u + 3 * np.sin(2 * u)

    def value(self, delta, theta) -> float:
        u = float(np.asarray(theta).reshape(-1)[0]) - delta * self.a
        return -float(self.h(u)) + self.phi(delta)

    def exact_grads(self, delta, theta) -> tuple[float, np.ndarray]:
        u = float(np.asarray(theta).reshape(-1)[0]) - delta * self.a
        d = float(self.dh(u))
        return self.a * d + self.grad_phi(delta), np.array([-d])

    def constants(self, grid: int = 2001, span: float = 10.0) -> TheoryConstants:
        return TheoryConstants(fit_pl_constant(self, grid, span), 8 * self.a**2 + self.c, 8 * abs(self.a), 8.0,
                               self.sigma**2, self.hi - self.lo)


Problem = QuadraticPL | NonconvexPL


def fit_pl_constant(problem: NonconvexPL, grid: int = 2001, span: float = 10.0) -> float:
    """Largest mu with ``|h'(u)|^2 / 2 >= mu * h(u)`` on a grid of ``u`` in [-span, span]."""
    u = np.linspace(-span, span, grid)
    hv = problem.h(u)
    mask = hv > 0
    return float(np.min(0.5 * problem.dh(u[mask]) ** 2 / hv[mask]))


def eval_f(problem: Problem, delta: float, theta) -> float:
    problem.check_delta(delta)
    return problem.value(delta, theta)


def grad_f(problem: Problem, delta: float, theta, rng: np.random.Generator | None = None):
    """(value, d f / d delta, d f / d theta); gradients carry N(0, sigma^2/M) noise per coordinate."""
    problem.check_delta(delta)
    gd, gt = problem.exact_grads(delta, theta)
    if problem.sigma > 0 and rng is not None:
        scale = problem.sigma / math.sqrt(problem.M)
        noise = rng.standard_normal(1 + gt.size) * scale
        gd, gt = gd + float(noise[0]), gt + noise[1:]
    return problem.value(delta, theta), gd, gt


@dataclass(frozen=True)
class ClosedForm:
    theta_star: np.ndarray
    phi: float
    grad_phi: float
    fosp: tuple[float, np.ndarray]


def closed_forms(problem: Problem, delta: float) -> ClosedForm:
    problem.check_delta(delta)
    d0 = problem.delta0
    return ClosedForm(problem.theta_star(delta), problem.phi(delta), problem.grad_phi(delta), (d0, problem.theta_star(d0)))


def prescribed_steps(problem: Problem) -> tuple[float, float]:
    """Default (eta1, eta2): learner ``mu / L22``; attacker ``0.05 / L``."""
    k = problem.constants()
    return k.mu / k.L22, 0.05 / k.L


@dataclass
class SchemeResult:
    iterations: int | None  # None when the cap was hit
    delta: float
    theta: np.ndarray
    evaluations: int
    trace: dict | None = None

    @property
    def converged(self) -> bool:
        return self.iterations is not None


def _residual(problem, delta, theta) -> float:
    gd, gt = problem.exact_grads(delta, theta)
    r = fosp_residuals(gd, gt, delta, problem.bounds)
    return max(r.e_delta, r.e_theta)


def _project(delta, bounds):
    return min(max(delta, bounds[0]), bounds[1])


def run_scheme(
    problem: Problem,
    scheme: str,
    eta1: float,
    eta2: float,
    eps: float,
    K: int = 1,
    rng: np.random.Generator | None = None,
    delta_init: float = 1.0,
    theta_init=None,
    cap: int = ITERATION_CAP,
    record: bool = False,
) -> SchemeResult:
    """Run the intermittent or persistent updates until the exact FOSP residuals are <= eps.

    Updates use the (possibly noisy) gradients; the stopping test uses exact
    ones. For ``intermittent`` the count is outer rounds, each holding ``K``
    learner steps; for ``persistent`` it is simultaneous iterations.
    """
    if scheme not in ("intermittent", "persistent"):
        raise ConfigError(f"unknown scheme {scheme!r}")
    if not 0 < eps < 1:
        raise ConfigError("eps must lie in (0, 1)")
    if scheme == "persistent" and not eta1 > eta2:
        raise ConfigError("the persistent scheme needs eta1 > eta2")
    if scheme == "intermittent" and K < 1:
        raise ConfigError("K must be >= 1")
    delta = float(delta_init)
    theta = np.zeros(problem.dim) if theta_init is None else np.array(theta_init, dtype=np.float64)
    trace = {"delta": [], "phi": [], "d": [], "residual": []} if record else None
    evals = 0
    for t in range(cap):
        if scheme == "intermittent":
            for _ in range(K):
                _, _, gt = grad_f(problem, delta, theta, rng)
                theta = theta + eta1 * gt
            evals += K
        res = _residual(problem, delta, theta)
        if record:
            trace["delta"].append(delta)
            trace["phi"].append(problem.phi(delta))
            trace["d"].append(float(np.sum((problem.theta_star(delta) - theta) ** 2)))
            trace["residual"].append(res)
        if res <= eps:
            return SchemeResult(t, delta, theta, evals, trace)
        _, gd, gt = grad_f(problem, delta, theta, rng)
        evals += 1
        if scheme == "persistent":
            theta = theta + eta1 * gt
        delta = _project(delta - eta2 * gd, problem.bounds)
    return SchemeResult(None, delta, theta, evals, trace)


def inner_iterations(problem: Problem, delta: float, eta1: float, eps: float, start_distance: float = 1.0, cap: int = ITERATION_CAP) -> int | None:
    """Learner steps at fixed delta until ``|theta - theta*(delta)| <= eps`` (exact gradients)."""
    direction = np.ones(problem.dim) / math.sqrt(problem.dim)
    theta = problem.theta_star(delta) + start_distance * direction
    target = problem.theta_star(delta)
    for k in range(cap):
        if np.linalg.norm(theta - target) <= eps:
            return k
        theta = theta + eta1 * problem.exact_grads(delta, theta)[1]
    return None


def fit_slope(x: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope of log y against log x."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    return float(np.polyfit(lx, ly, 1)[0])


def batch_schedule(eps: float, m0: float = 1.0) -> int:
    """Batch size growing like eps^-2."""
    return max(1, int(math.ceil(m0 / eps**2)))


@dataclass
class RateStudy:
    rows: list[dict]
    slope_n: float
    slope_samples: float
    slope_k: float

    def summary(self) -> dict:
        return {"slope_iterations": self.slope_n, "slope_samples": self.slope_samples, "slope_inner_k": self.slope_k}

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = ("epsilon", "seed", "iterations", "batch", "samples", "inner_k")
        with open(out / "rates.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r[c] for c in cols])
        (out / "rates.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def rate_study(
    problem: QuadraticPL,
    eps_grid: Sequence[float] = (1e-1, 3e-2, 1e-2, 3e-3, 1e-3),
    seeds: Sequence[int] = (0, 1, 2),
    m0: float = 1.0,
    eta1: float | None = None,
    eta2: float | None = None,
    inner_eta1: float = 0.1,
) -> RateStudy:
    """Persistent-scheme iterations N(eps) under the eps^-2 batch schedule, and inner K(eps).

    ``slope_n`` fits log N against log(1/eps); ``slope_samples`` does the same
    for the sampled-gradient count N * M; ``slope_k`` fits log K against
    log log(1/eps), so ``K ~ log(1/eps)`` gives slope 1.
    """
    p1, p2 = prescribed_steps(problem)
    eta1 = p1 if eta1 is None else eta1
    eta2 = p2 if eta2 is None else eta2
    rows = []
    for eps in eps_grid:
        M = batch_schedule(eps, m0)
        prob = type(problem)(**{**problem.__dict__, "M": M})
        k = inner_iterations(prob, problem.delta0, inner_eta1, eps)
        for s in seeds:
            res = run_scheme(prob, "persistent", eta1, eta2, eps, rng=np.random.default_rng([s, int(round(-1e3 * math.log10(eps)))]))
            n = res.iterations if res.converged else float("nan")
            rows.append(dict(epsilon=eps, seed=s, iterations=n, batch=M, samples=n * M, inner_k=k))
    eps_arr = np.array(eps_grid)
    mean_n = [np.mean([r["iterations"] for r in rows if r["epsilon"] == e]) for e in eps_grid]
    mean_s = [np.mean([r["samples"] for r in rows if r["epsilon"] == e]) for e in eps_grid]
    ks = [next(r["inner_k"] for r in rows if r["epsilon"] == e) for e in eps_grid]
    n_plus = np.maximum(np.asarray(mean_n, float), 1.0)
    return RateStudy(
        rows,
        fit_slope(1 / eps_arr, n_plus),
        fit_slope(1 / eps_arr, np.maximum(mean_s, 1.0)),
        fit_slope(np.log(1 / eps_arr), ks),
    )
