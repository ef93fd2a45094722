"""Stationarity residuals, PL/RSI logging, loss curves, the upper-bound check and SVG plots."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AlignmentError, DomainError


@dataclass(frozen=True)
class FospResidual:
    e_delta: float
    e_theta: float

    def within(self, eps: float) -> bool:
        return self.e_delta <= eps and self.e_theta <= eps


def fosp_residuals(grad_delta: float, grad_theta, delta: float, bounds: tuple[float, float]) -> FospResidual:
    """Residuals of the eps-stationarity test for (delta, theta).

    ``e_delta = -min <grad_delta, d' - delta>`` over the feasible unit ball around
    delta (the minimising player), ``e_theta = |grad_theta|`` (unconstrained
    maximising player, unit ball).
    """
    lo, hi = bounds
    if not lo <= delta <= hi:
        raise DomainError(f"delta={delta} outside [{lo}, {hi}]")
    g = float(grad_delta)
    left, right = max(lo, delta - 1.0), min(hi, delta + 1.0)
    e_delta = max(0.0, -min(g * (left - delta), g * (right - delta)))
    return FospResidual(e_delta, float(np.linalg.norm(np.asarray(grad_theta, dtype=np.float64))))


# ---------------------------------------------------------------- PL / RSI

PL_COLUMNS = ("iter", "half_grad_sq", "gap", "rsi_inner", "dist_sq")


def pl_rsi_log(f_values, grads_theta, thetas=None, theta_ref=None, phi_ref=None) -> list[dict]:
    """Per-iteration PL and RSI quantities.

    ``grads_theta`` holds gradient vectors (n, d) or just their norms (n,).
    ``phi_ref`` defaults to the best observed ``f`` (an estimate of the max).
    ``theta_ref`` is one reference point or one per row; without it (or
    without ``thetas`` / gradient vectors) the RSI columns are left blank.
    """
    f = np.asarray(f_values, dtype=np.float64)
    n = len(f)
    G = np.asarray(grads_theta, dtype=np.float64)
    if len(G) != n:
        raise AlignmentError(f"{len(G)} gradients for {n} objective values")
    norms_only = G.ndim == 1
    half = 0.5 * (G**2 if norms_only else np.einsum("ij,ij->i", G, G))
    phi = np.full(n, f.max()) if phi_ref is None else np.broadcast_to(np.asarray(phi_ref, dtype=np.float64), (n,))
    gap = phi - f
    rsi = dist = [None] * n
    if theta_ref is not None and thetas is not None and not norms_only:
        T = np.asarray(thetas, dtype=np.float64)
        ref = np.broadcast_to(np.asarray(theta_ref, dtype=np.float64), T.shape)
        diff = ref - T
        rsi = np.einsum("ij,ij->i", G, diff)
        dist = np.einsum("ij,ij->i", diff, diff)
    return [
        dict(iter=i, half_grad_sq=float(half[i]), gap=float(gap[i]),
             rsi_inner=None if rsi[i] is None else float(rsi[i]), dist_sq=None if dist[i] is None else float(dist[i]))
        for i in range(n)
    ]


def fit_mu(lhs, rhs, percentile: float = 5.0) -> tuple[float, float]:
    """Largest mu with ``lhs >= mu * rhs`` on (100 - percentile)% of rows with ``rhs > 0``.

    Returns (mu_hat, fraction of those rows satisfying the inequality).
    """
    lhs = np.asarray([np.nan if v is None else v for v in lhs], dtype=np.float64)
    rhs = np.asarray([np.nan if v is None else v for v in rhs], dtype=np.float64)
    mask = np.isfinite(lhs) & np.isfinite(rhs) & (rhs > 0)
    if not mask.any():
        return float("nan"), 0.0
    ratio = lhs[mask] / rhs[mask]
    mu = float(np.percentile(ratio, percentile))
    return mu, float(np.mean(ratio >= mu))


def fit_pl_rsi(rows: Sequence[dict], percentile: float = 5.0) -> dict:
    mu_pl, frac_pl = fit_mu([r["half_grad_sq"] for r in rows], [r["gap"] for r in rows], percentile)
    mu_rsi, frac_rsi = fit_mu([r["rsi_inner"] for r in rows], [r["dist_sq"] for r in rows], percentile)
    return {"mu_pl": mu_pl, "frac_pl": frac_pl, "mu_rsi": mu_rsi, "frac_rsi": frac_rsi}


def write_rows(rows: Sequence[dict], path: str | Path, columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


# ---------------------------------------------------------------- loss curves


def loss_decomposition(benign, attacked, deltas, dist, config, model: str = "isa") -> dict[str, np.ndarray]:
    """Benchmark, attacked and actual reinforce losses per checkpoint index.

    Benchmark: benign checkpoint, clean adaptation. Attacked: attacked
    checkpoint adapted on data corrupted by ``deltas[t]`` and scored on its own
    (possibly corrupted) outer batch. Actual: the attacked checkpoint adapted
    on the same inner data without corruption, scored on a clean outer batch
    drawn from the same stream as the attacked one.
    """
    from . import meta
    from .attack import corrupt
    from .env import rollout_batch, sample_tasks

    n = len(attacked)
    if n == 0:
        raise ValueError("loss_decomposition needs at least one checkpoint")
    if len(benign) != n or len(deltas) != n:
        raise AlignmentError(f"{len(benign)} benign checkpoints, {n} attacked, {len(deltas)} deltas")
    out = {k: np.empty(n) for k in ("benchmark", "attacked", "actual")}
    c = config
    for t in range(n):
        tasks = sample_tasks(dist, c.meta_batch, meta.stream(c.seed, t, meta._FRESH, meta._TASKS))
        vals = {k: [] for k in out}
        for i, task in enumerate(tasks):
            inner_rng = lambda: meta.stream(c.seed, t, meta._FRESH, meta._INNER, i)
            outer_rng = lambda: meta.stream(c.seed, t, meta._FRESH, meta._OUTER, i)

            def scored(params, d):
                b = rollout_batch(task, params, c.inner_batch, inner_rng())
                if d is not None and model != "none":
                    b = corrupt(b, d, model, "inner")
                adapted = meta.adapt(params, b, c.alpha, 1.0, c.gamma, c.estimator, c.objective_scale)
                o = rollout_batch(task, adapted, c.outer_batch, outer_rng())
                if d is not None and model != "none":
                    o = corrupt(o, d, model, "outer")
                return meta.reinforce_loss(adapted, o, c.gamma)

            vals["benchmark"].append(scored(benign[t], None))
            vals["attacked"].append(scored(attacked[t], float(deltas[t])))
            vals["actual"].append(scored(attacked[t], None))
        for k in out:
            out[k][t] = float(np.mean(vals[k]))
    return out


# ---------------------------------------------------------------- upper bound


@dataclass
class Prop1Report:
    deltas: list[float]
    lhs: list[float]
    rhs: list[float]
    c_needed: list[float]
    c_empirical: float
    g_max: float
    bound: float

    @property
    def holds(self) -> bool:
        return self.c_empirical <= self.bound


def _meta_objective_grad(tasks, params, alpha, delta):
    """Exact value and gradient of mean_i sum_tau q_i(tau) J_i(theta + a*d*g_i(tau)) (one-trajectory batches)."""
    from . import estimators as est
    from . import policy as pol
    from .env import trajectory_table

    value, grad = 0.0, np.zeros(params.dim)
    for task in tasks:
        table = trajectory_table(task, params)
        rtg = est.table_rewards_to_go(table.rewards, task.discount)
        eye = np.eye(task.n_states)
        for k in range(len(table)):
            S, A = eye[table.states[k]], table.actions[k]
            g = pol.weighted_score(params, S, A, rtg[k])
            adapted = params.with_theta(params.theta + alpha * delta * g)
            j = _exact_j(task, adapted)
            gj = est.exact_gradient(task, adapted)
            score = pol.weighted_score(params, S, A, np.ones(len(A)))
            q = table.prob[k]
            value += q * j
            grad += q * (gj + alpha * delta * pol.weighted_score_hvp(params, S, A, rtg[k], gj) + j * score)
    return value / len(tasks), grad / len(tasks)


def _exact_j(task, params) -> float:
    from .env import exact_return

    return exact_return(task, params)


def train_exact(tasks, params, alpha: float, delta: float, lr: float = 0.5, iterations: int = 300, tol: float = 1e-8):
    """Exact gradient ascent on the (delta-corrupted) one-trajectory meta objective."""
    for _ in range(iterations):
        _, g = _meta_objective_grad(tasks, params, alpha, delta)
        params = params.with_theta(params.theta + lr * g)
        if np.linalg.norm(g) < tol:
            break
    return params


def prop1_check(tasks, params0, alpha: float, deltas: Sequence[float] = (0.5, 1.0, 2.0), lr: float = 0.5,
                iterations: int = 300, segment_points: int = 11) -> Prop1Report:
    """Check J(theta* + a*g) <= J(theta* + a*d*g) + C|d - 1| for every one-trajectory batch.

    ``theta*(d)`` comes from exact training; C is the smallest constant that
    works across the grid (expected values), compared against ``alpha * G^2`` where G is the
    largest |g| observed over all enumerated trajectories at every theta on
    the segments between the two adapted points.
    """
    from . import estimators as est
    from . import policy as pol
    from .env import trajectory_table

    lhs_all, rhs_all, c_needed = [], [], []
    c_emp, g_max = 0.0, 0.0
    for d in deltas:
        theta_star = train_exact(tasks, params0, alpha, d, lr, iterations)
        lhs = rhs = 0.0
        for task in tasks:
            table = trajectory_table(task, theta_star)
            rtg = est.table_rewards_to_go(table.rewards, task.discount)
            eye = np.eye(task.n_states)
            for k in range(len(table)):
                g = pol.weighted_score(theta_star, eye[table.states[k]], table.actions[k], rtg[k])
                clean = theta_star.with_theta(theta_star.theta + alpha * g)
                bad = theta_star.with_theta(theta_star.theta + alpha * d * g)
                jl, jr = _exact_j(task, clean), _exact_j(task, bad)
                q = table.prob[k] / len(tasks)
                lhs += q * jl
                rhs += q * jr
                for s in np.linspace(0.0, 1.0, segment_points):
                    point = theta_star.with_theta((1 - s) * clean.theta + s * bad.theta)
                    g_max = max(g_max, _max_score_norm(task, point))
            g_max = max(g_max, _max_score_norm(task, theta_star))
        lhs_all.append(lhs)
        rhs_all.append(rhs)
        need = max(0.0, (lhs - rhs) / abs(d - 1.0)) if d != 1.0 else 0.0
        c_needed.append(need)
        c_emp = max(c_emp, need)
    return Prop1Report(list(deltas), lhs_all, rhs_all, c_needed, c_emp, g_max, alpha * g_max**2)


def _max_score_norm(task, params) -> float:
    from . import estimators as est
    from . import policy as pol
    from .env import trajectory_table

    table = trajectory_table(task, params)
    rtg = est.table_rewards_to_go(table.rewards, task.discount)
    eye = np.eye(task.n_states)
    return max(
        float(np.linalg.norm(pol.weighted_score(params, eye[table.states[k]], table.actions[k], rtg[k])))
        for k in range(len(table))
    )


# ---------------------------------------------------------------- plots


def _svg_style():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "meta-attack"
    plt.rcParams["svg.fonttype"] = "path"
    return plt


def line_chart(path: str | Path, series: dict[str, Sequence[float]], title: str = "", xlabel: str = "iteration",
               logy: bool = False) -> None:
    """Deterministic SVG line chart (no timestamp metadata)."""
    if not series or all(len(v) == 0 for v in series.values()):
        raise ValueError("nothing to plot")
    plt = _svg_style()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, ys in series.items():
        ys = np.asarray([np.nan if v is None else v for v in ys], dtype=np.float64)
        ax.plot(np.arange(len(ys)), ys, label=name, linewidth=1.2)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_title(title)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def plot_csv(csv_path: str | Path, svg_path: str | Path, columns: Sequence[str], title: str = "", logy: bool = False) -> None:
    from .runlog import read_csv

    rows = read_csv(csv_path)
    if not rows:
        raise ValueError(f"{csv_path} has no rows")
    missing = [c for c in columns if c not in rows[0]]
    if missing:
        raise KeyError(f"{csv_path} lacks column(s) {', '.join(missing)}")
    line_chart(svg_path, {c: [r[c] for r in rows] for c in columns}, title, logy=logy)
