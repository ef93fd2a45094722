"""MLP policies over a flat parameter vector.

Two heads share one layout: a tanh MLP whose last layer is linear, followed
either by a diagonal Gaussian with state-independent log-std (continuous
actions) or a softmax over logits (discrete actions). Gradients are exact and
hand-derived; curvature products use the R-operator so the meta-gradient never
needs finite differences.

Layout of ``theta``: for every layer ``W`` (out x in, row-major) then ``b``;
Gaussian heads append ``log_std`` (one entry per action dimension).
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ShapeError

GAUSSIAN = "gaussian"
CATEGORICAL = "categorical"
_LOG_2PI = float(np.log(2.0 * np.pi))
_CKPT_MAGIC = b"MAPOL1\n"


@dataclass(frozen=True)
class PolicyShape:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    head: str = GAUSSIAN

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.head not in (GAUSSIAN, CATEGORICAL):
            raise ValueError(f"unknown policy head {self.head!r}")
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError(f"invalid layer sizes in {self}")

    @property
    def layers(self) -> list[tuple[int, int]]:
        sizes = [self.input_dim, *self.hidden, self.output_dim]
        return list(zip(sizes[:-1], sizes[1:]))

    @property
    def n_params(self) -> int:
        n = sum(i * o + o for i, o in self.layers)
        return n + (self.output_dim if self.head == GAUSSIAN else 0)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "output_dim": self.output_dim,
            "head": self.head,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyShape":
        return cls(int(d["input_dim"]), tuple(d["hidden"]), int(d["output_dim"]), d["head"])


@dataclass(frozen=True)
class PolicyParams:
    """Flat parameter vector plus the shape needed to interpret it."""

    theta: np.ndarray
    shape: PolicyShape

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        if theta.size != self.shape.n_params:
            raise ShapeError(
                f"theta has {theta.size} entries, shape {self.shape} needs {self.shape.n_params}"
            )
        if not np.all(np.isfinite(theta)):
            raise FloatingPointError("policy parameters contain non-finite entries")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def dim(self) -> int:
        return self.theta.size

    def with_theta(self, theta: np.ndarray) -> "PolicyParams":
        return PolicyParams(theta, self.shape)

    def digest(self) -> str:
        return hashlib.sha256(self.theta.tobytes()).hexdigest()[:16]


@dataclass(frozen=True)
class ActionDistribution:
    """Diagonal Gaussian (``mean``/``log_std``) or categorical (``logits``)."""

    mean: np.ndarray | None = None
    log_std: np.ndarray | None = None
    logits: np.ndarray | None = field(default=None)

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    @property
    def probs(self) -> np.ndarray:
        z = self.logits - self.logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)


def _unpack(theta: np.ndarray, shape: PolicyShape):
    Ws, bs = [], []
    i = 0
    for n_in, n_out in shape.layers:
        Ws.append(theta[i : i + n_in * n_out].reshape(n_out, n_in))
        i += n_in * n_out
        bs.append(theta[i : i + n_out])
        i += n_out
    log_std = theta[i : i + shape.output_dim] if shape.head == GAUSSIAN else None
    return Ws, bs, log_std


def _pack(Ws, bs, log_std, shape: PolicyShape) -> np.ndarray:
    parts = []
    for W, b in zip(Ws, bs):
        parts.append(np.ravel(W))
        parts.append(np.ravel(b))
    if shape.head == GAUSSIAN:
        parts.append(np.ravel(log_std))
    return np.concatenate(parts)


def init_params(
    shape: PolicyShape, rng: np.random.Generator, log_std: float = 0.0, output_scale: float = 1.0
) -> PolicyParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.

    ``output_scale`` shrinks the last layer so the initial policy is centred.
    """
    Ws, bs = [], []
    layers = shape.layers
    for k, (n_in, n_out) in enumerate(layers):
        bound = 1.0 / np.sqrt(n_in)
        if k == len(layers) - 1:
            bound *= output_scale
        Ws.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
        bs.append(rng.uniform(-bound, bound, size=n_out))
    ls = np.full(shape.output_dim, float(log_std)) if shape.head == GAUSSIAN else None
    return PolicyParams(_pack(Ws, bs, ls, shape), shape)


def zeros_like(shape: PolicyShape) -> PolicyParams:
    return PolicyParams(np.zeros(shape.n_params), shape)


def _as_batch(params: PolicyParams, states) -> np.ndarray:
    X = np.asarray(states, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != params.shape.input_dim:
        raise ShapeError(f"states of shape {np.shape(states)} do not match input_dim={params.shape.input_dim}")
    return X


def _forward(Ws, bs, X):
    hs = [X]
    h = X
    for W, b in zip(Ws[:-1], bs[:-1]):
        h = np.tanh(h @ W.T + b)
        hs.append(h)
    return hs, h @ Ws[-1].T + bs[-1]


def _check_actions(params: PolicyParams, actions, n: int) -> np.ndarray:
    shape = params.shape
    if shape.head == GAUSSIAN:
        A = np.asarray(actions, dtype=np.float64).reshape(n, shape.output_dim)
    else:
        A = np.asarray(actions).reshape(n).astype(np.int64)
        if np.any((A < 0) | (A >= shape.output_dim)):
            raise ShapeError(f"discrete actions outside [0, {shape.output_dim})")
    return A


def forward(params: PolicyParams, state) -> ActionDistribution:
    """Action distribution at one state (or a batch of states, row-wise)."""
    single = np.ndim(state) == 1
    X = _as_batch(params, state)
    Ws, bs, log_std = _unpack(params.theta, params.shape)
    _, out = _forward(Ws, bs, X)
    if single:
        out = out[0]
    if params.shape.head == GAUSSIAN:
        return ActionDistribution(mean=out, log_std=np.broadcast_to(log_std, out.shape).copy())
    return ActionDistribution(logits=out)


def log_prob_batch(params: PolicyParams, states, actions) -> np.ndarray:
    X = _as_batch(params, states)
    A = _check_actions(params, actions, X.shape[0])
    Ws, bs, log_std = _unpack(params.theta, params.shape)
    _, out = _forward(Ws, bs, X)
    if params.shape.head == GAUSSIAN:
        z = (A - out) * np.exp(-log_std)
        return np.sum(-0.5 * z * z - log_std - 0.5 * _LOG_2PI, axis=1)
    m = out.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(out - m).sum(axis=1, keepdims=True)))[:, 0]
    return out[np.arange(len(A)), A] - lse


def log_prob(params: PolicyParams, state, action) -> float:
    return float(log_prob_batch(params, [np.asarray(state, dtype=np.float64)], [action])[0])


def _output_grads(params, out, A, w, log_std):
    """d/d(out) and d/d(log_std) of sum_n w_n log pi(a_n|s_n)."""
    if params.shape.head == GAUSSIAN:
        inv_var = np.exp(-2.0 * log_std)
        diff = A - out
        g_out = w[:, None] * diff * inv_var
        g_ls = np.sum(w[:, None] * (diff * diff * inv_var - 1.0), axis=0)
        return g_out, g_ls
    p = ActionDistribution(logits=out).probs
    onehot = np.zeros_like(p)
    onehot[np.arange(len(A)), A] = 1.0
    return w[:, None] * (onehot - p), None


def weighted_score(params: PolicyParams, states, actions, weights) -> np.ndarray:
    """Gradient of ``sum_n weights[n] * log pi(actions[n] | states[n])`` w.r.t. theta."""
    X = _as_batch(params, states)
    A = _check_actions(params, actions, X.shape[0])
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size != X.shape[0]:
        raise ShapeError(f"{w.size} weights for {X.shape[0]} samples")
    Ws, bs, log_std = _unpack(params.theta, params.shape)
    hs, out = _forward(Ws, bs, X)
    delta, g_ls = _output_grads(params, out, A, w, log_std)
    gW, gb = [None] * len(Ws), [None] * len(Ws)
    for l in reversed(range(len(Ws))):
        gW[l] = delta.T @ hs[l]
        gb[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ Ws[l]) * (1.0 - hs[l] ** 2)
    return _pack(gW, gb, g_ls, params.shape)


def grad_log_prob(params: PolicyParams, state, action) -> np.ndarray:
    return weighted_score(params, [np.asarray(state, dtype=np.float64)], [action], [1.0])


def weighted_score_hvp(params: PolicyParams, states, actions, weights, v) -> np.ndarray:
    """Hessian-vector product of ``sum_n weights[n] * log pi(a_n|s_n)`` with ``v``.

    Forward-over-reverse (Pearlmutter's R-operator); exact up to rounding.
    """
    X = _as_batch(params, states)
    A = _check_actions(params, actions, X.shape[0])
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size != X.shape[0]:
        raise ShapeError(f"{w.size} weights for {X.shape[0]} samples")
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size != params.dim:
        raise ShapeError(f"direction has {v.size} entries, expected {params.dim}")
    shape = params.shape
    Ws, bs, log_std = _unpack(params.theta, shape)
    dWs, dbs, dls = _unpack(v, shape)
    L = len(Ws)

    hs, out = _forward(Ws, bs, X)
    Rhs = [np.zeros_like(X)]
    for l in range(L - 1):
        Rz = Rhs[l] @ Ws[l].T + hs[l] @ dWs[l].T + dbs[l]
        Rhs.append((1.0 - hs[l + 1] ** 2) * Rz)
    Rout = Rhs[L - 1] @ Ws[L - 1].T + hs[L - 1] @ dWs[L - 1].T + dbs[L - 1]

    if shape.head == GAUSSIAN:
        inv_var = np.exp(-2.0 * log_std)
        diff = A - out
        delta = w[:, None] * diff * inv_var
        Rdelta = w[:, None] * (-Rout * inv_var - 2.0 * diff * inv_var * dls)
        H_ls = np.sum(w[:, None] * (-2.0 * diff * Rout * inv_var - 2.0 * diff * diff * inv_var * dls), axis=0)
    else:
        p = ActionDistribution(logits=out).probs
        onehot = np.zeros_like(p)
        onehot[np.arange(len(A)), A] = 1.0
        delta = w[:, None] * (onehot - p)
        Rp = p * (Rout - np.sum(p * Rout, axis=1, keepdims=True))
        Rdelta = -w[:, None] * Rp
        H_ls = None

    HW, Hb = [None] * L, [None] * L
    for l in reversed(range(L)):
        HW[l] = Rdelta.T @ hs[l] + delta.T @ Rhs[l]
        Hb[l] = Rdelta.sum(axis=0)
        if l > 0:
            dh = delta @ Ws[l]
            Rdh = Rdelta @ Ws[l] + delta @ dWs[l]
            act = 1.0 - hs[l] ** 2
            Rdelta = Rdh * act - 2.0 * dh * hs[l] * Rhs[l]
            delta = dh * act
    return _pack(HW, Hb, H_ls, shape)


def vjp_score_jacobian(params: PolicyParams, traj, returns, v) -> np.ndarray:
    """``v^T d/dtheta g(tau; theta)`` with ``g = sum_h score_h * returns[h]``.

    Returns are treated as constants, so this is the Hessian of
    ``sum_h returns[h] log pi(a_h|s_h)`` applied to ``v`` (the Jacobian of ``g``
    is symmetric).
    """
    returns = np.asarray(returns, dtype=np.float64).reshape(-1)
    if returns.size != len(traj):
        raise ShapeError(f"{returns.size} returns for a trajectory of length {len(traj)}")
    return weighted_score_hvp(params, traj.states, traj.actions, returns, v)


def sample_actions(params: PolicyParams, states, noise: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Draw actions from pre-drawn noise and return them with their log-densities.

    Gaussian heads consume standard normals of shape (n, action_dim); categorical
    heads consume uniforms of shape (n,) by inverse-CDF lookup.
    """
    X = _as_batch(params, states)
    Ws, bs, log_std = _unpack(params.theta, params.shape)
    _, out = _forward(Ws, bs, X)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("policy produced non-finite outputs")
    if params.shape.head == GAUSSIAN:
        eps = np.asarray(noise, dtype=np.float64).reshape(out.shape)
        actions = out + np.exp(log_std) * eps
        logps = np.sum(-0.5 * eps * eps - log_std - 0.5 * _LOG_2PI, axis=1)
        return actions, logps
    p = ActionDistribution(logits=out).probs
    cdf = np.cumsum(p, axis=1)
    u = np.asarray(noise, dtype=np.float64).reshape(-1, 1)
    actions = np.minimum((u >= cdf).sum(axis=1), p.shape[1] - 1)
    logps = np.log(p[np.arange(len(actions)), actions])
    return actions, logps


def save_checkpoint(params: PolicyParams, path: str | Path, extra: dict | None = None) -> None:
    """Flat float64 little-endian payload behind a length-prefixed JSON header."""
    header = {"shape": params.shape.to_dict(), "n_params": params.dim, "dtype": "<f8"}
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(params.theta.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[PolicyParams, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(_CKPT_MAGIC):
        raise ValueError(f"{path} is not a policy checkpoint")
    off = len(_CKPT_MAGIC)
    (n,) = struct.unpack("<I", data[off : off + 4])
    header = json.loads(data[off + 4 : off + 4 + n])
    theta = np.frombuffer(data[off + 4 + n :], dtype="<f8").astype(np.float64)
    if theta.size != header["n_params"]:
        raise ShapeError(f"checkpoint payload has {theta.size} values, header says {header['n_params']}")
    return PolicyParams(theta, PolicyShape.from_dict(header["shape"])), header.get("extra", {})


def mlp_shape(input_dim: int, output_dim: int, hidden: Sequence[int] = (64, 64), head: str = GAUSSIAN) -> PolicyShape:
    return PolicyShape(input_dim, tuple(hidden), output_dim, head)
