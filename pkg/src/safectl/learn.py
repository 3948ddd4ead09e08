"""Minimal policy optimization: numpy MLPs, GAE, clipped-surrogate updates,
cost shaping and Lagrangian multipliers.

Everything is phrased in terms of costs (lower is better): advantages are
cost advantages, and the clipped surrogate is the pessimistic upper bound
mean(max(r A, clip(r) A)) that the policy minimizes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, NonFiniteLoss

LOG_2PI = np.log(2.0 * np.pi)
CHECKPOINT_MAGIC = b"SCMLP\x00\x01\x00"


# ----------------------------------------------------------------------------
# Networks
# ----------------------------------------------------------------------------

@dataclass
class MlpParams:
    """tanh hidden layers, linear output; ``log_std`` set for a Gaussian policy."""

    weights: List[np.ndarray]          # W_i with shape (out, in)
    biases: List[np.ndarray]
    log_std: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionMismatch("one bias per weight matrix is required")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (W.shape[0],):
                raise DimensionMismatch(f"layer {i}: bias shape {b.shape} vs weight {W.shape}")
            if i and W.shape[1] != self.weights[i - 1].shape[0]:
                raise DimensionMismatch(f"layer {i} input {W.shape[1]} does not chain")
        if self.log_std is not None and self.log_std.shape != (self.n_out,):
            raise DimensionMismatch("log_std must match the output size")

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> List[np.ndarray]:
        out = [a for pair in zip(self.weights, self.biases) for a in pair]
        return out + ([self.log_std] if self.log_std is not None else [])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflat(self, vec) -> "MlpParams":
        vec = np.asarray(vec, dtype=float)
        parts, i = [], 0
        for a in self.arrays():
            parts.append(vec[i:i + a.size].reshape(a.shape).copy())
            i += a.size
        if i != vec.size:
            raise DimensionMismatch("flat vector length does not match the network")
        n = len(self.weights)
        return MlpParams(parts[0:2 * n:2], parts[1:2 * n:2], parts[2 * n] if self.log_std is not None else None)

    def copy(self) -> "MlpParams":
        return self.unflat(self.flat())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat())))


def init_mlp(sizes: Sequence[int], seed=0, log_std: Optional[float] = None,
             out_scale: float = 0.01) -> MlpParams:
    """Scaled-normal init (1/sqrt(fan_in)); the output layer is shrunk by ``out_scale``."""
    rng = np.random.default_rng(seed)
    Ws, bs = [], []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        W = rng.normal(size=(n_out, n_in)) / np.sqrt(n_in)
        if i == len(sizes) - 2:
            W *= out_scale
        Ws.append(W)
        bs.append(np.zeros(n_out))
    ls = None if log_std is None else np.full(sizes[-1], float(log_std))
    return MlpParams(Ws, bs, ls)


def mlp_forward(params: MlpParams, X):
    """Outputs for a batch ``X`` (N, n_in) and the activations needed by backprop."""
    h = np.atleast_2d(np.asarray(X, dtype=float))
    acts = [h]
    n = len(params.weights)
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ W.T + b
        h = a if i == n - 1 else np.tanh(a)
        acts.append(h)
    return h, acts


def mlp_backward(params: MlpParams, acts, d_out) -> MlpParams:
    """Gradient of a scalar loss given dLoss/dOutput for every sample."""
    n = len(params.weights)
    dW, db = [None] * n, [None] * n
    g = np.asarray(d_out, dtype=float)
    for i in range(n - 1, -1, -1):
        dW[i] = g.T @ acts[i]
        db[i] = g.sum(axis=0)
        if i:
            g = (g @ params.weights[i]) * (1.0 - acts[i] ** 2)
    ls = None if params.log_std is None else np.zeros_like(params.log_std)
    return MlpParams(dW, db, ls)


def gaussian_log_prob(mean, log_std, u) -> np.ndarray:
    mean = np.atleast_2d(mean)
    z = (np.atleast_2d(u) - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z ** 2, axis=1) - np.sum(log_std) - 0.5 * mean.shape[1] * LOG_2PI


def policy_act(params: MlpParams, x, seed=None, deterministic: bool = False):
    """Sample (or the mean if deterministic) and its exact log-probability."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("state must be finite")
    mean = mlp_forward(params, x[None])[0][0]
    if deterministic:
        u = mean.copy()
    else:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        u = mean + np.exp(params.log_std) * rng.standard_normal(mean.size)
    return u, float(gaussian_log_prob(mean, params.log_std, u)[0])


# ----------------------------------------------------------------------------
# Losses and gradients
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class LossSpec:
    """``kind`` is "policy" (clipped surrogate) or "value" (half squared error)."""

    kind: str
    clip: float = 0.2
    ent_coef: float = 0.0

    def __post_init__(self):
        if self.kind not in ("policy", "value"):
            raise ValueError(f"unknown loss {self.kind!r}")
        if not self.clip > 0:
            raise ValueError("clip range must be positive")


def mlp_gradients(params: MlpParams, data: dict, spec: LossSpec):
    """Loss value and its exact gradient w.r.t. every parameter block.

    Policy data: ``x``, ``u``, ``logp_old``, ``adv``.  Value data: ``x``, ``returns``.
    """
    x = np.atleast_2d(np.asarray(data["x"], dtype=float))
    N = x.shape[0]
    out, acts = mlp_forward(params, x)
    if spec.kind == "value":
        err = out[:, 0] - np.asarray(data["returns"], dtype=float)
        loss = 0.5 * float(np.mean(err ** 2))
        return loss, mlp_backward(params, acts, (err / N)[:, None])
    u = np.atleast_2d(np.asarray(data["u"], dtype=float)).reshape(N, -1)
    adv = np.asarray(data["adv"], dtype=float)
    ls = params.log_std
    logp = gaussian_log_prob(out, ls, u)
    ratio = np.exp(logp - np.asarray(data["logp_old"], dtype=float))
    clipped = np.clip(ratio, 1.0 - spec.clip, 1.0 + spec.clip)
    raw, cut = ratio * adv, clipped * adv
    use_raw = raw >= cut
    loss = float(np.mean(np.where(use_raw, raw, cut))) - spec.ent_coef * float(np.sum(ls))
    # d loss / d logp: zero wherever the clipped branch is selected
    d_logp = np.where(use_raw, raw, 0.0) / N
    inv_var = np.exp(-2.0 * ls)
    diff = u - out
    d_mean = d_logp[:, None] * diff * inv_var
    grads = mlp_backward(params, acts, d_mean)
    grads.log_std = (d_logp[:, None] * (diff ** 2 * inv_var - 1.0)).sum(axis=0) - spec.ent_coef
    return loss, grads


# ----------------------------------------------------------------------------
# Advantage estimation
# ----------------------------------------------------------------------------

def gae(costs, values, last_value: float, dones, gamma: float, lam: float, normalize: bool = False):
    """Generalized advantage estimate of costs for one contiguous segment.

    ``dones[t]`` marks a true terminal at step t (no bootstrap).  Returns
    (advantages, return targets); targets are advantages plus values before
    any normalization.
    """
    if not (0.0 <= gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ValueError("gamma and lambda must lie in [0, 1]")
    costs = np.asarray(costs, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    N = costs.size
    adv = np.zeros(N)
    running = 0.0
    for t in range(N - 1, -1, -1):
        v_next = last_value if t == N - 1 else values[t + 1]
        alive = 0.0 if dones[t] else 1.0
        delta = costs[t] + gamma * v_next * alive - values[t]
        running = delta + gamma * lam * alive * running
        adv[t] = running
    returns = adv + values
    if normalize:
        adv = normalize_advantages(adv)
    return adv, returns


def normalize_advantages(adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=float)
    std = adv.std()
    return (adv - adv.mean()) / (std + 1e-8)


# ----------------------------------------------------------------------------
# Rollouts
# ----------------------------------------------------------------------------

@dataclass
class RolloutBatch:
    """Concatenated steps of several episode segments.

    ``segments`` holds (start, end, terminated, x_last) per segment; a
    truncated segment bootstraps from V(x_last).
    """

    x: np.ndarray
    u: np.ndarray
    logp: np.ndarray
    cost: np.ndarray
    c: np.ndarray
    done: np.ndarray
    segments: list
    u_applied: Optional[np.ndarray] = None
    gamma: float = 0.99
    lam: float = 0.95

    def __len__(self) -> int:
        return self.cost.size


class Task:
    """Episodic environment interface used by :func:`collect_rollouts`.

    ``step`` returns (x_next, stage cost, constraint values c ≤ 0, violated).
    """

    n_x: int
    n_u: int
    horizon: int

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def step(self, x, u, rng: np.random.Generator):
        raise NotImplementedError


@dataclass
class RolloutStats:
    episodes: int = 0
    violations: int = 0
    episode_costs: List[float] = field(default_factory=list)
    filter_modified: int = 0


def collect_rollouts(task: Task, params: MlpParams, n_steps: int, rng: np.random.Generator,
                     cost_fn: Optional[Callable] = None, filter_fn: Optional[Callable] = None,
                     terminate_on_violation: bool = True, gamma: float = 0.99, lam: float = 0.95):
    """Run whole episodes until at least ``n_steps`` transitions are collected.

    ``cost_fn(l, c)`` replaces the training cost (e.g. shaping); the episode
    cost in the stats is always the task cost.  ``filter_fn(x, u)`` returns
    (u_applied, modified) and is applied between learner and task; the batch
    keeps the learner's own sample so log-probabilities stay exact.
    """
    xs, us, ua, lps, costs, cs, dones, segs = [], [], [], [], [], [], [], []
    stats = RolloutStats()
    while len(costs) < n_steps:
        x = task.reset(rng)
        start, total = len(costs), 0.0
        terminated = False
        for k in range(task.horizon):
            u, lp = policy_act(params, x, rng)
            u_app = u
            if filter_fn is not None:
                u_app, modified = filter_fn(x, u)
                stats.filter_modified += int(modified)
            x_next, l, c, violated = task.step(x, u_app, rng)
            total += l
            xs.append(x), us.append(u), ua.append(np.asarray(u_app, dtype=float)), lps.append(lp)
            cs.append(np.atleast_1d(c))
            costs.append(l if cost_fn is None else cost_fn(l, c))
            x = x_next
            if violated:
                stats.violations += 1
                if terminate_on_violation:
                    terminated = True
                    dones.append(True)
                    break
            dones.append(False)
        segs.append((start, len(costs), terminated, x))
        stats.episodes += 1
        stats.episode_costs.append(total)
    batch = RolloutBatch(np.array(xs), np.array(us), np.array(lps), np.array(costs), np.array(cs),
                         np.array(dones), segs, np.array(ua), gamma, lam)
    return batch, stats


def batch_advantages(batch: RolloutBatch, value: MlpParams, normalize: bool = True):
    """GAE over every segment of ``batch`` with the value network ``value``."""
    v = mlp_forward(value, batch.x)[0][:, 0]
    adv = np.zeros(len(batch))
    ret = np.zeros(len(batch))
    for start, end, terminated, x_last in batch.segments:
        last = 0.0 if terminated else float(mlp_forward(value, x_last[None])[0][0, 0])
        a, r = gae(batch.cost[start:end], v[start:end], last, batch.done[start:end], batch.gamma, batch.lam)
        adv[start:end], ret[start:end] = a, r
    if normalize:
        adv = normalize_advantages(adv)
    return adv, ret


# ----------------------------------------------------------------------------
# Optimizer and PPO update
# ----------------------------------------------------------------------------

@dataclass
class RmsState:
    """Per-parameter running mean square of gradients (momentum free)."""

    sq: np.ndarray
    beta: float = 0.99
    eps: float = 1e-8

    @classmethod
    def like(cls, params: MlpParams, beta: float = 0.99) -> "RmsState":
        return cls(np.zeros(params.flat().size), beta)


def rms_step(params: MlpParams, grads: MlpParams, state: RmsState, lr: float):
    """theta <- theta - lr g / (sqrt(s) + eps),  s <- beta s + (1 - beta) g^2."""
    g = grads.flat()
    sq = state.beta * state.sq + (1.0 - state.beta) * g ** 2
    new = params.flat() - lr * g / (np.sqrt(sq) + state.eps)
    return params.unflat(new), replace(state, sq=sq)


@dataclass(frozen=True)
class PpoConfig:
    clip: float = 0.2
    epochs: int = 4
    minibatch: int = 256
    lr: float = 3e-4
    value_lr: float = 1e-3
    max_grad_norm: float = 0.5
    ent_coef: float = 0.0
    normalize_adv: bool = True
    gamma: float = 0.99
    lam: float = 0.95

    def __post_init__(self):
        if self.epochs < 1 or self.minibatch < 1:
            raise ValueError("epochs and minibatch must be positive")
        if not (self.lr > 0 and self.value_lr > 0):
            raise ValueError("learning rates must be positive")


@dataclass
class PpoState:
    policy: MlpParams
    value: MlpParams
    policy_opt: RmsState
    value_opt: RmsState

    @classmethod
    def create(cls, n_x: int, n_u: int, hidden=(32, 32), seed=0, log_std: float = -0.5) -> "PpoState":
        rng = np.random.default_rng(seed)
        pol = init_mlp([n_x, *hidden, n_u], rng, log_std=log_std)
        val = init_mlp([n_x, *hidden, 1], rng, out_scale=1.0)
        return cls(pol, val, RmsState.like(pol), RmsState.like(val))


@dataclass(frozen=True)
class PpoDiagnostics:
    policy_loss: float
    value_loss: float
    approx_kl: float
    clip_fraction: float


def _clip_norm(grads: MlpParams, max_norm: float) -> MlpParams:
    g = grads.flat()
    norm = np.linalg.norm(g)
    if max_norm and norm > max_norm:
        return grads.unflat(g * (max_norm / norm))
    return grads


def ppo_update(state: PpoState, batch: RolloutBatch, cfg: PpoConfig, seed=0):
    """Epochs of minibatch steps on the clipped surrogate and the value loss.

    Raises NonFiniteLoss (leaving ``state`` untouched) on any non-finite loss
    or parameter.
    """
    rng = np.random.default_rng(seed)
    adv, ret = batch_advantages(batch, state.value, cfg.normalize_adv)
    pol, val = state.policy, state.value
    pol_opt, val_opt = state.policy_opt, state.value_opt
    spec_p = LossSpec("policy", cfg.clip, cfg.ent_coef)
    spec_v = LossSpec("value")
    N = len(batch)
    pl = vl = 0.0
    for _ in range(cfg.epochs):
        order = rng.permutation(N)
        for s in range(0, N, cfg.minibatch):
            idx = order[s:s + cfg.minibatch]
            pl, gp = mlp_gradients(pol, {"x": batch.x[idx], "u": batch.u[idx],
                                         "logp_old": batch.logp[idx], "adv": adv[idx]}, spec_p)
            vl, gv = mlp_gradients(val, {"x": batch.x[idx], "returns": ret[idx]}, spec_v)
            if not (np.isfinite(pl) and np.isfinite(vl)):
                raise NonFiniteLoss("non-finite loss; update aborted")
            pol, pol_opt = rms_step(pol, _clip_norm(gp, cfg.max_grad_norm), pol_opt, cfg.lr)
            val, val_opt = rms_step(val, _clip_norm(gv, cfg.max_grad_norm), val_opt, cfg.value_lr)
            if not (pol.is_finite() and val.is_finite()):
                raise NonFiniteLoss("non-finite parameters; update aborted")
    mean = mlp_forward(pol, batch.x)[0]
    logr = gaussian_log_prob(mean, pol.log_std, batch.u) - batch.logp
    diag = PpoDiagnostics(float(pl), float(vl), float(np.mean(-logr)),
                          float(np.mean(np.abs(np.exp(logr) - 1.0) > cfg.clip)))
    return PpoState(pol, val, pol_opt, val_opt), diag


# ----------------------------------------------------------------------------
# Constraint handling
# ----------------------------------------------------------------------------

def shaped_cost(l: float, c, weight: float, margin: float) -> float:
    """l + weight * sum_j max(0, c_j + margin)^2."""
    if not margin > 0:
        raise ValueError("margin must be positive")
    c = np.atleast_1d(np.asarray(c, dtype=float))
    return float(l + weight * np.sum(np.maximum(0.0, c + margin) ** 2))


@dataclass(frozen=True)
class LagrangeState:
    lam: np.ndarray
    d: np.ndarray
    eta: float

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("dual step size must be positive")
        object.__setattr__(self, "lam", np.maximum(0.0, np.atleast_1d(np.asarray(self.lam, dtype=float))))
        object.__setattr__(self, "d", np.atleast_1d(np.asarray(self.d, dtype=float)))


def lagrangian_step(state: LagrangeState, J_c):
    """Projected dual ascent; returns the new state and the cost weights lambda."""
    lam = np.maximum(0.0, state.lam + state.eta * (np.atleast_1d(J_c) - state.d))
    new = replace(state, lam=lam)
    return new, lam.copy()


def lagrangian_cost(l: float, c, lam) -> float:
    """Stage cost l + sum_j lambda_j c_j minimized by the primal trainer."""
    return float(l + np.dot(lam, np.atleast_1d(c)))


# ----------------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------------

def save_params(path, params: MlpParams, meta: Optional[dict] = None) -> None:
    """Binary arrays to ``path`` plus JSON metadata next to it (``.json``).

    Layout: 8 magic bytes, uint32 array count, then per array uint32 ndim,
    uint32 dims, and the little-endian float64 data in C order.
    """
    path = Path(path)
    arrays = params.arrays()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for a in arrays:
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    info = {"format": "safectl-mlp", "version": 1, "activation": "tanh", "output": "linear",
            "layers": len(params.weights), "gaussian": params.log_std is not None,
            "sizes": [params.n_in] + [W.shape[0] for W in params.weights], "meta": meta or {}}
    path.with_suffix(".json").write_text(json.dumps(info, indent=2, sort_keys=True))


def load_params(path) -> MlpParams:
    path = Path(path)
    info = json.loads(path.with_suffix(".json").read_text())
    raw = path.read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a safectl network checkpoint")
    (count,), pos = struct.unpack_from("<I", raw, 8), 12
    arrays = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", raw, pos)
        shape = struct.unpack_from(f"<{ndim}I", raw, pos + 4)
        pos += 4 + 4 * ndim
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).astype(float))
        pos += 8 * n
    n = info["layers"]
    return MlpParams(arrays[0:2 * n:2], arrays[1:2 * n:2], arrays[2 * n] if info["gaussian"] else None)
