"""Exact GP regression with a squared-exponential ARD kernel.

Hyperparameters are optimized in log space by gradient ascent on the log
marginal likelihood.  One GP models one output; multi-output residuals use one
independent GP per dimension.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .errors import DimensionMismatch, NotPositiveDefinite
from .numkit import cholesky

log = logging.getLogger(__name__)

DEFAULT_TRAINING_CAP = 800
_JITTER = 1e-10
_NOISE_FLOOR = 1e-10


@dataclass(frozen=True)
class GpHyper:
    signal_var: float
    lengthscales: np.ndarray
    noise_var: float = 0.0

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if not self.signal_var > 0 or np.any(ls <= 0) or self.noise_var < 0:
            raise ValueError(f"invalid GP hyperparameters {self}")
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "signal_var", float(self.signal_var))
        object.__setattr__(self, "noise_var", float(self.noise_var))

    def to_log(self) -> np.ndarray:
        return np.concatenate([[np.log(self.signal_var)], np.log(self.lengthscales),
                               [np.log(max(self.noise_var, _NOISE_FLOOR))]])

    @classmethod
    def from_log(cls, theta) -> "GpHyper":
        theta = np.asarray(theta, dtype=float)
        return cls(float(np.exp(theta[0])), np.exp(theta[1:-1]), float(np.exp(theta[-1])))


def se_ard(X1, X2, hyper: GpHyper) -> np.ndarray:
    A = np.asarray(X1, dtype=float) / hyper.lengthscales
    B = np.asarray(X2, dtype=float) / hyper.lengthscales
    sq = np.sum(A * A, 1)[:, None] + np.sum(B * B, 1)[None, :] - 2.0 * A @ B.T
    return hyper.signal_var * np.exp(-0.5 * np.maximum(sq, 0.0))


def _prepare(X, y):
    X = np.asarray(X, dtype=float)
    X = X.reshape(-1, 1) if X.ndim == 1 else X
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.shape[0] != y.size:
        raise DimensionMismatch(f"{X.shape[0]} inputs but {y.size} targets")
    if y.size < 1:
        raise ValueError("a GP needs at least one training point")
    return X, y


def _factor(X, hyper: GpHyper):
    K = se_ard(X, X, hyper)
    if hyper.noise_var > 0:
        return cholesky(K, hyper.noise_var), K
    if np.unique(X, axis=0).shape[0] < X.shape[0]:
        raise NotPositiveDefinite("duplicate training inputs with zero noise variance")
    try:
        return cholesky(K), K
    except NotPositiveDefinite:
        return cholesky(K, _JITTER * hyper.signal_var), K


class GaussianProcess:
    """A fitted exact GP; immutable apart from the variance-clamp counter."""

    def __init__(self, X, y, hyper: GpHyper):
        X, y = _prepare(X, y)
        if hyper.lengthscales.size == 1 and X.shape[1] > 1:
            hyper = replace(hyper, lengthscales=np.full(X.shape[1], hyper.lengthscales[0]))
        if hyper.lengthscales.size != X.shape[1]:
            raise DimensionMismatch("one lengthscale per input dimension required")
        self.X, self.y, self.hyper = X, y, hyper
        self.L, _ = _factor(X, hyper)
        self.alpha = sla.cho_solve((self.L, True), y, check_finite=False)
        self.n_clamped = 0

    @property
    def n_in(self) -> int:
        return self.X.shape[1]

    def _check(self, Xs):
        Xs = np.asarray(Xs, dtype=float)
        Xs = Xs.reshape(1, -1) if Xs.ndim == 1 else Xs
        if Xs.shape[1] != self.n_in:
            raise DimensionMismatch(f"query dimension {Xs.shape[1]} != {self.n_in}")
        return Xs

    def predict(self, Xs):
        """Posterior mean and variance at each row of ``Xs``."""
        Xs = self._check(Xs)
        Ks = se_ard(Xs, self.X, self.hyper)
        mean = Ks @ self.alpha
        v = sla.solve_triangular(self.L, Ks.T, lower=True, check_finite=False)
        var = self.hyper.signal_var - np.sum(v * v, axis=0)
        neg = var < 0
        if np.any(neg):
            self.n_clamped += int(neg.sum())
            var = np.maximum(var, 0.0)
        return mean, var

    def mean_gradient(self, Xs) -> np.ndarray:
        """d mean / d x* for each query row; shape (n_query, n_in)."""
        Xs = self._check(Xs)
        Ks = se_ard(Xs, self.X, self.hyper)
        ell2 = self.hyper.lengthscales ** 2
        diff = Xs[:, None, :] - self.X[None, :, :]
        return -np.einsum("qi,qid->qd", Ks * self.alpha[None, :], diff) / ell2


def fit(X, y, hyper: GpHyper) -> GaussianProcess:
    return GaussianProcess(X, y, hyper)


def predict(gp: GaussianProcess, Xs):
    return gp.predict(Xs)


def log_marginal_likelihood(X, y, hyper: GpHyper, with_grad: bool = True):
    """LML and its gradient w.r.t. (log signal_var, log lengthscales, log noise_var)."""
    X, y = _prepare(X, y)
    L, K = _factor(X, hyper)
    alpha = sla.cho_solve((L, True), y, check_finite=False)
    n = y.size
    value = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * np.log(2 * np.pi)
    if not with_grad:
        return float(value), None
    Kinv = sla.cho_solve((L, True), np.eye(n), check_finite=False)
    W = np.outer(alpha, alpha) - Kinv
    grad = np.empty(X.shape[1] + 2)
    grad[0] = 0.5 * np.sum(W * K)
    for d in range(X.shape[1]):
        D2 = (X[:, d:d + 1] - X[:, d:d + 1].T) ** 2 / hyper.lengthscales[d] ** 2
        grad[1 + d] = 0.5 * np.sum(W * K * D2)
    grad[-1] = 0.5 * hyper.noise_var * np.trace(W)
    return float(value), grad


@dataclass(frozen=True)
class HyperOptConfig:
    max_iter: int = 100
    restarts: int = 2
    seed: int = 0
    grad_tol: float = 1e-5
    restart_spread: float = 1.0
    log_bounds: float = 12.0  # |log hyper - log init| cap
    optimize_noise: bool = True
    min_noise_var: float = 1e-8


class HyperOptResult(NamedTuple):
    hyper: GpHyper
    lml: float
    converged: bool
    iterations: int


def _ascend(X, y, theta0, lo, hi, cfg, free):
    def evaluate(theta):
        try:
            v, g = log_marginal_likelihood(X, y, GpHyper.from_log(theta))
        except NotPositiveDefinite:
            return -np.inf, None
        g = g * free
        return v, g

    theta = np.clip(theta0, lo, hi)
    value, grad = evaluate(theta)
    if grad is None:
        return theta, value, False, 0
    step = 0.1 / max(1e-12, np.abs(grad).max())
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        if np.abs(grad).max() <= cfg.grad_tol * max(1.0, abs(value)):
            converged = True
            break
        accepted = False
        for _ in range(30):
            cand = np.clip(theta + step * grad, lo, hi)
            v, g = evaluate(cand)
            if g is not None and v >= value + 1e-4 * grad @ (cand - theta):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True  # no ascent direction left within the box
            break
        moved = np.abs(cand - theta).max()
        theta, value, grad = cand, v, g
        step *= 2.0
        if moved < 1e-9:
            converged = True
            break
    return theta, value, converged, it


def optimize_hyper(X, y, init: GpHyper, cfg: HyperOptConfig = HyperOptConfig()) -> HyperOptResult:
    """Multi-restart gradient ascent on the LML; never worse than ``init``."""
    X, y = _prepare(X, y)
    init = GpHyper(init.signal_var, np.broadcast_to(init.lengthscales, (X.shape[1],)).copy()
                   if init.lengthscales.size == 1 else init.lengthscales,
                   max(init.noise_var, cfg.min_noise_var) if cfg.optimize_noise else init.noise_var)
    theta0 = init.to_log()
    lo, hi = theta0 - cfg.log_bounds, theta0 + cfg.log_bounds
    free = np.ones_like(theta0)
    if cfg.optimize_noise:
        lo[-1] = max(lo[-1], np.log(cfg.min_noise_var))
    else:
        free[-1] = 0.0
    best_theta, best_val = theta0, log_marginal_likelihood(X, y, init, with_grad=False)[0]
    best_conv, total_it = False, 0
    rng = np.random.default_rng(cfg.seed)
    starts = [theta0] + [theta0 + free * rng.normal(scale=cfg.restart_spread, size=theta0.size)
                         for _ in range(cfg.restarts)]
    for start in starts:
        theta, val, conv, it = _ascend(X, y, start, lo, hi, cfg, free)
        total_it += it
        if val > best_val:
            best_theta, best_val, best_conv = theta, val, conv
        elif start is theta0:
            best_conv = conv
    hyper = GpHyper.from_log(best_theta) if best_theta is not theta0 else init
    if not cfg.optimize_noise:
        hyper = replace(hyper, noise_var=init.noise_var)
    return HyperOptResult(hyper, float(best_val), best_conv, total_it)


def subsample(X, Y, cap: int = DEFAULT_TRAINING_CAP, seed=0):
    """Uniform random subset of at most ``cap`` rows (order preserved)."""
    X = np.asarray(X)
    if X.shape[0] <= cap:
        return X, np.asarray(Y)
    idx = np.sort(np.random.default_rng(seed).choice(X.shape[0], cap, replace=False))
    return X[idx], np.asarray(Y)[idx]


def default_hyper(X, y) -> GpHyper:
    """Data-scaled starting point for hyperparameter optimization."""
    X, y = _prepare(X, y)
    spread = X.std(axis=0)
    spread[spread == 0] = 1.0
    var = max(float(np.var(y)), 1e-12)
    return GpHyper(var, spread, 1e-2 * var)


class GpEnsemble:
    """Independent GPs, one per output column, sharing the same inputs."""

    def __init__(self, gps: Sequence[GaussianProcess]):
        self.gps: List[GaussianProcess] = list(gps)

    @classmethod
    def fit(cls, X, Y, hypers: Sequence[GpHyper]) -> "GpEnsemble":
        Y = np.asarray(Y, dtype=float).reshape(np.asarray(X).shape[0], -1)
        return cls([GaussianProcess(X, Y[:, j], h) for j, h in enumerate(hypers)])

    @property
    def n_out(self) -> int:
        return len(self.gps)

    def predict(self, Xs):
        means, variances = zip(*(g.predict(Xs) for g in self.gps))
        return np.stack(means, axis=1), np.stack(variances, axis=1)

    def mean_jacobian(self, x) -> np.ndarray:
        """(n_out, n_in) Jacobian of the mean at a single input."""
        return np.vstack([g.mean_gradient(x)[0] for g in self.gps])


def save_dataset(path, X, y, names: Optional[Sequence[str]] = None) -> None:
    """CSV with columns inputs..., target (one header row)."""
    X, y = _prepare(X, y)
    names = list(names) if names else [f"in{i}" for i in range(X.shape[1])] + ["target"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row, t in zip(X, y):
            w.writerow([repr(float(v)) for v in row] + [repr(float(t))])


def load_dataset(path):
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    data = np.array(rows[1:], dtype=float).reshape(len(rows) - 1, -1)
    return data[:, :-1], data[:, -1]
