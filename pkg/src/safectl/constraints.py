"""Linear constraints, safety-level checks, Pontryagin tightening and box tubes.

A constraint is ``c(x, u) = a_x.x + a_u.u - b <= 0``.  ``c == 0`` counts as
satisfied.  Box constraints on states and inputs are expanded into one row per
finite face, appended after the explicit constraints.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyTightening, NoConvergence, NotContractive
from .numkit import spectral_radius

LEVEL_I, LEVEL_II, LEVEL_III = "I", "II", "III"


@dataclass(frozen=True)
class LinearConstraint:
    a_x: np.ndarray
    a_u: np.ndarray
    b: float
    level: str = LEVEL_III
    p: Optional[float] = None
    slack_weight: Optional[float] = None
    name: str = ""

    def __post_init__(self):
        a_x = np.asarray(self.a_x, dtype=float).reshape(-1)
        a_u = np.asarray(self.a_u, dtype=float).reshape(-1)
        if not (np.any(a_x) or np.any(a_u)):
            raise ValueError("constraint has no state or input dependence")
        if self.level not in (LEVEL_I, LEVEL_II, LEVEL_III):
            raise ValueError(f"unknown safety level {self.level!r}")
        if self.level == LEVEL_II and not (self.p is not None and 0 < self.p < 1):
            raise ValueError("Level II constraints need a probability p in (0, 1)")
        object.__setattr__(self, "a_x", a_x)
        object.__setattr__(self, "a_u", a_u)
        object.__setattr__(self, "b", float(self.b))

    def __call__(self, x, u) -> float:
        return float(self.a_x @ x + self.a_u @ u - self.b)


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).reshape(-1)
        hi = np.asarray(self.hi, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise DimensionMismatch("box bounds differ in size")
        if np.any(lo > hi):
            raise ValueError("empty box")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def symmetric(cls, half_width) -> "Box":
        h = np.asarray(half_width, dtype=float)
        return cls(-h, h)

    @classmethod
    def unbounded(cls, n: int) -> "Box":
        return cls(np.full(n, -np.inf), np.full(n, np.inf))

    @property
    def dim(self) -> int:
        return self.lo.size

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))

    def intersect(self, other: "Box") -> "Box":
        return Box(np.maximum(self.lo, other.lo), np.minimum(self.hi, other.hi))


@dataclass(frozen=True)
class ConstraintSet:
    constraints: Sequence[LinearConstraint]
    x_box: Box
    u_box: Box

    def __post_init__(self):
        object.__setattr__(self, "constraints", tuple(self.constraints))
        for c in self.constraints:
            if c.a_x.size != self.n_x or c.a_u.size != self.n_u:
                raise DimensionMismatch(f"constraint {c.name!r} has wrong dimensions")

    @property
    def n_x(self) -> int:
        return self.x_box.dim

    @property
    def n_u(self) -> int:
        return self.u_box.dim

    def rows(self) -> List[LinearConstraint]:
        """All constraints with the state/input boxes expanded into faces."""
        out = list(self.constraints)
        zx, zu = np.zeros(self.n_x), np.zeros(self.n_u)
        for i in range(self.n_x):
            e = zx.copy()
            e[i] = 1.0
            if np.isfinite(self.x_box.hi[i]):
                out.append(LinearConstraint(e, zu, self.x_box.hi[i], name=f"x{i}<=hi"))
            if np.isfinite(self.x_box.lo[i]):
                out.append(LinearConstraint(-e, zu, -self.x_box.lo[i], name=f"x{i}>=lo"))
        for i in range(self.n_u):
            e = zu.copy()
            e[i] = 1.0
            if np.isfinite(self.u_box.hi[i]):
                out.append(LinearConstraint(zx, e, self.u_box.hi[i], name=f"u{i}<=hi"))
            if np.isfinite(self.u_box.lo[i]):
                out.append(LinearConstraint(zx, -e, -self.u_box.lo[i], name=f"u{i}>=lo"))
        return out

    def matrices(self):
        """Stacked (Ax, Au, b) over :meth:`rows`."""
        rows = self.rows()
        if not rows:
            return np.zeros((0, self.n_x)), np.zeros((0, self.n_u)), np.zeros(0)
        return (np.array([r.a_x for r in rows]), np.array([r.a_u for r in rows]),
                np.array([r.b for r in rows]))

    def names(self) -> List[str]:
        return [r.name or f"c{j}" for j, r in enumerate(self.rows())]


def evaluate(cset: ConstraintSet, x, u=None) -> np.ndarray:
    """Constraint values c_j(x, u). With ``u=None`` input-dependent rows are NaN."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != cset.n_x:
        raise DimensionMismatch(f"state has size {x.size}, constraints expect {cset.n_x}")
    Ax, Au, b = cset.matrices()
    if u is None:
        vals = Ax @ x - b
        vals[np.any(Au != 0, axis=1)] = np.nan
        return vals
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.size != cset.n_u:
        raise DimensionMismatch(f"input has size {u.size}, constraints expect {cset.n_u}")
    return Ax @ x + Au @ u - b


def trajectory_values(log, cset: ConstraintSet) -> np.ndarray:
    """(len(log) + 1) x n_c values; the final row covers the terminal state only."""
    X, U = log.x, log.u
    vals = [evaluate(cset, X[k], U[k]) for k in range(len(U))]
    vals.append(evaluate(cset, X[len(U)]) if len(X) > len(U) else np.full(len(cset.rows()), np.nan))
    return np.array(vals)


class Level3Report(NamedTuple):
    violations: int
    first_violation: Optional[int]
    max_violation: float
    per_constraint: np.ndarray

    @property
    def passed(self) -> bool:
        return self.violations == 0


def check_level3(log, cset: ConstraintSet) -> Level3Report:
    """Hard-constraint check: a step violates iff some c_j > 0."""
    if len(log.states) == 0:
        raise ValueError("empty episode log")
    vals = trajectory_values(log, cset)
    bad = np.nan_to_num(vals, nan=-np.inf) > 0
    steps = np.flatnonzero(bad.any(axis=1))
    first = int(steps[0]) if steps.size else None
    mx = float(np.nanmax(np.maximum(vals, 0.0))) if vals.size else 0.0
    return Level3Report(int(steps.size), first, mx, bad.sum(axis=0))


class Level2Report(NamedTuple):
    rates: np.ndarray
    p: np.ndarray
    passed: np.ndarray


def check_level2(logs, cset: ConstraintSet) -> Level2Report:
    """Empirical per-constraint satisfaction rate over (episode, step) pairs vs p_j.

    Constraints without a Level II tag are compared against p = 1.
    """
    if len(logs) < 2:
        raise ValueError("need at least two episodes")
    sat = np.zeros(len(cset.rows()))
    total = np.zeros_like(sat)
    for log in logs:
        vals = trajectory_values(log, cset)
        valid = ~np.isnan(vals)
        sat += np.sum(valid & (np.nan_to_num(vals) <= 0), axis=0)
        total += valid.sum(axis=0)
    rates = np.divide(sat, total, out=np.ones_like(sat), where=total > 0)
    p = np.array([r.p if r.level == LEVEL_II else 1.0 for r in cset.rows()])
    return Level2Report(rates, p, rates >= p)


def constraint_cost(log, gamma: float = 1.0) -> np.ndarray:
    """Discounted constraint cost sum_k gamma^k c_k over the logged values."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    C = log.c_array
    if C.size == 0:
        return np.zeros(C.shape[1] if C.ndim == 2 else 0)
    return (gamma ** np.arange(C.shape[0])) @ C


def slack_penalty(eps, weight: float = 1.0) -> float:
    """Quadratic Level I slack penalty; zero iff eps is zero."""
    eps = np.asarray(eps, dtype=float)
    return float(weight * np.sum(eps ** 2))


@dataclass(frozen=True)
class BoxTube:
    """Axis-aligned error tube with half-widths ``omega``.

    ``steps`` and ``closed_loop`` record how it was built so that the
    invariance certificate can be re-checked.
    """

    omega: np.ndarray
    steps: int = 1
    closed_loop: Optional[np.ndarray] = None
    w: Optional[np.ndarray] = None

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=float).reshape(-1)
        if np.any(omega < 0):
            raise ValueError("tube half-widths must be nonnegative")
        object.__setattr__(self, "omega", omega)

    @classmethod
    def zero(cls, n: int) -> "BoxTube":
        return cls(np.zeros(n))

    @property
    def box(self) -> Box:
        return Box.symmetric(self.omega)

    def contains(self, e, tol: float = 0.0) -> bool:
        return bool(np.all(np.abs(e) <= self.omega + tol))


def pontryagin_box(box: Box, tube) -> Box:
    """Box minus a symmetric box: [lo + omega, hi - omega]."""
    omega = tube.omega if isinstance(tube, BoxTube) else np.asarray(tube, dtype=float)
    lo, hi = box.lo + omega, box.hi - omega
    if np.any(lo > hi):
        raise EmptyTightening(f"tube {omega} is wider than box [{box.lo}, {box.hi}]")
    return Box(lo, hi)


def input_tube(tube: BoxTube, K) -> np.ndarray:
    """Half-widths of the interval hull of K * tube."""
    return np.abs(np.atleast_2d(K)) @ tube.omega


def tighten(cset: ConstraintSet, tube: BoxTube, K) -> np.ndarray:
    """Per-row margins max_{e in tube} (a_x + K'a_u).e for x = z + e, u = v + K e."""
    Ax, Au, _ = cset.matrices()
    K = np.atleast_2d(np.asarray(K, dtype=float))
    return np.abs(Ax + Au @ K) @ tube.omega


@dataclass(frozen=True)
class TubeConfig:
    tol: float = 1e-4
    max_steps: int = 5000


def _w_halfwidth(W) -> np.ndarray:
    if isinstance(W, Box):
        return np.maximum(np.abs(W.lo), np.abs(W.hi))
    return np.abs(np.asarray(W, dtype=float)).reshape(-1)


def compute_tube(A, B, K, W, cfg: TubeConfig = TubeConfig()) -> BoxTube:
    """Box outer bound of the minimal robust positively invariant set of e+ = (A+BK)e + w.

    Accumulates the exact interval hulls of A_cl^i W for i < s, where s is the
    first power with || |A_cl^s| ||_inf <= tol, then inflates the partial sum by
    (I - |A_cl^s|)^-1 to cover the tail of the series.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    K = np.asarray(K, dtype=float).reshape(B.shape[1], A.shape[0])
    w = _w_halfwidth(W)
    if w.size != A.shape[0]:
        raise DimensionMismatch("disturbance box dimension differs from state dimension")
    Acl = A + B @ K
    if spectral_radius(Acl) >= 1.0:
        raise NotContractive(f"closed loop spectral radius {spectral_radius(Acl):.4f} >= 1")
    n = A.shape[0]
    power = np.eye(n)
    omega_s = np.zeros(n)
    for s in range(1, cfg.max_steps + 1):
        omega_s = omega_s + np.abs(power) @ w
        power = Acl @ power
        tail = np.abs(power)
        if np.abs(tail).sum(axis=1).max() <= cfg.tol and spectral_radius(tail) < 1.0:
            omega = np.linalg.solve(np.eye(n) - tail, omega_s)
            omega = np.maximum(omega, omega_s)
            return BoxTube(omega, s, Acl, w)
    raise NoConvergence(f"tube did not converge in {cfg.max_steps} steps")


def invariance_gap(tube: BoxTube) -> float:
    """Max violation of the s-step interval invariance |A^s| omega + omega_s <= omega.

    For s = 1 this is the plain one-step test |A_cl| omega + w <= omega.
    """
    Acl, w = tube.closed_loop, tube.w
    n = tube.omega.size
    power = np.eye(n)
    omega_s = np.zeros(n)
    for _ in range(tube.steps):
        omega_s += np.abs(power) @ w
        power = Acl @ power
    return float(np.max(np.abs(power) @ tube.omega + omega_s - tube.omega))


def one_step_interval_image(tube: BoxTube) -> np.ndarray:
    """Half-widths of the interval image |A_cl| omega + w of the tube box."""
    return np.abs(tube.closed_loop) @ tube.omega + tube.w


def mrpi_hull(Acl, w, n_terms: int = 10_000) -> np.ndarray:
    """Truncated series sum_i |Acl^i| w: the interval hull of the minimal RPI set."""
    Acl = np.atleast_2d(np.asarray(Acl, dtype=float))
    w = np.asarray(w, dtype=float)
    power = np.eye(Acl.shape[0])
    total = np.zeros_like(w)
    for _ in range(n_terms):
        term = np.abs(power) @ w
        total += term
        if term.max() < 1e-15:
            break
        power = Acl @ power
    return total
