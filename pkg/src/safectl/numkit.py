"""Dense numerical substrate: Cholesky, an ADMM QP solver, DARE, finite differences.

The QP solver works on problems of the form::

    minimize    0.5 z'Hz + g'z
    subject to  lo <= A z <= hi

using operator splitting (ADMM) with Ruiz equilibration, step-size (rho)
adaptation, infeasibility certificates and an active-set polishing step.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla

from .errors import (
    DimensionMismatch,
    NoConvergence,
    NonFiniteEvaluation,
    NotPositiveDefinite,
)

SOLVED = "solved"
PRIMAL_INFEASIBLE = "primal-infeasible"
MAX_ITERATIONS = "max-iterations"

_INF = 1e20  # bounds at or beyond this magnitude are treated as infinite


def cholesky(A, jitter: float = 0.0) -> np.ndarray:
    """Lower Cholesky factor of ``A + jitter * I``.

    Raises NotPositiveDefinite when a pivot is not strictly positive.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"cholesky needs a square matrix, got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    M = A + jitter * np.eye(A.shape[0]) if jitter else A
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    if np.any(np.diag(L) <= 0.0) or not np.all(np.isfinite(L)):
        raise NotPositiveDefinite("non-positive pivot")
    return L


@dataclass(frozen=True)
class QpProblem:
    H: np.ndarray
    g: np.ndarray
    A: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        g = np.asarray(self.g, dtype=float).reshape(-1)
        n = g.size
        A = np.asarray(self.A, dtype=float).reshape(-1, n) if n else np.zeros((0, 0))
        lo = np.asarray(self.lo, dtype=float).reshape(-1)
        hi = np.asarray(self.hi, dtype=float).reshape(-1)
        if H.shape != (n, n):
            raise DimensionMismatch(f"H is {H.shape}, expected {(n, n)}")
        m = A.shape[0]
        if lo.size != m or hi.size != m:
            raise DimensionMismatch(f"bounds have sizes {lo.size}/{hi.size}, A has {m} rows")
        if np.any(lo > hi):
            raise ValueError("lo must not exceed hi")
        scale = max(1.0, np.abs(H).max(initial=0.0))
        if np.abs(H - H.T).max(initial=0.0) > 1e-9 * scale:
            raise ValueError("H must be symmetric")
        if n and np.linalg.eigvalsh(H).min() < -1e-9 * scale:
            raise ValueError("H must be positive semidefinite")
        object.__setattr__(self, "H", 0.5 * (H + H.T))
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "lo", np.clip(lo, -_INF, _INF))
        object.__setattr__(self, "hi", np.clip(hi, -_INF, _INF))

    @property
    def n(self) -> int:
        return self.g.size

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self.H @ z + self.g @ z)


@dataclass
class QpSolution:
    z: np.ndarray
    y: np.ndarray
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float
    polished: bool = False

    @property
    def solved(self) -> bool:
        return self.status == SOLVED


@dataclass(frozen=True)
class QpSettings:
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    eps_infeas: float = 1e-7
    max_iter: int = 4000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    adaptive_rho_interval: int = 25
    check_interval: int = 5
    scaling_iters: int = 10
    polish: bool = True
    polish_interval: int = 50  # periodic certified active-set attempts; 0 disables


DEFAULT_QP_SETTINGS = QpSettings()


def _ruiz(H, A, iters):
    n, m = H.shape[0], A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    c = 1.0
    Hs, As = H.copy(), A.copy()
    for _ in range(iters):
        col = np.abs(Hs).max(axis=0, initial=0.0)
        if m:
            col = np.maximum(col, np.abs(As).max(axis=0))
        d = 1.0 / np.sqrt(np.clip(col, 1e-4, 1e4))
        d[col == 0.0] = 1.0
        e = np.ones(m)
        if m:
            row = np.abs(As).max(axis=1)
            e = 1.0 / np.sqrt(np.clip(row, 1e-4, 1e4))
            e[row == 0.0] = 1.0
        Hs = d[:, None] * Hs * d[None, :]
        As = e[:, None] * As * d[None, :]
        D *= d
        E *= e
    return Hs, As, D, E, c


def _true_residuals(qp, z, y):
    """Residuals of (z, y) against the original problem (projection of Az)."""
    Az = qp.A @ z
    viol = np.maximum(Az - qp.hi, 0.0) + np.maximum(qp.lo - Az, 0.0)
    r_prim = viol.max(initial=0.0)
    r_dual = np.abs(qp.H @ z + qp.g + qp.A.T @ y).max(initial=0.0)
    return r_prim, r_dual


def _kkt_ok(qp, z, y, r_prim, r_dual, cfg) -> bool:
    Az = qp.A @ z
    eps_p = cfg.eps_abs + cfg.eps_rel * np.abs(Az).max(initial=0.0)
    eps_d = cfg.eps_abs + cfg.eps_rel * max(np.abs(qp.H @ z).max(initial=0.0),
                                            np.abs(qp.A.T @ y).max(initial=0.0), np.abs(qp.g).max(initial=0.0))
    # complementarity: multipliers only on (nearly) active sides
    slack_lo = np.where(qp.lo > -_INF, Az - qp.lo, np.inf)
    slack_hi = np.where(qp.hi < _INF, qp.hi - Az, np.inf)
    comp = np.maximum(np.maximum(y, 0.0) * np.minimum(slack_hi, _INF),
                      np.maximum(-y, 0.0) * np.minimum(slack_lo, _INF)).max(initial=0.0)
    return r_prim <= eps_p and r_dual <= eps_d and comp <= eps_d


def _certified_polish(qp, z, y, cfg):
    out = _polish(qp, z, y)
    if out is None:
        return None
    zp, yp = out
    pp, pd = _true_residuals(qp, zp, yp)
    return (zp, yp, pp, pd) if _kkt_ok(qp, zp, yp, pp, pd, cfg) else None


def _polish(qp: QpProblem, z, y):
    """Re-solve the equality-constrained problem on the guessed active set."""
    Az = qp.A @ z
    eq = (qp.hi - qp.lo) < 1e-8
    lower = ((Az - qp.lo < -y) & (qp.lo > -_INF)) & ~eq
    upper = ((qp.hi - Az < y) & (qp.hi < _INF)) & ~eq
    act = lower | upper | eq
    idx = np.flatnonzero(act)
    b = np.where(lower | eq, qp.lo, qp.hi)[idx]
    Aa = qp.A[idx]
    n, k = qp.n, idx.size
    # proximal iterations toward the ADMM iterate: on a flat optimal face the
    # result stays next to (z, y) instead of jumping to an arbitrary face point.
    # Per-variable weights keep the contraction fast when diag(H) spans many decades.
    h = np.abs(np.diag(qp.H))
    dz = 1e-7 * np.maximum(h, 1e-6 * max(1.0, h.max(initial=0.0)))
    dy = np.full(k, 1e-7)
    K = np.zeros((n + k, n + k))
    K[:n, :n] = qp.H + np.diag(dz)
    K[:n, n:] = Aa.T
    K[n:, :n] = Aa
    K[n:, n:] = -np.diag(dy)
    try:
        lu = sla.lu_factor(K, check_finite=False)
    except (ValueError, np.linalg.LinAlgError):
        return None
    sol = np.concatenate([z, y[idx]])
    for _ in range(25):
        rhs = np.concatenate([-qp.g + dz * sol[:n], b - dy * sol[n:]])
        new = sla.lu_solve(lu, rhs, check_finite=False)
        done = np.abs(new - sol).max(initial=0.0) <= 1e-13 * max(1.0, np.abs(new).max(initial=0.0))
        sol = new
        if done:
            break
    if not np.all(np.isfinite(sol)):
        return None
    zp = sol[:n]
    yp = np.zeros(qp.m)
    yp[idx] = sol[n:]
    # dual sign consistency: lower-active multipliers <= 0, upper-active >= 0, equalities free
    yp[lower] = np.minimum(yp[lower], 0.0)
    yp[upper & ~lower] = np.maximum(yp[upper & ~lower], 0.0)
    return zp, yp


def solve_qp(qp: QpProblem, cfg: QpSettings = DEFAULT_QP_SETTINGS,
             z0: Optional[np.ndarray] = None) -> QpSolution:
    """Solve a convex QP with ADMM. ``z0`` optionally warm-starts the primal iterate."""
    n, m = qp.n, qp.m
    if z0 is not None and np.asarray(z0).size != n:
        raise DimensionMismatch(f"initial iterate has size {np.asarray(z0).size}, expected {n}")
    if m == 0:
        # unconstrained: stationarity only
        try:
            z = sla.solve(qp.H, -qp.g, assume_a="sym")
        except (np.linalg.LinAlgError, ValueError):
            z = np.linalg.lstsq(qp.H, -qp.g, rcond=None)[0]
        r_dual = float(np.abs(qp.H @ z + qp.g).max(initial=0.0))
        status = SOLVED if r_dual <= cfg.eps_abs + cfg.eps_rel * np.abs(qp.g).max(initial=0.0) else MAX_ITERATIONS
        return QpSolution(z, np.zeros(0), status, 0, 0.0, r_dual)

    Hs, As, D, E, c = _ruiz(qp.H, qp.A, cfg.scaling_iters)
    cost_scale = 1.0 / max(1.0, np.abs(Hs).max(initial=0.0), np.abs(D * qp.g).max(initial=0.0))
    c = cost_scale
    Hs = c * Hs
    gs = c * D * qp.g
    los = np.where(qp.lo > -_INF, E * qp.lo, -np.inf)
    his = np.where(qp.hi < _INF, E * qp.hi, np.inf)

    eq = (qp.hi - qp.lo) < 1e-8
    free = (qp.lo <= -_INF) & (qp.hi >= _INF)

    def rho_vec(rho):
        r = np.full(m, rho)
        r[eq] = 1e3 * rho
        r[free] = 1e-6
        return r

    rho = cfg.rho
    rv = rho_vec(rho)
    sigma = cfg.sigma

    def factor(rv):
        K = Hs + sigma * np.eye(n) + As.T @ (rv[:, None] * As)
        return sla.cho_factor(K, lower=True, check_finite=False)

    fac = factor(rv)
    x = np.zeros(n) if z0 is None else np.asarray(z0, dtype=float) / D
    w = np.clip(As @ x, los, his)
    y = np.zeros(m)
    Dinv, Einv = 1.0 / D, 1.0 / E

    status = MAX_ITERATIONS
    it = 0
    r_prim = r_dual = np.inf
    for it in range(1, cfg.max_iter + 1):
        x_prev, w_prev, y_prev = x, w, y
        rhs = sigma * x - gs + As.T @ (rv * w - y)
        xt = sla.cho_solve(fac, rhs, check_finite=False)
        wt = As @ xt
        x = cfg.alpha * xt + (1 - cfg.alpha) * x_prev
        wr = cfg.alpha * wt + (1 - cfg.alpha) * w_prev
        w = np.clip(wr + y / rv, los, his)
        y = y + rv * (wr - w)

        if it % cfg.check_interval and it != cfg.max_iter:
            continue

        Ax = As @ x
        Hx = Hs @ x
        Aty = As.T @ y
        r_prim = np.abs(Einv * (Ax - w)).max()
        r_dual = np.abs(Dinv * (Hx + gs + Aty)).max() / c
        eps_p = cfg.eps_abs + cfg.eps_rel * max(np.abs(Einv * Ax).max(), np.abs(Einv * w).max())
        eps_d = cfg.eps_abs + cfg.eps_rel / c * max(
            np.abs(Dinv * Hx).max(), np.abs(Dinv * Aty).max(), np.abs(Dinv * gs).max())
        if r_prim <= eps_p and r_dual <= eps_d:
            status = SOLVED
            break

        if cfg.polish and cfg.polish_interval and it % cfg.polish_interval == 0:
            early = _certified_polish(qp, D * x, E * y / c, cfg)
            if early is not None:
                z, yu, pp, pd = early
                return QpSolution(z, yu, SOLVED, it, float(pp), float(pd), True)

        dy = y - y_prev
        ndy = np.abs(E * dy).max()
        if ndy > cfg.eps_infeas:
            atdy = np.abs(Dinv * (As.T @ dy)).max()
            pos, neg = np.maximum(dy, 0.0), np.minimum(dy, 0.0)
            # unbounded sides must not carry certificate mass
            ok_sides = np.all(pos[~np.isfinite(his)] <= cfg.eps_infeas * ndy) and \
                np.all(neg[~np.isfinite(los)] >= -cfg.eps_infeas * ndy)
            if ok_sides:
                support = np.sum(np.where(np.isfinite(his), his, 0.0) * pos) + \
                    np.sum(np.where(np.isfinite(los), los, 0.0) * neg)
                if atdy <= cfg.eps_infeas * ndy and support <= -cfg.eps_infeas * ndy:
                    status = PRIMAL_INFEASIBLE
                    break

        if cfg.adaptive_rho_interval and it % cfg.adaptive_rho_interval == 0:
            p_norm = max(np.abs(Ax).max(), np.abs(w).max(), 1e-12)
            d_norm = max(np.abs(Hx).max(), np.abs(Aty).max(), np.abs(gs).max(), 1e-12)
            rs_p = np.abs(Ax - w).max() / p_norm
            rs_d = np.abs(Hx + gs + Aty).max() / d_norm
            new_rho = float(np.clip(rho * np.sqrt(rs_p / max(rs_d, 1e-12)), 1e-6, 1e6))
            if new_rho > 5 * rho or new_rho < 0.2 * rho:
                rho = new_rho
                rv = rho_vec(rho)
                fac = factor(rv)

    z = D * x
    yu = E * y / c
    if status == PRIMAL_INFEASIBLE:
        return QpSolution(z, yu, status, it, float(r_prim), float(r_dual))

    r_prim, r_dual = _true_residuals(qp, z, yu)
    polished = False
    if cfg.polish:
        out = _polish(qp, z, yu)
        if out is not None:
            zp, yp = out
            pp, pd = _true_residuals(qp, zp, yp)
            if status == SOLVED:
                accept = pp <= max(r_prim, 1e-9) and pd <= max(r_dual, 1e-9)
            else:
                # a stalled run still certifies if its guessed active set is exactly optimal
                accept = _kkt_ok(qp, zp, yp, pp, pd, cfg)
                status = SOLVED if accept else status
            if accept:
                z, yu, r_prim, r_dual, polished = zp, yp, pp, pd, True
    return QpSolution(z, yu, status, it, float(r_prim), float(r_dual), polished)


def dare_solve(A, B, Q, R, tol: float = 1e-12, max_iter: int = 200_000):
    """Solve the discrete algebraic Riccati equation by fixed-point iteration.

    Returns (P, K) with K = (R + B'PB)^{-1} B'PA, so that A - BK is the
    optimal closed loop for the cost sum x'Qx + u'Ru.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    nx, nu = B.shape
    if A.shape != (nx, nx) or Q.shape != (nx, nx) or R.shape != (nu, nu):
        raise DimensionMismatch("inconsistent DARE dimensions")
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        K = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_new = Q + A.T @ P @ A - A.T @ P @ B @ K
        P_new = 0.5 * (P_new + P_new.T)
        if not np.all(np.isfinite(P_new)):
            break
        if np.abs(P_new - P).max() <= tol * max(1.0, np.abs(P_new).max()):
            P = P_new
            BtP = B.T @ P
            K = np.linalg.solve(R + BtP @ B, BtP @ A)
            return P, K
        P = P_new
    raise NoConvergence("Riccati iteration did not converge; is (A, B) stabilizable?")


def dare_residual(A, B, Q, R, P) -> float:
    """Max-abs residual of the Riccati fixed point, relative to max(1, |P|)."""
    A, B, Q, R, P = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (A, B, Q, R, P))
    B = B.reshape(A.shape[0], -1)
    BtP = B.T @ P
    rhs = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + BtP @ B, BtP @ A)
    return float(np.abs(rhs - P).max() / max(1.0, np.abs(P).max()))


def spectral_radius(M) -> float:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return float(np.abs(np.linalg.eigvals(M)).max(initial=0.0))


def finite_diff_jacobian(fn: Callable[[np.ndarray], np.ndarray], x0, eps: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``fn`` at ``x0``."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    f0 = np.atleast_1d(np.asarray(fn(x0), dtype=float))
    if not np.all(np.isfinite(f0)):
        raise NonFiniteEvaluation("fn(x0) is not finite")
    J = np.empty((f0.size, x0.size))
    for i in range(x0.size):
        dx = np.zeros_like(x0)
        dx[i] = eps
        fp = np.atleast_1d(np.asarray(fn(x0 + dx), dtype=float))
        fm = np.atleast_1d(np.asarray(fn(x0 - dx), dtype=float))
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NonFiniteEvaluation(f"non-finite evaluation perturbing coordinate {i}")
        J[:, i] = (fp - fm) / (2 * eps)
    return J
