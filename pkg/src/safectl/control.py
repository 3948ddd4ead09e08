"""LQR, linear MPC, tube-based robust MPC and GP-MPC.

Every MPC variant is assembled into one sparse-form QP over the stacked
trajectory ``[x_0, u_0, x_1, u_1, ..., x_{H-1}, u_{H-1}, x_H]`` and solved
with :func:`safectl.numkit.solve_qp`.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
from scipy.stats import norm

from . import dynamics as dyn
from .constraints import (
    Box,
    BoxTube,
    ConstraintSet,
    TubeConfig,
    compute_tube,
    pontryagin_box,
    tighten,
)
from .dynamics import DynamicsModel, LinearModel
from .errors import DimensionMismatch, EmptyTightening, NonFiniteState
from .gp import GpEnsemble
from .numkit import (
    DEFAULT_QP_SETTINGS,
    PRIMAL_INFEASIBLE,
    SOLVED,
    QpProblem,
    QpSettings,
    dare_solve,
    solve_qp,
    spectral_radius,
)

INFEASIBLE = "infeasible"
NOT_CONVERGED = "not-converged"


def lqr_policy(A, B, Q, R) -> np.ndarray:
    """Gain K for the policy u = K (x - x_ref); A + B K is Schur stable."""
    _, K = dare_solve(A, B, Q, R)
    return -K


def lqr_input(K, x, x_ref=None, u_ref=None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    dx = x if x_ref is None else x - x_ref
    u = K @ dx
    return u if u_ref is None else u + u_ref


@dataclass
class MpcConfig:
    horizon: int
    Q: np.ndarray
    R: np.ndarray
    cset: ConstraintSet
    P: Optional[np.ndarray] = None
    x_ref: Optional[np.ndarray] = None
    u_ref: Optional[np.ndarray] = None
    tightening: str = "none"  # none | tube | gp-chance
    confidence: float = 0.95
    qp: QpSettings = DEFAULT_QP_SETTINGS

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if np.linalg.eigvalsh(self.Q).min() < -1e-12 or np.linalg.eigvalsh(self.R).min() <= 0:
            raise ValueError("need Q >= 0 and R > 0")
        if self.P is not None:
            self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
            if np.linalg.eigvalsh(self.P).min() < -1e-12:
                raise ValueError("terminal weight must be PSD")
        if self.tightening not in ("none", "tube", "gp-chance"):
            raise ValueError(f"unknown tightening mode {self.tightening!r}")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")
        n_x, n_u = self.cset.n_x, self.cset.n_u
        self.x_ref = np.zeros(n_x) if self.x_ref is None else np.asarray(self.x_ref, dtype=float)
        if self.u_ref is not None:
            self.u_ref = np.asarray(self.u_ref, dtype=float)
        if self.Q.shape != (n_x, n_x) or self.R.shape != (n_u, n_u):
            raise DimensionMismatch("weights do not match constraint dimensions")


def confidence_multiplier(confidence: float) -> float:
    """Two-sided Gaussian quantile, e.g. 0.95 -> 1.96."""
    return float(norm.ppf(0.5 + 0.5 * confidence))


class MpcResult(NamedTuple):
    u: np.ndarray
    x_pred: np.ndarray
    u_pred: np.ndarray
    status: str
    fallback: bool = False
    solve_status: str = SOLVED
    iterations: int = 0


class _Layout:
    def __init__(self, n_x, n_u, H):
        self.n_x, self.n_u, self.H = n_x, n_u, H
        self.stride = n_x + n_u
        self.n = H * self.stride + n_x

    def x(self, i):
        s = i * self.stride
        return slice(s, s + self.n_x)

    def u(self, i):
        s = i * self.stride + self.n_x
        return slice(s, s + self.n_u)

    def unpack(self, z):
        X = np.array([z[self.x(i)] for i in range(self.H + 1)])
        U = np.array([z[self.u(i)] for i in range(self.H)])
        return X, U

    def pack(self, X, U):
        z = np.zeros(self.n)
        for i in range(self.H):
            z[self.x(i)] = X[i]
            z[self.u(i)] = U[i]
        z[self.x(self.H)] = X[self.H]
        return z


def assemble_qp(A_list, B_list, c_list, cset: ConstraintSet, x_init, *, Q=None, R=None, P=None,
                x_ref=None, u_ref=None, margins=None, init_tube=None, terminal: Optional[Box] = None,
                extra_cost=None, reg: float = 0.0):
    """Sparse-form MPC QP.

    ``margins`` is an (H+1, n_rows) array subtracted from each row's bound at
    each stage.  With ``init_tube`` the first state is a decision variable
    constrained to x_init - omega <= x_0 <= x_init + omega, otherwise x_0 = x_init
    and state-only rows are imposed from stage 1 on.
    ``extra_cost`` = (Hq, gq) is added to the objective (full variable space).
    """
    H = len(A_list)
    n_x, n_u = cset.n_x, cset.n_u
    lay = _Layout(n_x, n_u, H)
    n = lay.n
    Hm = np.zeros((n, n))
    g = np.zeros(n)
    if Q is not None:
        x_ref = np.zeros(n_x) if x_ref is None else x_ref
        u_ref = np.zeros(n_u) if u_ref is None else u_ref
        for i in range(H):
            Hm[lay.x(i), lay.x(i)] += 2 * Q
            g[lay.x(i)] -= 2 * Q @ x_ref
            Hm[lay.u(i), lay.u(i)] += 2 * R
            g[lay.u(i)] -= 2 * R @ u_ref
        Pt = Q if P is None else P
        Hm[lay.x(H), lay.x(H)] += 2 * Pt
        g[lay.x(H)] -= 2 * Pt @ x_ref
    if extra_cost is not None:
        Hm += extra_cost[0]
        g += extra_cost[1]
    if reg:
        Hm += reg * np.eye(n)

    Ax, Au, b = cset.matrices()
    n_rows = b.size
    margins = np.zeros((H + 1, n_rows)) if margins is None else np.asarray(margins, dtype=float)
    state_only = ~np.any(Au != 0, axis=1)

    rows, lo, hi = [], [], []

    def add(row, l, h):
        rows.append(row)
        lo.append(l)
        hi.append(h)

    for i in range(H):
        for r in range(n_x):
            row = np.zeros(n)
            row[lay.x(i)] = -A_list[i][r]
            row[lay.u(i)] = -B_list[i][r]
            row[lay.x(i + 1).start + r] = 1.0
            add(row, c_list[i][r], c_list[i][r])
    x_init = np.asarray(x_init, dtype=float)
    for r in range(n_x):
        row = np.zeros(n)
        row[lay.x(0).start + r] = 1.0
        if init_tube is None:
            add(row, x_init[r], x_init[r])
        else:
            add(row, x_init[r] - init_tube[r], x_init[r] + init_tube[r])
    first_state_stage = 0 if init_tube is not None else 1
    for i in range(H + 1):
        for j in range(n_rows):
            if i == H and not state_only[j]:
                continue
            if state_only[j] and i < first_state_stage:
                continue
            row = np.zeros(n)
            row[lay.x(i)] = Ax[j]
            if i < H:
                row[lay.u(i)] = Au[j]
            add(row, -np.inf, b[j] - margins[i, j])
    if terminal is not None:
        for r in range(n_x):
            if np.isfinite(terminal.lo[r]) or np.isfinite(terminal.hi[r]):
                row = np.zeros(n)
                row[lay.x(H).start + r] = 1.0
                add(row, terminal.lo[r], terminal.hi[r])
    qp = QpProblem(Hm, g, np.array(rows), np.array(lo), np.array(hi))
    return qp, lay


def _solve(qp, lay, cfg_qp, warm):
    sol = solve_qp(qp, cfg_qp, warm)
    X, U = lay.unpack(sol.z)
    return sol, X, U


class LinearMpc:
    """Receding-horizon MPC on a fixed affine model."""

    def __init__(self, model: LinearModel, cfg: MpcConfig, fallback_K=None):
        self.model = model
        self.cfg = cfg
        if cfg.P is None:
            cfg.P, _ = dare_solve(model.A, model.B, cfg.Q, cfg.R)
        if cfg.u_ref is None:
            cfg.u_ref = model.u0.copy()
        self.K = lqr_policy(model.A, model.B, cfg.Q, cfg.R) if fallback_K is None else fallback_K
        self._A = [model.A] * cfg.horizon
        self._B = [model.B] * cfg.horizon
        self._c = [model.offset] * cfg.horizon

    def fallback(self, x):
        u = lqr_input(self.K, x, self.cfg.x_ref, self.cfg.u_ref)
        return np.clip(u, self.cfg.cset.u_box.lo, self.cfg.cset.u_box.hi)

    def step(self, x) -> MpcResult:
        cfg = self.cfg
        qp, lay = assemble_qp(self._A, self._B, self._c, cfg.cset, x, Q=cfg.Q, R=cfg.R, P=cfg.P,
                              x_ref=cfg.x_ref, u_ref=cfg.u_ref)
        sol, X, U = _solve(qp, lay, cfg.qp, None)
        if sol.status != SOLVED:
            status = INFEASIBLE if sol.status == PRIMAL_INFEASIBLE else NOT_CONVERGED
            return MpcResult(self.fallback(x), X, U, status, True, sol.status, sol.iterations)
        return MpcResult(U[0], X, U, SOLVED, False, sol.status, sol.iterations)


def linear_mpc_step(cfg: MpcConfig, model: LinearModel, x) -> MpcResult:
    return LinearMpc(model, cfg).step(x)


def _ellipse_box(P, x_ref, cset: ConstraintSet, K, margins, u_ref):
    """Largest box inscribed in the largest LQR-cost sublevel set that satisfies the rows."""
    n = P.shape[0]
    Ax, Au, b = cset.matrices()
    a = Ax + Au @ K
    rhs = b - margins - Ax @ x_ref - Au @ u_ref
    Pinv = np.linalg.inv(P)
    level = np.inf
    for aj, rj in zip(a, rhs):
        s = aj @ Pinv @ aj
        if s <= 1e-15:
            continue
        if rj <= 0:
            return Box(x_ref.copy(), x_ref.copy())
        level = min(level, rj * rj / s)
    if not np.isfinite(level):
        return Box.unbounded(n)
    d = 1.0 / np.sqrt(np.diag(P))
    worst = max(float((d * np.array(s)) @ P @ (d * np.array(s)))
                for s in itertools.product((-1.0, 1.0), repeat=n))
    h = d * np.sqrt(level / worst)
    return Box(x_ref - h, x_ref + h)


@dataclass
class TubeMpcState:
    model: LinearModel
    K: np.ndarray
    tube: BoxTube
    x_box: Box
    u_box: Box
    terminal: Box
    margins: np.ndarray


def make_tube_mpc(model: LinearModel, cfg: MpcConfig, W, K=None, tube_cfg: TubeConfig = TubeConfig()) -> TubeMpcState:
    """Tube, tightened sets and terminal box for tube-based robust MPC.

    ``W`` bounds the per-step additive error on the discrete state (a Box or
    half-widths).
    """
    if cfg.P is None:
        cfg.P, _ = dare_solve(model.A, model.B, cfg.Q, cfg.R)
    if cfg.u_ref is None:
        cfg.u_ref = model.u0.copy()
    K = lqr_policy(model.A, model.B, cfg.Q, cfg.R) if K is None else np.atleast_2d(K)
    if spectral_radius(model.A + model.B @ K) >= 1:
        raise ValueError("tube feedback gain is not stabilizing")
    tube = compute_tube(model.A, model.B, K, W, tube_cfg)
    x_box = pontryagin_box(cfg.cset.x_box, tube)
    u_box = pontryagin_box(cfg.cset.u_box, np.abs(K) @ tube.omega)
    margins = tighten(cfg.cset, tube, K)
    Ax, Au, b = cfg.cset.matrices()
    if np.any(b - margins - Ax @ cfg.x_ref - Au @ cfg.u_ref < 0):
        raise EmptyTightening("reference violates the tightened constraints")
    terminal = _ellipse_box(cfg.P, cfg.x_ref, cfg.cset, K, margins, cfg.u_ref).intersect(x_box)
    return TubeMpcState(model, K, tube, x_box, u_box, terminal, margins)


class TubeMpc:
    """u_k = K (x_k - z_0*) + v_0*, with z_0 optimized inside x_k - tube."""

    def __init__(self, state: TubeMpcState, cfg: MpcConfig):
        self.state = state
        self.cfg = cfg
        m = state.model
        self._A = [m.A] * cfg.horizon
        self._B = [m.B] * cfg.horizon
        self._c = [m.offset] * cfg.horizon
        self._margins = np.tile(state.margins, (cfg.horizon + 1, 1))

    def step(self, x) -> MpcResult:
        cfg, st = self.cfg, self.state
        qp, lay = assemble_qp(self._A, self._B, self._c, cfg.cset, x, Q=cfg.Q, R=cfg.R, P=cfg.P,
                              x_ref=cfg.x_ref, u_ref=cfg.u_ref, margins=self._margins,
                              init_tube=st.tube.omega, terminal=st.terminal)
        sol, X, U = _solve(qp, lay, cfg.qp, None)
        if sol.status != SOLVED:
            status = INFEASIBLE if sol.status == PRIMAL_INFEASIBLE else NOT_CONVERGED
            u = np.clip(lqr_input(st.K, x, cfg.x_ref, cfg.u_ref), cfg.cset.u_box.lo, cfg.cset.u_box.hi)
            return MpcResult(u, X, U, status, True, sol.status, sol.iterations)
        u = st.K @ (np.asarray(x, dtype=float) - X[0]) + U[0]
        return MpcResult(u, X, U, SOLVED, False, sol.status, sol.iterations)


def tube_mpc_step(state: TubeMpcState, cfg: MpcConfig, x) -> MpcResult:
    return TubeMpc(state, cfg).step(x)


@dataclass
class GpMpcState:
    prior: LinearModel
    gps: GpEnsemble
    output_dims: Sequence[int]
    K: np.ndarray
    z_mult: float
    include_noise: bool = True
    prev_X: Optional[np.ndarray] = None
    prev_U: Optional[np.ndarray] = None

    def __post_init__(self):
        n_in = self.prior.n_x + self.prior.n_u
        if any(g.n_in != n_in for g in self.gps.gps):
            raise DimensionMismatch("GP input dimension must equal n_x + n_u")
        if len(self.output_dims) != self.gps.n_out:
            raise DimensionMismatch("one GP per learned output dimension")
        if not self.z_mult > 0:
            raise ValueError("confidence multiplier must be positive")


class GpMpcResult(NamedTuple):
    u: np.ndarray
    x_mean: np.ndarray
    covariances: np.ndarray
    margins: np.ndarray
    status: str
    fallback: bool = False


def gp_margins(cset: ConstraintSet, covariances, K, z_mult: float) -> np.ndarray:
    """Chance-constraint margins z * sqrt(a' Sigma_i a) per stage and row.

    Input rows use the feedback-propagated direction a_x + K' a_u.
    """
    Ax, Au, _ = cset.matrices()
    a = Ax + Au @ np.atleast_2d(K)
    return z_mult * np.sqrt(np.maximum(np.einsum("rj,ijk,rk->ir", a, covariances, a), 0.0))


class GpMpc:
    """MPC on the prior model plus a GP mean correction, linearized along the previous plan.

    State covariances are propagated with the prior closed loop A + B K and the
    GP variances evaluated (and then held fixed) along the previous solution.
    """

    def __init__(self, state: GpMpcState, cfg: MpcConfig):
        self.state = state
        self.cfg = cfg
        prior = state.prior
        if cfg.P is None:
            cfg.P, _ = dare_solve(prior.A, prior.B, cfg.Q, cfg.R)
        if cfg.u_ref is None:
            cfg.u_ref = prior.u0.copy()
        n_x = prior.n_x
        self.E = np.zeros((n_x, len(state.output_dims)))
        for j, d in enumerate(state.output_dims):
            self.E[d, j] = 1.0

    def _nominal_rollout(self, x):
        st, cfg = self.state, self.cfg
        X = [np.asarray(x, dtype=float)]
        U = []
        for _ in range(cfg.horizon):
            u = np.clip(lqr_input(st.K, X[-1], cfg.x_ref, cfg.u_ref), cfg.cset.u_box.lo, cfg.cset.u_box.hi)
            U.append(u)
            X.append(st.prior.predict(X[-1], u))
        return np.array(X), np.array(U)

    def linearization_points(self, x):
        st = self.state
        if st.prev_X is None:
            return self._nominal_rollout(x)
        X = np.vstack([st.prev_X[1:], st.prev_X[-1:]])
        U = np.vstack([st.prev_U[1:], st.prev_U[-1:]])
        X[0] = x
        return X, U

    def step(self, x) -> GpMpcResult:
        st, cfg = self.state, self.cfg
        prior = st.prior
        n_x, n_u, H = prior.n_x, prior.n_u, cfg.horizon
        Xl, Ul = self.linearization_points(x)
        Z = np.hstack([Xl[:H], Ul])
        mu, var = st.gps.predict(Z)
        if st.include_noise:
            var = var + np.array([g.hyper.noise_var for g in st.gps.gps])
        A_list, B_list, c_list = [], [], []
        for i in range(H):
            J = st.gps.mean_jacobian(Z[i])
            Jx, Ju = J[:, :n_x], J[:, n_x:]
            A_list.append(prior.A + self.E @ Jx)
            B_list.append(prior.B + self.E @ Ju)
            c_list.append(prior.offset + self.E @ (mu[i] - Jx @ Xl[i] - Ju @ Ul[i]))
        Acl = prior.A + prior.B @ st.K
        covs = np.zeros((H + 1, n_x, n_x))
        for i in range(H):
            covs[i + 1] = Acl @ covs[i] @ Acl.T + self.E @ np.diag(var[i]) @ self.E.T
        margins = gp_margins(cfg.cset, covs, st.K, st.z_mult) if cfg.tightening == "gp-chance" else \
            np.zeros((H + 1, len(cfg.cset.rows())))
        qp, lay = assemble_qp(A_list, B_list, c_list, cfg.cset, x, Q=cfg.Q, R=cfg.R, P=cfg.P,
                              x_ref=cfg.x_ref, u_ref=cfg.u_ref, margins=margins)
        warm = lay.pack(Xl, Ul)
        sol, X, U = _solve(qp, lay, cfg.qp, warm)
        if sol.status != SOLVED:
            st.prev_X, st.prev_U = None, None
            u = np.clip(lqr_input(st.K, x, cfg.x_ref, cfg.u_ref), cfg.cset.u_box.lo, cfg.cset.u_box.hi)
            status = INFEASIBLE if sol.status == PRIMAL_INFEASIBLE else NOT_CONVERGED
            return GpMpcResult(u, X, covs, margins, status, True)
        st.prev_X, st.prev_U = X, U
        return GpMpcResult(U[0], X, covs, margins, SOLVED, False)

    def reset(self):
        self.state.prev_X = self.state.prev_U = None


def gpmpc_step(state: GpMpcState, cfg: MpcConfig, x) -> GpMpcResult:
    return GpMpc(state, cfg).step(x)


class ResidualData(NamedTuple):
    X: np.ndarray  # rows (x, u)
    Y: np.ndarray  # rows x_next - prior.predict(x, u), all state dims
    complete: bool


def collect_residuals(true_model: DynamicsModel, prior: LinearModel, policy: Callable, n: int = 800,
                      seed=0, x0_sampler: Optional[Callable] = None, reset_box: Optional[Box] = None,
                      episode_len: int = 200, disturbance: Optional[dyn.DisturbanceSpec] = None
                      ) -> ResidualData:
    """Roll out ``policy(x, rng)`` on the true model and record prior-model residuals.

    Episodes restart from ``x0_sampler(rng)`` after ``episode_len`` steps or
    when the state leaves ``reset_box``.
    """
    rng = np.random.default_rng(seed)
    sample_x0 = x0_sampler or (lambda r: prior.x0.copy())
    X, Y = [], []
    x = sample_x0(rng)
    t = 0
    for _ in range(n):
        u, _ = dyn.clamp_input(true_model, policy(x, rng))
        try:
            w = None if disturbance is None else dyn.sample_disturbance(disturbance, rng)
            x_next = dyn.step(true_model, x, u, prior.dt, w)
        except NonFiniteState:
            return ResidualData(np.array(X), np.array(Y), False)
        X.append(np.concatenate([x, u]))
        Y.append(x_next - prior.predict(x, u))
        t += 1
        if t >= episode_len or (reset_box is not None and not reset_box.contains(x_next)):
            x, t = sample_x0(rng), 0
        else:
            x = x_next
    return ResidualData(np.array(X), np.array(Y), True)


def excitation_policy(K, x_ref, u_ref, noise, u_lo=None, u_hi=None):
    """LQR on the prior plus seeded uniform input noise (half-widths ``noise``)."""
    noise = np.asarray(noise, dtype=float)

    def policy(x, rng):
        u = lqr_input(K, x, x_ref, u_ref) + rng.uniform(-1.0, 1.0, noise.shape) * noise
        return u if u_lo is None else np.clip(u, u_lo, u_hi)
    return policy
