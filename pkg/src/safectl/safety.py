"""Safety filters that minimally modify a learning-based input.

Three certification layers are provided:

* model predictive safety certification (MPSC) built on the tube-MPC QP,
  with a backup-sequence fallback and a growable terminal set;
* a learned linear safety layer that projects onto one-step constraint
  predictions;
* a control-barrier-function QP for control-affine models.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import dynamics as dyn
from .constraints import Box, ConstraintSet, TubeConfig
from .control import MpcConfig, TubeMpcState, assemble_qp, lqr_input, make_tube_mpc
from .dynamics import DynamicsModel, LinearModel
from .episode import CERTIFIED, FALLBACK, INFEASIBLE
from .errors import DimensionMismatch, Infeasible, RankDeficient
from .numkit import DEFAULT_QP_SETTINGS, PRIMAL_INFEASIBLE, SOLVED, QpProblem, QpSettings, solve_qp

MODIFY_TOL = 1e-6
# optimum this close to u_learn triggers an exact certifiability check of u_learn
PASSTHROUGH_CHECK = 1e-3
DEFAULT_SLACK = 0.05
DEFAULT_TAU = 0.5


class FilterResult(NamedTuple):
    u_safe: np.ndarray
    was_modified: bool
    magnitude: float
    status: str


def _result(u_safe, u_learn, status, tol=MODIFY_TOL) -> FilterResult:
    u_learn = np.asarray(u_learn, dtype=float)
    u_safe = np.asarray(u_safe, dtype=float)
    mag = float(np.linalg.norm(u_safe - u_learn))
    if mag <= tol:
        return FilterResult(u_learn.copy(), False, 0.0, status)
    return FilterResult(u_safe, True, mag, status)


# ----------------------------------------------------------------------------
# Model predictive safety certification
# ----------------------------------------------------------------------------

@dataclass
class MpscState:
    """Filter state: tube data, terminal set and the cached backup plan.

    With ``z0_free`` false the nominal plan starts at the measured state, so
    the error along a replayed backup is a partial disturbance sum that lies in
    the tube at every step.  ``terminal_law`` is the nominal law that keeps the
    terminal set invariant: ``"lqr"`` for the default sublevel box,
    ``"translate"`` for :func:`translation_terminal` (LQR about the nearest
    rest point of the segment).
    """

    tube: TubeMpcState
    terminal: Box
    z0_free: bool = False
    terminal_law: str = "lqr"
    free_dims: tuple = ()
    rest: Optional[Box] = None
    backup_z: Optional[np.ndarray] = None
    backup_v: Optional[np.ndarray] = None
    backup_index: int = 0
    _tail: Optional[np.ndarray] = None
    _rest: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.terminal_law not in ("lqr", "translate"):
            raise ValueError(f"unknown terminal law {self.terminal_law!r}")

    def reset(self):
        self.backup_z = self.backup_v = self._tail = self._rest = None
        self.backup_index = 0


def make_mpsc(model: LinearModel, cfg: MpcConfig, W, K=None, tube_cfg: TubeConfig = TubeConfig(),
              free_dims=None, z0_free: bool = False) -> MpscState:
    """Tube, tightened sets and initial terminal set for MPSC.

    ``W`` bounds the per-step discrete-time error between the true system and
    ``model`` (disturbance plus linearization error).  The terminal set is the
    LQR sublevel box, or the translated family of :func:`translation_terminal`
    when ``free_dims`` names translation-invariant coordinates.
    """
    ts = make_tube_mpc(model, cfg, W, K, tube_cfg)
    if free_dims:
        term, rest = translation_terminal(ts, cfg, free_dims)
        return MpscState(ts, term, z0_free, "translate", tuple(free_dims), rest)
    return MpscState(ts, ts.terminal, z0_free, "lqr")


def translation_terminal(ts: TubeMpcState, cfg: MpcConfig, free_dims):
    """Terminal box for models that are translation invariant along ``free_dims``.

    Each rest point e(p) (x_ref with the free coordinates set to p) carries
    an invariant LQR ellipsoid; the union over a segment of p contains the box
    returned here.  Returns ``(terminal, rest)`` where ``rest`` bounds the
    free coordinates of the admissible rest points.
    """
    m = ts.model
    free = np.asarray(list(free_dims), dtype=int)
    if not np.allclose(m.A[:, free], np.eye(m.n_x)[:, free]):
        raise ValueError("model is not translation invariant along the free coordinates")
    P = cfg.P
    Pinv = np.linalg.inv(P)
    Ax, Au, b = cfg.cset.matrices()
    a = Ax + Au @ ts.K
    rhs = b - ts.margins - Ax @ cfg.x_ref - Au @ cfg.u_ref
    touches = np.any(Ax[:, free] != 0, axis=1)
    others = np.setdiff1d(np.arange(m.n_x), free)
    if np.any(Ax[touches][:, others] != 0) or np.any(Au[touches] != 0):
        raise ValueError("constraints on the free coordinates must not involve other variables")
    level = np.inf
    for aj, rj in zip(a[~touches], rhs[~touches]):
        sj = aj @ Pinv @ aj
        if sj > 1e-15:
            level = min(level, max(rj, 0.0) ** 2 / sj)
    lo_t, hi_t = ts.x_box.lo[free], ts.x_box.hi[free]
    extent2 = np.diag(Pinv)[free]
    # keep at least half of each free range for the rest-point segment
    level = min(level, float(np.min(((hi_t - lo_t) / 4.0) ** 2 / extent2)))
    ext = np.sqrt(level * extent2)
    d = 1.0 / np.sqrt(np.diag(P))
    worst = max(float((d * np.array(sg)) @ P @ (d * np.array(sg)))
                for sg in itertools.product((-1.0, 1.0), repeat=m.n_x))
    h = d * np.sqrt(level / worst)
    lo = cfg.x_ref - h
    hi = cfg.x_ref + h
    rest = Box(lo_t + ext, hi_t - ext)
    lo[free] = rest.lo - h[free]
    hi[free] = rest.hi + h[free]
    return Box(lo, hi), rest


def _mpsc_qp(state: MpscState, cfg: MpcConfig, x, u_learn):
    ts = state.tube
    m = ts.model
    H = cfg.horizon
    x = np.asarray(x, dtype=float)
    n_x, n_u = m.n_x, m.n_u
    n = H * (n_x + n_u) + n_x
    # u_0 = K x - K z_0 + v_0 ;  minimize |u_0 - u_learn|^2
    M = np.zeros((n_u, n))
    M[:, :n_x] = -ts.K
    M[:, n_x:n_x + n_u] = np.eye(n_u)
    d = ts.K @ x - np.asarray(u_learn, dtype=float)
    extra = (2.0 * M.T @ M, 2.0 * M.T @ d)
    margins = np.tile(ts.margins, (H + 1, 1))
    qp, lay = assemble_qp([m.A] * H, [m.B] * H, [m.offset] * H, cfg.cset, x, margins=margins,
                          init_tube=ts.tube.omega if state.z0_free else None,
                          terminal=state.terminal, extra_cost=extra)
    return qp, lay, M, d


def _backup_nominal(state: MpscState, cfg: MpcConfig, j: int):
    """Nominal (z_j, v_j) of the cached plan, extended past the horizon by the terminal law."""
    if j < cfg.horizon:
        return state.backup_z[j], state.backup_v[j]
    ts = state.tube
    if state._tail is None:
        state._tail = state.backup_z[-1].copy()
        rest = cfg.x_ref.copy()
        if state.terminal_law == "translate":
            free = list(state.free_dims)
            rest[free] = np.clip(state._tail[free], state.rest.lo, state.rest.hi)
        state._rest = rest
    z = state._tail
    v = lqr_input(ts.K, z, state._rest, cfg.u_ref)
    state._tail = ts.model.predict(z, v)
    return z, v


def mpsc_filter(state: MpscState, cfg: MpcConfig, x, u_learn) -> FilterResult:
    """Closest certifiable input to ``u_learn``; replays the backup plan when none exists."""
    ts = state.tube
    x = np.asarray(x, dtype=float)
    u_learn = np.asarray(u_learn, dtype=float).reshape(-1)
    qp, lay, _, _ = _mpsc_qp(state, cfg, x, u_learn)
    sol = solve_qp(qp, cfg.qp)
    if sol.status == SOLVED:
        Z, V = lay.unpack(sol.z)
        state.backup_z, state.backup_v, state.backup_index, state._tail = Z, V, 0, None
        u = ts.K @ (x - Z[0]) + V[0]
        if MODIFY_TOL < np.linalg.norm(u - u_learn) <= PASSTHROUGH_CHECK:
            exact = _certify(state, cfg, x, u_learn, cfg.qp)
            if exact is not None:
                state.backup_z, state.backup_v = exact
                u = u_learn
        return _result(u, u_learn, CERTIFIED)
    if state.backup_z is None:
        raise Infeasible("no certifiable input and no backup plan: unsafe start state")
    state.backup_index += 1
    z, v = _backup_nominal(state, cfg, state.backup_index)
    u = np.clip(ts.K @ (x - z) + v, cfg.cset.u_box.lo, cfg.cset.u_box.hi)
    return _result(u, u_learn, FALLBACK)


def _certify(state: MpscState, cfg: MpcConfig, x, u, qp_cfg: QpSettings):
    """Nominal plan (Z, V) that starts with input ``u``, or None."""
    qp, lay, M, d = _mpsc_qp(state, cfg, x, u)
    # with u_learn = u the objective residual M z + d must vanish
    A = np.vstack([qp.A, M])
    lo = np.concatenate([qp.lo, -d])
    hi = np.concatenate([qp.hi, -d])
    sol = solve_qp(QpProblem(qp.H, qp.g, A, lo, hi), qp_cfg)
    return lay.unpack(sol.z) if sol.status == SOLVED else None


def mpsc_certifiable(state: MpscState, cfg: MpcConfig, x, u, qp_cfg: QpSettings = DEFAULT_QP_SETTINGS) -> bool:
    """Whether applying ``u`` now admits a feasible tube plan (for oracle checks)."""
    return _certify(state, cfg, x, u, qp_cfg) is not None


def mpsc_grow_terminal(state: MpscState, trajectory) -> MpscState:
    """Enlarge the terminal box to cover a certified nominal trajectory (monotone)."""
    traj = np.asarray(trajectory, dtype=float)
    if traj.size == 0:
        return state
    traj = traj.reshape(-1, state.terminal.lo.size)
    grown = Box(np.minimum(state.terminal.lo, traj.min(axis=0)),
                np.maximum(state.terminal.hi, traj.max(axis=0)))
    grown = grown.intersect(state.tube.x_box)
    # never shrink, even if the old set poked outside the tightened box
    grown = Box(np.minimum(grown.lo, state.terminal.lo), np.maximum(grown.hi, state.terminal.hi))
    return replace(state, terminal=grown)


# ----------------------------------------------------------------------------
# Learned linear safety layer
# ----------------------------------------------------------------------------

def _features(x, kind: str) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if kind == "constant":
        return np.ones(1)
    if kind == "affine":
        return np.concatenate([[1.0], x])
    raise ValueError(f"unknown feature map {kind!r}")


@dataclass(frozen=True)
class LinearSafetyModel:
    """One-step constraint model c_j(x') ~ c_j(x) + h_j'phi(x) + (G_j phi(x))'u."""

    G: np.ndarray        # (n_c, n_feat, n_u) sensitivity coefficients
    h: np.ndarray        # (n_c, n_feat) drift coefficients
    features: str
    residual: float      # max abs training residual
    c_fn: Optional[Callable] = None

    @property
    def n_c(self) -> int:
        return self.G.shape[0]

    def sensitivity(self, x) -> np.ndarray:
        """g_j(x) stacked as rows, shape (n_c, n_u)."""
        return np.einsum("f,jfu->ju", _features(x, self.features), self.G)

    def offset(self, x, c_now) -> np.ndarray:
        """Predicted next constraint value at u = 0."""
        return np.asarray(c_now, dtype=float).reshape(-1) + self.h @ _features(x, self.features)

    def predict(self, x, u, c_now) -> np.ndarray:
        return self.offset(x, c_now) + self.sensitivity(x) @ np.asarray(u, dtype=float)


def safety_layer_fit(X, U, C, C_next, features: str = "affine", drift: bool = True,
                     min_samples: Optional[int] = None, c_fn: Optional[Callable] = None) -> LinearSafetyModel:
    """Least-squares fit of the one-step constraint model per constraint.

    ``X`` (N, n_x), ``U`` (N, n_u), ``C`` and ``C_next`` (N, n_c).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = np.asarray(U, dtype=float).reshape(X.shape[0], -1)
    C = np.asarray(C, dtype=float).reshape(X.shape[0], -1)
    C_next = np.asarray(C_next, dtype=float).reshape(C.shape)
    N, n_u = U.shape
    Phi = np.array([_features(x, features) for x in X])
    n_f = Phi.shape[1]
    D = np.einsum("nf,nu->nfu", Phi, U).reshape(N, n_f * n_u)
    if drift:
        D = np.hstack([D, Phi])
    need = max(D.shape[1], n_u + 1) if min_samples is None else min_samples
    if N < need:
        raise ValueError(f"need at least {need} transitions, got {N}")
    if np.linalg.matrix_rank(D) < D.shape[1]:
        raise RankDeficient("transitions do not excite every input/feature direction")
    T = C_next - C
    coef, *_ = np.linalg.lstsq(D, T, rcond=None)
    resid = float(np.abs(D @ coef - T).max(initial=0.0))
    G = coef[:n_f * n_u].T.reshape(-1, n_f, n_u)
    h = coef[n_f * n_u:].T if drift else np.zeros((C.shape[1], n_f))
    return LinearSafetyModel(G, h, features, resid, c_fn)


def closed_form_projection(c_hat: float, g, u_learn, eps: float = DEFAULT_SLACK) -> np.ndarray:
    """Projection onto a single half-space c_hat + g'u <= -eps."""
    g = np.asarray(g, dtype=float)
    u_learn = np.asarray(u_learn, dtype=float)
    lam = max(0.0, (c_hat + g @ u_learn + eps) / (g @ g))
    return u_learn - lam * g


def _project_scalar(a, b, u_learn):
    """Exact projection for one input: the feasible set a u <= b is an interval."""
    lo, hi = -np.inf, np.inf
    for ai, bi in zip(a, b):
        if ai > 0:
            hi = min(hi, bi / ai)
        elif ai < 0:
            lo = max(lo, bi / ai)
        elif bi < 0:
            return u_learn.copy(), False, True
    if lo > hi:
        return u_learn.copy(), False, True
    return np.array([min(max(u_learn[0], lo), hi)]), True, False


def _project(a_rows, b, u_learn, u_box: Optional[Box], qp_cfg):
    """argmin |u - u_learn|^2 s.t. a_rows u <= b, u in box. Returns (u, solved)."""
    n_u = u_learn.size
    A = np.asarray(a_rows, dtype=float).reshape(-1, n_u)
    lo = np.full(A.shape[0], -np.inf)
    hi = np.asarray(b, dtype=float).reshape(-1)
    if u_box is not None:
        A = np.vstack([A, np.eye(n_u)])
        lo = np.concatenate([lo, u_box.lo])
        hi = np.concatenate([hi, u_box.hi])
    if n_u == 1:
        return _project_scalar(A[:, 0], hi, u_learn)
    qp = QpProblem(2.0 * np.eye(n_u), -2.0 * u_learn, A, lo, hi)
    sol = solve_qp(qp, qp_cfg)
    return sol.z, sol.status == SOLVED, sol.status == PRIMAL_INFEASIBLE


def safety_layer_project(model: LinearSafetyModel, x, u_learn, eps: float = DEFAULT_SLACK,
                         c_now=None, u_box: Optional[Box] = None,
                         qp_cfg: QpSettings = DEFAULT_QP_SETTINGS) -> FilterResult:
    """Closest input whose predicted next constraint values stay below -eps."""
    if eps < 0:
        raise ValueError("slack must be non-negative")
    u_learn = np.asarray(u_learn, dtype=float).reshape(-1)
    if c_now is None:
        if model.c_fn is None:
            raise ValueError("current constraint values are required")
        c_now = model.c_fn(x)
    c_hat = model.offset(x, c_now)
    g = model.sensitivity(x)
    if g.shape[1] != u_learn.size:
        raise DimensionMismatch("input dimension does not match the safety model")
    if np.all(c_hat + g @ u_learn <= -eps) and (u_box is None or u_box.contains(u_learn)):
        return _result(u_learn, u_learn, CERTIFIED)
    u, solved, _ = _project(g, -eps - c_hat, u_learn, u_box, qp_cfg)
    if not solved:
        best = u_learn if u_box is None else np.clip(u_learn, u_box.lo, u_box.hi)
        return _result(best, u_learn, INFEASIBLE)
    return _result(u, u_learn, CERTIFIED)


# ----------------------------------------------------------------------------
# Control barrier function filter
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class CbfSpec:
    barrier: Callable
    gradient: Callable
    alpha: float
    model: DynamicsModel

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("class-K gain must be positive")


def position_barrier(model: DynamicsModel, x_lim: float, tau: float = DEFAULT_TAU,
                     alpha: float = 1.0) -> CbfSpec:
    """B(x) = x_lim - p - tau v on the double integrator (relative degree one)."""
    if model.kind != dyn.DOUBLE_INTEGRATOR:
        raise ValueError("the built-in barrier is defined for the double integrator")
    grad = np.array([-1.0, -tau])
    return CbfSpec(lambda x: float(x_lim - x[0] - tau * x[1]), lambda x: grad.copy(), alpha, model)


def cbf_condition(spec: CbfSpec, x):
    """(a, b) such that the CBF condition reads a'u + b >= 0."""
    fx, fu = dyn.control_affine(spec.model, x)
    grad = np.asarray(spec.gradient(x), dtype=float)
    return grad @ fu, float(grad @ fx + spec.alpha * spec.barrier(x))


def cbf_filter(spec: CbfSpec, x, u_learn, u_box: Optional[Box] = None,
               qp_cfg: QpSettings = DEFAULT_QP_SETTINGS) -> FilterResult:
    """min |u - u_learn|^2 s.t. grad B'(f_x + f_u u) >= -alpha B(x), u in box."""
    x = np.asarray(x, dtype=float)
    u_learn = np.asarray(u_learn, dtype=float).reshape(-1)
    a, b = cbf_condition(spec, x)
    if np.linalg.norm(a) <= 1e-12:
        raise ValueError("barrier has relative degree above one at this state")
    if a @ u_learn + b >= 0 and (u_box is None or u_box.contains(u_learn)):
        return _result(u_learn, u_learn, CERTIFIED)
    if u_box is not None:
        # largest attainable barrier rate over the box
        corner = np.where(a >= 0, u_box.hi, u_box.lo)
        if a @ corner + b < 0:
            return _result(corner, u_learn, INFEASIBLE)
    u = closed_form_projection(-b, -a, u_learn, 0.0)
    if u_box is None or u_box.contains(u):
        return _result(u, u_learn, CERTIFIED)
    u, solved, _ = _project(-a, b, u_learn, u_box, qp_cfg)
    if not solved:
        return _result(np.clip(u_learn, u_box.lo, u_box.hi), u_learn, INFEASIBLE)
    return _result(u, u_learn, CERTIFIED)

