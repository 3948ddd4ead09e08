"""Analytic dynamics for cart-pole, planar quadrotor and double integrator.

All models are continuous-time; :func:`step` integrates them with RK4 under a
zero-order hold on the input.  Disturbances enter as an additive offset on the
state derivative, held over the step.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, NamedTuple, Optional, Union

import numpy as np

from .errors import DimensionMismatch, NonFiniteState

CARTPOLE = "cartpole"
QUAD2D = "quad2d"
DOUBLE_INTEGRATOR = "double_integrator"

DIMS = {CARTPOLE: (4, 1), QUAD2D: (6, 2), DOUBLE_INTEGRATOR: (2, 1)}

STATE_LABELS = {
    CARTPOLE: ("x", "x_dot", "theta", "theta_dot"),
    QUAD2D: ("x", "x_dot", "z", "z_dot", "theta", "theta_dot"),
    DOUBLE_INTEGRATOR: ("p", "v"),
}

DEFAULT_PARAMS = {
    CARTPOLE: {"cart_mass": 1.0, "pole_mass": 0.1, "pole_half_length": 0.5, "gravity": 9.8},
    QUAD2D: {"mass": 0.027, "inertia": 1.4e-5, "gravity": 9.8},
    DOUBLE_INTEGRATOR: {"mass": 1.0},
}

DEFAULT_INPUT_BOUNDS = {
    CARTPOLE: ([-10.0], [10.0]),
    QUAD2D: ([0.0, -2e-4], [0.6, 2e-4]),
    DOUBLE_INTEGRATOR: ([-1.0], [1.0]),
}

# parameters that must be strictly positive
_POSITIVE = ("cart_mass", "pole_mass", "pole_half_length", "mass", "inertia")

Seed = Union[int, np.random.Generator, None]


def _rng(seed: Seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class DynamicsModel:
    kind: str
    params: Mapping[str, float] = field(default_factory=dict)
    u_min: Optional[np.ndarray] = None
    u_max: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in DIMS:
            raise ValueError(f"unknown environment kind {self.kind!r}")
        merged = dict(DEFAULT_PARAMS[self.kind])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise ValueError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        merged.update({k: float(v) for k, v in self.params.items()})
        for k in _POSITIVE:
            if k in merged and not merged[k] > 0:
                raise ValueError(f"parameter {k} must be positive, got {merged[k]}")
        lo, hi = DEFAULT_INPUT_BOUNDS[self.kind]
        u_min = np.array(lo if self.u_min is None else self.u_min, dtype=float).reshape(-1)
        u_max = np.array(hi if self.u_max is None else self.u_max, dtype=float).reshape(-1)
        if u_min.size != self.n_u or u_max.size != self.n_u or np.any(u_min > u_max):
            raise ValueError("invalid input bounds")
        object.__setattr__(self, "params", merged)
        object.__setattr__(self, "u_min", u_min)
        object.__setattr__(self, "u_max", u_max)

    @property
    def n_x(self) -> int:
        return DIMS[self.kind][0]

    @property
    def n_u(self) -> int:
        return DIMS[self.kind][1]

    def __getitem__(self, name: str) -> float:
        return self.params[name]


def make_model(kind: str, **params) -> DynamicsModel:
    return DynamicsModel(kind, params)


def equilibrium(model: DynamicsModel):
    """Documented equilibrium (x_eq, u_eq): upright pole, hover, rest at origin."""
    x = np.zeros(model.n_x)
    u = np.zeros(model.n_u)
    if model.kind == QUAD2D:
        u[0] = model["mass"] * model["gravity"]
    return x, u


def _check(model, x, u):
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if x.size != model.n_x or u.size != model.n_u:
        raise DimensionMismatch(
            f"{model.kind} expects x in R^{model.n_x}, u in R^{model.n_u}; got {x.size}, {u.size}")
    return x, u


def _cartpole(p, x, u, jac=False):
    mc, mp, l, g = p["cart_mass"], p["pole_mass"], p["pole_half_length"], p["gravity"]
    M = mc + mp
    _, xd, th, om = x
    F = u[0]
    s, c = np.sin(th), np.cos(th)
    temp = (F + mp * l * om * om * s) / M
    den = l * (4.0 / 3.0 - mp * c * c / M)
    num = g * s - c * temp
    thdd = num / den
    xdd = temp - mp * l * thdd * c / M
    f = np.array([xd, xdd, om, thdd])
    if not jac:
        return f

    # partials w.r.t. theta
    dtemp = mp * l * om * om * c / M
    dnum = g * c + s * temp - c * dtemp
    dden = 2.0 * l * mp * c * s / M
    dthdd_th = (dnum * den - num * dden) / den ** 2
    dxdd_th = dtemp - mp * l * (dthdd_th * c - thdd * s) / M
    # partials w.r.t. omega
    dtemp = 2.0 * mp * l * om * s / M
    dthdd_om = -c * dtemp / den
    dxdd_om = dtemp - mp * l * c * dthdd_om / M
    # partials w.r.t. force
    dthdd_F = -c / M / den
    dxdd_F = 1.0 / M - mp * l * c * dthdd_F / M

    Jx = np.zeros((4, 4))
    Jx[0, 1] = 1.0
    Jx[2, 3] = 1.0
    Jx[1, 2], Jx[1, 3] = dxdd_th, dxdd_om
    Jx[3, 2], Jx[3, 3] = dthdd_th, dthdd_om
    Ju = np.array([[0.0], [dxdd_F], [0.0], [dthdd_F]])
    return f, Jx, Ju


def _quad2d(p, x, u, jac=False):
    m, I, g = p["mass"], p["inertia"], p["gravity"]
    th = x[4]
    T, tau = u
    s, c = np.sin(th), np.cos(th)
    f = np.array([x[1], T * s / m, x[3], T * c / m - g, x[5], tau / I])
    if not jac:
        return f
    Jx = np.zeros((6, 6))
    Jx[0, 1] = Jx[2, 3] = Jx[4, 5] = 1.0
    Jx[1, 4] = T * c / m
    Jx[3, 4] = -T * s / m
    Ju = np.zeros((6, 2))
    Ju[1, 0] = s / m
    Ju[3, 0] = c / m
    Ju[5, 1] = 1.0 / I
    return f, Jx, Ju


def _double_integrator(p, x, u, jac=False):
    m = p["mass"]
    f = np.array([x[1], u[0] / m])
    if not jac:
        return f
    return f, np.array([[0.0, 1.0], [0.0, 0.0]]), np.array([[0.0], [1.0 / m]])


_DERIV = {CARTPOLE: _cartpole, QUAD2D: _quad2d, DOUBLE_INTEGRATOR: _double_integrator}


def derivative(model: DynamicsModel, x, u) -> np.ndarray:
    """Continuous-time state derivative f(x, u)."""
    x, u = _check(model, x, u)
    return _DERIV[model.kind](model.params, x, u)


def continuous_jacobians(model: DynamicsModel, x, u):
    """Analytic (df/dx, df/du) of the continuous dynamics."""
    x, u = _check(model, x, u)
    _, Jx, Ju = _DERIV[model.kind](model.params, x, u, jac=True)
    return Jx, Ju


def control_affine(model: DynamicsModel, x):
    """Split f(x, u) = f_x(x) + f_u(x) u; valid for every model here (input enters linearly)."""
    x = np.asarray(x, dtype=float).reshape(-1)
    zero = np.zeros(model.n_u)
    fx = derivative(model, x, zero)
    _, Ju = continuous_jacobians(model, x, zero)
    return fx, Ju


def clamp_input(model: DynamicsModel, u):
    """Clip u to the model's input box. Returns (u_clipped, saturated)."""
    u = np.asarray(u, dtype=float).reshape(-1)
    uc = np.clip(u, model.u_min, model.u_max)
    return uc, bool(np.any(uc != u))


def step(model: DynamicsModel, x, u, dt: float, w=None) -> np.ndarray:
    """One RK4 step with zero-order-hold input and derivative-offset disturbance.

    ``u`` is clamped to the input bounds first; use :func:`clamp_input` to
    learn whether it saturated.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    x, u = _check(model, x, u)
    u, _ = clamp_input(model, u)
    f = _DERIV[model.kind]
    p = model.params
    k1 = f(p, x, u)
    k2 = f(p, x + 0.5 * dt * k1, u)
    k3 = f(p, x + 0.5 * dt * k2, u)
    k4 = f(p, x + dt * k3, u)
    x_next = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if w is not None:
        x_next = x_next + dt * np.asarray(w, dtype=float).reshape(-1)
    if not np.all(np.isfinite(x_next)):
        raise NonFiniteState(f"{model.kind} state diverged: {x_next}")
    return x_next


def _rk4_with_sensitivity(model, x, u, dt):
    """RK4 step together with its exact Jacobians w.r.t. x and u."""
    f = _DERIV[model.kind]
    p = model.params
    n, m = model.n_x, model.n_u
    I = np.eye(n)
    k1, J1x, J1u = f(p, x, u, jac=True)
    dk1x, dk1u = J1x, J1u
    x2 = x + 0.5 * dt * k1
    k2, J2x, J2u = f(p, x2, u, jac=True)
    dk2x = J2x @ (I + 0.5 * dt * dk1x)
    dk2u = J2x @ (0.5 * dt * dk1u) + J2u
    x3 = x + 0.5 * dt * k2
    k3, J3x, J3u = f(p, x3, u, jac=True)
    dk3x = J3x @ (I + 0.5 * dt * dk2x)
    dk3u = J3x @ (0.5 * dt * dk2u) + J3u
    x4 = x + dt * k3
    k4, J4x, J4u = f(p, x4, u, jac=True)
    dk4x = J4x @ (I + dt * dk3x)
    dk4u = J4x @ (dt * dk3u) + J4u
    x_next = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    A = I + dt / 6.0 * (dk1x + 2 * dk2x + 2 * dk3x + dk4x)
    B = dt / 6.0 * (dk1u + 2 * dk2u + 2 * dk3u + dk4u)
    return x_next, A, B.reshape(n, m)


@dataclass(frozen=True)
class LinearModel:
    """Affine discrete-time model x+ = x_next0 + A (x - x0) + B (u - u0)."""

    A: np.ndarray
    B: np.ndarray
    x0: np.ndarray
    u0: np.ndarray
    dt: float
    x_next0: Optional[np.ndarray] = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float).reshape(A.shape[0], -1)
        if A.shape[0] != A.shape[1]:
            raise DimensionMismatch("A must be square")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise ValueError("non-finite linear model")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        u0 = np.asarray(self.u0, dtype=float).reshape(-1)
        xn = x0 if self.x_next0 is None else np.asarray(self.x_next0, dtype=float).reshape(-1)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "u0", u0)
        object.__setattr__(self, "x_next0", xn)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def offset(self) -> np.ndarray:
        """Constant c in the absolute-coordinate form x+ = A x + B u + c."""
        return self.x_next0 - self.A @ self.x0 - self.B @ self.u0

    def predict(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        u = np.asarray(u, dtype=float).reshape(-1)
        return self.x_next0 + self.A @ (x - self.x0) + self.B @ (u - self.u0)


def linearize(model: DynamicsModel, x0=None, u0=None, dt: float = 0.05) -> LinearModel:
    """Exact Jacobians of the RK4 step map at (x0, u0), defaulting to the equilibrium.

    The input is not clamped here so that linearizing at a bound is well defined.
    """
    xe, ue = equilibrium(model)
    x0 = xe if x0 is None else x0
    u0 = ue if u0 is None else u0
    x0, u0 = _check(model, x0, u0)
    x_next, A, B = _rk4_with_sensitivity(model, x0, u0, dt)
    return LinearModel(A, B, x0, u0, dt, x_next)


@dataclass(frozen=True)
class ParamRandomization:
    """Multiplicative ranges {param: (lo, hi)} applied by :func:`randomize_params`."""

    ranges: Mapping[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for k, r in self.ranges.items():
            lo, hi = (float(v) for v in r)
            if not 0 < lo <= hi:
                raise ValueError(f"invalid range for {k}: {r}")
            clean[k] = (lo, hi)
        object.__setattr__(self, "ranges", clean)


def randomize_params(model: DynamicsModel, rand: ParamRandomization, seed: Seed = None) -> DynamicsModel:
    rng = _rng(seed)
    params = dict(model.params)
    for name in sorted(rand.ranges):
        if name not in params:
            raise ValueError(f"{model.kind} has no parameter {name!r}")
        lo, hi = rand.ranges[name]
        params[name] *= rng.uniform(lo, hi) if hi > lo else lo
    return replace(model, params=params)


def scaled_prior(model: DynamicsModel, factor: float, names=("mass", "inertia")) -> DynamicsModel:
    """Deterministically scale the named parameters (e.g. a 150% mass/inertia prior)."""
    present = [n for n in names if n in model.params]
    return randomize_params(model, ParamRandomization({n: (factor, factor) for n in present}), 0)


@dataclass(frozen=True)
class DisturbanceSpec:
    kind: str = "none"
    bound: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sigma: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("none", "uniform-box", "gaussian-truncated"):
            raise ValueError(f"unknown disturbance kind {self.kind!r}")
        bound = np.asarray(self.bound, dtype=float).reshape(-1)
        if np.any(bound < 0):
            raise ValueError("disturbance bounds must be nonnegative")
        object.__setattr__(self, "bound", bound)
        if self.kind == "gaussian-truncated":
            sigma = bound / 2.0 if self.sigma is None else np.broadcast_to(
                np.asarray(self.sigma, dtype=float), bound.shape).copy()
            if np.any(sigma <= 0):
                raise ValueError("truncated-gaussian sigma must be positive")
            object.__setattr__(self, "sigma", sigma)

    @property
    def dim(self) -> int:
        return self.bound.size


def sample_disturbance(spec: DisturbanceSpec, seed: Seed = None, n: Optional[int] = None) -> np.ndarray:
    """Draw one disturbance vector, or an (n, dim) array of them."""
    shape = (spec.dim,) if n is None else (n, spec.dim)
    if spec.kind == "none":
        return np.zeros(shape)
    rng = _rng(seed)
    if spec.kind == "uniform-box":
        return rng.uniform(-1.0, 1.0, size=shape) * spec.bound
    return np.clip(rng.normal(size=shape) * spec.sigma, -spec.bound, spec.bound)


def cartpole_energy(model: DynamicsModel, x) -> float:
    """Total mechanical energy of the cart-pole (uniform rod of length 2l)."""
    mc, mp, l, g = (model[k] for k in ("cart_mass", "pole_mass", "pole_half_length", "gravity"))
    _, xd, th, om = np.asarray(x, dtype=float)
    kinetic = 0.5 * (mc + mp) * xd ** 2 + mp * l * np.cos(th) * xd * om + (2.0 / 3.0) * mp * l ** 2 * om ** 2
    return float(kinetic + mp * g * l * np.cos(th))


def rollout(model: DynamicsModel, x0, inputs, dt: float, disturbances=None) -> np.ndarray:
    """Open-loop trajectory (len(inputs) + 1 states)."""
    xs = [np.asarray(x0, dtype=float)]
    for k, u in enumerate(inputs):
        w = None if disturbances is None else disturbances[k]
        xs.append(step(model, xs[-1], u, dt, w))
    return np.array(xs)


class LipschitzEstimate(NamedTuple):
    constant: float
    n_pairs: int


def empirical_lipschitz(model: DynamicsModel, lo, hi, u=None, n_pairs: int = 2000, seed: Seed = 0):
    """Largest observed |f(x1,u) - f(x2,u)| / |x1 - x2| over random pairs in a box."""
    rng = _rng(seed)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    u = equilibrium(model)[1] if u is None else np.asarray(u, dtype=float)
    best = 0.0
    for _ in range(n_pairs):
        x1 = rng.uniform(lo, hi)
        x2 = x1 + rng.normal(size=x1.size) * 1e-3 * (hi - lo)
        x2 = np.clip(x2, lo, hi)
        d = np.linalg.norm(x1 - x2)
        if d == 0:
            continue
        best = max(best, np.linalg.norm(derivative(model, x1, u) - derivative(model, x2, u)) / d)
    return LipschitzEstimate(float(best), n_pairs)
