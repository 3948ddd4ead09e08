"""Property suites run by ``safectl verify``.

The reference computations here (active-set enumeration, central differences,
dense-inverse GP posterior, double-loop GAE) are written independently of the
code paths they check.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List

import numpy as np

from .. import control as ctl
from .. import dynamics as dyn
from .. import gp
from .. import learn
from .. import safety as sf
from ..constraints import Box, ConstraintSet, compute_tube
from ..numkit import QpProblem, SOLVED, dare_residual, dare_solve, solve_qp, spectral_radius

SUITES = ("qp", "gp", "tube", "gradients", "control", "safety", "learn", "all")


@dataclass
class Check:
    name: str
    passed: bool
    seconds: float
    detail: str = ""


@dataclass
class VerifySummary:
    suite: str
    checks: List[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> List[str]:
        out = [f"{'PASS' if c.passed else 'FAIL'} {c.name} ({c.seconds:.2f}s) {c.detail}".rstrip()
               for c in self.checks]
        n_ok = sum(c.passed for c in self.checks)
        out.append(f"{n_ok}/{len(self.checks)} checks passed")
        return out


# ----------------------------------------------------------------------------
# Reference computations
# ----------------------------------------------------------------------------

def enumerate_qp(H, g, A, lo, hi, tol=1e-9):
    """Global optimum of a strictly convex QP by trying every active set."""
    n, m = H.shape[0], A.shape[0]
    best_z, best_f = None, np.inf
    for choice in itertools.product((0, -1, 1), repeat=m):
        rows = [i for i, c in enumerate(choice) if c]
        b = [lo[i] if choice[i] < 0 else hi[i] for i in rows]
        if not np.all(np.isfinite(b)):
            continue
        k = len(rows)
        KKT = np.block([[H, A[rows].T], [A[rows], np.zeros((k, k))]])
        try:
            z = np.linalg.solve(KKT, np.concatenate([-g, b]))[:n]
        except np.linalg.LinAlgError:
            continue
        Az = A @ z
        if np.all(Az >= lo - tol) and np.all(Az <= hi + tol):
            f = 0.5 * z @ H @ z + g @ z
            if f < best_f:
                best_z, best_f = z, f
    return best_z, best_f


def random_qp(rng, n_max=4, m_max=6):
    n, m = int(rng.integers(1, n_max + 1)), int(rng.integers(1, m_max + 1))
    M = rng.normal(size=(n, n))
    H = M @ M.T + 0.1 * np.eye(n)
    g = 3 * rng.normal(size=n)
    A = rng.normal(size=(m, n))
    Az = A @ rng.normal(size=n)
    lo, hi = Az - rng.uniform(0, 1, m), Az + rng.uniform(0, 1, m)
    lo[rng.uniform(size=m) < 0.2] = -np.inf
    hi[rng.uniform(size=m) < 0.2] = np.inf
    return H, g, A, lo, hi


def central_diff(f: Callable[[np.ndarray], float], x, h=1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def rel_err(a, b) -> float:
    return float(np.abs(np.asarray(a) - b).max() / max(1.0, np.abs(b).max()))


def dense_lml(X, y, hyper: gp.GpHyper) -> float:
    d = (X[:, None, :] - X[None, :, :]) / hyper.lengthscales
    K = hyper.signal_var * np.exp(-0.5 * np.sum(d ** 2, axis=2)) + hyper.noise_var * np.eye(len(y))
    _, logdet = np.linalg.slogdet(K)
    return float(-0.5 * y @ np.linalg.solve(K, y) - 0.5 * logdet - 0.5 * len(y) * np.log(2 * np.pi))


def gae_reference(costs, values, last_value, dones, gamma, lam):
    N = len(costs)
    delta = [costs[t] + gamma * (0.0 if dones[t] else (last_value if t == N - 1 else values[t + 1]))
             - values[t] for t in range(N)]
    adv = np.zeros(N)
    for t in range(N):
        w = 1.0
        for j in range(t, N):
            adv[t] += w * delta[j]
            if dones[j]:
                break
            w *= gamma * lam
    return adv


# ----------------------------------------------------------------------------
# Checks; each returns (passed, detail)
# ----------------------------------------------------------------------------

def check_qp_oracle(n=200, seed=0):
    rng = np.random.default_rng(seed)
    worst_f = worst_z = 0.0
    for _ in range(n):
        H, g, A, lo, hi = random_qp(rng)
        z_ref, f_ref = enumerate_qp(H, g, A, lo, hi)
        sol = solve_qp(QpProblem(H, g, A, lo, hi))
        if sol.status != SOLVED:
            return False, f"solver status {sol.status}"
        f = 0.5 * sol.z @ H @ sol.z + g @ sol.z
        worst_f = max(worst_f, abs(f - f_ref))
        worst_z = max(worst_z, float(np.linalg.norm(sol.z - z_ref)))
    return worst_f <= 1e-6 and worst_z <= 1e-5, f"max |df|={worst_f:.2e} max |dz|={worst_z:.2e}"


def check_qp_infeasible():
    from ..numkit import PRIMAL_INFEASIBLE
    qp = QpProblem(np.eye(1), np.zeros(1), np.array([[1.0], [1.0]]), np.array([1.0, -np.inf]),
                   np.array([np.inf, -1.0]))
    status = solve_qp(qp).status
    return status == PRIMAL_INFEASIBLE, f"status {status}"


def check_dare(n=20, seed=1):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        A = rng.normal(size=(3, 3))
        B = rng.normal(size=(3, 1))
        P, K = dare_solve(A, B, np.eye(3), np.eye(1))
        if spectral_radius(A - B @ K) >= 1:
            return False, "closed loop not stable"
        worst = max(worst, dare_residual(A, B, np.eye(3), np.eye(1), P) / max(1.0, np.abs(P).max()))
    return worst < 1e-8, f"max relative residual {worst:.1e}"


def check_gp_interpolation(n=20, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        X, y = rng.uniform(-3, 3, (10, 2)), rng.normal(size=10)
        mean, var = gp.fit(X, y, gp.GpHyper(1.0, [0.7, 0.9], 0.0)).predict(X)
        worst = max(worst, np.abs(mean - y).max(), np.abs(var).max())
    return worst < 1e-8, f"max error {worst:.1e}"


def check_gp_prior_recovery(n=20, seed=1):
    rng = np.random.default_rng(seed)
    worst_m = worst_v = 0.0
    for _ in range(n):
        X = rng.uniform(-2, 2, (20, 2))
        y = np.sin(X @ rng.normal(size=2)) + 0.1 * rng.normal(size=20)
        mean, var = gp.fit(X, y, gp.GpHyper(2.0, [0.5, 0.8], 0.01)).predict([[100.0, -100.0]])
        worst_m, worst_v = max(worst_m, abs(mean[0])), max(worst_v, abs(var[0] - 2.0))
    return worst_m <= 1e-6 * np.sqrt(2.0) and worst_v <= 1e-6, f"|mean|={worst_m:.1e} |var-sf2|={worst_v:.1e}"


def check_gp_lml_gradient(n=50, seed=2):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        X = rng.uniform(-2, 2, (15, 2))
        y = np.sin(X @ rng.normal(size=2)) + 0.1 * rng.normal(size=15)
        theta = np.log([0.8, 0.7, 1.3, 0.05]) + 0.3 * rng.normal(size=4)
        _, g = gp.log_marginal_likelihood(X, y, gp.GpHyper.from_log(theta))
        fd = central_diff(lambda t: dense_lml(X, y, gp.GpHyper.from_log(t)), theta, 1e-5)
        worst = max(worst, rel_err(g, fd))
    return worst < 1e-4, f"max relative error {worst:.1e}"


def _loss_fd(params, data, spec):
    f = lambda v: learn.mlp_gradients(params.unflat(v), data, spec)[0]  # noqa: E731
    return params.unflat(central_diff(f, params.flat())).arrays()


def check_policy_gradient(n=50, seed=3):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n):
        spec = learn.LossSpec("policy", clip=0.2 if i % 2 == 0 else np.inf, ent_coef=0.01)
        params = learn.init_mlp([3, 8, 8, 2], rng, log_std=-0.3, out_scale=1.0)
        x = rng.normal(size=(16, 3))
        mean = learn.mlp_forward(params, x)[0]
        u = mean + 0.5 * rng.normal(size=mean.shape)
        data = {"x": x, "u": u, "adv": rng.normal(size=16),
                "logp_old": learn.gaussian_log_prob(mean, params.log_std, u) + 0.3 * rng.normal(size=16)}
        _, g = learn.mlp_gradients(params, data, spec)
        worst = max(worst, max(rel_err(a, b) for a, b in zip(g.arrays(), _loss_fd(params, data, spec))))
    return worst < 1e-4, f"max relative error {worst:.1e}"


def check_value_gradient(n=50, seed=4):
    rng = np.random.default_rng(seed)
    spec = learn.LossSpec("value")
    worst = 0.0
    for _ in range(n):
        params = learn.init_mlp([4, 8, 8, 1], rng, out_scale=1.0)
        data = {"x": rng.normal(size=(12, 4)), "returns": rng.normal(size=12)}
        _, g = learn.mlp_gradients(params, data, spec)
        worst = max(worst, max(rel_err(a, b) for a, b in zip(g.arrays(), _loss_fd(params, data, spec))))
    return worst < 1e-4, f"max relative error {worst:.1e}"


def _di_tube_setup(dt=0.1, w=(0.05, 0.2)):
    from .experiments import disturbance_effect
    true = dyn.make_model(dyn.DOUBLE_INTEGRATOR)
    lm = dyn.linearize(true, dt=dt)
    cs = ConstraintSet([], Box.symmetric([1.0, 1.0]), Box.symmetric([1.0]))
    W = disturbance_effect(true, dt, w)
    return true, lm, cs, W, dyn.DisturbanceSpec("uniform-box", w)


def check_tube_invariance():
    _, lm, cs, W, _ = _di_tube_setup()
    K = ctl.lqr_policy(lm.A, lm.B, np.eye(2), np.eye(1))
    tube = compute_tube(lm.A, lm.B, K, W)
    Acl = lm.A + lm.B @ K
    # s-step interval image plus the accumulated disturbance hull stays inside the tube
    M, acc = np.eye(2), np.zeros(2)
    for _ in range(tube.steps):
        acc += np.abs(M) @ W
        M = Acl @ M
    gap = np.max(np.abs(M) @ tube.omega + acc - tube.omega)
    return gap <= 1e-9, f"s={tube.steps} gap={gap:.1e}"


def check_tube_monte_carlo(episodes=100, steps=40, dt=0.1):
    true, lm, cs, W, spec = _di_tube_setup(dt)
    cfg = ctl.MpcConfig(20, np.eye(2), np.eye(1), cs, tightening="tube")
    ctrl = ctl.TubeMpc(ctl.make_tube_mpc(lm, cfg, W), cfg)
    violations = fallbacks = 0
    for seed in range(episodes):
        rng = np.random.default_rng(seed)
        x = rng.uniform([-0.5, -0.2], [0.5, 0.2])
        for _ in range(steps):
            res = ctrl.step(x)
            fallbacks += res.fallback
            x = dyn.step(true, x, res.u, dt, dyn.sample_disturbance(spec, rng))
            violations += not cs.x_box.contains(x)
    return violations == 0, f"violations={violations} fallbacks={fallbacks}"


def check_cbf_invariance(episodes=100, steps=100, dt=0.05):
    m = dyn.make_model(dyn.DOUBLE_INTEGRATOR)
    spec = sf.position_barrier(m, 1.0, 0.5, 1.0)
    box = Box.symmetric([1.0])
    worst = np.inf
    for seed in range(episodes):
        rng = np.random.default_rng(seed)
        x = rng.uniform([-1.0, -0.5], [1.0, 0.5])
        while spec.barrier(x) < 0:
            x = rng.uniform([-1.0, -0.5], [1.0, 0.5])
        for _ in range(steps):
            u = sf.cbf_filter(spec, x, 1.0 + 0.2 * rng.uniform(-1, 1, 1), box).u_safe
            x = dyn.step(m, x, u, dt)
            worst = min(worst, spec.barrier(x))
    return worst >= -1e-3, f"min barrier {worst:.2e}"


def check_safety_layer_recovery():
    rng = np.random.default_rng(5)
    G = rng.normal(size=(2, 3, 2))
    X, U = rng.normal(size=(200, 2)), rng.normal(size=(200, 2))
    C = rng.normal(size=(200, 2))
    phi = np.hstack([np.ones((200, 1)), X])
    Cn = C + np.einsum("nk,jku,nu->nj", phi, G, U)
    model = sf.safety_layer_fit(X, U, C, Cn, drift=False)
    err = max(float(np.abs(model.sensitivity(x) - np.einsum("k,jku->ju", np.r_[1.0, x], G)).max())
              for x in X[:20])
    return err < 1e-8, f"max sensitivity error {err:.1e}"


def check_gae(n=20, seed=6):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        N = int(rng.integers(1, 30))
        c, v = rng.normal(size=N), rng.normal(size=N)
        dones = np.zeros(N, bool)
        dones[-1] = rng.uniform() < 0.5
        last = float(rng.normal())
        adv, _ = learn.gae(c, v, last, dones, 0.97, 0.9)
        worst = max(worst, float(np.abs(adv - gae_reference(c, v, last, dones, 0.97, 0.9)).max()))
    return worst < 1e-10, f"max error {worst:.1e}"


_SUITES: Dict[str, List[tuple]] = {
    "qp": [("qp.oracle_equivalence_200", check_qp_oracle), ("qp.infeasible_detected", check_qp_infeasible)],
    "gp": [("gp.exact_interpolation_20", check_gp_interpolation),
           ("gp.prior_recovery_20", check_gp_prior_recovery)],
    "tube": [("tube.s_step_invariance", check_tube_invariance),
             ("tube.monte_carlo_100", check_tube_monte_carlo)],
    "gradients": [("gradients.gp_lml_50", check_gp_lml_gradient),
                  ("gradients.policy_loss_50", check_policy_gradient),
                  ("gradients.value_loss_50", check_value_gradient)],
    "control": [("control.dare_residual", check_dare)],
    "safety": [("safety.cbf_invariance_100", check_cbf_invariance),
               ("safety.layer_exact_recovery", check_safety_layer_recovery)],
    "learn": [("learn.gae_reference", check_gae)],
}


def verify(suite: str = "all") -> VerifySummary:
    """Run one named suite (or all of them), timing each check."""
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; expected one of {list(SUITES)}")
    names = [s for s in _SUITES if suite in ("all", s)]
    summary = VerifySummary(suite)
    for name in names:
        for check_name, fn in _SUITES[name]:
            t = time.perf_counter()
            try:
                ok, detail = fn()
            except Exception as exc:  # a crashing check is a failed check
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            summary.checks.append(Check(check_name, bool(ok), time.perf_counter() - t, detail))
    return summary
