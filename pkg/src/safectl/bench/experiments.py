"""Seeded execution of the preset experiments.

Each experiment has a ``prepare`` step (shared, seed-independent objects such
as GP hyperparameters or filter sets) and a per-seed runner returning a
:class:`SeedOutput`. Seeds are independent, so they may run in worker
processes; logs and the report are written by the calling process only.
"""
from __future__ import annotations

import itertools
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from .. import __version__
from .. import control as ctl
from .. import dynamics as dyn
from .. import gp
from .. import learn
from .. import safety as sf
from ..constraints import Box, ConstraintSet, LinearConstraint, evaluate
from ..episode import CERTIFIED, FALLBACK, INFEASIBLE, UNFILTERED, EpisodeLog
from ..errors import Infeasible
from .config import ExperimentConfig
from .report import MetricsReport, SeedRow, emit, episode_path, write_episode, write_series

MODIFY_TOL = sf.MODIFY_TOL


@dataclass
class SeedOutput:
    rows: List[SeedRow]
    logs: Dict[str, List[EpisodeLog]] = field(default_factory=dict)
    series: Dict[str, tuple] = field(default_factory=dict)  # name -> (columns, rows)


# ----------------------------------------------------------------------------
# Shared helpers
# ----------------------------------------------------------------------------

class _Timer:
    def __init__(self):
        self.total = 0.0
        self.steps = 0

    def __enter__(self):
        self._t = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.total += time.perf_counter() - self._t
        self.steps += 1

    @property
    def per_step(self) -> float:
        return self.total / max(self.steps, 1)


def _row(arm: str, seed: int, logs: List[EpisodeLog], names: List[str], state_rows, wall: float,
         **extras) -> SeedRow:
    """Per-seed metrics from episode logs. A step violates when any state row of c is positive."""
    row = SeedRow(arm, seed, episodes=len(logs), wall_per_step=float(wall))
    counts = dict.fromkeys((names[j] for j in state_rows), 0)
    first = []
    for log in logs:
        C = log.c_array.reshape(len(log), -1)[:, state_rows] if len(log) else np.zeros((0, len(state_rows)))
        bad = C > 0
        for j, name in zip(range(bad.shape[1]), counts):
            counts[name] += int(bad[:, j].sum())
        hit = np.nonzero(bad.any(axis=1))[0]
        if hit.size:
            first.append(int(hit[0]))
        row.steps += len(log)
        row.cost += float(np.sum(log.cost))
        row.violations += int(bad.any(axis=1).sum())
        status = log.filter_status
        row.filter_steps += sum(s != UNFILTERED for s in status)
        row.filter_modified += int(sum(
            s != UNFILTERED and np.linalg.norm(a - b) > MODIFY_TOL
            for s, a, b in zip(status, log.u_applied, log.u_learn)))
        row.fallbacks += status.count(FALLBACK)
        row.infeasible += status.count(INFEASIBLE)
        row.solver_failures += log.count_events("solver-failure")
        row.saturations += log.count_events("saturation")
    row.first_violation_step = min(first) if first else -1
    row.violations_by_constraint = counts
    row.extras = {k: float(v) for k, v in extras.items()}
    return row


def _apply(model, log: EpisodeLog, k: int, u):
    """Clamp ``u`` to the plant input box, recording saturation."""
    u_c, sat = dyn.clamp_input(model, u)
    if sat:
        log.event("saturation", k)
    return u_c


def _state_rows(cset: ConstraintSet):
    Ax, Au, _ = cset.matrices()
    return [j for j in range(Ax.shape[0]) if np.any(Ax[j] != 0)]


def _diag(v):
    return np.diag(np.asarray(v, dtype=float))


def _stage_cost(Q, R, x, x_ref, u, u_ref):
    dx, du = x - x_ref, u - u_ref
    return float(dx @ Q @ dx + du @ R @ du)


# ----------------------------------------------------------------------------
# GP-MPC on the planar quadrotor
# ----------------------------------------------------------------------------

def _gpmpc_setup(cfg: ExperimentConfig):
    env, con = cfg.environment, cfg.controller
    true = dyn.make_model(dyn.QUAD2D)
    prior = dyn.linearize(dyn.scaled_prior(true, env["prior_factor"]), dt=env["dt"])
    sb = np.asarray(env["state_bound"])
    diag = LinearConstraint([-1, 0, 1, 0, 0, 0], [0, 0], env["diagonal_limit"], name="diagonal")
    cs = ConstraintSet([diag], Box(-sb, sb), Box(true.u_min, true.u_max))
    dist = dyn.DisturbanceSpec("uniform-box", env["disturbance_bound"])
    return true, prior, cs, dist


def _gpmpc_mpc_cfg(cfg, cs, tightening):
    con = cfg.controller
    return ctl.MpcConfig(con["horizon"], _diag(con["Q"]), _diag(con["R"]), cs, tightening=tightening,
                         confidence=con["confidence"])


def _gpmpc_dataset(cfg, true, prior, K, dist, seed):
    lrn = cfg.learner
    region = np.asarray(lrn["data_region"])
    pol = ctl.excitation_policy(K, np.zeros(prior.n_x), prior.u0, np.asarray(lrn["excitation_noise"]),
                                true.u_min, true.u_max)
    data = ctl.collect_residuals(true, prior, pol, lrn["data_steps"], seed=seed,
                                 x0_sampler=lambda r: r.uniform(-region, region),
                                 reset_box=Box.symmetric(lrn["data_reset_bound"]),
                                 episode_len=lrn["data_episode_length"], disturbance=dist)
    return gp.subsample(data.X, data.Y, lrn["gp_samples"], seed=seed)


def _gpmpc_prepare(cfg: ExperimentConfig):
    true, prior, cs, dist = _gpmpc_setup(cfg)
    K = ctl.LinearMpc(prior, _gpmpc_mpc_cfg(cfg, cs, "none")).K
    X, Y = _gpmpc_dataset(cfg, true, prior, K, dist, cfg.learner["hyperopt_seed"])
    hcfg = gp.HyperOptConfig(max_iter=cfg.learner["hyperopt_iterations"], restarts=0)
    hypers = [gp.optimize_hyper(X, Y[:, d], gp.default_hyper(X, Y[:, d]), hcfg).hyper
              for d in cfg.controller["residual_dims"]]
    return {"hypers": hypers}


def _gpmpc_episode(cfg, ctrl, true, cs, dist, x0, seed, Q, R, u_ref):
    env = cfg.environment
    rng = np.random.default_rng(seed)
    log = EpisodeLog(true.n_x, true.n_u, dist.dim)
    log.start(x0)
    timer = _Timer()
    x = x0.copy()
    for k in range(cfg.episode_length):
        with timer:
            res = ctrl.step(x)
        if res.fallback:
            log.event("solver-failure", k, status=res.status)
        u = _apply(true, log, k, res.u)
        w = dyn.sample_disturbance(dist, rng)
        x_next = dyn.step(true, x, u, env["dt"], w)
        log.record(u, x_next, _stage_cost(Q, R, x, np.zeros(true.n_x), u, u_ref),
                   evaluate(cs, x_next, u), w=w)
        x = x_next
    return log, timer.per_step


def _gpmpc_seed(cfg: ExperimentConfig, seed: int, prep) -> SeedOutput:
    env, con = cfg.environment, cfg.controller
    true, prior, cs, dist = _gpmpc_setup(cfg)
    rng = np.random.default_rng(seed)
    x0 = np.asarray(env["x0"]) + rng.uniform(-1.0, 1.0, true.n_x) * np.asarray(env["x0_jitter"])
    Q, R = _diag(con["Q"]), _diag(con["R"])
    names, srows = cs.names(), _state_rows(cs)
    lin = ctl.LinearMpc(prior, _gpmpc_mpc_cfg(cfg, cs, "none"))
    X, Y = _gpmpc_dataset(cfg, true, prior, lin.K, dist, seed)
    dims = list(con["residual_dims"])
    ens = gp.GpEnsemble.fit(X, Y[:, dims], prep["hypers"])
    state = ctl.GpMpcState(prior, ens, dims, lin.K, ctl.confidence_multiplier(con["confidence"]),
                           con["include_noise"])
    gpc = ctl.GpMpc(state, _gpmpc_mpc_cfg(cfg, cs, "gp-chance"))
    out = SeedOutput([])
    e0 = float(np.linalg.norm(x0))
    for arm, ctrl in (("linear-mpc", lin), ("gp-mpc", gpc)):
        log, wall = _gpmpc_episode(cfg, ctrl, true, cs, dist, x0, seed, Q, R, prior.u0)
        ratio = float(np.linalg.norm(log.states[-1])) / e0
        out.rows.append(_row(arm, seed, [log], names, srows, wall, terminal_error_ratio=ratio))
        out.logs[arm] = [log]
    return out


def _gpmpc_summary(cfg, report: MetricsReport):
    lin, gpm = report.arm_rows("linear-mpc"), report.arm_rows("gp-mpc")
    return {"linear_seeds_violating": sum(r.violations > 0 for r in lin),
            "gpmpc_seeds_violating": sum(r.violations > 0 for r in gpm),
            "gpmpc_max_terminal_error_ratio": max(r.extras["terminal_error_ratio"] for r in gpm),
            "seeds": len(gpm)}


# ----------------------------------------------------------------------------
# MPSC on the cart-pole
# ----------------------------------------------------------------------------

def _mpsc_setup(cfg: ExperimentConfig):
    env = cfg.environment
    m = dyn.make_model(dyn.CARTPOLE)
    lm = dyn.linearize(m, dt=env["dt"])
    xl, ul = np.asarray(env["state_bound"]), env["input_bound"]
    cs = ConstraintSet([], Box(-xl, xl), Box([-ul], [ul]))
    return m, lm, cs


def _mpsc_prepare(cfg: ExperimentConfig):
    env, flt = cfg.environment, cfg.filter
    m, lm, cs = _mpsc_setup(cfg)
    xl, ul = cs.x_box.hi, cs.u_box.hi
    rng = np.random.default_rng(0)
    err = np.zeros(m.n_x)
    for _ in range(env["linearization_samples"]):
        x, u = rng.uniform(-xl, xl), rng.uniform(-ul, ul)
        err = np.maximum(err, np.abs(dyn.step(m, x, u, env["dt"]) - lm.predict(x, u)))
    W = env["linearization_inflation"] * err + env["dt"] * np.asarray(env["disturbance_bound"])
    mcfg = ctl.MpcConfig(flt["horizon"], _diag(flt["Q"]), _diag(flt["R"]), cs, tightening="tube")
    free = list(flt["free_dims"]) or None
    state = sf.make_mpsc(lm, mcfg, W, free_dims=free)
    pol = ctl.lqr_policy(lm.A, lm.B, _diag(cfg.controller["Q"]), _diag(cfg.controller["R"]))
    return {"state": state, "mpc": mcfg, "policy": pol, "W": W}


def _mpsc_episode(cfg, prep, m, cs, seed, filtered):
    env = cfg.environment
    rng = np.random.default_rng(seed)
    dist = dyn.DisturbanceSpec("uniform-box", env["disturbance_bound"])
    x = rng.uniform(env["x0_low"], env["x0_high"])
    state, mcfg, K = prep["state"], prep["mpc"], prep["policy"]
    state.reset()
    Q, R = mcfg.Q, mcfg.R
    log = EpisodeLog(m.n_x, m.n_u, dist.dim)
    log.start(x)
    timer = _Timer()
    for k in range(cfg.episode_length):
        u_l = K @ x
        status = UNFILTERED
        with timer:
            if filtered:
                try:
                    r = sf.mpsc_filter(state, mcfg, x, u_l)
                    u, status = r.u_safe, r.status
                except Infeasible:
                    u, status = u_l, INFEASIBLE
                    log.event("solver-failure", k, status=INFEASIBLE)
                if status == FALLBACK:
                    log.event("solver-failure", k, status=FALLBACK)
            else:
                u = u_l
        u = _apply(m, log, k, np.clip(u, cs.u_box.lo, cs.u_box.hi))
        w = dyn.sample_disturbance(dist, rng)
        x_next = dyn.step(m, x, u, env["dt"], w)
        log.record(u, x_next, _stage_cost(Q, R, x, np.zeros(m.n_x), u, np.zeros(m.n_u)),
                   evaluate(cs, x_next, u), u_learn=u_l, w=w, filter_status=status)
        x = x_next
    return log, timer.per_step


def _mpsc_seed(cfg: ExperimentConfig, seed: int, prep) -> SeedOutput:
    m, _, cs = _mpsc_setup(cfg)
    names, srows = cs.names(), _state_rows(cs)
    out = SeedOutput([])
    for arm, filtered in (("unfiltered", False), ("mpsc", True)):
        log, wall = _mpsc_episode(cfg, prep, m, cs, seed, filtered)
        out.rows.append(_row(arm, seed, [log], names, srows, wall))
        out.logs[arm] = [log]
    return out


def boundary_distance(X, bound) -> np.ndarray:
    """Distance of each state to the nearest face of the box |x| <= bound, per unit box width."""
    X = np.atleast_2d(X)
    b = np.asarray(bound, dtype=float)
    return np.min(np.hstack([(b - X) / (2 * b), (X + b) / (2 * b)]), axis=1)


def near_boundary_fraction(logs: List[EpisodeLog], bound, quantile: float = 0.25) -> float:
    """Share of filter-modified steps taken in the ``quantile`` of states closest to the boundary."""
    D, M = [], []
    for log in logs:
        D.append(boundary_distance(log.x[:-1], bound))
        M.append([np.linalg.norm(a - b) > MODIFY_TOL for a, b in zip(log.u_applied, log.u_learn)])
    D, M = np.concatenate(D), np.concatenate(M).astype(bool)
    if not M.any():
        return float("nan")
    q = np.quantile(D, quantile)
    return float(M[D <= q].sum() / M.sum())


def _mpsc_summary(cfg, report: MetricsReport, logs):
    unf, mp = report.arm_rows("unfiltered"), report.arm_rows("mpsc")
    return {"unfiltered_seeds_violating": sum(r.violations > 0 for r in unf),
            "mpsc_seeds_violating": sum(r.violations > 0 for r in mp),
            "modified_near_boundary_fraction": near_boundary_fraction(
                logs["mpsc"], cfg.environment["state_bound"]),
            "mpsc_fallbacks": sum(r.fallbacks for r in mp),
            "seeds": len(mp)}


# ----------------------------------------------------------------------------
# Safe exploration on the cart-pole
# ----------------------------------------------------------------------------

class CartPoleTask(learn.Task):
    """Cart-pole swing-free stabilization with a cart position limit.

    Actions in [-1, 1] are scaled to force. The stage cost is a capped
    quadratic; a violation adds ``violation_cost`` and ends the episode.
    """

    n_x, n_u = 4, 1

    def __init__(self, env: dict, horizon: int):
        self.model = dyn.make_model(dyn.CARTPOLE)
        self.dt = env["dt"]
        self.horizon = horizon
        self.p_lim = env["position_limit"]
        self.scale = env["action_scale"]
        self.q = np.asarray(env["state_weights"])
        self.r = env["input_weight"]
        self.cap = env["stage_cost_cap"]
        self.fail = env["violation_cost"]
        self.reset_bound = np.asarray(env["reset_bound"])
        self.violations = np.zeros(2, dtype=int)
        self.first_violation = -1
        self.steps = 0

    def reset(self, rng):
        return rng.uniform(-self.reset_bound, self.reset_bound)

    def constraint(self, x) -> np.ndarray:
        return np.array([x[0] - self.p_lim, -x[0] - self.p_lim])

    def force(self, a) -> np.ndarray:
        return np.clip(self.scale * np.asarray(a, dtype=float).reshape(-1), self.model.u_min, self.model.u_max)

    def step(self, x, a, rng):
        u = self.force(a)
        x_next = dyn.step(self.model, x, u, self.dt)
        l = min(float(self.q @ x_next ** 2 + self.r * u @ u), self.cap)
        c = self.constraint(x_next)
        bad = c > 0
        if bad.any():
            l += self.fail
            self.violations += bad
            if self.first_violation < 0:
                self.first_violation = self.steps
        self.steps += 1
        return x_next, l, c, bool(bad.any())


def layer_arm(eps: float) -> str:
    return f"safety-layer-eps{eps:g}"


def _explore_arms(cfg: ExperimentConfig) -> List[tuple]:
    arms = []
    for name in cfg.filter["arms"]:
        if name == "safety-layer":
            eps = list(cfg.filter["layer_eps"])
            if cfg.filter["layer_primary_eps"] not in eps:
                eps.append(cfg.filter["layer_primary_eps"])
            arms += [(layer_arm(e), e) for e in eps]
        else:
            arms.append((name, None))
    return arms


def _layer_filter(cfg, task: CartPoleTask, eps: float, rng):
    """Safety-layer projection on a look-ahead position signal p + tau v (per side)."""
    flt = cfg.filter
    tau = flt["layer_lookahead"]

    def signal(x):
        s = x[0] + tau * x[1]
        return np.array([s - task.p_lim, -s - task.p_lim])

    bound = np.asarray(flt["layer_sample_bound"])
    X, U, C, Cn = [], [], [], []
    for _ in range(flt["layer_samples"]):
        x, a = rng.uniform(-bound, bound), rng.uniform(-1.0, 1.0, 1)
        xn = dyn.step(task.model, x, task.force(a), task.dt)
        X.append(x), U.append(a), C.append(signal(x)), Cn.append(signal(xn))
    model = sf.safety_layer_fit(X, U, C, Cn)
    box = Box([-1.0], [1.0])
    counts = {"steps": 0, "infeasible": 0}

    def filt(x, a):
        r = sf.safety_layer_project(model, x, np.clip(a, -1.0, 1.0), eps, c_now=signal(x), u_box=box)
        counts["steps"] += 1
        counts["infeasible"] += r.status == INFEASIBLE
        return r.u_safe, r.was_modified

    return filt, counts


def _evaluate_policy(cfg, task: CartPoleTask, params, filt, seed) -> List[EpisodeLog]:
    rng = np.random.default_rng([seed, 2])
    logs = []
    for _ in range(cfg.learner["eval_episodes"]):
        x = task.reset(rng)
        log = EpisodeLog(4, 1, 0)
        log.start(x)
        for k in range(task.horizon):
            a, _ = learn.policy_act(params, x, deterministic=True)
            u, status = a, UNFILTERED
            if filt is not None:
                u, _ = filt(x, a)
                status = CERTIFIED
            if np.any(np.abs(task.scale * np.asarray(u)) > task.model.u_max):
                log.event("saturation", k)
            x_next, l, c, bad = task.step(x, u, rng)
            log.record(u, x_next, l, c, u_learn=a, filter_status=status)
            x = x_next
            if bad:
                break
        logs.append(log)
    return logs


def train_explore_arm(cfg: ExperimentConfig, seed: int, arm: str, eps: Optional[float]):
    lrn, flt = cfg.learner, cfg.filter
    task = CartPoleTask(cfg.environment, cfg.episode_length)
    rng = np.random.default_rng(seed)
    state = learn.PpoState.create(4, 1, hidden=tuple(lrn["hidden"]), seed=seed, log_std=lrn["log_std"])
    pcfg = learn.PpoConfig(clip=lrn["clip"], epochs=lrn["epochs"], minibatch=lrn["minibatch"], lr=lrn["lr"],
                           value_lr=lrn["value_lr"], gamma=lrn["gamma"], lam=lrn["lam"])
    cost_fn = filt = None
    counts = {"steps": 0, "infeasible": 0}
    if arm == "shaping":
        w, margin = flt["shaping_weight"], flt["shaping_margin"]
        cost_fn = lambda l, c: learn.shaped_cost(l, c, w, margin)  # noqa: E731
    elif eps is not None:
        filt, counts = _layer_filter(cfg, task, eps, np.random.default_rng([seed, 1]))
    curve = []
    modified = episodes = 0
    t0 = time.perf_counter()
    for it in range(lrn["iterations"]):
        batch, stats = learn.collect_rollouts(task, state.policy, lrn["steps_per_iteration"], rng,
                                              cost_fn, filt, gamma=lrn["gamma"], lam=lrn["lam"])
        state, _ = learn.ppo_update(state, batch, pcfg, seed=seed * 100003 + it)
        modified += stats.filter_modified
        episodes += stats.episodes
        curve.append((it, task.steps, episodes, int(task.violations.sum()),
                      float(np.mean(stats.episode_costs)), modified))
    wall = (time.perf_counter() - t0) / max(task.steps, 1)
    train_viol, first, steps = task.violations.copy(), task.first_violation, task.steps
    logs = _evaluate_policy(cfg, task, state.policy, filt, seed)
    eval_cost = float(np.mean([np.sum(g.cost) for g in logs]))
    eval_viol = sum(int((g.c_array > 0).any(axis=1).sum()) for g in logs)
    final_cost = float(np.mean([c[4] for c in curve[-lrn["final_window"]:]]))
    row = SeedRow(arm, seed, episodes=episodes, steps=steps, cost=final_cost,
                  violations=int(train_viol.sum()), first_violation_step=int(first),
                  filter_steps=counts["steps"], filter_modified=int(modified), infeasible=counts["infeasible"],
                  saturations=0, wall_per_step=wall,
                  violations_by_constraint={"p<=limit": int(train_viol[0]), "p>=-limit": int(train_viol[1])},
                  extras={"eval_cost": eval_cost, "eval_violations": float(eval_viol)})
    return row, logs[: lrn["eval_logged"]], curve


CURVE_COLUMNS = ("iteration", "steps", "episodes", "cumulative_violations", "mean_episode_cost",
                 "cumulative_filter_modified")


def _explore_seed(cfg: ExperimentConfig, seed: int, prep) -> SeedOutput:
    out = SeedOutput([])
    for arm, eps in _explore_arms(cfg):
        row, logs, curve = train_explore_arm(cfg, seed, arm, eps)
        out.rows.append(row)
        out.logs[arm] = logs
        out.series[f"{arm}/seed_{seed}/curve.csv"] = (CURVE_COLUMNS, curve)
    return out


def _explore_summary(cfg, report: MetricsReport):
    summary = {}
    for arm in report.aggregates:
        summary[f"{arm}_median_violations"] = report.median(arm, "violations")
        summary[f"{arm}_median_cost"] = report.median(arm, "cost")
    if "safety-layer" in cfg.filter["arms"]:
        summary["safety_layer_arm"] = layer_arm(cfg.filter["layer_primary_eps"])
    return summary


# ----------------------------------------------------------------------------
# Custom closed loop
# ----------------------------------------------------------------------------

def _custom_setup(cfg: ExperimentConfig):
    env, con = cfg.environment, cfg.controller
    kind = dyn.DOUBLE_INTEGRATOR if env["system"] == "double-integrator" else dyn.CARTPOLE
    m = dyn.make_model(kind)
    lm = dyn.linearize(m, dt=env["dt"])
    xb, ub = np.asarray(env["state_bound"], dtype=float), env["input_bound"]
    if xb.size != m.n_x:
        from ..errors import ConfigInvalid
        raise ConfigInvalid(f"needs {m.n_x} entries", "environment.state_bound")
    cs = ConstraintSet([], Box(-xb, xb), Box([-ub] * m.n_u, [ub] * m.n_u))
    dist = dyn.DisturbanceSpec("uniform-box", env["disturbance_bound"])
    return m, lm, cs, dist


def disturbance_effect(model, dt: float, bound) -> np.ndarray:
    """Half-widths of the one-step state change caused by derivative offsets within ``bound``.

    Evaluated at the equilibrium over the corners of the bound; exact for linear models.
    """
    x0, u0 = dyn.equilibrium(model)
    base = dyn.step(model, x0, u0, dt)
    b = np.asarray(bound, dtype=float)
    eff = np.zeros(model.n_x)
    for signs in itertools.product((-1.0, 1.0), repeat=b.size):
        eff = np.maximum(eff, np.abs(dyn.step(model, x0, u0, dt, np.array(signs) * b) - base))
    return eff


def _custom_prepare(cfg: ExperimentConfig):
    env, con, flt = cfg.environment, cfg.controller, cfg.filter
    m, lm, cs, dist = _custom_setup(cfg)
    Q, R = _diag(con["Q"]), _diag(con["R"])
    W = disturbance_effect(m, env["dt"], env["disturbance_bound"])
    prep = {"W": W, "K": ctl.lqr_policy(lm.A, lm.B, Q, R)}
    if con["kind"] == "mpc":
        prep["ctrl"] = ctl.LinearMpc(lm, ctl.MpcConfig(con["horizon"], Q, R, cs))
    elif con["kind"] == "tube-mpc":
        mcfg = ctl.MpcConfig(con["horizon"], Q, R, cs, tightening="tube")
        prep["ctrl"] = ctl.TubeMpc(ctl.make_tube_mpc(lm, mcfg, W), mcfg)
    if flt["kind"] == "mpsc":
        mcfg = ctl.MpcConfig(con["horizon"], Q, R, cs, tightening="tube")
        prep["mpsc"] = (sf.make_mpsc(lm, mcfg, W), mcfg)
    elif flt["kind"] == "cbf":
        prep["cbf"] = sf.position_barrier(m, flt["position_limit"], flt["tau"], flt["alpha"])
    return prep


def _custom_episode(cfg, prep, m, cs, dist, rng):
    env, con, flt, lrn = cfg.environment, cfg.controller, cfg.filter, cfg.learner
    Q, R = _diag(con["Q"]), _diag(con["R"])
    cbf = prep.get("cbf")
    x = rng.uniform(env["x0_low"], env["x0_high"])
    while cbf is not None and cbf.barrier(x) < 0:
        x = rng.uniform(env["x0_low"], env["x0_high"])
    if "mpsc" in prep:
        prep["mpsc"][0].reset()
    log = EpisodeLog(m.n_x, m.n_u, dist.dim)
    log.start(x)
    timer = _Timer()
    for k in range(cfg.episode_length):
        with timer:
            if lrn["kind"] == "constant":
                u_l = np.asarray(lrn["value"], dtype=float) + lrn["noise"] * rng.uniform(-1, 1, m.n_u)
            elif "ctrl" in prep:
                res = prep["ctrl"].step(x)
                if res.fallback:
                    log.event("solver-failure", k, status=res.status)
                u_l = res.u
            else:
                u_l = prep["K"] @ x
            u, status = u_l, UNFILTERED
            if cbf is not None:
                r = sf.cbf_filter(cbf, x, u_l, cs.u_box)
                u, status = r.u_safe, r.status
            elif "mpsc" in prep:
                try:
                    r = sf.mpsc_filter(prep["mpsc"][0], prep["mpsc"][1], x, u_l)
                    u, status = r.u_safe, r.status
                except Infeasible:
                    status = INFEASIBLE
                    log.event("solver-failure", k, status=INFEASIBLE)
        u = _apply(m, log, k, np.clip(u, cs.u_box.lo, cs.u_box.hi))
        w = dyn.sample_disturbance(dist, rng)
        x_next = dyn.step(m, x, u, env["dt"], w)
        log.record(u, x_next, _stage_cost(Q, R, x, np.zeros(m.n_x), u, np.zeros(m.n_u)),
                   evaluate(cs, x_next, u), u_learn=u_l, w=w, filter_status=status)
        x = x_next
    extras = {}
    if cbf is not None:
        extras["min_barrier"] = float(min(cbf.barrier(s) for s in log.states))
    return log, timer.per_step, extras


def _custom_seed(cfg: ExperimentConfig, seed: int, prep) -> SeedOutput:
    m, _, cs, dist = _custom_setup(cfg)
    rng = np.random.default_rng(seed)
    logs, walls, mins = [], [], []
    for _ in range(cfg.environment["episodes"]):
        log, wall, extras = _custom_episode(cfg, prep, m, cs, dist, rng)
        logs.append(log)
        walls.append(wall)
        if extras:
            mins.append(extras["min_barrier"])
    extras = {"min_barrier": min(mins)} if mins else {}
    row = _row("custom", seed, logs, cs.names(), _state_rows(cs), float(np.mean(walls)), **extras)
    return SeedOutput([row], {"custom": logs})


def _custom_summary(cfg, report: MetricsReport):
    rows = report.rows
    return {"seeds_violating": sum(r.violations > 0 for r in rows),
            "total_violations": sum(r.violations for r in rows), "seeds": len(rows)}


# ----------------------------------------------------------------------------
# Orchestration
# ----------------------------------------------------------------------------

_PREPARE: Dict[str, Callable] = {
    "gpmpc-quad": _gpmpc_prepare, "mpsc-cartpole": _mpsc_prepare,
    "safe-explore-cartpole": lambda cfg: None, "custom": _custom_prepare,
}
_SEED: Dict[str, Callable] = {
    "gpmpc-quad": _gpmpc_seed, "mpsc-cartpole": _mpsc_seed,
    "safe-explore-cartpole": _explore_seed, "custom": _custom_seed,
}


def _worker(args):
    cfg, seed, prep = args
    return _SEED[cfg.experiment](cfg, seed, prep)


def run(config: ExperimentConfig, out_dir=None, parallel: int = 1, write: bool = True) -> MetricsReport:
    """Execute every seed, write per-episode CSVs, plot data and ``report.json``.

    ``parallel <= 1`` runs the seeds sequentially (the reproducible mode).
    Violations are recorded, never raised.
    """
    t0 = time.perf_counter()
    out = Path(out_dir if out_dir is not None else config.output_dir)
    prep = _PREPARE[config.experiment](config)
    jobs = [(config, s, prep) for s in config.seeds]
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            outputs = list(pool.map(_worker, jobs))
    else:
        outputs = [_worker(j) for j in jobs]
    arm_order = list(dict.fromkeys(r.arm for o in outputs for r in o.rows))
    rows = sorted((r for o in outputs for r in o.rows), key=lambda r: (arm_order.index(r.arm), r.seed))
    logs: Dict[str, List[EpisodeLog]] = {}
    for seed, o in zip(config.seeds, outputs):
        for arm, arm_logs in o.logs.items():
            logs.setdefault(arm, []).extend(arm_logs)
            if write:
                for e, log in enumerate(arm_logs):
                    write_episode(log, episode_path(out, arm, seed, e))
        if write:
            for name, (cols, data) in o.series.items():
                write_series(out / name, cols, data)
    report = MetricsReport(config.experiment, rows)
    if config.experiment == "mpsc-cartpole":
        report.summary = _mpsc_summary(config, report, logs)
    elif config.experiment == "gpmpc-quad":
        report.summary = _gpmpc_summary(config, report)
    elif config.experiment == "safe-explore-cartpole":
        report.summary = _explore_summary(config, report)
    else:
        report.summary = _custom_summary(config, report)
    report.metadata = {"config": config.to_dict(), **config.value_labels(), "package_version": __version__,
                       "parallel": int(parallel), "wall_clock_seconds": time.perf_counter() - t0,
                       "log_layout": "<arm>/seed_<s>/episode_<e>.csv"}
    if write:
        emit(report, "json", out)
    return report
