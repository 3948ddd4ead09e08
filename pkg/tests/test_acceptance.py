"""Acceptance criteria, one test each; every test prints a PASS/FAIL line with its measurements."""
import time

import numpy as np
import pytest

from oracles import active_set_qp, random_convex_qp
from safectl import bench, gp, learn
from safectl.bench.config import preset, validate
from safectl.numkit import QpProblem, SOLVED, finite_diff_jacobian, solve_qp


@pytest.fixture
def report_line(capsys):
    def emit(criterion, passed, detail):
        with capsys.disabled():
            print(f"\ncriterion {criterion}: {'PASS' if passed else 'FAIL'} {detail}")
    return emit


def rel_err(a, b):
    return float(np.abs(np.asarray(a) - b).max() / max(1.0, np.abs(b).max()))


# 1 ---------------------------------------------------------------------------

def test_criterion_1_gpmpc_quadrotor(report_line, tmp_path):
    t = time.perf_counter()
    rep = bench.run(preset("gpmpc-quad"), out_dir=tmp_path)
    wall = time.perf_counter() - t
    s = rep.summary
    ok = (s["seeds"] == 10 and s["linear_seeds_violating"] >= 8 and s["gpmpc_seeds_violating"] == 0
          and s["gpmpc_max_terminal_error_ratio"] < 0.05 and wall < 600)
    report_line(1, ok, f"linear violating {s['linear_seeds_violating']}/10, gp-mpc violating "
                       f"{s['gpmpc_seeds_violating']}/10, max terminal error ratio "
                       f"{s['gpmpc_max_terminal_error_ratio']:.4f}, {wall:.0f}s")
    assert ok


# 2 ---------------------------------------------------------------------------

def test_criterion_2_mpsc_cartpole(report_line, tmp_path):
    t = time.perf_counter()
    rep = bench.run(preset("mpsc-cartpole"), out_dir=tmp_path)
    wall = time.perf_counter() - t
    s = rep.summary
    ok = (s["seeds"] == 10 and s["unfiltered_seeds_violating"] >= 8 and s["mpsc_seeds_violating"] == 0
          and s["modified_near_boundary_fraction"] >= 0.6 and wall < 300)
    report_line(2, ok, f"unfiltered violating {s['unfiltered_seeds_violating']}/10, mpsc violating "
                       f"{s['mpsc_seeds_violating']}/10, modified near boundary "
                       f"{s['modified_near_boundary_fraction']:.2f}, {wall:.0f}s")
    assert ok


# 3 ---------------------------------------------------------------------------

def test_criterion_3_safe_exploration(report_line, tmp_path):
    t = time.perf_counter()
    rep = bench.run(preset("safe-explore-cartpole", seeds=[0, 1, 2, 3, 4]), out_dir=tmp_path)
    wall = time.perf_counter() - t
    med_v = {arm: rep.median(arm, "violations") for arm in rep.aggregates}
    med_c = {arm: rep.median(arm, "cost") for arm in rep.aggregates}
    layer = rep.summary["safety_layer_arm"]
    order = med_v[layer] < med_v["shaping"] < med_v["ppo"]
    close = all(abs(med_c[a] - med_c["ppo"]) <= 0.2 * med_c["ppo"] for a in (layer, "shaping"))
    ok = order and close and len(rep.arm_rows("ppo")) >= 5 and wall < 1800
    detail = ", ".join(f"{a}: viol {med_v[a]:.0f} cost {med_c[a]:.2f}" for a in rep.aggregates)
    report_line(3, ok, f"judged arm {layer}; {detail}; {wall:.0f}s")
    assert ok


# 4 ---------------------------------------------------------------------------

def test_criterion_4_tube_guarantee(report_line):
    cfg = validate({"experiment": "custom", "seeds": list(range(100)), "episode_length": 40,
                    "environment": {"disturbance_bound": [0.05, 0.2]},
                    "controller": {"kind": "tube-mpc", "horizon": 20}})
    rep = bench.run(cfg, write=False)
    total = sum(r.violations for r in rep.rows)
    ok = total == 0 and len(rep.rows) == 100
    report_line(4, ok, f"{total} true-state violations over 100 episodes, "
                       f"{sum(r.solver_failures for r in rep.rows)} solver failures")
    assert ok


# 5 ---------------------------------------------------------------------------

def test_criterion_5_qp_oracle(report_line):
    rng = np.random.default_rng(2024)
    worst_f = worst_z = 0.0
    solved = 0
    for _ in range(200):
        H, g, A, lo, hi = random_convex_qp(rng)
        z_ref, f_ref = active_set_qp(H, g, A, lo, hi)
        sol = solve_qp(QpProblem(H, g, A, lo, hi))
        solved += sol.status == SOLVED
        worst_f = max(worst_f, abs(0.5 * sol.z @ H @ sol.z + g @ sol.z - f_ref))
        worst_z = max(worst_z, float(np.linalg.norm(sol.z - z_ref)))
    ok = solved == 200 and worst_f <= 1e-6 and worst_z <= 1e-5
    report_line(5, ok, f"{solved}/200 solved, max objective gap {worst_f:.1e}, max solution gap {worst_z:.1e}")
    assert ok


# 6 ---------------------------------------------------------------------------

def _naive_lml(X, y, hyper):
    K = gp.se_ard(X, X, hyper) + hyper.noise_var * np.eye(len(y))
    _, logdet = np.linalg.slogdet(K)
    return -0.5 * y @ np.linalg.solve(K, y) - 0.5 * logdet - 0.5 * len(y) * np.log(2 * np.pi)


def _loss_fd(params, data, spec):
    f = lambda v: np.array([learn.mlp_gradients(params.unflat(v), data, spec)[0]])  # noqa: E731
    return params.unflat(finite_diff_jacobian(f, params.flat(), 1e-6)[0]).arrays()


def test_criterion_6_gradients(report_line):
    rng = np.random.default_rng(7)
    errs = {"gp-lml": 0.0, "policy": 0.0, "value": 0.0}
    for i in range(50):
        X = rng.uniform(-2, 2, (15, 2))
        y = np.sin(X @ rng.normal(size=2)) + 0.1 * rng.normal(size=15)
        theta = np.log([0.8, 0.7, 1.3, 0.05]) + 0.3 * rng.normal(size=4)
        _, g = gp.log_marginal_likelihood(X, y, gp.GpHyper.from_log(theta))
        fd = finite_diff_jacobian(lambda t: np.array([_naive_lml(X, y, gp.GpHyper.from_log(t))]), theta, 1e-5)[0]
        errs["gp-lml"] = max(errs["gp-lml"], rel_err(g, fd))

        spec = learn.LossSpec("policy", clip=0.2 if i % 2 == 0 else np.inf, ent_coef=0.01)
        params = learn.init_mlp([3, 8, 8, 2], rng, log_std=-0.3, out_scale=1.0)
        x = rng.normal(size=(16, 3))
        mean = learn.mlp_forward(params, x)[0]
        u = mean + 0.5 * rng.normal(size=mean.shape)
        data = {"x": x, "u": u, "adv": rng.normal(size=16),
                "logp_old": learn.gaussian_log_prob(mean, params.log_std, u) + 0.3 * rng.normal(size=16)}
        _, grads = learn.mlp_gradients(params, data, spec)
        errs["policy"] = max(errs["policy"], max(rel_err(a, b) for a, b in
                                                 zip(grads.arrays(), _loss_fd(params, data, spec))))

        vspec = learn.LossSpec("value")
        vparams = learn.init_mlp([4, 8, 8, 1], rng, out_scale=1.0)
        vdata = {"x": rng.normal(size=(12, 4)), "returns": rng.normal(size=12)}
        _, vgrads = learn.mlp_gradients(vparams, vdata, vspec)
        errs["value"] = max(errs["value"], max(rel_err(a, b) for a, b in
                                               zip(vgrads.arrays(), _loss_fd(vparams, vdata, vspec))))
    ok = all(e < 1e-4 for e in errs.values())
    report_line(6, ok, ", ".join(f"{k} max rel err {v:.1e}" for k, v in errs.items()) + " (50 instances each)")
    assert ok


# 7 ---------------------------------------------------------------------------

def test_criterion_7_gp_properties(report_line):
    rng = np.random.default_rng(11)
    interp = prior_m = prior_v = 0.0
    for _ in range(20):
        X, y = rng.uniform(-3, 3, (10, 2)), rng.normal(size=10)
        mean, var = gp.fit(X, y, gp.GpHyper(1.0, [0.7, 0.9], 0.0)).predict(X)
        interp = max(interp, np.abs(mean - y).max(), np.abs(var).max())
        X2 = rng.uniform(-2, 2, (20, 2))
        y2 = np.sin(X2 @ rng.normal(size=2)) + 0.1 * rng.normal(size=20)
        m2, v2 = gp.fit(X2, y2, gp.GpHyper(2.0, [0.5, 0.8], 0.01)).predict([[100.0, -100.0]])
        prior_m, prior_v = max(prior_m, abs(m2[0])), max(prior_v, abs(v2[0] - 2.0))
    ok = interp < 1e-8 and prior_m <= 1e-6 * np.sqrt(2.0) and prior_v <= 1e-6
    report_line(7, ok, f"interpolation error {interp:.1e}, far-field |mean| {prior_m:.1e}, "
                       f"|var - signal var| {prior_v:.1e} (20 datasets)")
    assert ok


# 8 ---------------------------------------------------------------------------

def test_criterion_8_cbf_invariance(report_line):
    cfg = validate({"experiment": "custom", "seeds": list(range(100)), "episode_length": 100,
                    "environment": {"dt": 0.05, "x0_low": [-1.0, -0.5], "x0_high": [1.0, 0.5]},
                    "filter": {"kind": "cbf", "tau": 0.5, "alpha": 1.0, "position_limit": 1.0},
                    "learner": {"kind": "constant", "value": [1.0], "noise": 0.2}})
    rep = bench.run(cfg, write=False)
    worst = min(r.extras["min_barrier"] for r in rep.rows)
    ok = worst >= -1e-3 and len(rep.rows) == 100
    report_line(8, ok, f"min barrier over 100 episodes {worst:.2e}")
    assert ok


# 9 ---------------------------------------------------------------------------

def _csv_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*.csv"))}


def test_criterion_9_determinism(report_line, tmp_path):
    configs = {
        "custom": validate({"experiment": "custom", "seeds": [0, 1], "episode_length": 30,
                            "environment": {"disturbance_bound": [0.05, 0.2]},
                            "controller": {"kind": "tube-mpc"}}),
        "mpsc-cartpole": preset("mpsc-cartpole", seeds=[0, 1], episode_length=60),
        "gpmpc-quad": preset("gpmpc-quad", seeds=[0], episode_length=30,
                             learner={"hyperopt_iterations": 5, "data_steps": 600, "gp_samples": 200}),
        "safe-explore-cartpole": preset("safe-explore-cartpole", seeds=[0],
                                        learner={"iterations": 3, "steps_per_iteration": 300,
                                                 "eval_episodes": 3}),
    }
    bad = []
    n_files = 0
    for name, cfg in configs.items():
        a, b = tmp_path / name / "a", tmp_path / name / "b"
        bench.run(cfg, out_dir=a)
        bench.run(cfg, out_dir=b)
        fa, fb = _csv_bytes(a), _csv_bytes(b)
        n_files += len(fa)
        if not fa or fa != fb:
            bad.append(name)
    ok = not bad
    report_line(9, ok, f"{n_files} CSV files byte-identical across reruns" if ok else f"differences in {bad}")
    assert ok
