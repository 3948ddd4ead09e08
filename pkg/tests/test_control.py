import inspect

import numpy as np
import pytest

from oracles import riccati_scalar_fixed_point
from safectl import control as ctl
from safectl import dynamics as dyn
from safectl import gp
from safectl.constraints import Box, ConstraintSet, LinearConstraint
from safectl.numkit import dare_solve, spectral_radius

DT = 0.1


@pytest.fixture(scope="module")
def di():
    return dyn.linearize(dyn.make_model(dyn.DOUBLE_INTEGRATOR), dt=DT)


def box_set(x_half=(1.0, 1.0), u_half=1.0):
    return ConstraintSet([], Box.symmetric(x_half), Box.symmetric([u_half]))


def free_set():
    return ConstraintSet([], Box.unbounded(2), Box.unbounded(1))


def test_lqr_scalar_gain():
    K = ctl.lqr_policy([[1.0]], [[1.0]], [[1.0]], [[1.0]])
    assert abs(K[0, 0]) == pytest.approx(0.618, abs=1e-3)
    _, k_ref = riccati_scalar_fixed_point(1.0, 1.0, 1.0, 1.0)
    assert -K[0, 0] == pytest.approx(k_ref, rel=1e-9)


def test_lqr_aggressive_weights_shrink_eigenvalues(di):
    mild = ctl.lqr_policy(di.A, di.B, np.eye(2), np.eye(1))
    hard = ctl.lqr_policy(di.A, di.B, 1e6 * np.eye(2), np.eye(1))
    assert spectral_radius(di.A + di.B @ hard) < spectral_radius(di.A + di.B @ mild) < 1


def test_lqr_input_zero_at_reference():
    K = np.array([[-1.0, -2.0]])
    assert np.allclose(ctl.lqr_input(K, [0.3, -0.2], [0.3, -0.2]), 0.0)


def test_lyapunov_decrease_along_lqr(di):
    P, _ = dare_solve(di.A, di.B, np.eye(2), np.eye(1))
    K = ctl.lqr_policy(di.A, di.B, np.eye(2), np.eye(1))
    x = np.array([1.0, -0.7])
    for _ in range(100):
        nxt = (di.A + di.B @ K) @ x
        assert nxt @ P @ nxt < x @ P @ x
        x = nxt


def test_mpc_config_validation():
    with pytest.raises(ValueError):
        ctl.MpcConfig(0, np.eye(2), np.eye(1), free_set())
    with pytest.raises(ValueError):
        ctl.MpcConfig(5, np.eye(2), np.zeros((1, 1)), free_set())
    with pytest.raises(ValueError):
        ctl.MpcConfig(5, np.eye(2), np.eye(1), free_set(), tightening="robust")


def test_long_horizon_mpc_matches_lqr(di):
    mpc = ctl.LinearMpc(di, ctl.MpcConfig(60, np.eye(2), np.eye(1), free_set()))
    for x in ([1.0, -0.5], [-2.0, 0.3], [0.1, 1.0]):
        res = mpc.step(x)
        assert res.status == ctl.SOLVED
        assert np.abs(res.u - ctl.lqr_input(mpc.K, np.asarray(x))).max() < 1e-3


def test_mpc_at_reference_returns_zero(di):
    res = ctl.linear_mpc_step(ctl.MpcConfig(15, np.eye(2), np.eye(1), box_set()), di, np.zeros(2))
    assert res.status == ctl.SOLVED
    assert np.abs(res.u).max() < 1e-6


def test_mpc_constructed_infeasibility_falls_back(di):
    cfg = ctl.MpcConfig(10, np.eye(2), np.eye(1), box_set())
    mpc = ctl.LinearMpc(di, cfg)
    # velocity 3 with |u| <= 1 cannot return inside |v| <= 1 within one step
    res = mpc.step([0.0, 3.0])
    assert res.status == ctl.INFEASIBLE and res.fallback
    assert np.allclose(res.u, mpc.fallback(np.array([0.0, 3.0])))
    assert abs(res.u[0]) <= 1.0


def test_mpc_respects_constraints_and_is_deterministic(di):
    mpc = ctl.LinearMpc(di, ctl.MpcConfig(20, np.eye(2), np.eye(1), box_set()))
    a, b = mpc.step([0.5, 0.5]), mpc.step([0.5, 0.5])
    assert a.status == ctl.SOLVED and np.array_equal(a.u, b.u)
    assert np.all(np.abs(a.u_pred) <= 1 + 1e-6)
    assert np.all(np.abs(a.x_pred[1:]) <= 1 + 1e-6)


def test_tube_zero_disturbance_reduces_to_linear_mpc(di):
    cfg_lin = ctl.MpcConfig(20, np.eye(2), np.eye(1), box_set())
    cfg_tube = ctl.MpcConfig(20, np.eye(2), np.eye(1), box_set(), tightening="tube")
    st = ctl.make_tube_mpc(di, cfg_tube, Box.symmetric([0.0, 0.0]))
    assert np.allclose(st.tube.omega, 0.0)
    for x in ([0.5, 0.0], [-0.3, 0.4]):
        u_tube = ctl.tube_mpc_step(st, cfg_tube, np.array(x)).u
        u_lin = ctl.linear_mpc_step(cfg_lin, di, np.array(x)).u
        assert np.abs(u_tube - u_lin).max() < 1e-5


def test_tube_deep_inside_is_solved(di):
    cfg = ctl.MpcConfig(20, np.eye(2), np.eye(1), box_set(), tightening="tube")
    st = ctl.make_tube_mpc(di, cfg, Box.symmetric([0.005, 0.02]))
    res = ctl.tube_mpc_step(st, cfg, np.array([0.1, 0.0]))
    assert res.status == ctl.SOLVED


def test_tube_monte_carlo_no_violations(di):
    true = dyn.make_model(dyn.DOUBLE_INTEGRATOR)
    W = np.array([0.005, 0.02])
    cfg = ctl.MpcConfig(20, np.eye(2), np.eye(1), box_set(), tightening="tube")
    st = ctl.make_tube_mpc(di, cfg, Box.symmetric(W))
    tube = ctl.TubeMpc(st, cfg)
    spec = dyn.DisturbanceSpec("uniform-box", W / DT)
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = np.array([0.6, 0.3])
        for _ in range(40):
            res = tube.step(x)
            assert not res.fallback
            x = dyn.step(true, x, res.u, DT, dyn.sample_disturbance(spec, rng))
            assert np.all(np.abs(x) <= 1.0)


def test_confidence_multiplier():
    assert ctl.confidence_multiplier(0.95) == pytest.approx(1.96, abs=1e-3)


def test_gp_margins_linear_in_std_and_monotone():
    cs = ConstraintSet([LinearConstraint([1.0, 1.0], [0.0], 1.0)], Box.unbounded(2), Box.unbounded(1))
    K = np.zeros((1, 2))
    S = np.array([[[0.0, 0.0], [0.0, 0.0]], [[0.02, 0.01], [0.01, 0.03]]])
    m1 = ctl.gp_margins(cs, S, K, 1.96)
    m4 = ctl.gp_margins(cs, 4 * S, K, 1.96)
    assert m1[0, 0] == 0.0
    assert m4[1, 0] == pytest.approx(2 * m1[1, 0])
    assert m1[1, 0] == pytest.approx(1.96 * np.sqrt(0.02 + 0.03 + 0.02))
    bigger = S + np.array([0.0, 1.0])[:, None, None] * np.eye(2) * 0.01
    assert np.all(ctl.gp_margins(cs, bigger, K, 1.96) >= m1)


def _zero_gp_ensemble(rng, n_in, n_out):
    X = rng.uniform(-1, 1, size=(30, n_in))
    hyper = gp.GpHyper(1e-12, np.ones(n_in), 1e-14)
    return gp.GpEnsemble.fit(X, np.zeros((30, n_out)), [hyper] * n_out)


def test_gpmpc_with_zero_residuals_matches_linear_mpc(di):
    rng = np.random.default_rng(0)
    ens = _zero_gp_ensemble(rng, 3, 2)
    K = ctl.lqr_policy(di.A, di.B, np.eye(2), np.eye(1))
    cfg_gp = ctl.MpcConfig(15, np.eye(2), np.eye(1), box_set(), tightening="gp-chance")
    cfg_lin = ctl.MpcConfig(15, np.eye(2), np.eye(1), box_set())
    state = ctl.GpMpcState(di, ens, [0, 1], K, ctl.confidence_multiplier(0.95))
    controller = ctl.GpMpc(state, cfg_gp)
    for x in ([0.8, 0.2], [0.5, -0.3]):
        res = controller.step(np.array(x))
        lin = ctl.linear_mpc_step(cfg_lin, di, np.array(x))
        assert res.status == ctl.SOLVED
        assert np.abs(res.u - lin.u).max() < 1e-4


def test_gpmpc_state_validation(di):
    ens = _zero_gp_ensemble(np.random.default_rng(1), 3, 2)
    with pytest.raises(ValueError):
        ctl.GpMpcState(di, ens, [0], np.zeros((1, 2)), 1.96)
    with pytest.raises(ValueError):
        ctl.GpMpcState(di, ens, [0, 1], np.zeros((1, 2)), 0.0)


def test_residuals_vanish_for_exact_linear_prior(di):
    true = dyn.make_model(dyn.DOUBLE_INTEGRATOR)
    K = ctl.lqr_policy(di.A, di.B, np.eye(2), np.eye(1))
    policy = ctl.excitation_policy(K, np.zeros(2), np.zeros(1), [0.3])
    data = ctl.collect_residuals(true, di, policy, n=200, seed=3,
                                 x0_sampler=lambda r: r.uniform(-1, 1, 2), episode_len=50)
    assert data.complete and data.X.shape == (200, 3)
    assert np.abs(data.Y).max() < 1e-12
    again = ctl.collect_residuals(true, di, policy, n=200, seed=3,
                                  x0_sampler=lambda r: r.uniform(-1, 1, 2), episode_len=50)
    assert np.array_equal(data.X, again.X)


def test_quad_heavy_prior_vertical_residual():
    dt = 0.05
    true = dyn.make_model(dyn.QUAD2D)
    prior = dyn.linearize(dyn.scaled_prior(true, 1.5), dt=dt)
    hover_u = dyn.equilibrium(true)[1]
    data = ctl.collect_residuals(true, prior, lambda x, rng: hover_u, n=1, seed=0)
    g = true["gravity"]
    # z-velocity is state index 3
    assert data.Y[0, 3] == pytest.approx(g * (1 - 1 / 1.5) * dt, rel=1e-6)
    assert data.Y[0, 3] > 0


def test_collect_residuals_default_budget():
    assert inspect.signature(ctl.collect_residuals).parameters["n"].default == 800
