import json

import numpy as np
import pytest

from oracles import gae_double_loop
from safectl import learn
from safectl.errors import NonFiniteLoss
from safectl.numkit import finite_diff_jacobian


def rel_err(a, b):
    return np.abs(a - b).max() / max(1.0, np.abs(b).max())


def random_policy_data(rng, n=16, n_x=3, n_u=2):
    params = learn.init_mlp([n_x, 8, 8, n_u], rng, log_std=-0.3, out_scale=1.0)
    x = rng.normal(size=(n, n_x))
    mean = learn.mlp_forward(params, x)[0]
    u = mean + 0.5 * rng.normal(size=(n, n_u))
    # old policy slightly different so some ratios leave the clip range
    logp_old = learn.gaussian_log_prob(mean, params.log_std, u) + 0.3 * rng.normal(size=n)
    return params, {"x": x, "u": u, "logp_old": logp_old, "adv": rng.normal(size=n)}


def fd_gradient(params, data, spec):
    f = lambda v: np.array([learn.mlp_gradients(params.unflat(v), data, spec)[0]])
    return finite_diff_jacobian(f, params.flat(), 1e-6)[0]


def blocks(params, vec):
    return params.unflat(vec).arrays()


# ----------------------------------------------------------------------------
# Policy sampling
# ----------------------------------------------------------------------------

def test_policy_act_deterministic_and_seeded():
    params = learn.init_mlp([3, 32, 32, 1], 0, log_std=-0.5, out_scale=1.0)
    x = np.array([0.1, -0.2, 0.3])
    assert np.array_equal(learn.policy_act(params, x, deterministic=True)[0],
                          learn.policy_act(params, x, deterministic=True)[0])
    a, lp_a = learn.policy_act(params, x, seed=7)
    b, lp_b = learn.policy_act(params, x, seed=7)
    assert np.array_equal(a, b) and lp_a == lp_b


def test_policy_log_prob_exact():
    params = learn.init_mlp([2, 4, 2], 1, log_std=-0.2, out_scale=1.0)
    x = np.array([0.5, -1.0])
    u, lp = learn.policy_act(params, x, seed=3)
    mean = learn.mlp_forward(params, x[None])[0][0]
    sd = np.exp(params.log_std)
    direct = np.sum(-0.5 * ((u - mean) / sd) ** 2 - np.log(sd * np.sqrt(2 * np.pi)))
    assert lp == pytest.approx(direct, rel=1e-12)


def test_policy_sample_mean_monte_carlo():
    params = learn.init_mlp([2, 32, 32, 1], 2, log_std=0.0, out_scale=1.0)
    x = np.array([0.3, 0.7])
    rng = np.random.default_rng(0)
    samples = np.array([learn.policy_act(params, x, rng)[0] for _ in range(10_000)])
    mean = learn.mlp_forward(params, x[None])[0][0]
    assert np.abs(samples.mean(axis=0) - mean).max() < 4 * 1.0 / 100


def test_policy_act_rejects_nonfinite_state():
    params = learn.init_mlp([2, 4, 1], 0, log_std=0.0)
    with pytest.raises(ValueError):
        learn.policy_act(params, [np.nan, 0.0], seed=0)


# ----------------------------------------------------------------------------
# Gradients
# ----------------------------------------------------------------------------

@pytest.mark.parametrize("clip", [0.2, np.inf])
def test_policy_gradient_matches_finite_differences(clip):
    rng = np.random.default_rng(10)
    spec = learn.LossSpec("policy", clip=clip, ent_coef=0.01)
    for _ in range(5):
        params, data = random_policy_data(rng)
        _, g = learn.mlp_gradients(params, data, spec)
        fd = fd_gradient(params, data, spec)
        for got, ref in zip(g.arrays(), blocks(params, fd)):
            assert rel_err(got, ref) < 1e-4


def test_value_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    spec = learn.LossSpec("value")
    for _ in range(5):
        params = learn.init_mlp([4, 8, 8, 1], rng, out_scale=1.0)
        data = {"x": rng.normal(size=(12, 4)), "returns": rng.normal(size=12)}
        _, g = learn.mlp_gradients(params, data, spec)
        fd = fd_gradient(params, data, spec)
        for got, ref in zip(g.arrays(), blocks(params, fd)):
            assert rel_err(got, ref) < 1e-4


def test_value_gradient_single_hidden_unit_by_hand():
    W1, b1, W2, b2 = np.array([[0.7]]), np.array([0.1]), np.array([[1.3]]), np.array([-0.2])
    params = learn.MlpParams([W1, W2], [b1, b2])
    x, R = 0.4, 0.9
    h = np.tanh(0.7 * x + 0.1)
    v = 1.3 * h - 0.2
    e = v - R
    _, g = learn.mlp_gradients(params, {"x": [[x]], "returns": [R]}, learn.LossSpec("value"))
    assert g.weights[1][0, 0] == pytest.approx(e * h)
    assert g.biases[1][0] == pytest.approx(e)
    assert g.weights[0][0, 0] == pytest.approx(e * 1.3 * (1 - h ** 2) * x)
    assert g.biases[0][0] == pytest.approx(e * 1.3 * (1 - h ** 2))


def test_zero_advantage_gives_zero_policy_gradient():
    rng = np.random.default_rng(12)
    params, data = random_policy_data(rng)
    data["adv"] = np.zeros_like(data["adv"])
    _, g = learn.mlp_gradients(params, data, learn.LossSpec("policy"))
    assert np.all(g.flat() == 0.0)


def test_clipped_samples_contribute_no_gradient():
    params = learn.init_mlp([2, 4, 1], 0, log_std=0.0, out_scale=1.0)
    x = np.array([[0.2, -0.1]])
    mean = learn.mlp_forward(params, x)[0]
    u = mean + 0.3
    logp = learn.gaussian_log_prob(mean, params.log_std, u)
    spec = learn.LossSpec("policy", clip=0.2)
    # ratio 0.5 < 1 - clip with a positive cost advantage: already pushed down
    data = {"x": x, "u": u, "logp_old": logp + np.log(2.0), "adv": np.array([1.0])}
    assert np.all(learn.mlp_gradients(params, data, spec)[1].flat() == 0.0)
    # ratio 2 > 1 + clip with a negative cost advantage: already pushed up
    data = {"x": x, "u": u, "logp_old": logp - np.log(2.0), "adv": np.array([-1.0])}
    assert np.all(learn.mlp_gradients(params, data, spec)[1].flat() == 0.0)
    # ratio 2 with a positive advantage still gets pulled back
    data = {"x": x, "u": u, "logp_old": logp - np.log(2.0), "adv": np.array([1.0])}
    assert np.any(learn.mlp_gradients(params, data, spec)[1].flat() != 0.0)


# ----------------------------------------------------------------------------
# GAE
# ----------------------------------------------------------------------------

def test_gae_lambda_zero_is_td_residual():
    rng = np.random.default_rng(13)
    costs, values = rng.normal(size=8), rng.normal(size=8)
    adv, _ = learn.gae(costs, values, 0.4, np.zeros(8, bool), 0.9, 0.0)
    nxt = np.append(values[1:], 0.4)
    assert np.allclose(adv, costs + 0.9 * nxt - values)


def test_gae_lambda_one_is_return_minus_value():
    rng = np.random.default_rng(14)
    costs, values = rng.normal(size=6), rng.normal(size=6)
    dones = np.zeros(6, bool)
    dones[-1] = True
    adv, ret = learn.gae(costs, values, 123.0, dones, 1.0, 1.0)
    emp = np.cumsum(costs[::-1])[::-1]
    assert np.allclose(adv, emp - values)
    assert np.allclose(ret, emp)


def test_gae_matches_double_loop():
    rng = np.random.default_rng(15)
    for _ in range(20):
        n = rng.integers(1, 30)
        costs, values = rng.normal(size=n), rng.normal(size=n)
        dones = rng.random(n) < 0.15
        last = rng.normal()
        gamma, lam = rng.uniform(0.8, 1.0), rng.uniform(0.0, 1.0)
        adv, _ = learn.gae(costs, values, last, dones, gamma, lam)
        assert np.allclose(adv, gae_double_loop(costs, values, last, dones, gamma, lam), atol=1e-12)


def test_gae_normalization_and_range_check():
    rng = np.random.default_rng(16)
    adv, _ = learn.gae(rng.normal(size=50), rng.normal(size=50), 0.0, np.zeros(50, bool), 0.99, 0.95,
                       normalize=True)
    assert abs(adv.mean()) < 1e-12 and adv.std() == pytest.approx(1.0, rel=1e-6)
    with pytest.raises(ValueError):
        learn.gae([1.0], [0.0], 0.0, [False], 1.1, 0.5)


# ----------------------------------------------------------------------------
# PPO update
# ----------------------------------------------------------------------------

def _toy_batch(rng, state, n=64, costs=None):
    x = rng.normal(size=(n, 3))
    u, lp = zip(*(learn.policy_act(state.policy, xi, rng) for xi in x))
    costs = rng.normal(size=n) if costs is None else costs
    dones = np.zeros(n, bool)
    dones[-1] = True
    return learn.RolloutBatch(x, np.array(u), np.array(lp), np.asarray(costs, dtype=float),
                              np.zeros((n, 1)), dones, [(0, n, True, x[-1])])


def test_unclipped_single_step_equals_vanilla_policy_gradient():
    rng = np.random.default_rng(17)
    state = learn.PpoState.create(3, 1, hidden=(8, 8), seed=1)
    batch = _toy_batch(rng, state)
    cfg = learn.PpoConfig(clip=np.inf, epochs=1, minibatch=len(batch), max_grad_norm=0.0)
    new, _ = learn.ppo_update(state, batch, cfg)
    adv, _ = learn.batch_advantages(batch, state.value, True)
    # vanilla score-function loss mean(logp * A) has the same gradient at the snapshot
    mean, acts = learn.mlp_forward(state.policy, batch.x)
    ls = state.policy.log_std
    diff = batch.u - mean
    d_logp = adv / len(batch)
    g = learn.mlp_backward(state.policy, acts, d_logp[:, None] * diff * np.exp(-2 * ls))
    g.log_std = (d_logp[:, None] * (diff ** 2 * np.exp(-2 * ls) - 1)).sum(axis=0)
    ref, _ = learn.rms_step(state.policy, g, state.policy_opt, cfg.lr)
    assert np.allclose(new.policy.flat(), ref.flat(), atol=1e-12)


def test_zero_advantages_leave_policy_unchanged():
    rng = np.random.default_rng(18)
    state = learn.PpoState.create(3, 1, hidden=(8, 8), seed=2)
    state.value.weights[-1][:] = 0.0
    batch = _toy_batch(rng, state, costs=np.zeros(64))
    cfg = learn.PpoConfig(epochs=2, minibatch=16, normalize_adv=False)
    new, _ = learn.ppo_update(state, batch, cfg)
    assert np.array_equal(new.policy.flat(), state.policy.flat())


def test_nonfinite_loss_aborts_without_touching_params():
    rng = np.random.default_rng(19)
    state = learn.PpoState.create(3, 1, hidden=(8, 8), seed=3)
    before = state.policy.flat().copy()
    costs = np.zeros(64)
    costs[5] = np.nan
    batch = _toy_batch(rng, state, costs=costs)
    with pytest.raises(NonFiniteLoss):
        learn.ppo_update(state, batch, learn.PpoConfig())
    assert np.array_equal(state.policy.flat(), before)


def test_ppo_update_deterministic():
    rng = np.random.default_rng(20)
    state = learn.PpoState.create(3, 1, hidden=(8, 8), seed=4)
    batch = _toy_batch(rng, state)
    a, da = learn.ppo_update(state, batch, learn.PpoConfig(minibatch=16), seed=5)
    b, db = learn.ppo_update(state, batch, learn.PpoConfig(minibatch=16), seed=5)
    assert np.array_equal(a.policy.flat(), b.policy.flat()) and da == db


def test_rms_step_formula():
    p = learn.MlpParams([np.array([[1.0]])], [np.array([0.0])])
    g = learn.MlpParams([np.array([[2.0]])], [np.array([0.0])])
    new, st = learn.rms_step(p, g, learn.RmsState.like(p, beta=0.9), 0.1)
    s = 0.1 * 4.0
    assert new.weights[0][0, 0] == pytest.approx(1.0 - 0.1 * 2.0 / (np.sqrt(s) + 1e-8))
    assert st.sq[0] == pytest.approx(s)


# ----------------------------------------------------------------------------
# Cost shaping and Lagrangian multipliers
# ----------------------------------------------------------------------------

def test_shaped_cost_examples():
    assert learn.shaped_cost(1.5, [-0.3, -0.2], 10.0, 0.2) == 1.5
    assert learn.shaped_cost(1.0, [0.0], 10.0, 0.2) == pytest.approx(1.0 + 10.0 * 0.04)
    with pytest.raises(ValueError):
        learn.shaped_cost(1.0, [0.0], 1.0, 0.0)


def test_shaped_cost_monotone():
    rng = np.random.default_rng(21)
    for _ in range(200):
        c = rng.normal(size=3)
        bump = c.copy()
        bump[rng.integers(3)] += rng.uniform(0, 1)
        assert learn.shaped_cost(0.0, bump, 2.0, 0.1) >= learn.shaped_cost(0.0, c, 2.0, 0.1)


def test_lagrangian_step_examples():
    st = learn.LagrangeState([0.5, 0.0], [1.0, 1.0], 0.1)
    same, _ = learn.lagrangian_step(st, [1.0, 1.0])
    assert np.array_equal(same.lam, st.lam)
    up, w = learn.lagrangian_step(st, [2.0, 0.0])
    assert up.lam[0] > st.lam[0] and up.lam[1] == 0.0
    assert np.array_equal(w, up.lam)
    for _ in range(50):
        up, _ = learn.lagrangian_step(up, np.random.default_rng(0).normal(size=2) * 5)
        assert np.all(up.lam >= 0)
    with pytest.raises(ValueError):
        learn.LagrangeState([0.0], [0.0], 0.0)
    assert learn.lagrangian_cost(1.0, [0.5, -1.0], [2.0, 1.0]) == pytest.approx(1.0)


# ----------------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    params = learn.init_mlp([4, 32, 32, 1], 0, log_std=-0.5)
    path = tmp_path / "policy.bin"
    learn.save_params(path, params, {"seed": 0})
    back = learn.load_params(path)
    assert np.array_equal(back.flat(), params.flat())
    info = json.loads(path.with_suffix(".json").read_text())
    assert info["sizes"] == [4, 32, 32, 1] and info["gaussian"]
    raw = path.read_bytes()
    assert raw[:8] == learn.CHECKPOINT_MAGIC
    path.write_bytes(b"garbage!" + raw[8:])
    with pytest.raises(ValueError):
        learn.load_params(path)


def test_params_validate_shapes():
    with pytest.raises(ValueError):
        learn.MlpParams([np.zeros((3, 2)), np.zeros((1, 4))], [np.zeros(3), np.zeros(1)])
