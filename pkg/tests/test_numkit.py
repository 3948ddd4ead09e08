import numpy as np
import pytest

from safectl.errors import DimensionMismatch, NonFiniteEvaluation, NotPositiveDefinite
from safectl.numkit import (
    PRIMAL_INFEASIBLE,
    QpProblem,
    cholesky,
    dare_residual,
    dare_solve,
    finite_diff_jacobian,
    solve_qp,
    spectral_radius,
)

from oracles import active_set_qp, power_iteration_radius, random_convex_qp, riccati_scalar_fixed_point


def test_cholesky_identity():
    assert np.allclose(cholesky(np.eye(2)), np.eye(2))


def test_cholesky_hand_example():
    L = cholesky(np.array([[4.0, 2.0], [2.0, 3.0]]))
    assert L[0, 0] == pytest.approx(2.0)
    assert L[1, 0] == pytest.approx(1.0)
    assert L[1, 1] == pytest.approx(np.sqrt(2.0))
    assert L[0, 1] == 0.0


def test_cholesky_indefinite():
    with pytest.raises(NotPositiveDefinite):
        cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_cholesky_roundtrip_with_jitter():
    rng = np.random.default_rng(3)
    for _ in range(20):
        M = rng.normal(size=(6, 6))
        A = M @ M.T
        L = cholesky(A, jitter=1e-3)
        err = np.linalg.norm(L @ L.T - (A + 1e-3 * np.eye(6))) / np.linalg.norm(A)
        assert err <= 1e-10


def test_qp_unconstrained():
    qp = QpProblem(np.eye(2), [-1.0, -2.0], np.zeros((0, 2)), [], [])
    sol = solve_qp(qp)
    assert sol.solved
    assert np.allclose(sol.z, [1.0, 2.0])


def test_qp_clamp_to_bound():
    # (z - 3)^2 = z^2 - 6z + 9 -> H = 2, g = -6
    qp = QpProblem([[2.0]], [-6.0], [[1.0]], [0.0], [2.0])
    sol = solve_qp(qp)
    assert sol.solved
    assert sol.z[0] == pytest.approx(2.0, abs=1e-6)
    assert sol.y[0] > 0


def test_qp_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        QpProblem(np.eye(2), [0.0, 0.0], np.zeros((1, 2)), [0.0, 1.0], [1.0, 2.0])


def test_qp_rejects_crossed_bounds():
    with pytest.raises(ValueError):
        QpProblem(np.eye(1), [0.0], [[1.0]], [1.0], [0.0])


def test_qp_matches_active_set_oracle():
    rng = np.random.default_rng(11)
    for _ in range(20):
        H, g, A, lo, hi = random_convex_qp(rng)
        z_ref, f_ref = active_set_qp(H, g, A, lo, hi)
        qp = QpProblem(H, g, A, lo, hi)
        sol = solve_qp(qp)
        assert sol.solved
        assert abs(qp.objective(sol.z) - f_ref) <= 1e-6 * max(1.0, abs(f_ref))
        assert np.linalg.norm(sol.z - z_ref) <= 1e-5


def test_qp_kkt_residuals_when_solved():
    rng = np.random.default_rng(5)
    for _ in range(30):
        H, g, A, lo, hi = random_convex_qp(rng)
        qp = QpProblem(H, g, A, lo, hi)
        sol = solve_qp(qp)
        assert sol.solved
        assert np.abs(H @ sol.z + g + A.T @ sol.y).max() <= 1e-6 * max(1.0, np.abs(g).max())
        Az = A @ sol.z
        assert np.all(Az >= lo - 1e-6) and np.all(Az <= hi + 1e-6)


def test_qp_detects_primal_infeasibility():
    # z >= 1 and z <= 0 written as two rows
    qp = QpProblem([[1.0]], [0.0], [[1.0], [1.0]], [1.0, -np.inf], [np.inf, 0.0])
    sol = solve_qp(qp)
    assert sol.status == PRIMAL_INFEASIBLE


def test_polish_recovers_kkt_point_with_wide_hessian_scale():
    from safectl.numkit import _polish

    # diag(H) spans nine decades, as in MPC problems with very unequal input weights
    rng = np.random.default_rng(0)
    n = 8
    H = np.diag(np.logspace(-2, 7, n))
    g = rng.normal(size=n)
    A, b = rng.normal(size=(3, n)), rng.normal(size=3)
    K = np.block([[H, A.T], [A, np.zeros((3, 3))]])
    ref = np.linalg.solve(K, np.concatenate([-g, b]))
    qp = QpProblem(H, g, A, b, b)
    z, y = _polish(qp, ref[:n] * (1 + 1e-3 * rng.normal(size=n)), ref[n:] * (1 + 1e-3 * rng.normal(size=3)))
    assert np.abs(z - ref[:n]).max() < 1e-10
    assert np.abs(y - ref[n:]).max() < 1e-8 * np.abs(ref[n:]).max()


def test_qp_max_iterations_is_reported():
    from safectl.numkit import QpSettings

    rng = np.random.default_rng(2)
    H, g, A, lo, hi = random_convex_qp(rng, 4, 6)
    sol = solve_qp(QpProblem(H, g, A, lo, hi), QpSettings(max_iter=1, polish=False))
    assert sol.status in ("max-iterations", "solved")
    assert sol.iterations == 1


def test_dare_scalar_golden_ratio():
    p_ref, k_ref = riccati_scalar_fixed_point(1.0, 1.0, 1.0, 1.0)
    P, K = dare_solve([[1.0]], [[1.0]], [[1.0]], [[1.0]])
    assert P[0, 0] == pytest.approx(p_ref, abs=1e-9)
    assert K[0, 0] == pytest.approx(k_ref, abs=1e-9)
    assert P[0, 0] == pytest.approx((1 + np.sqrt(5)) / 2, abs=1e-9)
    assert K[0, 0] == pytest.approx(0.6180339887, abs=1e-9)


def test_dare_no_actuation_gives_lyapunov():
    A = np.array([[0.5, 0.1], [0.0, 0.3]])
    B = np.zeros((2, 1))
    Q = np.eye(2)
    P, K = dare_solve(A, B, Q, np.eye(1))
    assert np.allclose(K, 0.0)
    assert np.allclose(A.T @ P @ A + Q, P, atol=1e-9)


def test_dare_random_stabilizable_system():
    rng = np.random.default_rng(7)
    for _ in range(10):
        A = rng.normal(size=(3, 3))
        B = rng.normal(size=(3, 1))
        P, K = dare_solve(A, B, np.eye(3), np.eye(1))
        assert dare_residual(A, B, np.eye(3), np.eye(1), P) <= 1e-9
        assert power_iteration_radius(A - B @ K) < 1.0
        assert spectral_radius(A - B @ K) < 1.0


def test_finite_diff_identity():
    assert np.allclose(finite_diff_jacobian(lambda x: x, np.array([1.0, -2.0, 0.5])), np.eye(3))


def test_finite_diff_square():
    J = finite_diff_jacobian(lambda x: x ** 2, np.array([3.0]), eps=1e-5)
    assert J[0, 0] == pytest.approx(6.0, abs=1e-6)


def test_finite_diff_non_finite():
    with pytest.raises(NonFiniteEvaluation), np.errstate(divide="ignore", invalid="ignore"):
        finite_diff_jacobian(lambda x: np.log(x), np.array([0.0]), eps=1e-3)
