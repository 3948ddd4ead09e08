"""Independent reference computations used by the test suite.

Nothing here calls into the solver paths under test.
"""
import itertools

import numpy as np


def active_set_qp(H, g, A, lo, hi, tol=1e-9):
    """Brute-force a strictly convex QP by enumerating every active-set choice.

    Each row may be inactive, pinned at its lower bound or pinned at its upper
    bound.  For each choice the equality-constrained minimizer is computed; the
    best primal-feasible candidate is the global optimum.
    """
    H, g, A = np.asarray(H, float), np.asarray(g, float), np.asarray(A, float)
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    n, m = H.shape[0], A.shape[0]
    best_z, best_f = None, np.inf
    for choice in itertools.product((0, -1, 1), repeat=m):
        rows = [i for i, c in enumerate(choice) if c]
        if any((choice[i] == -1 and not np.isfinite(lo[i])) or
               (choice[i] == 1 and not np.isfinite(hi[i])) for i in rows):
            continue
        Aa = A[rows]
        b = np.array([lo[i] if choice[i] == -1 else hi[i] for i in rows])
        k = len(rows)
        K = np.block([[H, Aa.T], [Aa, np.zeros((k, k))]]) if k else H
        rhs = np.concatenate([-g, b]) if k else -g
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            continue
        z = sol[:n]
        Az = A @ z
        if np.all(Az >= lo - tol) and np.all(Az <= hi + tol):
            f = 0.5 * z @ H @ z + g @ z
            if f < best_f:
                best_f, best_z = f, z
    return best_z, best_f


def random_convex_qp(rng, n_max=4, m_max=6):
    """A random feasible, strictly convex QP with n <= n_max and m <= m_max."""
    n = int(rng.integers(1, n_max + 1))
    m = int(rng.integers(1, m_max + 1))
    M = rng.normal(size=(n, n))
    H = M @ M.T + 0.1 * np.eye(n)
    g = rng.normal(size=n) * 3
    A = rng.normal(size=(m, n))
    z_feas = rng.normal(size=n)
    Az = A @ z_feas
    lo = Az - rng.uniform(0.0, 1.0, size=m)
    hi = Az + rng.uniform(0.0, 1.0, size=m)
    lo[rng.uniform(size=m) < 0.2] = -np.inf
    hi[rng.uniform(size=m) < 0.2] = np.inf
    return H, g, A, lo, hi


def riccati_scalar_fixed_point(a, b, q, r, iters=10_000):
    """Iterate the scalar Riccati recursion from p = q."""
    p = q
    for _ in range(iters):
        p = q + a * a * p - (a * p * b) ** 2 / (r + b * b * p)
    return p, a * b * p / (r + b * b * p)


def power_iteration_radius(M, iters=2000, seed=0):
    """Spectral radius estimate via ||M^k||^(1/k) (robust to complex pairs)."""
    M = np.asarray(M, float)
    Mk = np.eye(M.shape[0])
    k = 0
    log_norm = 0.0
    for k in range(1, iters + 1):
        Mk = M @ Mk
        s = np.abs(Mk).max()
        if s == 0:
            return 0.0
        log_norm += np.log(s)
        Mk = Mk / s
    return float(np.exp(log_norm / k))


def gae_double_loop(costs, values, last_value, dones, gamma, lam):
    """O(N^2) generalized advantage estimate straight from its definition."""
    N = len(costs)
    deltas = []
    for t in range(N):
        v_next = last_value if t == N - 1 else values[t + 1]
        if dones[t]:
            v_next = 0.0
        deltas.append(costs[t] + gamma * v_next - values[t])
    adv = np.zeros(N)
    for t in range(N):
        total, w = 0.0, 1.0
        for j in range(t, N):
            total += w * deltas[j]
            if dones[j]:
                break
            w *= gamma * lam
        adv[t] = total
    return adv
