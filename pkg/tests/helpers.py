"""Random instances and independent reference solvers used across the tests."""
from __future__ import annotations

import numpy as np

from sparsegames.gamecore import Dims, LqGame


def random_spd(rng, k, floor=0.5):
    M = rng.normal(size=(k, k))
    return M @ M.T / k + floor * np.eye(k)


def random_psd(rng, k, rank=None):
    rank = k if rank is None else rank
    M = rng.normal(size=(k, rank))
    return M @ M.T / max(rank, 1)


def random_dims(rng, max_players=4, max_horizon=20, max_state=3, max_control=2):
    N = int(rng.integers(1, max_players + 1))
    state = tuple(int(v) for v in rng.integers(1, max_state + 1, N))
    control = tuple(int(v) for v in rng.integers(1, max_control + 1, N))
    T = int(rng.integers(1, max_horizon + 1))
    return Dims(state, control, T)


def random_game(rng, dims=None, affine=True, cross_control=True, **dim_kwargs):
    """A convex LQ game with mildly stable dynamics and coupled costs."""
    d = dims or random_dims(rng, **dim_kwargs)
    N, T, m, n = d.n_players, d.horizon, d.m, d.n
    A = np.empty((T, m, m))
    for k in range(T):
        M = rng.normal(size=(m, m))
        A[k] = np.eye(m) + 0.3 * M / max(1.0, np.linalg.norm(M, 2))
    B = rng.normal(size=(T, m, n)) * 0.5
    Q = np.stack([[random_psd(rng, m) for _ in range(T + 1)] for _ in range(N)])
    R = np.zeros((N, T, n, n))
    for i in range(N):
        for k in range(T):
            for j in range(N):
                s = d.control_slice(j)
                if j == i:
                    R[i, k, s, s] = random_spd(rng, d.control_dims[j])
                elif cross_control:
                    R[i, k, s, s] = 0.2 * random_psd(rng, d.control_dims[j])
    scale = 1.0 if affine else 0.0
    q = scale * rng.normal(size=(N, T + 1, m))
    r = scale * rng.normal(size=(N, T, n))
    x1 = rng.normal(size=m)
    return LqGame(d, A, B, Q, q, R, r, x1)


def textbook_lqr(A, B, Q, R, Q_T):
    """Finite-horizon discrete LQR by the classic Riccati difference equation.

    Uses ``K = (R + B'PB)^{-1} B'PA`` and
    ``P = Q + A'PA - A'PB (R + B'PB)^{-1} B'PA``; returns gains ``K[k]`` with
    ``u = -K x`` and cost matrices ``P[k]`` for ``k = 0..T``.
    """
    T = len(A)
    P = [None] * (T + 1)
    K = [None] * T
    P[T] = Q_T
    for k in range(T - 1, -1, -1):
        BtP = B[k].T @ P[k + 1]
        K[k] = np.linalg.solve(R[k] + BtP @ B[k], BtP @ A[k])
        P[k] = Q[k] + A[k].T @ P[k + 1] @ A[k] - A[k].T @ P[k + 1] @ B[k] @ K[k]
    return np.array(K), np.array(P)


def best_response(game, strategies, i):
    """Player ``i``'s optimal affine policy when everyone else is fixed.

    An independent single-agent dynamic program: the other players' policies
    are folded into the dynamics and into player ``i``'s costs, then the
    resulting LQ tracking problem (with affine terms and cross terms between
    state and own control) is solved backwards.
    """
    d = game.dims
    T = d.horizon
    own = d.control_slice(i)
    others = np.ones(d.n, dtype=bool)
    others[own] = False
    K = np.empty((T, d.control_dims[i], d.m))
    a = np.empty((T, d.control_dims[i]))
    V = game.Q[i, T].copy()
    v = game.q[i, T].copy()
    for k in range(T - 1, -1, -1):
        Po, ao = strategies.P[k][others], strategies.alpha[k][others]
        Bi, Bo = game.B[k][:, own], game.B[k][:, others]
        Ak = game.A[k] - Bo @ Po
        ck = -Bo @ ao
        Ro = game.R[i, k][np.ix_(others, others)]
        ro = game.r[i, k][others]
        Rii = game.R[i, k][own, own]
        ri = game.r[i, k][own]
        # Stage cost in (x, u_i) after substituting u_o = -Po x - ao.
        Qx = game.Q[i, k] + Po.T @ Ro @ Po
        qx = game.q[i, k] + Po.T @ Ro @ ao - Po.T @ ro
        # Quadratic model of cost-to-go in (x, u_i).
        Hxx = Qx + Ak.T @ V @ Ak
        Hux = Bi.T @ V @ Ak
        Huu = Rii + Bi.T @ V @ Bi
        hx = qx + Ak.T @ (V @ ck + v)
        hu = ri + Bi.T @ (V @ ck + v)
        K[k] = np.linalg.solve(Huu, Hux)
        a[k] = np.linalg.solve(Huu, hu)
        V = Hxx - Hux.T @ K[k]
        V = 0.5 * (V + V.T)
        v = hx - Hux.T @ a[k]
    return K, a


def fista_group_lasso(S, Y, dims, W, iters=20000, tol=1e-13):
    """Accelerated proximal gradient on the group Lasso, used as a reference."""
    L = np.linalg.norm(S, 2) ** 2
    P = np.zeros((dims.n, dims.m))
    Z = P.copy()
    t = 1.0
    for _ in range(iters):
        G = S.T @ (S @ Z - Y)
        X = Z - G / L
        P_new = np.empty_like(X)
        for i in range(dims.n_players):
            for j in range(dims.n_players):
                r, c = dims.control_slice(i), dims.state_slice(j)
                blk = X[r, c]
                nrm = np.linalg.norm(blk)
                kappa = W[i, j] / L
                P_new[r, c] = 0.0 if nrm <= kappa else (1 - kappa / nrm) * blk
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        Z = P_new + (t - 1) / t_new * (P_new - P)
        if np.max(np.abs(P_new - P)) < tol:
            P = P_new
            break
        P, t = P_new, t_new
    return P
