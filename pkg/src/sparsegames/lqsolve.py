"""Feedback Nash equilibria of LQ games by backward dynamic programming.

At every stage the players' first-order conditions form one linear system
``S_t P_t = Y_t`` in the stacked gain (plus a companion system for the
feedforward terms sharing ``S_t``). Solving it and propagating the coupled
Riccati recursion backwards from ``T`` gives the equilibrium.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DimensionError, SingularSystemError
from .gamecore import AffineStrategyProfile, ValueProfile, symmetrize

log = logging.getLogger(__name__)

SINGULAR_RTOL = 1e-12


@dataclass(frozen=True)
class StageSystem:
    S: np.ndarray  # (n, n)
    Y: np.ndarray  # (n, m)
    Y_alpha: np.ndarray  # (n,)


@dataclass(frozen=True)
class StageSolution:
    P: np.ndarray
    alpha: np.ndarray
    sigma_min: float
    sigma_max: float

    @property
    def condition(self):
        return self.sigma_max / self.sigma_min if self.sigma_min > 0 else np.inf


def assemble_stage_system(game, k, Z_next, eta_next):
    """Build ``S_t``, ``Y_t`` and the feedforward right-hand side at index ``k``.

    ``Z_next``/``eta_next`` are the per-player value data at ``k + 1``,
    shaped ``(N, m, m)`` and ``(N, m)``.
    """
    d = game.dims
    N, n, m = d.n_players, d.n, d.m
    Z_next = np.asarray(Z_next)
    eta_next = np.asarray(eta_next)
    if Z_next.shape != (N, m, m) or eta_next.shape != (N, m):
        raise DimensionError(
            f"value data shapes {Z_next.shape}, {eta_next.shape} do not match (N, m)",
            stage=k + 1,
        )
    A, B = game.A[k], game.B[k]
    S = np.empty((n, n))
    Y = np.empty((n, m))
    Y_alpha = np.empty(n)
    for i in range(N):
        rows = d.control_slice(i)
        BiZ = B[:, rows].T @ Z_next[i]
        S[rows] = BiZ @ B
        S[rows, rows] += game.R_block(i, i, k)
        Y[rows] = BiZ @ A
        Y_alpha[rows] = B[:, rows].T @ eta_next[i] + game.r_block(i, i, k)
    return StageSystem(S, Y, Y_alpha)


def solve_stage(system):
    """Solve ``S P = Y`` and ``S alpha = Y_alpha`` with one LU factorization."""
    S = system.S
    sv = np.linalg.svd(S, compute_uv=False)
    smax, smin = float(sv[0]), float(sv[-1])
    if smin < SINGULAR_RTOL * smax or smax == 0.0:
        raise SingularSystemError(smin, smax)
    lu = scipy.linalg.lu_factor(S, check_finite=False)
    P = scipy.linalg.lu_solve(lu, system.Y, check_finite=False)
    alpha = scipy.linalg.lu_solve(lu, system.Y_alpha, check_finite=False)
    return StageSolution(P, alpha, smin, smax)


def value_step(game, k, P, alpha, Z_next, eta_next, beta_next):
    """One step of the value recursion under the affine policy ``(P, alpha)``.

    Works for any installed policy, equilibrium or not: the result is the
    exact cost-to-go of following ``(P, alpha)`` at stage ``k`` and the
    policy encoded by the ``*_next`` data afterwards.
    """
    A, B = game.A[k], game.B[k]
    F = A - B @ P
    omega = -B @ alpha
    R, r = game.R[:, k], game.r[:, k]
    # R^i is block diagonal, so the joint products equal the sums over j.
    # Batched over players: R (N, n, n), Z_next (N, m, m).
    Z = game.Q[:, k] + P.T @ R @ P + F.T @ Z_next @ F
    Ra = R @ alpha
    Zw = Z_next @ omega
    eta = game.q[:, k] + (Ra - r) @ P + (Zw + eta_next) @ F
    beta = (0.5 * Ra @ alpha - r @ alpha + 0.5 * Zw @ omega + eta_next @ omega
            + np.asarray(beta_next))
    return symmetrize(Z), eta, beta


def terminal_values(game):
    T = game.dims.horizon
    return game.Q[:, T].copy(), game.q[:, T].copy(), np.zeros(game.dims.n_players)


def solve_feedback_nash(game, return_diagnostics=False):
    """Backward recursion for the feedback Nash equilibrium of an LQ game.

    Returns ``(strategies, values)``; with ``return_diagnostics`` also a list
    of per-stage ``sigma_min(S_t)`` (index ``k`` = stage ``k + 1``).
    """
    d = game.dims
    N, T, n, m = d.n_players, d.horizon, d.n, d.m
    P = np.empty((T, n, m))
    alpha = np.empty((T, n))
    Z = np.empty((N, T + 1, m, m))
    eta = np.empty((N, T + 1, m))
    beta = np.empty((N, T + 1))
    Z[:, T], eta[:, T], beta[:, T] = terminal_values(game)
    sigma_min = np.empty(T)
    for k in range(T - 1, -1, -1):
        system = assemble_stage_system(game, k, Z[:, k + 1], eta[:, k + 1])
        try:
            sol = solve_stage(system)
        except SingularSystemError as exc:
            raise exc.at_stage(k + 1)
        log.debug("stage %d: cond(S)=%.3e", k + 1, sol.condition)
        P[k], alpha[k], sigma_min[k] = sol.P, sol.alpha, sol.sigma_min
        Z[:, k], eta[:, k], beta[:, k] = value_step(
            game, k, sol.P, sol.alpha, Z[:, k + 1], eta[:, k + 1], beta[:, k + 1]
        )
    strategies = AffineStrategyProfile(d, P, alpha)
    values = ValueProfile(Z, eta, beta)
    if return_diagnostics:
        return strategies, values, sigma_min
    return strategies, values
