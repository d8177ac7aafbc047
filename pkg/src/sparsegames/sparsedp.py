"""Regularized dynamic programming for LQ games and its diagnostics.

The backward recursion is the one in :mod:`sparsegames.lqsolve` except that
each stage's feedback gain comes from the group Lasso stage problem. The
value update then evaluates the installed (sparse) policy, so the returned
value profile is the true cost-to-go of the regularized strategies.

Each stage also records the deviation from the exact solution of the *same*
stage data and the a priori bound ``sum(lambda) / sigma_min(S)^2`` on it.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import grouplasso
from .errors import NotConverged, SolverError
from .gamecore import AffineStrategyProfile, LqGame, ValueProfile, block_norms, symmetrize
from .lqsolve import SINGULAR_RTOL, assemble_stage_system, solve_stage, terminal_values, value_step

log = logging.getLogger(__name__)

BOUND_SLACK = 1e-7
BCD_ZERO_THRESHOLD = 1e-9


@dataclass(frozen=True)
class SparseSolveReport:
    strategies: AffineStrategyProfile
    values: ValueProfile
    sparsity: np.ndarray  # (T, N, N) bool
    delta_P: np.ndarray  # (T,)
    lemma1_bound: np.ndarray  # (T,)
    kkt: np.ndarray  # (T,)
    sigma_min: np.ndarray  # (T,)

    def bound_violations(self, slack=BOUND_SLACK):
        return np.flatnonzero(self.delta_P > self.lemma1_bound + slack)


@dataclass
class ConvergenceTrace:
    delta_P: list = field(default_factory=list)
    delta_Z: list = field(default_factory=list)
    dist_to_fixed_point: list = field(default_factory=list)
    nonzero_blocks: list = field(default_factory=list)

    def __len__(self):
        return len(self.delta_P)

    def rows(self):
        """Rows ``(step, delta_P, delta_Z, dist_to_fixed_point)``."""
        n = len(self.delta_P)
        dist = self.dist_to_fixed_point or [float("nan")] * n
        return [(k + 1, self.delta_P[k], self.delta_Z[k], dist[k]) for k in range(n)]


def lemma1_bound(S, weights):
    """``sum(lambda) / sigma_min(S)^2``; ``inf`` if ``S`` is numerically singular."""
    total = float(np.sum(getattr(weights, "weights", weights)))
    sv = np.linalg.svd(np.asarray(S, dtype=float), compute_uv=False)
    if sv[-1] < SINGULAR_RTOL * sv[0] or sv[0] == 0.0:
        return np.inf
    if total == 0.0:
        return 0.0
    return total / sv[-1] ** 2


def sparsity_pattern(strategies, threshold=BCD_ZERO_THRESHOLD):
    """Per-stage nonzero-block pattern and per-player nonzero-block counts.

    Returns ``(pattern, counts)`` with shapes ``(T, N, N)`` and ``(T, N)``.
    ``counts[k, i]`` is how many players' states player ``i``'s gain uses.
    """
    d = strategies.dims
    pattern = np.stack([block_norms(P, d) > threshold for P in strategies.P])
    return pattern, pattern.sum(axis=2)


def _stage_problem(game, k, Z_next, eta_next, weights):
    system = assemble_stage_system(game, k, Z_next, eta_next)
    return system, grouplasso.GroupLassoProblem(system.S, system.Y, game.dims, weights)


def _solve_stage_regularized(system, prob, backend, tol, max_iter, ridge):
    """Returns ``(P_hat, alpha_hat, P_exact, kkt, sigma_min, sigma_max)``."""
    exact = solve_stage(system)
    if prob.weights.is_zero() and backend == "bcd":
        # The group Lasso with zero weights is the linear system itself.
        P_hat, kkt = exact.P, grouplasso.certify_kkt(prob, exact.P)
    elif backend == "bcd":
        sol = grouplasso.solve_bcd(prob, tol=tol, max_iter=max_iter, ridge=ridge, P0=exact.P)
        P_hat, kkt = sol.P_hat, sol.kkt_residual
    else:
        sol = grouplasso.solve_conic(prob, tol=min(tol, 1e-8))
        P_hat, kkt = sol.P_hat, sol.kkt_residual
    return P_hat, exact.alpha, exact.P, kkt, exact.sigma_min, exact.sigma_max


def solve_regularized(game, weights, backend="bcd", tol=grouplasso.DEFAULT_TOL,
                      max_iter=grouplasso.DEFAULT_MAX_ITER, ridge=False):
    """Backward recursion with group-Lasso feedback gains at every stage.

    The feedforward terms solve the exact companion system built from the
    regularized value data, so only the state dependence is sparsified.
    """
    d = game.dims
    N, T, n, m = d.n_players, d.horizon, d.n, d.m
    P = np.empty((T, n, m))
    alpha = np.empty((T, n))
    Z = np.empty((N, T + 1, m, m))
    eta = np.empty((N, T + 1, m))
    beta = np.empty((N, T + 1))
    Z[:, T], eta[:, T], beta[:, T] = terminal_values(game)
    delta_P = np.empty(T)
    bound = np.empty(T)
    kkt = np.empty(T)
    smin = np.empty(T)
    threshold = BCD_ZERO_THRESHOLD if backend == "bcd" else 0.0
    if ridge and backend == "bcd" and not weights.is_zero():
        warnings.warn("group Lasso running with ridge-regularized block Hessians", RuntimeWarning)
    for k in range(T - 1, -1, -1):
        system, prob = _stage_problem(game, k, Z[:, k + 1], eta[:, k + 1], weights)
        try:
            P_hat, a_hat, P_exact, kkt[k], smin[k], smax = _solve_stage_regularized(
                system, prob, backend, tol, max_iter, ridge)
        except SolverError as exc:
            raise exc.at_stage(k + 1)
        P[k], alpha[k] = P_hat, a_hat
        delta_P[k] = np.linalg.norm(P_hat - P_exact)
        bound[k] = weights.total / smin[k] ** 2 if weights.total else 0.0
        Z[:, k], eta[:, k], beta[:, k] = value_step(
            game, k, P_hat, a_hat, Z[:, k + 1], eta[:, k + 1], beta[:, k + 1])
    strategies = AffineStrategyProfile(d, P, alpha)
    pattern, _ = sparsity_pattern(strategies, threshold)
    report = SparseSolveReport(strategies, ValueProfile(Z, eta, beta), pattern,
                               delta_P, bound, kkt, smin)
    bad = report.bound_violations()
    if len(bad):
        log.warning("per-stage deviation bound violated at stages %s", (bad + 1).tolist())
    return report


def time_invariant_extension(game, stage=0):
    """A one-stage game carrying ``game``'s stage data for infinite-horizon use."""
    d = game.dims
    k = stage
    return LqGame(
        dims=type(d)(d.state_dims, d.control_dims, 1),
        A=game.A[k:k + 1], B=game.B[k:k + 1],
        Q=np.stack([game.Q[:, k], game.Q[:, -1]], axis=1),
        q=np.stack([game.q[:, k], game.q[:, -1]], axis=1),
        R=game.R[:, k:k + 1], r=game.r[:, k:k + 1], x1=game.x1,
        validate=False,
    )


def _riccati_step(ext, Z, weights, backend, tol, max_iter):
    """One backward step of the time-invariant recursion from ``Z``.

    Returns ``(Z_new, P_hat, P_exact)``.
    """
    d = ext.dims
    system, prob = _stage_problem(ext, 0, Z, np.zeros((d.n_players, d.m)), weights)
    P_hat, _, P_exact, _, _, _ = _solve_stage_regularized(
        system, prob, backend, tol, max_iter, False)
    F = ext.A[0] - ext.B[0] @ P_hat
    R = ext.R[:, 0]
    Z_new = ext.Q[:, 0] + P_hat.T @ R @ P_hat + F.T @ Z @ F
    return symmetrize(Z_new), P_hat, P_exact


def riccati_trace(game, weights, steps, backend="bcd", tol=grouplasso.DEFAULT_TOL,
                  Z_star=None, Z_init=None, max_iter=grouplasso.DEFAULT_MAX_ITER):
    """Run the (regularized) Riccati recursion for ``steps`` backward steps.

    Stage data are frozen at the first stage of ``game`` (time-invariant
    extension). The recursion starts from ``Z_init`` (default: the game's
    terminal ``Q``). Returns ``(Z, P, trace)`` at the last step.
    """
    ext = time_invariant_extension(game)
    d = game.dims
    Z = (np.array(Z_init, dtype=float) if Z_init is not None else game.Q[:, -1].copy())
    trace = ConvergenceTrace()
    P_hat = None
    threshold = BCD_ZERO_THRESHOLD if backend == "bcd" else 0.0
    for step in range(steps):
        try:
            Z_new, P_hat, P_exact = _riccati_step(ext, Z, weights, backend, tol, max_iter)
        except SolverError as exc:
            raise exc.at_stage(-step)
        trace.delta_P.append(float(np.linalg.norm(P_hat - P_exact)))
        trace.delta_Z.append(float(np.linalg.norm(Z_new - Z)))
        trace.nonzero_blocks.append(int((block_norms(P_hat, d) > threshold).sum()))
        if Z_star is not None:
            trace.dist_to_fixed_point.append(float(np.linalg.norm(Z_new - Z_star)))
        Z = Z_new
    return Z, P_hat, trace


def infinite_horizon_fixed_point(game, weights, max_steps=5000, tol=1e-10, backend="bcd",
                                 gl_tol=grouplasso.DEFAULT_TOL):
    """Iterate the Riccati recursion until ``||Z_t - Z_{t+1}||_F <= tol``.

    Returns ``(Z_star, trace)``. Raises :class:`NotConverged` (with the
    trace) when ``max_steps`` is reached first.
    """
    ext = time_invariant_extension(game)
    Z = game.Q[:, -1].copy()
    trace = ConvergenceTrace()
    for step in range(max_steps):
        try:
            Z_new, P_hat, P_exact = _riccati_step(
                ext, Z, weights, backend, gl_tol, grouplasso.DEFAULT_MAX_ITER)
        except SolverError as exc:
            raise exc.at_stage(-step)
        dz = float(np.linalg.norm(Z_new - Z))
        trace.delta_P.append(float(np.linalg.norm(P_hat - P_exact)))
        trace.delta_Z.append(dz)
        Z = Z_new
        if dz <= tol:
            return Z, trace
    raise NotConverged(
        f"Riccati recursion did not settle within {max_steps} steps "
        f"(last change {trace.delta_Z[-1]:.3e})", trace=trace)


def riccati_residual(game, Z):
    """Residual of the infinite-horizon coupled Riccati equation at ``Z``."""
    ext = time_invariant_extension(game)
    d = game.dims
    system, _ = _stage_problem(ext, 0, Z, np.zeros((d.n_players, d.m)),
                               np.zeros((d.n_players, d.n_players)))
    P = solve_stage(system).P
    F = ext.A[0] - ext.B[0] @ P
    res = [ext.Q[i, 0] + P.T @ ext.R[i, 0] @ P + F.T @ Z[i] @ F - Z[i] for i in range(d.n_players)]
    return float(np.linalg.norm(np.stack(res)))
