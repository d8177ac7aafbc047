"""Iterative LQ approximation for nonlinear, non-quadratic dynamic games.

Each outer iteration linearizes the dynamics and quadraticizes the costs
around the current operating trajectory, solves the resulting LQ game (in
deviation coordinates) with :func:`sparsedp.solve_regularized`, and rolls
the new strategies out through the true dynamics::

    u_t = u_bar_t - P_t (x_t - x_bar_t) - eta * alpha_t

with ``eta`` chosen by halving until the rollout stays within a trust
radius of the operating point. By default the starting value of ``eta``
adapts between outer iterations: it is halved when the new trajectory
update points against the previous one (an overshooting iteration) and
grown back towards 1 otherwise. Near a solution of a game whose cost
curvature switches on and off (proximity penalties) the undamped updates
tend to settle into a small oscillation; damping them lets the outer loop
stop at an approximate fixed point.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import sparsedp
from .errors import DivergedRollout, NotConverged
from .gamecore import AffineStrategyProfile, Dims, LqGame, RegularizationWeights, Trajectory

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NonLqGame:
    """Nonlinear game given by callables with analytic derivative oracles.

    ``dynamics(k, x, u) -> x_next`` and ``dynamics_jacobian(k, x, u) -> (A, B)``
    act on joint state/control. ``stage_cost_derivatives(i, k, x, u)``
    returns ``(value, g_x, g_u, H_xx, H_uu)`` for player ``i``;
    ``terminal_cost_derivatives(i, x)`` returns ``(value, g_x, H_xx)``.
    Stage indices ``k`` are 0-based.
    """

    dims: Dims
    dynamics: Callable
    dynamics_jacobian: Callable
    stage_cost: Callable
    stage_cost_derivatives: Callable
    terminal_cost: Callable
    terminal_cost_derivatives: Callable
    x1: np.ndarray

    def total_costs(self, traj):
        d = self.dims
        T = d.horizon
        out = np.zeros(d.n_players)
        for i in range(d.n_players):
            out[i] = sum(self.stage_cost(i, k, traj.x[k], traj.u[k]) for k in range(T))
            out[i] += self.terminal_cost(i, traj.x[T])
        return out


@dataclass(frozen=True)
class IlqSettings:
    max_outer_iters: int = 200
    convergence_tol: float = 1e-3
    trust_radius: float = 1.0
    min_step: float = 1.0 / 64.0
    weights: RegularizationWeights = None
    psd_shift: float = 1e-3
    backend: str = "bcd"
    gl_tol: float = 1e-8
    adaptive_step: bool = True
    step_shrink: float = 0.5
    step_grow: float = 1.5

    def __post_init__(self):
        if self.max_outer_iters < 1:
            raise ValueError("max_outer_iters must be >= 1")
        if self.convergence_tol <= 0 or self.trust_radius <= 0 or self.psd_shift <= 0:
            raise ValueError("tolerances, trust radius and psd_shift must be positive")
        if not 0 < self.min_step <= 1:
            raise ValueError("min_step must lie in (0, 1]")
        if not 0 < self.step_shrink < 1 or self.step_grow < 1:
            raise ValueError("need 0 < step_shrink < 1 <= step_grow")


@dataclass
class IlqIteration:
    iteration: int
    step_size: float
    max_step: float
    trajectory_change: float
    costs: np.ndarray
    nonzero_blocks: np.ndarray  # time-averaged count per player
    max_kkt: float


@dataclass
class IlqResult:
    strategies: AffineStrategyProfile
    operating_point: Trajectory
    converged: bool
    iterations: list = field(default_factory=list)
    report: sparsedp.SparseSolveReport = None

    @property
    def trajectory(self):
        return self.operating_point


def from_lq_game(game):
    """View an :class:`LqGame` as a :class:`NonLqGame`."""
    T = game.dims.horizon

    def dyn(k, x, u):
        return game.A[k] @ x + game.B[k] @ u

    def jac(k, x, u):
        return game.A[k].copy(), game.B[k].copy()

    def stage_derivs(i, k, x, u):
        Q, q, R, r = game.Q[i, k], game.q[i, k], game.R[i, k], game.r[i, k]
        val = 0.5 * x @ Q @ x + q @ x + 0.5 * u @ R @ u + r @ u
        return val, Q @ x + q, R @ u + r, Q.copy(), R.copy()

    def terminal_derivs(i, x):
        Q, q = game.Q[i, T], game.q[i, T]
        return 0.5 * x @ Q @ x + q @ x, Q @ x + q, Q.copy()

    return NonLqGame(
        dims=game.dims,
        dynamics=dyn,
        dynamics_jacobian=jac,
        stage_cost=lambda i, k, x, u: stage_derivs(i, k, x, u)[0],
        stage_cost_derivatives=stage_derivs,
        terminal_cost=lambda i, x: terminal_derivs(i, x)[0],
        terminal_cost_derivatives=terminal_derivs,
        x1=np.array(game.x1),
    )


def zero_operating_point(game):
    d = game.dims
    return Trajectory(np.zeros((d.horizon + 1, d.m)), np.zeros((d.horizon, d.n)))


def forward_simulate(game, strategies, operating_point, step_size=1.0):
    """Roll out the true dynamics under operating-point feedback."""
    d = game.dims
    T = d.horizon
    x = np.empty((T + 1, d.m))
    u = np.empty((T, d.n))
    x[0] = game.x1
    xb, ub = operating_point.x, operating_point.u
    for k in range(T):
        u[k] = ub[k] - strategies.P[k] @ (x[k] - xb[k]) - step_size * strategies.alpha[k]
        x[k + 1] = game.dynamics(k, x[k], u[k])
        if not np.all(np.isfinite(x[k + 1])):
            raise DivergedRollout(k + 2)
    return Trajectory(x, u)


def linearize(game, traj):
    """Per-stage Jacobians ``A`` (T, m, m) and ``B`` (T, m, n) along ``traj``."""
    d = game.dims
    A = np.empty((d.horizon, d.m, d.m))
    B = np.empty((d.horizon, d.m, d.n))
    for k in range(d.horizon):
        A[k], B[k] = game.dynamics_jacobian(k, traj.x[k], traj.u[k])
    return A, B


def project_psd(M, floor=0.0):
    """Clamp eigenvalues of a symmetric matrix from below at ``floor``."""
    M = 0.5 * (M + M.T)
    w, V = np.linalg.eigh(M)
    if w.min() >= floor:
        return M
    return (V * np.maximum(w, floor)) @ V.T


def quadraticize(game, traj, psd_shift=1e-3):
    """Second-order cost data along ``traj`` in deviation coordinates.

    Returns ``(Q, q, R, r)`` shaped like :class:`LqGame` fields. ``Q`` is
    projected onto the PSD cone and each ``R^ii`` is shifted so its smallest
    eigenvalue is at least ``psd_shift``. State-control cross terms are
    dropped.
    """
    d = game.dims
    N, T, m, n = d.n_players, d.horizon, d.m, d.n
    Q = np.zeros((N, T + 1, m, m))
    q = np.zeros((N, T + 1, m))
    R = np.zeros((N, T, n, n))
    r = np.zeros((N, T, n))
    for i in range(N):
        si = d.control_slice(i)
        for k in range(T):
            _, gx, gu, Hxx, Huu = game.stage_cost_derivatives(i, k, traj.x[k], traj.u[k])
            Q[i, k] = project_psd(Hxx)
            q[i, k] = gx
            Huu = 0.5 * (Huu + Huu.T)
            Rii = Huu[si, si]
            lo = np.linalg.eigvalsh(Rii)[0]
            if lo < psd_shift:
                Huu[si, si] = Rii + (psd_shift - lo) * np.eye(Rii.shape[0])
            R[i, k] = Huu
            r[i, k] = gu
        _, gx, Hxx = game.terminal_cost_derivatives(i, traj.x[T])
        Q[i, T] = project_psd(Hxx)
        q[i, T] = gx
    return Q, q, R, r


def lq_approximation(game, traj, psd_shift=1e-3):
    """LQ game in deviations ``(x - x_bar, u - u_bar)`` around ``traj``."""
    A, B = linearize(game, traj)
    Q, q, R, r = quadraticize(game, traj, psd_shift)
    return LqGame(game.dims, A, B, Q, q, R, r, np.zeros(game.dims.m), validate=False)


def _step(game, op, settings, weights, eta_max=1.0):
    lq = lq_approximation(game, op, settings.psd_shift)
    report = sparsedp.solve_regularized(lq, weights, backend=settings.backend,
                                        tol=settings.gl_tol, ridge=True)
    eta = eta_max
    while True:
        new = forward_simulate(game, report.strategies, op, eta)
        dev = float(np.max(np.abs(new.x - op.x)))
        if dev <= settings.trust_radius or eta <= settings.min_step:
            break
        eta *= 0.5
    return new, report, eta


def _update_step_cap(settings, eta_max, delta, prev_delta):
    if not settings.adaptive_step or prev_delta is None:
        return eta_max
    if np.sum(delta * prev_delta) < 0:
        return max(eta_max * settings.step_shrink, settings.min_step)
    return min(eta_max * settings.step_grow, 1.0)


def solve_ilq(game, settings=None, initial_strategies=None, raise_on_failure=False):
    """Iterate LQ approximations until the trajectory stops moving.

    Returns an :class:`IlqResult`; ``result.converged`` tells whether the
    max-norm trajectory change fell below ``settings.convergence_tol``.
    With ``raise_on_failure`` a :class:`NotConverged` error is raised
    instead of returning an unconverged result.
    """
    settings = settings or IlqSettings()
    d = game.dims
    weights = settings.weights or RegularizationWeights.uniform(d.n_players, 0.0)
    strategies = initial_strategies or AffineStrategyProfile.zeros(d)
    op = forward_simulate(game, strategies, zero_operating_point(game))
    history = []
    converged = False
    report = None
    eta_max = 1.0
    prev_delta = None
    for it in range(1, settings.max_outer_iters + 1):
        new, report, eta = _step(game, op, settings, weights, eta_max)
        delta = new.x - op.x
        change = float(np.max(np.abs(delta)))
        _, counts = sparsedp.sparsity_pattern(report.strategies)
        history.append(IlqIteration(
            iteration=it, step_size=eta, max_step=eta_max, trajectory_change=change,
            costs=game.total_costs(new), nonzero_blocks=counts.mean(axis=0),
            max_kkt=float(np.max(report.kkt)),
        ))
        log.debug("iLQ iter %d: eta=%.4f change=%.3e", it, eta, change)
        eta_max = _update_step_cap(settings, eta_max, delta, prev_delta)
        prev_delta = delta
        op = new
        if change <= settings.convergence_tol:
            converged = True
            break
    P = report.strategies.P
    alpha = report.strategies.alpha * history[-1].step_size
    result = IlqResult(AffineStrategyProfile(d, P, alpha), op, converged, history, report)
    if not converged and raise_on_failure:
        raise NotConverged(
            f"iLQ did not converge in {settings.max_outer_iters} iterations "
            f"(last change {history[-1].trajectory_change:.3e})", trace=history)
    return result


def check_derivatives(game, n_points=100, rel_step=1e-5, rng=None, sampler=None):
    """Largest relative mismatch between oracles and central differences.

    ``sampler(rng) -> (k, x, u)`` draws evaluation points; by default states
    and controls are standard normal. Returns a dict of worst errors for the
    dynamics Jacobian, cost gradients and cost Hessians.
    """
    rng = np.random.default_rng(rng)
    d = game.dims
    if sampler is None:
        def sampler(rng):
            return int(rng.integers(d.horizon)), rng.normal(size=d.m), rng.normal(size=d.n)

    def rel(a, b):
        return float(np.max(np.abs(a - b)) / (1.0 + np.max(np.abs(b))))

    worst = {"jacobian": 0.0, "gradient": 0.0, "hessian": 0.0}
    for _ in range(n_points):
        k, x, u = sampler(rng)
        z = np.concatenate([x, u])
        h = rel_step * (1.0 + np.abs(z))
        A, B = game.dynamics_jacobian(k, x, u)
        J = np.hstack([A, B])
        Jfd = np.empty_like(J)
        for a in range(len(z)):
            e = np.zeros_like(z)
            e[a] = h[a]
            fp = game.dynamics(k, *np.split(z + e, [d.m]))
            fm = game.dynamics(k, *np.split(z - e, [d.m]))
            Jfd[:, a] = (fp - fm) / (2 * h[a])
        worst["jacobian"] = max(worst["jacobian"], rel(J, Jfd))
        for i in range(d.n_players):
            _, gx, gu, Hxx, Huu = game.stage_cost_derivatives(i, k, x, u)
            g = np.concatenate([gx, gu])
            gfd = np.empty_like(g)
            Hfd = np.empty((len(z), len(z)))
            for a in range(len(z)):
                e = np.zeros_like(z)
                e[a] = h[a]
                zp, zm = z + e, z - e
                gfd[a] = (game.stage_cost(i, k, *np.split(zp, [d.m]))
                          - game.stage_cost(i, k, *np.split(zm, [d.m]))) / (2 * h[a])
                gp = np.concatenate(game.stage_cost_derivatives(i, k, *np.split(zp, [d.m]))[1:3])
                gm = np.concatenate(game.stage_cost_derivatives(i, k, *np.split(zm, [d.m]))[1:3])
                Hfd[:, a] = (gp - gm) / (2 * h[a])
            worst["gradient"] = max(worst["gradient"], rel(g, gfd))
            worst["hessian"] = max(worst["hessian"], rel(Hxx, Hfd[:d.m, :d.m]),
                                   rel(Huu, Hfd[d.m:, d.m:]))
    return worst
