"""Ready-made games: multi-agent unicycle navigation and a 3-robot formation.

Navigation (non-LQ), per player ``x = [px, py, phi, v]``, ``u = [omega, a]``,
stage cost::

    1{t > t_active} * 1/2 (x - x_goal)' diag(300, 300, 300, 0) (x - x_goal)
    + 1/2 * 30 v^2 + 50 soft(v, -0.05, 2)
    + sum_{j != i} 50 max(0, d_min - ||p_i - p_j||)^2
    + 1/2 u' diag(10, 10) u + 50 soft(omega, -pi/18, pi/18) + 50 soft(a, -9.81, 9.81)

Formation (LQ), per player ``x = [px, vx, py, vy]``, ``u = [ax, ay]``: player
1 tracks ``[30 cos(t dt), 30 sin(3 t dt)]`` with weight 1000; players 2 and 3
hold an isosceles triangle (width 4 m, height 2 m) relative to both others
with weight 1000; every player pays ``1/2 ||u||^2``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError
from .gamecore import Dims, LqGame

# ---------------------------------------------------------------------------
# elementary pieces


def soft_constraint(r, lo, hi):
    """Quadratic penalty outside ``[lo, hi]``, zero inside."""
    if lo > hi:
        raise ValueError("soft_constraint needs lo <= hi")
    if r < lo:
        return (r - lo) ** 2
    if r > hi:
        return (r - hi) ** 2
    return 0.0


def soft_constraint_derivs(r, lo, hi):
    """First and second derivative of :func:`soft_constraint` in ``r``."""
    if r < lo:
        return 2.0 * (r - lo), 2.0
    if r > hi:
        return 2.0 * (r - hi), 2.0
    return 0.0, 0.0


def unicycle_step(x, u, dt):
    """Explicit Euler step of the unicycle ``[px, py, phi, v]``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    px, py, phi, v = x
    omega, a = u
    return np.array([
        px + dt * v * math.cos(phi),
        py + dt * v * math.sin(phi),
        phi + dt * omega,
        v + dt * a,
    ])


def unicycle_jacobian(x, u, dt):
    _, _, phi, v = x
    c, s = math.cos(phi), math.sin(phi)
    A = np.array([
        [1.0, 0.0, -dt * v * s, dt * c],
        [0.0, 1.0, dt * v * c, dt * s],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ])
    B = np.array([[0.0, 0.0], [0.0, 0.0], [dt, 0.0], [0.0, dt]])
    return A, B


def double_integrator_matrices(dt):
    """Zero-order-hold planar double integrator on ``[px, vx, py, vy]``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    Ad = np.array([[1.0, dt], [0.0, 1.0]])
    Bd = np.array([[0.5 * dt * dt], [dt]])
    A = np.kron(np.eye(2), Ad)
    B = np.kron(np.eye(2), Bd)
    return A, B


def double_integrator_step(x, u, dt):
    A, B = double_integrator_matrices(dt)
    return A @ np.asarray(x, dtype=float) + B @ np.asarray(u, dtype=float)


# ---------------------------------------------------------------------------
# configs


def _default_circle(n_players, radius=5.0, jitter_deg=None):
    # Small angular offsets keep the paths from all meeting at the centre
    # at the same instant.
    if jitter_deg is None:
        jitter_deg = [7.0 * ((k * 5) % 4) - 10.0 for k in range(n_players)]
    starts, goals = [], []
    for k in range(n_players):
        ang = 2.0 * math.pi * k / n_players + math.radians(jitter_deg[k])
        p0 = radius * np.array([math.cos(ang), math.sin(ang)])
        pg = -p0
        heading = math.atan2(pg[1] - p0[1], pg[0] - p0[0])
        starts.append([p0[0], p0[1], heading, 0.0])
        goals.append([pg[0], pg[1], heading, 0.0])
    return starts, goals


@dataclass(frozen=True)
class NavigationConfig:
    n_players: int = 4
    initial_states: tuple = None  # per player (px, py, phi, v)
    goals: tuple = None  # per player (px, py, phi, v)
    horizon: int = 150
    total_time: float = 15.0
    d_min: float = 0.5
    active_fraction: float = 0.99
    goal_weight: float = 300.0
    velocity_weight: float = 30.0
    soft_weight: float = 50.0
    proximity_weight: float = 50.0
    control_weight: float = 10.0
    v_bounds: tuple = (-0.05, 2.0)
    omega_bounds: tuple = (-math.pi / 18, math.pi / 18)
    accel_bounds: tuple = (-9.81, 9.81)
    overrides: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.n_players < 1 or self.horizon < 1 or self.total_time <= 0:
            raise ConfigError("navigation config needs n_players >= 1, horizon >= 1, total_time > 0")
        if self.initial_states is None or self.goals is None:
            s, g = _default_circle(self.n_players)
            object.__setattr__(self, "initial_states", tuple(map(tuple, s)) if self.initial_states is None else self.initial_states)
            object.__setattr__(self, "goals", tuple(map(tuple, g)) if self.goals is None else self.goals)
        for name in ("initial_states", "goals"):
            val = np.asarray(getattr(self, name), dtype=float)
            if val.shape != (self.n_players, 4):
                raise ConfigError(f"{name} must be {self.n_players} x 4, got {val.shape}")
            object.__setattr__(self, name, tuple(map(tuple, val.tolist())))
        for name in ("v_bounds", "omega_bounds", "accel_bounds"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: lower bound exceeds upper bound")
        if self.d_min < 0:
            raise ConfigError("d_min must be nonnegative")

    @property
    def dt(self):
        return self.total_time / self.horizon

    @property
    def t_active(self):
        return self.active_fraction * self.total_time

    def metadata(self):
        meta = asdict(self)
        meta["dt"] = self.dt
        return meta


@dataclass(frozen=True)
class FormationConfig:
    n_players: int = 3
    dt: float = 0.05
    horizon: int = 250
    amplitude: float = 30.0
    tracking_weight: float = 1000.0
    formation_weight: float = 1000.0
    control_weight: float = 1.0
    width: float = 4.0
    height: float = 2.0
    initial_positions: tuple = ((0.0, 0.0), (-2.0, -2.0), (2.0, -2.0))
    overrides: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.n_players != 3:
            raise ConfigError("the formation game is defined for exactly 3 players")
        if self.dt <= 0 or self.horizon < 1:
            raise ConfigError("formation config needs dt > 0 and horizon >= 1")
        pos = np.asarray(self.initial_positions, dtype=float)
        if pos.shape != (3, 2):
            raise ConfigError("initial_positions must be 3 x 2")
        object.__setattr__(self, "initial_positions", tuple(map(tuple, pos.tolist())))

    def offsets(self):
        """Triangle vertices relative to player 1 (the apex)."""
        w, h = self.width, self.height
        return np.array([[0.0, 0.0], [-w / 2, -h], [w / 2, -h]])

    def target(self, t):
        """Reference position for 1-based stage ``t``."""
        a = self.amplitude
        return np.array([a * math.cos(t * self.dt), a * math.sin(3 * t * self.dt)])

    def metadata(self):
        meta = asdict(self)
        return meta


def config_from_dict(cls, data):
    """Build a config from a JSON object, recording which fields were set."""
    names = {f.name for f in fields(cls)} - {"overrides"}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kwargs = {k: (tuple(map(tuple, v)) if isinstance(v, list) and v and isinstance(v[0], list)
                  else tuple(v) if isinstance(v, list) else v) for k, v in data.items()}
    try:
        return cls(**kwargs, overrides=tuple(sorted(kwargs)))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# formation game (exact LQ)


def formation_state(positions, velocities=None):
    """Joint state ``[px, vx, py, vy]`` per player from positions."""
    pos = np.asarray(positions, dtype=float).reshape(3, 2)
    vel = np.zeros((3, 2)) if velocities is None else np.asarray(velocities, dtype=float).reshape(3, 2)
    return np.column_stack([pos[:, 0], vel[:, 0], pos[:, 1], vel[:, 1]]).ravel()


def _pos_index(i):
    return (4 * i, 4 * i + 2)


def formation_cost_data(cfg, t):
    """``(Q, q, c)`` for all players at 1-based stage ``t``.

    Shapes (3, 12, 12), (3, 12), (3,). ``c`` is the constant dropped by the
    LQ cost form; adding it recovers the squared tracking/formation error.
    """
    m = 12
    Q = np.zeros((3, m, m))
    q = np.zeros((3, m))
    c = np.zeros(3)
    w1 = cfg.tracking_weight
    g = cfg.target(t)
    for ax, idx in enumerate(_pos_index(0)):
        Q[0, idx, idx] += w1
        q[0, idx] -= w1 * g[ax]
    c[0] = 0.5 * w1 * g @ g
    wf = cfg.formation_weight
    off = cfg.offsets()
    for i in (1, 2):
        for j in range(3):
            if j == i:
                continue
            # || p_i - p_j + delta ||^2 with delta = off_j - off_i
            delta = off[j] - off[i]
            for ax in range(2):
                a, b = _pos_index(i)[ax], _pos_index(j)[ax]
                Q[i, a, a] += wf
                Q[i, b, b] += wf
                Q[i, a, b] -= wf
                Q[i, b, a] -= wf
                q[i, a] += wf * delta[ax]
                q[i, b] -= wf * delta[ax]
            c[i] += 0.5 * wf * delta @ delta
    return Q, q, c


def build_formation_game(cfg=None, x1=None):
    """Time-varying LQ game of the formation task.

    Costs are charged at stages ``1..T`` only; the terminal cost is zero.
    """
    cfg = cfg or FormationConfig()
    T = cfg.horizon
    dims = Dims((4, 4, 4), (2, 2, 2), T)
    Ai, Bi = double_integrator_matrices(cfg.dt)
    A = np.kron(np.eye(3), Ai)
    B = np.kron(np.eye(3), Bi)
    Q = np.zeros((3, T + 1, 12, 12))
    q = np.zeros((3, T + 1, 12))
    for k in range(T):
        Q[:, k], q[:, k], _ = formation_cost_data(cfg, k + 1)
    R = np.zeros((3, T, 6, 6))
    for i in range(3):
        R[i, :, 2 * i:2 * i + 2, 2 * i:2 * i + 2] = cfg.control_weight * np.eye(2)
    if x1 is None:
        x1 = formation_state(cfg.initial_positions)
    return LqGame(
        dims, np.broadcast_to(A, (T, 12, 12)), np.broadcast_to(B, (T, 12, 6)),
        Q, q, R, np.zeros((3, T, 6)), np.asarray(x1, dtype=float),
    )


def formation_cost_offsets(cfg=None):
    """Per-player constant that turns an LQ-form cost into the squared error."""
    cfg = cfg or FormationConfig()
    return sum(formation_cost_data(cfg, k + 1)[2] for k in range(cfg.horizon))


# ---------------------------------------------------------------------------
# navigation game (non-LQ)


class NavigationCosts:
    """Stage/terminal costs of the navigation game with analytic derivatives."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.N = cfg.n_players
        self.goals = np.asarray(cfg.goals, dtype=float)
        self.goal_diag = np.array([1.0, 1.0, 1.0, 0.0]) * cfg.goal_weight

    def goal_active(self, k):
        # stage k (0-based) happens at time k * dt
        return k * self.cfg.dt > self.cfg.t_active

    def _state_terms(self, i, k, x, grad=None, hess=None):
        """Value of the state-dependent terms; adds derivatives if arrays are given."""
        cfg = self.cfg
        derivs = grad is not None
        X = x.reshape(self.N, 4)
        xi = X[i]
        s = slice(4 * i, 4 * i + 4)
        val = 0.0
        if self.goal_active(k):
            e = xi - self.goals[i]
            val += 0.5 * e @ (self.goal_diag * e)
            if derivs:
                grad[s] += self.goal_diag * e
                hess[s, s] += np.diag(self.goal_diag)
        v = xi[3]
        val += 0.5 * cfg.velocity_weight * v * v + cfg.soft_weight * soft_constraint(v, *cfg.v_bounds)
        if derivs:
            d1, d2 = soft_constraint_derivs(v, *cfg.v_bounds)
            grad[4 * i + 3] += cfg.velocity_weight * v + cfg.soft_weight * d1
            hess[4 * i + 3, 4 * i + 3] += cfg.velocity_weight + cfg.soft_weight * d2
        w = cfg.proximity_weight
        for j in range(self.N):
            if j == i:
                continue
            diff = xi[:2] - X[j, :2]
            dist = math.hypot(diff[0], diff[1])
            gap = cfg.d_min - dist
            if gap <= 0.0:
                continue
            val += w * gap * gap
            if not derivs:
                continue
            if dist < 1e-9:
                # Direction is undefined at coincidence; use curvature only.
                H = 2.0 * w * np.eye(2)
                g = np.zeros(2)
            else:
                unit = diff / dist
                uu = np.outer(unit, unit)
                g = -2.0 * w * gap * unit
                H = 2.0 * w * uu - 2.0 * w * gap / dist * (np.eye(2) - uu)
            a, b = slice(4 * i, 4 * i + 2), slice(4 * j, 4 * j + 2)
            grad[a] += g
            grad[b] -= g
            hess[a, a] += H
            hess[b, b] += H
            hess[a, b] -= H
            hess[b, a] -= H
        return val

    def _control_value(self, ui):
        cfg = self.cfg
        val = 0.5 * cfg.control_weight * (ui[0] * ui[0] + ui[1] * ui[1])
        val += cfg.soft_weight * soft_constraint(ui[0], *cfg.omega_bounds)
        val += cfg.soft_weight * soft_constraint(ui[1], *cfg.accel_bounds)
        return val

    def stage(self, i, k, x, u):
        x = np.asarray(x, dtype=float)
        ui = np.asarray(u, dtype=float)[2 * i:2 * i + 2]
        return self._state_terms(i, k, x) + self._control_value(ui)

    def stage_derivatives(self, i, k, x, u):
        """``(value, g_x, g_u, H_xx, H_uu)`` of player ``i``'s stage cost."""
        cfg = self.cfg
        m, n = 4 * self.N, 2 * self.N
        gx = np.zeros(m)
        Hxx = np.zeros((m, m))
        gu = np.zeros(n)
        Huu = np.zeros((n, n))
        val = self._state_terms(i, k, np.asarray(x, dtype=float), gx, Hxx)
        ui = np.asarray(u, dtype=float)[2 * i:2 * i + 2]
        cw = cfg.control_weight
        val += 0.5 * cw * ui @ ui
        gu[2 * i:2 * i + 2] += cw * ui
        Huu[2 * i:2 * i + 2, 2 * i:2 * i + 2] += cw * np.eye(2)
        for comp, bounds in ((0, cfg.omega_bounds), (1, cfg.accel_bounds)):
            val += cfg.soft_weight * soft_constraint(ui[comp], *bounds)
            d1, d2 = soft_constraint_derivs(ui[comp], *bounds)
            gu[2 * i + comp] += cfg.soft_weight * d1
            Huu[2 * i + comp, 2 * i + comp] += cfg.soft_weight * d2
        return val, gx, gu, Hxx, Huu

    def terminal(self, i, x):
        return self._state_terms(i, self.cfg.horizon, np.asarray(x, dtype=float))

    def terminal_derivatives(self, i, x):
        m = 4 * self.N
        gx = np.zeros(m)
        Hxx = np.zeros((m, m))
        val = self._state_terms(i, self.cfg.horizon, np.asarray(x, dtype=float), gx, Hxx)
        return val, gx, Hxx


def navigation_dynamics(cfg):
    N, dt = cfg.n_players, cfg.dt

    def step(k, x, u):
        X = np.asarray(x, dtype=float).reshape(N, 4)
        U = np.asarray(u, dtype=float).reshape(N, 2)
        return np.concatenate([unicycle_step(X[i], U[i], dt) for i in range(N)])

    def jacobian(k, x, u):
        X = np.asarray(x, dtype=float).reshape(N, 4)
        U = np.asarray(u, dtype=float).reshape(N, 2)
        A = np.zeros((4 * N, 4 * N))
        B = np.zeros((4 * N, 2 * N))
        for i in range(N):
            Ai, Bi = unicycle_jacobian(X[i], U[i], dt)
            A[4 * i:4 * i + 4, 4 * i:4 * i + 4] = Ai
            B[4 * i:4 * i + 4, 2 * i:2 * i + 2] = Bi
        return A, B

    return step, jacobian


def build_navigation_game(cfg=None):
    from .ilqgames import NonLqGame

    cfg = cfg or NavigationConfig()
    N = cfg.n_players
    dims = Dims((4,) * N, (2,) * N, cfg.horizon)
    costs = NavigationCosts(cfg)
    step, jac = navigation_dynamics(cfg)
    return NonLqGame(
        dims=dims,
        dynamics=step,
        dynamics_jacobian=jac,
        stage_cost=costs.stage,
        stage_cost_derivatives=costs.stage_derivatives,
        terminal_cost=costs.terminal,
        terminal_cost_derivatives=costs.terminal_derivatives,
        x1=np.asarray(cfg.initial_states, dtype=float).ravel(),
    )


SCENARIOS = {
    "navigation4": lambda: NavigationConfig(n_players=4),
    "navigation8": lambda: NavigationConfig(n_players=8),
    "formation3": lambda: FormationConfig(),
}
