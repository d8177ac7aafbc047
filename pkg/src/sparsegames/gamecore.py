"""Core data types for N-player linear-quadratic games.

Stages are 1-based in the math (``t = 1..T`` for controls, ``T+1`` for the
terminal state) and 0-based in storage: array index ``k`` holds stage
``t = k + 1``. State-indexed arrays therefore have ``T + 1`` entries and
control-indexed arrays ``T`` entries.

Cost convention, per player ``i``::

    J^i = sum_t [ 1/2 x_t' Q_t^i x_t + q_t^i' x_t
                  + sum_j (1/2 u_t^j' R_t^ij u_t^j + r_t^ij' u_t^j) ]
          + 1/2 x_{T+1}' Q_{T+1}^i x_{T+1} + q_{T+1}^i' x_{T+1}

so ``q`` multiplies ``x`` once (the familiar ``1/2 (x'Q + 2q')x`` form).
There are no constant terms: a tracking cost ``1/2 w ||p - g||^2`` enters as
``Q = w I, q = -w g`` and differs from the squared error by ``1/2 w ||g||^2``.

Player control costs are stored as joint ``n x n`` block-diagonal matrices:
``R[i, k]`` carries ``R^{ij}`` in diagonal block ``(j, j)`` and ``r[i, k]``
stacks the ``r^{ij}``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError

PSD_TOL = 1e-8
PD_TOL = 1e-10


def symmetrize(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dims:
    """Per-player state/control sizes and the horizon."""

    state_dims: tuple
    control_dims: tuple
    horizon: int

    def __post_init__(self):
        object.__setattr__(self, "state_dims", tuple(int(d) for d in self.state_dims))
        object.__setattr__(self, "control_dims", tuple(int(d) for d in self.control_dims))
        if len(self.state_dims) < 1 or len(self.state_dims) != len(self.control_dims):
            raise ConfigError("state_dims and control_dims must be nonempty and equal length")
        if min(self.state_dims) < 1 or min(self.control_dims) < 1:
            raise ConfigError("all per-player dimensions must be >= 1")
        if int(self.horizon) < 1:
            raise ConfigError("horizon must be >= 1")
        object.__setattr__(self, "horizon", int(self.horizon))

    @property
    def n_players(self):
        return len(self.state_dims)

    @property
    def m(self):
        return sum(self.state_dims)

    @property
    def n(self):
        return sum(self.control_dims)

    @cached_property
    def state_offsets(self):
        return np.concatenate([[0], np.cumsum(self.state_dims)]).astype(int)

    @cached_property
    def control_offsets(self):
        return np.concatenate([[0], np.cumsum(self.control_dims)]).astype(int)

    @cached_property
    def _state_slices(self):
        o = self.state_offsets
        return tuple(slice(int(o[j]), int(o[j + 1])) for j in range(self.n_players))

    @cached_property
    def _control_slices(self):
        o = self.control_offsets
        return tuple(slice(int(o[i]), int(o[i + 1])) for i in range(self.n_players))

    def _check_player(self, i):
        if not 0 <= i < self.n_players:
            raise IndexError(f"player index {i} out of range for N={self.n_players}")

    def state_slice(self, j):
        self._check_player(j)
        return self._state_slices[j]

    def control_slice(self, i):
        self._check_player(i)
        return self._control_slices[i]


def block_norms(M, dims):
    """Frobenius norms of the player blocks of ``n x m`` matrices.

    Leading axes are kept: ``(..., n, m)`` maps to ``(..., N, N)``.
    """
    sq = np.asarray(M, dtype=float) ** 2
    sq = np.add.reduceat(sq, dims.control_offsets[:-1], axis=-2)
    sq = np.add.reduceat(sq, dims.state_offsets[:-1], axis=-1)
    return np.sqrt(sq)


def expand_blocks(W, dims):
    """Broadcast an ``N x N`` per-block array to the ``n x m`` entry layout."""
    W = np.repeat(np.asarray(W), dims.control_dims, axis=0)
    return np.repeat(W, dims.state_dims, axis=1)


def block_view(P, dims, i, j):
    """Return the ``n_i x m_j`` block of a gain acting on player ``j``'s state.

    ``P`` is either the stacked ``n x m`` gain or player ``i``'s own
    ``n_i x m`` gain. The result is a numpy view, so writes go through to
    ``P``.
    """
    dims._check_player(i)
    dims._check_player(j)
    if P.shape[1] != dims.m:
        raise DimensionError(f"gain has {P.shape[1]} columns, expected m={dims.m}")
    cols = dims.state_slice(j)
    if P.shape[0] == dims.n:
        return P[dims.control_slice(i), cols]
    if P.shape[0] == dims.control_dims[i]:
        return P[:, cols]
    raise DimensionError(f"gain has {P.shape[0]} rows; expected {dims.n} or {dims.control_dims[i]}")


@dataclass(frozen=True)
class LqGame:
    """Time-varying LQ game data; see the module docstring for layout."""

    dims: Dims
    A: np.ndarray  # (T, m, m)
    B: np.ndarray  # (T, m, n), column blocks per player
    Q: np.ndarray  # (N, T+1, m, m)
    q: np.ndarray  # (N, T+1, m)
    R: np.ndarray  # (N, T, n, n), block diagonal
    r: np.ndarray  # (N, T, n)
    x1: np.ndarray  # (m,)
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        d = self.dims
        N, T, m, n = d.n_players, d.horizon, d.m, d.n
        shapes = {
            "A": (T, m, m), "B": (T, m, n), "Q": (N, T + 1, m, m),
            "q": (N, T + 1, m), "R": (N, T, n, n), "r": (N, T, n),
            "x1": (m,),
        }
        for name, shape in shapes.items():
            a = np.asarray(getattr(self, name), dtype=float)
            if a.shape != shape:
                raise DimensionError(f"{name} has shape {a.shape}, expected {shape}")
        Q = symmetrize(np.asarray(self.Q, dtype=float))
        R = symmetrize(np.asarray(self.R, dtype=float))
        # R^i is block diagonal over controls; drop anything else.
        mask = np.zeros((n, n), dtype=bool)
        for j in range(N):
            s = d.control_slice(j)
            mask[s, s] = True
        R = np.where(mask, R, 0.0)
        object.__setattr__(self, "Q", _frozen(Q))
        object.__setattr__(self, "R", _frozen(R))
        for name in ("A", "B", "q", "r", "x1"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if self.validate:
            self._check_convexity()

    def _check_convexity(self):
        d = self.dims
        eq = np.linalg.eigvalsh(self.Q)
        scale = np.maximum(1.0, np.abs(eq).max(axis=-1))
        bad = np.argwhere(eq.min(axis=-1) < -PSD_TOL * scale)
        if len(bad):
            i, k = bad[0]
            raise ConfigError(
                f"Q is not PSD (player {i}, stage {k + 1}, min eig {eq[i, k].min():.3e})"
            )
        for i in range(d.n_players):
            s = d.control_slice(i)
            er = np.linalg.eigvalsh(self.R[i, :, s, s]).min(axis=-1)
            if er.min() <= PD_TOL:
                k = int(np.argmin(er))
                raise ConfigError(
                    f"R^ii is not positive definite (player {i}, stage {k + 1}, "
                    f"min eig {er[k]:.3e})"
                )

    def B_player(self, k, i):
        return self.B[k][:, self.dims.control_slice(i)]

    def R_block(self, i, j, k):
        s = self.dims.control_slice(j)
        return self.R[i, k, s, s]

    def r_block(self, i, j, k):
        return self.r[i, k, self.dims.control_slice(j)]

    def replace(self, **changes):
        fields = dict(dims=self.dims, A=self.A, B=self.B, Q=self.Q, q=self.q,
                      R=self.R, r=self.r, x1=self.x1, validate=self.validate)
        fields.update(changes)
        return LqGame(**fields)


@dataclass(frozen=True)
class AffineStrategyProfile:
    """Stacked feedback gains ``P[k]`` (n x m) and offsets ``alpha[k]`` (n,).

    Player ``i`` plays ``u^i = -P^i x - alpha^i`` where ``P^i`` is the
    ``control_slice(i)`` rows of ``P[k]``.
    """

    dims: Dims
    P: np.ndarray  # (T, n, m)
    alpha: np.ndarray  # (T, n)

    def __post_init__(self):
        d = self.dims
        if np.shape(self.P) != (d.horizon, d.n, d.m):
            raise DimensionError(f"P has shape {np.shape(self.P)}, expected {(d.horizon, d.n, d.m)}")
        if np.shape(self.alpha) != (d.horizon, d.n):
            raise DimensionError(f"alpha has shape {np.shape(self.alpha)}, expected {(d.horizon, d.n)}")
        object.__setattr__(self, "P", _frozen(self.P))
        object.__setattr__(self, "alpha", _frozen(self.alpha))

    @classmethod
    def zeros(cls, dims):
        return cls(dims, np.zeros((dims.horizon, dims.n, dims.m)), np.zeros((dims.horizon, dims.n)))

    def gain(self, k, i):
        return self.P[k][self.dims.control_slice(i)]

    def offset(self, k, i):
        return self.alpha[k][self.dims.control_slice(i)]

    def block(self, k, i, j):
        return block_view(self.P[k], self.dims, i, j)


@dataclass(frozen=True)
class ValueProfile:
    """Quadratic value data ``V_t^i(x) = 1/2 x'Z x + eta'x + beta``."""

    Z: np.ndarray  # (N, T+1, m, m)
    eta: np.ndarray  # (N, T+1, m)
    beta: np.ndarray  # (N, T+1)

    def __post_init__(self):
        object.__setattr__(self, "Z", _frozen(symmetrize(np.asarray(self.Z, dtype=float))))
        object.__setattr__(self, "eta", _frozen(self.eta))
        object.__setattr__(self, "beta", _frozen(self.beta))

    def cost_to_go(self, i, k, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * x @ self.Z[i, k] @ x + self.eta[i, k] @ x + self.beta[i, k]


@dataclass(frozen=True)
class Trajectory:
    x: np.ndarray  # (T+1, m)
    u: np.ndarray  # (T, n)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        u = np.asarray(self.u, dtype=float)
        if x.ndim != 2 or u.ndim != 2 or x.shape[0] != u.shape[0] + 1:
            raise DimensionError(f"trajectory shapes x{x.shape}, u{u.shape} are inconsistent")
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "u", _frozen(u))


@dataclass(frozen=True)
class RegularizationWeights:
    """Nonnegative N x N block weights for the group penalty."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ConfigError(f"regularization weights must be square, got {w.shape}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ConfigError("regularization weights must be finite and nonnegative")
        object.__setattr__(self, "weights", _frozen(w))

    @classmethod
    def uniform(cls, n_players, lam):
        """``lam`` on every off-diagonal block, zero on the diagonal."""
        w = np.full((n_players, n_players), float(lam))
        np.fill_diagonal(w, 0.0)
        return cls(w)

    @property
    def n_players(self):
        return self.weights.shape[0]

    @property
    def total(self):
        return float(self.weights.sum())

    def is_zero(self):
        return not np.any(self.weights)


def rollout(game, strategies):
    """Simulate the linear dynamics under affine feedback from ``game.x1``."""
    d = game.dims
    if strategies.dims != d:
        raise DimensionError("strategy dimensions do not match the game")
    T = d.horizon
    x = np.empty((T + 1, d.m))
    u = np.empty((T, d.n))
    x[0] = game.x1
    for k in range(T):
        u[k] = -strategies.P[k] @ x[k] - strategies.alpha[k]
        x[k + 1] = game.A[k] @ x[k] + game.B[k] @ u[k]
    return Trajectory(x, u)


def stage_costs(game, traj, player):
    """Per-stage cost of ``player``; entry ``T`` is the terminal cost."""
    d = game.dims
    T = d.horizon
    if traj.x.shape != (T + 1, d.m) or traj.u.shape != (T, d.n):
        raise DimensionError(
            f"trajectory shapes x{traj.x.shape}, u{traj.u.shape} do not match game"
        )
    i = player
    d._check_player(i)
    x, u = traj.x, traj.u
    costs = (
        0.5 * np.einsum("ka,kab,kb->k", x, game.Q[i], x)
        + np.einsum("ka,ka->k", game.q[i], x)
    )
    costs[:T] += 0.5 * np.einsum("ka,kab,kb->k", u, game.R[i], u)
    costs[:T] += np.einsum("ka,ka->k", game.r[i], u)
    return costs


def eval_cost(game, traj, player):
    """Total cost ``J^i`` of a trajectory for one player (0-based index)."""
    return float(stage_costs(game, traj, player).sum())


# JSON game description ------------------------------------------------------

def _stagewise(value, count, shape, name, time_invariant):
    a = np.asarray(value, dtype=float)
    if time_invariant:
        if a.shape != shape:
            raise ConfigError(f"{name}: expected shape {shape}, got {a.shape}")
        return np.broadcast_to(a, (count,) + shape).copy()
    if a.shape != (count,) + shape:
        raise ConfigError(f"{name}: expected shape {(count,) + shape}, got {a.shape}")
    return a


def game_from_dict(spec):
    """Build an :class:`LqGame` from the JSON game-description format.

    Keys: ``state_dims``, ``control_dims``, ``horizon``, ``time_invariant``,
    ``A`` (m x m), ``B`` (list per player of m x n_i), ``Q``/``q`` (per
    player), optional ``Q_terminal``/``q_terminal`` (per player, default the
    stage data), ``R`` (per player, list over j of n_j x n_j), ``r`` (same
    nesting, vectors, default zeros), ``x1``. When ``time_invariant`` is
    false every stage-indexed entry gains a leading stage axis.
    """
    try:
        dims = Dims(spec["state_dims"], spec["control_dims"], spec["horizon"])
        ti = bool(spec.get("time_invariant", False))
        N, T, m, n = dims.n_players, dims.horizon, dims.m, dims.n
        A = _stagewise(spec["A"], T, (m, m), "A", ti)
        B = np.zeros((T, m, n))
        for i in range(N):
            B[:, :, dims.control_slice(i)] = _stagewise(
                spec["B"][i], T, (m, dims.control_dims[i]), f"B[{i}]", ti)
        Q = np.zeros((N, T + 1, m, m))
        q = np.zeros((N, T + 1, m))
        R = np.zeros((N, T, n, n))
        r = np.zeros((N, T, n))
        for i in range(N):
            Q[i, :T] = _stagewise(spec["Q"][i], T, (m, m), f"Q[{i}]", ti)
            if "q" in spec:
                q[i, :T] = _stagewise(spec["q"][i], T, (m,), f"q[{i}]", ti)
            Q[i, T] = spec["Q_terminal"][i] if "Q_terminal" in spec else Q[i, T - 1]
            q[i, T] = spec["q_terminal"][i] if "q_terminal" in spec else q[i, T - 1]
            for j in range(N):
                s = dims.control_slice(j)
                nj = dims.control_dims[j]
                R[i, :, s, s] = _stagewise(spec["R"][i][j], T, (nj, nj), f"R[{i}][{j}]", ti)
                if "r" in spec:
                    r[i, :, s] = _stagewise(spec["r"][i][j], T, (nj,), f"r[{i}][{j}]", ti)
        x1 = np.asarray(spec["x1"], dtype=float)
        return LqGame(dims, A, B, Q, q, R, r, x1)
    except (KeyError, IndexError, TypeError) as exc:
        raise ConfigError(f"malformed game description: {exc!r}") from exc


def game_to_dict(game):
    """Serialize to the time-varying form of the JSON format."""
    d = game.dims
    N = d.n_players
    return {
        "state_dims": list(d.state_dims),
        "control_dims": list(d.control_dims),
        "horizon": d.horizon,
        "time_invariant": False,
        "A": game.A.tolist(),
        "B": [game.B[:, :, d.control_slice(i)].tolist() for i in range(N)],
        "Q": [game.Q[i, :-1].tolist() for i in range(N)],
        "q": [game.q[i, :-1].tolist() for i in range(N)],
        "Q_terminal": [game.Q[i, -1].tolist() for i in range(N)],
        "q_terminal": [game.q[i, -1].tolist() for i in range(N)],
        "R": [[game.R[i][:, d.control_slice(j), d.control_slice(j)].tolist()
               for j in range(N)] for i in range(N)],
        "r": [[game.r[i][:, d.control_slice(j)].tolist() for j in range(N)] for i in range(N)],
        "x1": game.x1.tolist(),
    }


def load_game(path):
    path = Path(path)
    try:
        spec = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read game file {path}: {exc}") from exc
    return game_from_dict(spec)
