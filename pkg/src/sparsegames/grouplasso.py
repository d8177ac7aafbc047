"""Adaptive group Lasso over the block partition of a stacked gain matrix.

Solves::

    minimize  1/2 ||S P - Y||_F^2 + sum_{i,j} w_ij ||P^i[j]||_F

where ``P^i[j]`` is the block mapping player ``j``'s state to player ``i``'s
controls. Two independent backends are provided: cyclic block coordinate
descent with exact block minimization (``bcd``) and an explicit
second-order-cone epigraph program handed to Clarabel (``conic``).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, MaxIterExceeded, NumericalBreakdown, SolverFailure
from .gamecore import RegularizationWeights, block_norms, expand_blocks

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 10_000
RIDGE = 1e-9
CONIC_ZERO_RTOL = 1e-6


@dataclass(frozen=True)
class GroupLassoProblem:
    S: np.ndarray
    Y: np.ndarray
    dims: object
    weights: RegularizationWeights

    def __post_init__(self):
        d = self.dims
        S = np.asarray(self.S, dtype=float)
        Y = np.asarray(self.Y, dtype=float)
        if S.shape != (d.n, d.n) or Y.shape != (d.n, d.m):
            raise DimensionError(
                f"S{S.shape}/Y{Y.shape} do not match n={d.n}, m={d.m}"
            )
        w = self.weights
        if not isinstance(w, RegularizationWeights):
            w = RegularizationWeights(w)
        if w.n_players != d.n_players:
            raise DimensionError(f"weights are {w.n_players}x{w.n_players}, expected N={d.n_players}")
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class GroupLassoSolution:
    P_hat: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    backend: str


def objective(prob, P):
    val = 0.5 * np.sum((prob.S @ P - prob.Y) ** 2)
    return float(val + np.sum(prob.weights.weights * block_norms(P, prob.dims)))


def block_soft_threshold(G, kappa):
    """Proximal operator of ``kappa * ||.||_F``."""
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    G = np.asarray(G, dtype=float)
    norm = np.linalg.norm(G)
    if norm <= kappa:
        return np.zeros_like(G)
    return (1.0 - kappa / norm) * G


def certify_kkt(prob, P):
    """Worst block violation of the subgradient optimality conditions."""
    d = prob.dims
    w = prob.weights.weights
    G = prob.S.T @ (prob.S @ P - prob.Y)
    norms = block_norms(P, d)
    nonzero = norms > 0
    # Active blocks: ||G + w P / ||P|| ||; zero blocks: max(0, ||G|| - w).
    scale = np.divide(w, norms, out=np.zeros_like(norms), where=nonzero)
    active = block_norms(G + expand_blocks(scale, d) * P, d)
    inactive = np.maximum(0.0, block_norms(G, d) - w)
    return float(np.max(np.where(nonzero, active, inactive)))


def _group_norm_radii(h, wk, lam, max_newton=100):
    """Norms of the minimizers of ``1/2 X'HX - g'X + lam ||X||_F``, one per column.

    ``H = V diag(h) V'`` is shared; column ``j`` of ``wk`` holds the squared
    norms of the rows of ``V'g_j``. Every column must satisfy
    ``||g_j||_F > lam_j > 0``. The minimizer is ``(H + mu I)^{-1} g`` with
    ``mu = lam / ||X||``, so ``rho = ||X||`` solves
    ``sum_k w_k / (h_k rho + lam)^2 = 1``. The left side raised to the power
    -1/2 is concave and increasing in ``rho``, so Newton converges
    monotonically from any point below the root. We start from
    ``(||g|| - lam) / max(h)``, which is such a point and keeps the
    denominators away from zero when ``lam`` is tiny.
    """
    if np.any(np.all((h[:, None] <= 0) | (wk == 0), axis=0)):
        raise NumericalBreakdown("block Hessian is singular along the gradient")
    hc = h[:, None]
    rho = np.maximum((np.sqrt(wk.sum(axis=0)) - lam) / h.max(), 0.0)
    for _ in range(max_newton):
        den = hc * rho + lam
        t = wk / (den * den)
        s = t.sum(axis=0)
        ds = (t * hc / den).sum(axis=0)
        step = (s ** -0.5 - 1.0) / (s ** -1.5 * ds)
        rho = np.maximum(rho - step, 0.0)
        # Quadratic convergence: one more step would be below rounding.
        if np.all(np.abs(step) <= 1e-10 * rho):
            break
    return rho


def solve_bcd(prob, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, ridge=False, P0=None):
    """Cyclic block coordinate descent with exact block minimization.

    The objective separates over state-column blocks, so one sweep visits the
    control-row blocks in order and updates every column block of a row at
    once. Zero blocks come out as exact zeros. ``ridge`` adds ``1e-9 I`` to
    each block Hessian (needed only when ``S`` may be rank deficient);
    callers are responsible for warning about it. Raises
    :class:`MaxIterExceeded` (carrying the last iterate) if the KKT residual
    is still above ``tol`` after ``max_iter`` sweeps.
    """
    d = prob.dims
    w = prob.weights.weights
    S, Y = prob.S, prob.Y
    N = d.n_players
    col_starts = d.state_offsets[:-1]
    P = np.zeros((d.n, d.m)) if P0 is None else np.array(P0, dtype=float)
    kkt = certify_kkt(prob, P)
    if kkt <= tol:
        return GroupLassoSolution(P, objective(prob, P), kkt, 0, "bcd")

    rows = []
    for i in range(N):
        Si = S[:, d.control_slice(i)]
        H = Si.T @ Si
        if ridge:
            H = H + RIDGE * np.eye(H.shape[0])
        h, V = np.linalg.eigh(H)
        h = np.maximum(h, 0.0)
        inv_h = np.divide(1.0, h, out=np.zeros_like(h), where=h > 0)
        rows.append((d.control_slice(i), Si, H, h, V, inv_h))
    resid = S @ P - Y
    obj = objective(prob, P)
    sweeps = 0
    while kkt > tol:
        if sweeps >= max_iter:
            sol = GroupLassoSolution(P, obj, kkt, sweeps, "bcd")
            raise MaxIterExceeded(
                f"BCD stopped after {sweeps} sweeps with KKT residual {kkt:.3e}",
                residual=kkt, solution=sol,
            )
        for i, (r_i, Si, H, h, V, inv_h) in enumerate(rows):
            lam = w[i]
            X = P[r_i]
            G = H @ X - Si.T @ resid
            Gt = V.T @ G
            wk = np.add.reduceat(Gt * Gt, col_starts, axis=1)
            # coef[k, j] scales eigen-coordinate k of column block j.
            coef = np.zeros_like(wk)
            free = lam == 0.0
            coef[:, free] = inv_h[:, None]
            active = ~free & (np.sqrt(wk.sum(axis=0)) > lam)
            if np.any(active):
                la = lam[active]
                rho = _group_norm_radii(h, wk[:, active], la)
                coef[:, active] = rho / (h[:, None] * rho + la)
            Xn = V @ (np.repeat(coef, d.state_dims, axis=1) * Gt)
            resid += Si @ (Xn - X)
            P[r_i] = Xn
        sweeps += 1
        new_obj = objective(prob, P)
        if new_obj > obj + 1e-10 * (1.0 + abs(obj)):
            raise NumericalBreakdown(
                f"BCD objective increased from {obj:.12e} to {new_obj:.12e}"
            )
        obj = new_obj
        # Refresh the residual to stop drift from incremental updates.
        resid = S @ P - Y
        kkt = certify_kkt(prob, P)
    return GroupLassoSolution(P, obj, kkt, sweeps, "bcd")


def snap_small_blocks(prob, P, rtol=CONIC_ZERO_RTOL):
    """Zero out blocks whose norm is below ``rtol * (1 + ||P||_F)``."""
    d = prob.dims
    P = np.array(P, dtype=float)
    thresh = rtol * (1.0 + np.linalg.norm(P))
    for i in range(d.n_players):
        for j in range(d.n_players):
            b = P[d.control_slice(i), d.state_slice(j)]
            if np.linalg.norm(b) < thresh:
                b[...] = 0.0
    return P


def build_conic_program(prob):
    """Epigraph form with one second-order cone per penalized block."""
    import cvxpy as cp

    d = prob.dims
    n, m = d.n, d.m
    w = prob.weights.weights
    p = cp.Variable(n * m)  # column-major vec(P)
    K = np.kron(np.eye(m), prob.S)
    y = prob.Y.flatten(order="F")
    penalized = [(i, j) for i in range(d.n_players) for j in range(d.n_players) if w[i, j] > 0]
    s = cp.Variable(len(penalized)) if penalized else None
    cons = []
    for k, (i, j) in enumerate(penalized):
        r, c = d.control_slice(i), d.state_slice(j)
        idx = [cc * n + rr for cc in range(c.start, c.stop) for rr in range(r.start, r.stop)]
        cons.append(cp.SOC(s[k], p[idx]))
    obj = 0.5 * cp.sum_squares(K @ p - y)
    if penalized:
        obj = obj + np.array([w[i, j] for i, j in penalized]) @ s
    return cp.Problem(cp.Minimize(obj), cons), p, s


def solve_conic(prob, tol=DEFAULT_TOL, snap=True):
    """Solve the epigraph SOCP with Clarabel through cvxpy."""
    import cvxpy as cp

    d = prob.dims
    problem, p, _ = build_conic_program(prob)
    try:
        problem.solve(
            solver=cp.CLARABEL,
            tol_gap_abs=tol, tol_gap_rel=tol, tol_feas=tol, max_iter=500,
        )
    except cp.error.SolverError as exc:
        raise SolverFailure(f"conic solver failed: {exc}", status="error") from exc
    if problem.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) or p.value is None:
        raise SolverFailure(f"conic solver returned status {problem.status}", status=problem.status)
    P = np.asarray(p.value).reshape((d.n, d.m), order="F")
    if snap:
        P = snap_small_blocks(prob, P)
    iters = problem.solver_stats.num_iters or 0
    return GroupLassoSolution(P, objective(prob, P), certify_kkt(prob, P), int(iters), "conic")


def solve(prob, backend="bcd", tol=DEFAULT_TOL, **kwargs):
    if backend == "bcd":
        return solve_bcd(prob, tol=tol, **kwargs)
    if backend == "conic":
        return solve_conic(prob, tol=tol, **kwargs)
    raise ValueError(f"unknown group Lasso backend {backend!r}")


def lambda_max(prob):
    """Largest block norm of ``S'Y``.

    If every block weight is at least this value, ``P = 0`` is optimal.
    """
    d = prob.dims
    G = prob.S.T @ prob.Y
    return max(
        np.linalg.norm(G[d.control_slice(i), d.state_slice(j)])
        for i in range(d.n_players) for j in range(d.n_players)
    )
