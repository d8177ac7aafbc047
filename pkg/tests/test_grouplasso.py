import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import fista_group_lasso, random_dims, random_spd
from sparsegames.errors import DimensionError, MaxIterExceeded
from sparsegames.gamecore import Dims, RegularizationWeights, block_norms
from sparsegames.grouplasso import (
    GroupLassoProblem,
    block_soft_threshold,
    certify_kkt,
    lambda_max,
    objective,
    snap_small_blocks,
    solve,
    solve_bcd,
    solve_conic,
)


def random_problem(rng, dims=None, weight_scale=1.0, zero_prob=0.2):
    d = dims or random_dims(rng, max_players=4, max_horizon=1)
    S = rng.normal(size=(d.n, d.n)) + 2.0 * np.eye(d.n)
    Y = rng.normal(size=(d.n, d.m))
    W = rng.uniform(0.0, weight_scale, size=(d.n_players, d.n_players))
    W[rng.random(W.shape) < zero_prob] = 0.0
    return GroupLassoProblem(S, Y, d, RegularizationWeights(W))


def test_problem_shape_checks():
    d = Dims((1, 2), (1, 1), 1)
    with pytest.raises(DimensionError):
        GroupLassoProblem(np.eye(3), np.zeros((2, 3)), d, RegularizationWeights.uniform(2, 1.0))
    with pytest.raises(DimensionError):
        GroupLassoProblem(np.eye(2), np.zeros((2, 3)), d, RegularizationWeights.uniform(3, 1.0))


def test_block_soft_threshold():
    G = np.array([[3.0, 4.0]])
    np.testing.assert_allclose(block_soft_threshold(G, 2.5), 0.5 * G)
    assert not np.any(block_soft_threshold(G, 5.0))
    with pytest.raises(ValueError):
        block_soft_threshold(G, -1.0)


def test_zero_weights_is_linear_solve(rng):
    prob = random_problem(rng, weight_scale=0.0)
    sol = solve_bcd(prob)
    np.testing.assert_allclose(sol.P_hat, np.linalg.solve(prob.S, prob.Y), atol=1e-9)


def test_bcd_matches_accelerated_proximal_gradient(rng):
    for _ in range(15):
        prob = random_problem(rng, weight_scale=2.0)
        ref = fista_group_lasso(prob.S, prob.Y, prob.dims, prob.weights.weights)
        sol = solve_bcd(prob, tol=1e-10)
        assert objective(prob, sol.P_hat) <= objective(prob, ref) + 1e-9
        np.testing.assert_allclose(sol.P_hat, ref, atol=1e-6)


def test_scalar_blocks_closed_form():
    # Diagonal S decouples every scalar block into soft-thresholding.
    d = Dims((1, 1), (1, 1), 1)
    S = np.diag([2.0, 0.5])
    Y = np.array([[1.0, 3.0], [0.2, 0.4]])
    W = np.array([[0.0, 1.0], [0.3, 0.5]])
    sol = solve_bcd(GroupLassoProblem(S, Y, d, RegularizationWeights(W)), tol=1e-12)
    s = np.diag(S)[:, None]
    G = s * Y
    expected = np.sign(G) * np.maximum(np.abs(G) - W, 0.0) / s**2
    np.testing.assert_allclose(sol.P_hat, expected, atol=1e-12)


def test_large_weights_zero_everything(rng):
    prob = random_problem(rng)
    big = lambda_max(prob) * 1.01
    d = prob.dims
    W = np.full((d.n_players, d.n_players), big)
    sol = solve_bcd(GroupLassoProblem(prob.S, prob.Y, d, RegularizationWeights(W)))
    assert not np.any(sol.P_hat)


def test_kkt_certificate(rng):
    prob = random_problem(rng, weight_scale=3.0)
    sol = solve_bcd(prob, tol=1e-10)
    assert certify_kkt(prob, sol.P_hat) <= 1e-10
    bumped = sol.P_hat + 1e-3 * rng.normal(size=sol.P_hat.shape)
    assert certify_kkt(prob, bumped) > 1e-6


def test_bcd_reports_exact_zeros_and_iterations(rng):
    d = Dims((2, 2, 1), (1, 2, 1), 1)
    prob = random_problem(rng, dims=d, weight_scale=6.0, zero_prob=0.0)
    sol = solve_bcd(prob)
    norms = block_norms(sol.P_hat, d)
    assert np.any(norms == 0.0) and sol.iterations >= 1 and sol.backend == "bcd"


def test_warm_start_at_solution_returns_immediately(rng):
    prob = random_problem(rng)
    sol = solve_bcd(prob, tol=1e-10)
    again = solve_bcd(prob, tol=1e-9, P0=sol.P_hat)
    assert again.iterations == 0
    np.testing.assert_array_equal(again.P_hat, sol.P_hat)


def test_max_iter_carries_last_iterate(rng):
    prob = random_problem(rng, weight_scale=2.0)
    with pytest.raises(MaxIterExceeded) as err:
        solve_bcd(prob, tol=1e-300, max_iter=1)
    assert err.value.solution is not None and err.value.residual > 0


def test_conic_agrees_with_bcd(rng):
    for _ in range(10):
        prob = random_problem(rng, weight_scale=2.0)
        a, b = solve_bcd(prob, tol=1e-10), solve_conic(prob)
        assert abs(a.objective - b.objective) <= 1e-6 * (1 + abs(a.objective))
        assert b.backend == "conic"


def test_snap_small_blocks():
    d = Dims((1, 1), (1, 1), 1)
    prob = GroupLassoProblem(np.eye(2), np.zeros((2, 2)), d, RegularizationWeights.uniform(2, 1.0))
    P = np.array([[1.0, 1e-9], [2e-9, 1.0]])
    out = snap_small_blocks(prob, P)
    assert out[0, 1] == 0.0 and out[1, 0] == 0.0 and out[0, 0] == 1.0


def test_solve_dispatch(rng):
    prob = random_problem(rng)
    assert solve(prob, backend="bcd").backend == "bcd"
    with pytest.raises(ValueError):
        solve(prob, backend="nope")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 5.0))
def test_bcd_objective_is_minimal_along_random_directions(seed, lam):
    rng = np.random.default_rng(seed)
    d = random_dims(rng, max_players=3, max_horizon=1)
    n = d.n
    S = random_spd(rng, n, floor=0.3)
    Y = rng.normal(size=(n, d.m))
    prob = GroupLassoProblem(S, Y, d, RegularizationWeights.uniform(d.n_players, lam))
    sol = solve_bcd(prob, tol=1e-10)
    f0 = objective(prob, sol.P_hat)
    for _ in range(5):
        D = rng.normal(size=sol.P_hat.shape)
        for t in (1e-3, 1e-1):
            assert objective(prob, sol.P_hat + t * D) >= f0 - 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_objective_never_above_exact_solution_objective(seed):
    rng = np.random.default_rng(seed)
    prob = random_problem(rng, weight_scale=3.0)
    sol = solve_bcd(prob)
    exact = np.linalg.solve(prob.S, prob.Y)
    assert sol.objective <= objective(prob, exact) + 1e-12
