import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import random_game
from sparsegames.errors import DivergedRollout, NotConverged
from sparsegames.gamecore import AffineStrategyProfile, Dims, RegularizationWeights, rollout
from sparsegames.ilqgames import (
    IlqSettings,
    _step,
    forward_simulate,
    from_lq_game,
    lq_approximation,
    project_psd,
    solve_ilq,
    zero_operating_point,
)
from sparsegames.lqsolve import solve_feedback_nash
from sparsegames.scenarios import NavigationConfig, build_navigation_game
from sparsegames.sparsedp import solve_regularized


def small_game(rng, **kw):
    g = random_game(rng, **kw)
    # Keep the unregularized trajectory inside the default trust region.
    return g.replace(x1=0.1 * g.x1 / max(1.0, np.abs(g.x1).max()),
                     q=0.05 * np.asarray(g.q), r=0.05 * np.asarray(g.r))


def test_settings_validation():
    with pytest.raises(ValueError):
        IlqSettings(max_outer_iters=0)
    with pytest.raises(ValueError):
        IlqSettings(min_step=0.0)
    with pytest.raises(ValueError):
        IlqSettings(step_shrink=1.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_project_psd(seed):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(4, 4))
    P = project_psd(M, floor=0.1)
    assert np.allclose(P, P.T)
    assert np.linalg.eigvalsh(P).min() >= 0.1 - 1e-10
    S = M @ M.T + np.eye(4)
    np.testing.assert_allclose(project_psd(S), S)


def test_lq_approximation_of_lq_game_is_exact(rng):
    g = random_game(rng, dims=Dims((2, 1), (1, 2), 5))
    ng = from_lq_game(g)
    strat, _ = solve_feedback_nash(g)
    tr = rollout(g, strat)
    lq = lq_approximation(ng, tr)
    np.testing.assert_allclose(lq.A, g.A)
    np.testing.assert_allclose(lq.B, g.B)
    np.testing.assert_allclose(lq.Q, g.Q, atol=1e-12)
    np.testing.assert_allclose(lq.R, g.R, atol=1e-12)


@pytest.mark.filterwarnings("ignore:group Lasso running with ridge")
def test_one_iteration_from_zero_reproduces_lq_solution(rng):
    for lam in (0.0, 0.7):
        g = random_game(rng, dims=Dims((2, 2), (1, 1), 8))
        ng = from_lq_game(g)
        weights = RegularizationWeights.uniform(2, lam)
        settings_ = IlqSettings(weights=weights, trust_radius=1e9)
        op = zero_operating_point(ng)
        new, report, eta = _step(ng, op, settings_, weights)
        ref = solve_regularized(g, weights)
        assert eta == 1.0
        np.testing.assert_allclose(report.strategies.P, ref.strategies.P, atol=1e-6)
        np.testing.assert_allclose(report.strategies.alpha, ref.strategies.alpha, atol=1e-6)
        np.testing.assert_allclose(new.x, rollout(g, ref.strategies).x, atol=1e-6)


def test_lq_game_converges_in_two_iterations(rng):
    for _ in range(5):
        g = small_game(rng, max_players=3, max_horizon=10)
        res = solve_ilq(from_lq_game(g))
        assert res.converged and len(res.iterations) <= 2
        ref, _ = solve_feedback_nash(g)
        np.testing.assert_allclose(res.operating_point.x, rollout(g, ref).x, atol=1e-6)
        # The returned operating-point form replays the converged trajectory.
        replay = forward_simulate(from_lq_game(g), res.strategies, res.operating_point)
        np.testing.assert_allclose(replay.x, res.operating_point.x, atol=1e-9)


def test_backtracking_respects_trust_radius(rng):
    g = random_game(rng, dims=Dims((2, 2), (1, 1), 10))
    g = g.replace(x1=10.0 * g.x1)
    ng = from_lq_game(g)
    s = IlqSettings(trust_radius=0.5)
    new, _, eta = _step(ng, zero_operating_point(ng), s, RegularizationWeights.uniform(2, 0.0))
    dev = np.abs(new.x - zero_operating_point(ng).x).max()
    assert eta < 1.0 and (dev <= 0.5 or eta <= s.min_step)


def test_not_converged_raises_with_history(rng):
    g = random_game(rng, dims=Dims((2, 2), (1, 1), 10))
    ng = from_lq_game(g.replace(x1=100.0 * g.x1))
    res = solve_ilq(ng, IlqSettings(max_outer_iters=1))
    assert not res.converged and len(res.iterations) == 1
    with pytest.raises(NotConverged) as err:
        solve_ilq(ng, IlqSettings(max_outer_iters=1), raise_on_failure=True)
    assert len(err.value.trace) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverged_rollout_is_reported():
    g = build_navigation_game(NavigationConfig(n_players=2))
    P = np.zeros((g.dims.horizon, g.dims.n, g.dims.m))
    alpha = np.full((g.dims.horizon, g.dims.n), -1e308)
    with pytest.raises(DivergedRollout):
        forward_simulate(g, AffineStrategyProfile(g.dims, P, alpha), zero_operating_point(g))


@pytest.fixture(scope="module")
def navigation_solution():
    game = build_navigation_game(NavigationConfig())
    settings_ = IlqSettings()
    return game, settings_, solve_ilq(game, settings_)


def test_navigation_converges_without_collisions(navigation_solution):
    game, _, res = navigation_solution
    cfg = NavigationConfig()
    assert res.converged and len(res.iterations) <= 200
    x = res.operating_point.x.reshape(-1, 4, 4)
    for i in range(4):
        for j in range(i + 1, 4):
            assert np.linalg.norm(x[:, i, :2] - x[:, j, :2], axis=1).min() > 0.0
    goals = np.asarray(cfg.goals)[:, :2]
    assert np.all(np.linalg.norm(x[-1, :, :2] - goals, axis=1) < 1.0)


def test_navigation_fixed_point_residual(navigation_solution):
    game, settings_, res = navigation_solution
    weights = RegularizationWeights.uniform(4, 0.0)
    new, _, _ = _step(game, res.operating_point, settings_, weights)
    assert np.abs(new.x - res.operating_point.x).max() <= 10 * settings_.convergence_tol


def test_navigation_history_fields(navigation_solution):
    _, _, res = navigation_solution
    it = res.iterations[-1]
    assert it.trajectory_change <= 1e-3 and 0 < it.step_size <= it.max_step <= 1.0
    assert it.costs.shape == (4,) and it.nonzero_blocks.shape == (4,)
    assert res.trajectory is res.operating_point
