import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import random_game
from sparsegames.errors import NotConverged
from sparsegames.gamecore import Dims, LqGame, RegularizationWeights, eval_cost, rollout
from sparsegames.lqsolve import solve_feedback_nash
from sparsegames.scenarios import FormationConfig, build_formation_game
from sparsegames.sparsedp import (
    infinite_horizon_fixed_point,
    lemma1_bound,
    riccati_residual,
    riccati_trace,
    solve_regularized,
    sparsity_pattern,
    time_invariant_extension,
)


@pytest.fixture(scope="module")
def formation():
    return build_formation_game(FormationConfig())


def uniform(game, lam):
    return RegularizationWeights.uniform(game.dims.n_players, lam)


def test_zero_lambda_reproduces_nash(rng):
    for _ in range(10):
        g = random_game(rng)
        exact, _ = solve_feedback_nash(g)
        rep = solve_regularized(g, uniform(g, 0.0))
        np.testing.assert_allclose(rep.strategies.P, exact.P, atol=1e-10)
        np.testing.assert_allclose(rep.strategies.alpha, exact.alpha, atol=1e-10)
        assert np.all(rep.delta_P == 0.0) and np.all(rep.lemma1_bound == 0.0)


def test_conic_backend_at_zero_lambda(rng):
    g = random_game(rng, dims=Dims((2, 1), (1, 1), 4))
    exact, _ = solve_feedback_nash(g)
    rep = solve_regularized(g, uniform(g, 0.0), backend="conic")
    np.testing.assert_allclose(rep.strategies.P, exact.P, atol=1e-6)


def test_deviation_bound_holds(rng):
    for _ in range(10):
        g = random_game(rng)
        lam = float(rng.uniform(0.1, 3.0))
        rep = solve_regularized(g, uniform(g, lam))
        assert np.all(rep.delta_P <= rep.lemma1_bound + 1e-7)
        assert len(rep.bound_violations()) == 0


def test_regularized_values_are_true_cost_to_go(rng):
    for _ in range(10):
        g = random_game(rng)
        rep = solve_regularized(g, uniform(g, float(rng.uniform(0.5, 5.0))))
        tr = rollout(g, rep.strategies)
        for i in range(g.dims.n_players):
            J = eval_cost(g, tr, i)
            assert rep.values.cost_to_go(i, 0, g.x1) == pytest.approx(J, rel=1e-9, abs=1e-9)


def test_kkt_and_sparsity_report(rng):
    g = random_game(rng, dims=Dims((2, 2, 2), (1, 1, 1), 6))
    rep = solve_regularized(g, uniform(g, 50.0))
    assert rep.kkt.max() <= 1e-7
    pattern, counts = sparsity_pattern(rep.strategies)
    assert pattern.shape == (6, 3, 3) and np.array_equal(pattern, rep.sparsity)
    np.testing.assert_array_equal(counts, pattern.sum(axis=2))


def test_lemma1_bound_helper():
    assert lemma1_bound(np.diag([2.0, 0.5]), np.array([[0.0, 1.0], [1.0, 0.0]])) == pytest.approx(8.0)
    assert lemma1_bound(np.eye(2), np.zeros((2, 2))) == 0.0
    assert lemma1_bound(np.zeros((2, 2)), np.ones((2, 2))) == np.inf


def test_ridge_warns_once(rng):
    g = random_game(rng, dims=Dims((1, 1), (1, 1), 5))
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        solve_regularized(g, uniform(g, 1.0), ridge=True)
    assert sum(issubclass(w.category, RuntimeWarning) for w in rec) == 1


def test_formation_dense_at_zero_lambda(formation):
    rep = solve_regularized(formation, uniform(formation, 0.0))
    _, counts = sparsity_pattern(rep.strategies)
    # The last stage has zero gains: the formation game has no terminal cost.
    assert np.all(counts[:-1, 1:] == 3) and not np.any(counts[-1])


def test_formation_sparsity_antitone(formation):
    means = []
    for lam in (0.0, 1.5, 5.0, 15.0):
        _, counts = sparsity_pattern(solve_regularized(formation, uniform(formation, lam)).strategies)
        means.append(counts.mean(axis=0))
    means = np.array(means)
    assert np.all(np.diff(means, axis=0) <= 1e-12)


def test_formation_fully_decoupled_at_large_lambda(formation):
    # Complete decoupling on this game needs a weight well above 15.
    _, counts = sparsity_pattern(solve_regularized(formation, uniform(formation, 40.0)).strategies)
    assert np.all(counts[:-1] == 1)


def scalar_game(a=1.0, b=1.0, q=1.0, r=1.0, T=5):
    d = Dims((1,), (1,), T)
    return LqGame(d, A=np.full((T, 1, 1), a), B=np.full((T, 1, 1), b),
                  Q=np.full((1, T + 1, 1, 1), q), q=np.zeros((1, T + 1, 1)),
                  R=np.full((1, T, 1, 1), r), r=np.zeros((1, T, 1)), x1=np.ones(1))


def test_scalar_fixed_point_is_golden_ratio():
    # Z = 1 + Z - Z^2 / (1 + Z) gives Z^2 = Z + 1.
    Z, trace = infinite_horizon_fixed_point(scalar_game(), RegularizationWeights.uniform(1, 0.0))
    assert Z[0, 0, 0] == pytest.approx((1 + 5**0.5) / 2, rel=1e-10)
    assert trace.delta_Z[-1] <= 1e-10


def test_fixed_point_residual_random(rng):
    g = random_game(rng, dims=Dims((2, 1), (1, 1), 3), affine=False)
    Z, _ = infinite_horizon_fixed_point(g, uniform(g, 0.0), max_steps=20000)
    assert riccati_residual(g, Z) <= 1e-8 * (1 + np.linalg.norm(Z))


def test_fixed_point_not_converged():
    with pytest.raises(NotConverged) as err:
        infinite_horizon_fixed_point(scalar_game(), RegularizationWeights.uniform(1, 0.0), max_steps=3)
    assert len(err.value.trace) == 3


def test_riccati_trace_distances(formation):
    Z_star, _ = infinite_horizon_fixed_point(formation, uniform(formation, 0.0))
    Z, P, trace = riccati_trace(formation, uniform(formation, 0.0), 200, Z_star=Z_star)
    assert len(trace) == 200 and trace.delta_P == [0.0] * 200
    assert trace.dist_to_fixed_point[-1] < 1e-3 * trace.dist_to_fixed_point[0]
    rows = trace.rows()
    assert rows[0][0] == 1 and len(rows[0]) == 4


def test_riccati_trace_regularized_counts(formation):
    _, _, trace = riccati_trace(formation, uniform(formation, 40.0), 50)
    assert trace.nonzero_blocks[-1] == 3
    assert trace.delta_P[-1] > 0


def test_time_invariant_extension(formation):
    ext = time_invariant_extension(formation, stage=3)
    assert ext.dims.horizon == 1
    np.testing.assert_array_equal(ext.Q[:, 0], formation.Q[:, 3])
    np.testing.assert_array_equal(ext.Q[:, 1], formation.Q[:, -1])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 10.0))
def test_regularized_deviation_bound_property(seed, lam):
    g = random_game(np.random.default_rng(seed), max_horizon=6)
    rep = solve_regularized(g, uniform(g, lam))
    assert np.all(rep.delta_P <= rep.lemma1_bound + 1e-7)
    assert np.all(rep.kkt <= 1e-7)
