import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvtp.balance import (SolverConfig, balancing_objective, classification_weights,
                          effective_sample_size, project_scaled_simplex, solve_energy_weights,
                          stationarity_residual, uniform_weights)
from mvtp.data import Dataset
from mvtp.energy import (EUCLIDEAN, GAUSSIAN, BalanceGram, build_gram, energy_gradient,
                         weighted_energy_distance)
from mvtp.errors import NonConvexObjectiveWarning, NotConvergedWarning, SeparationWarning
from mvtp.policy import Block, Policy, ScalePolicy, shift_dataset

from conftest import random_dataset
from oracles import projection_by_support, qp_oracle, qp_terms, simplex_projection_qp

KINDS = (EUCLIDEAN, GAUSSIAN)


def small_problem(seed, kind, n=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(2, 9))
    d = random_dataset(n, p=int(rng.integers(0, 3)), k=2, seed=seed)
    s = shift_dataset(ScalePolicy(rng.uniform(0.5, 1.5, size=2)), d)
    return build_gram(d, s, kind=kind)


def test_single_row():
    g = BalanceGram(np.zeros((1, 1)), np.ones((1, 1)), np.zeros((1, 1)))
    w = solve_energy_weights(g)
    np.testing.assert_array_equal(w.w, [1.0])
    assert w.converged


@pytest.mark.parametrize("lam", [0.01, 1.0, 50.0])
@pytest.mark.parametrize("kind", KINDS)
def test_identity_gives_uniform(lam, kind):
    d = random_dataset(60, seed=3)
    g = build_gram(d, shift_dataset(ScalePolicy(np.ones(2)), d), kind=kind)
    w = solve_energy_weights(g, SolverConfig(lam=lam))
    assert np.max(np.abs(w.w - 1.0)) < 1e-6


@pytest.mark.parametrize("kind", KINDS)
def test_matches_qp_oracle(kind):
    for seed in range(12):
        g = small_problem(seed, kind)
        w = solve_energy_weights(g, SolverConfig(lam=1.0))
        Q, c, const = qp_terms(g, 1.0)
        _, f_best = qp_oracle(Q, c, g.n)
        assert w.objective == pytest.approx(f_best + const, abs=1e-6)
        assert balancing_objective(g, w, 1.0) == pytest.approx(w.objective, abs=1e-12)


@pytest.mark.parametrize("kind", KINDS)
def test_kkt_and_feasibility(kind):
    for seed in range(5):
        d = random_dataset(80, seed=seed)
        g = build_gram(d, shift_dataset(ScalePolicy([0.7, 1.3]), d), kind=kind)
        w = solve_energy_weights(g)
        assert w.converged and not w.nonconvex
        assert np.all(w.w >= 0) and abs(w.w.sum() - 80) <= 1e-8 * 80
        grad = energy_gradient(g, w.w) + 2.0 * w.lam * w.w / g.n ** 2
        assert stationarity_residual(w.w, grad) <= 1e-7
        assert 1.0 <= w.ess <= 80


def test_history_non_increasing():
    d = random_dataset(120, seed=4)
    g = build_gram(d, shift_dataset(ScalePolicy([0.6, 1.4]), d))
    w = solve_energy_weights(g, SolverConfig(lam=0.05))
    assert np.all(np.diff(w.history) <= 1e-12)


@pytest.mark.parametrize("kind", KINDS)
def test_balance_improves_on_uniform(kind):
    d = random_dataset(150, seed=5)
    g = build_gram(d, shift_dataset(ScalePolicy([0.8, 0.8]), d), kind=kind)
    w = solve_energy_weights(g)
    before = weighted_energy_distance(g, np.ones(150)).value
    after = weighted_energy_distance(g, w).value
    assert after <= before - 1e-10


def test_large_penalty_is_uniform():
    d = random_dataset(50, seed=6)
    g = build_gram(d, shift_dataset(ScalePolicy([0.5, 1.5]), d))
    w = solve_energy_weights(g, SolverConfig(lam=1e12))
    assert np.max(np.abs(w.w - 1.0)) < 1e-4


def test_not_converged_still_feasible():
    d = random_dataset(60, seed=7)
    g = build_gram(d, shift_dataset(ScalePolicy([0.5, 1.5]), d))
    with pytest.warns(NotConvergedWarning):
        w = solve_energy_weights(g, SolverConfig(lam=1e-3, max_iter=2))
    assert not w.converged
    assert np.all(w.w >= 0) and w.w.sum() == pytest.approx(60, abs=1e-8 * 60)


def test_nonconvex_flag():
    rng = np.random.default_rng(8)
    m = rng.random((6, 6))
    g_oo = (m + m.T) * 5
    np.fill_diagonal(g_oo, 0)
    # a "distance" matrix that is not of negative type makes -g_oo indefinite on sum-zero vectors
    g_oo[0, 1] = g_oo[1, 0] = 100.0
    g = BalanceGram(g_oo, rng.random((6, 6)), np.zeros((6, 6)))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        w = solve_energy_weights(g, SolverConfig(lam=0.0, max_iter=500))
    assert w.nonconvex
    assert any(issubclass(c.category, NonConvexObjectiveWarning) for c in caught)
    assert np.all(w.w >= 0) and w.w.sum() == pytest.approx(6)


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(lam=-1)
    with pytest.raises(ValueError):
        SolverConfig(tol=0)
    with pytest.raises(ValueError):
        SolverConfig(max_iter=0)


def test_projection_examples():
    np.testing.assert_array_equal(project_scaled_simplex([3.0, -1.0]), [2.0, 0.0])
    v = np.array([0.5, 1.5, 0.0, 2.0])
    np.testing.assert_allclose(project_scaled_simplex(v), v, atol=1e-15)


def test_projection_matches_support_oracle():
    rng = np.random.default_rng(9)
    for _ in range(200):
        n = int(rng.integers(1, 8))
        v = rng.standard_normal(n) * rng.choice([0.1, 1, 10])
        np.testing.assert_allclose(project_scaled_simplex(v), projection_by_support(v, n),
                                   atol=1e-10, rtol=0)


def test_projection_matches_cvxopt():
    rng = np.random.default_rng(10)
    for _ in range(20):
        n = int(rng.integers(5, 40))
        v = rng.standard_normal(n) * 3
        np.testing.assert_allclose(project_scaled_simplex(v), simplex_projection_qp(v, n),
                                   atol=1e-6)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30),
       st.floats(0.1, 100))
def test_projection_properties(values, total):
    v = np.array(values)
    w = project_scaled_simplex(v, total)
    assert np.all(w >= 0)
    assert abs(w.sum() - total) <= 1e-9 * max(total, np.abs(v).max())
    # idempotent, and optimality: v - w is constant on the support and no larger elsewhere
    np.testing.assert_allclose(project_scaled_simplex(w, total), w, atol=1e-9 * (1 + np.abs(v).max()))
    gap = v - w
    on = w > 0
    if on.any():
        assert np.ptp(gap[on]) <= 1e-9 * (1 + np.abs(v).max())
        assert np.all(gap[~on] <= gap[on].max() + 1e-9 * (1 + np.abs(v).max()))


def test_projection_tie_break_deterministic():
    v = np.array([1.0, 1.0, 1.0, -5.0])
    a = project_scaled_simplex(v)
    b = project_scaled_simplex(v.copy())
    np.testing.assert_array_equal(a, b)


def test_uniform_and_ess():
    w = uniform_weights(3)
    np.testing.assert_array_equal(w.w, [1, 1, 1])
    assert w.ess == 3
    assert effective_sample_size([4.0, 0, 0, 0]) == 1.0
    assert effective_sample_size([2.0, 0.0]) == 1.0
    d = random_dataset(10, seed=1)
    g = build_gram(d, shift_dataset(ScalePolicy(np.ones(2)), d))
    assert weighted_energy_distance(g, uniform_weights(10)).value == 0.0


def test_classification_identity():
    d = random_dataset(300, seed=11)
    w = classification_weights(d, shift_dataset(ScalePolicy(np.ones(2)), d))
    assert np.max(np.abs(w.w - 1.0)) < 1e-3
    assert not w.separated


def _location_shift(delta):
    return Policy(blocks=(Block(membership=lambda x, a: np.ones(a.shape[0], dtype=bool),
                                apply=lambda x, a: a + delta, invert=lambda x, a: a - delta),),
                  name="location")


def test_classification_gaussian_density_ratio():
    n, delta = 100_000, 0.3
    rng = np.random.default_rng(12)
    a = rng.standard_normal((n, 1))
    d = Dataset(x=np.empty((n, 0)), a=a, y=np.zeros(n))
    w = classification_weights(d, shift_dataset(_location_shift(delta), d))
    ratio = np.exp(delta * a[:, 0] - delta ** 2 / 2)
    ratio *= n / ratio.sum()
    core = np.abs(a[:, 0]) < 2
    assert np.max(np.abs(w.w[core] / ratio[core] - 1)) < 0.05


def test_classification_separation():
    a = np.arange(1.0, 11.0).reshape(-1, 1)
    d = Dataset(x=np.empty((10, 0)), a=a, y=np.zeros(10))
    with pytest.warns(SeparationWarning):
        w = classification_weights(d, shift_dataset(_location_shift(100.0), d))
    assert w.separated
    assert np.all(np.isfinite(w.w)) and w.w.sum() == pytest.approx(10)
