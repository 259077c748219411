import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvtp.data import Dataset, Standardizer
from mvtp.energy import (EUCLIDEAN, GAUSSIAN, BalanceGram, build_gram, energy_gradient,
                         gram_from_points, median_heuristic, weighted_energy_distance)
from mvtp.errors import DimensionMismatch, InvalidWeights
from mvtp.policy import ScalePolicy, shift_dataset

from conftest import random_dataset
from oracles import energy_direct

KINDS = (EUCLIDEAN, GAUSSIAN)


def _problem(n, seed, kind, tau=0.8):
    d = random_dataset(n, p=2, k=2, seed=seed)
    s = shift_dataset(ScalePolicy(np.full(2, tau)), d)
    return d, s, build_gram(d, s, kind=kind)


def _random_weights(rng, n):
    w = rng.exponential(size=n) * (rng.random(n) < 0.8)
    if w.sum() == 0:
        w[0] = 1.0
    return w * n / w.sum()


def test_identity_blocks_coincide():
    d = random_dataset(12, seed=1)
    s = shift_dataset(ScalePolicy(np.ones(2)), d)
    for kind in KINDS:
        g = build_gram(d, s, kind=kind)
        np.testing.assert_array_equal(g.g_os, g.g_oo)
        np.testing.assert_array_equal(g.g_ss, g.g_oo)


def test_two_point_distance():
    d = Dataset(x=np.empty((2, 0)), a=[[3.0], [5.0]], y=[0.0, 0.0])
    s = shift_dataset(ScalePolicy([1.0]), d)
    g = build_gram(d, s)
    # standardized (population sd) points are -1 and +1
    assert g.g_oo[0, 1] == pytest.approx(2.0, abs=1e-15)


def test_gaussian_range():
    d, s, g = _problem(20, 2, GAUSSIAN)
    g = build_gram(d, s, kind=GAUSSIAN, bandwidth=0.7)
    for block in (g.g_oo, g.g_os, g.g_ss):
        assert np.all(block > 0) and np.all(block <= 1)
    np.testing.assert_array_equal(np.diag(g.g_oo), 1.0)
    np.testing.assert_array_equal(np.diag(g.g_ss), 1.0)
    assert g.bandwidth == 0.7


def test_gram_invariants():
    for kind in KINDS:
        _, _, g = _problem(15, 3, kind)
        for block in (g.g_oo, g.g_ss):
            np.testing.assert_array_equal(block, block.T)
            assert np.ptp(np.diag(block)) == 0
        if kind == EUCLIDEAN:
            assert np.all(np.diag(g.g_oo) == 0) and np.all(g.g_os >= 0)


def test_shifted_reuses_observed_standardizer():
    d, s, g = _problem(10, 4, EUCLIDEAN)
    sc = Standardizer.fit(d.joint())
    zo, zs = sc.transform(d.joint()), sc.transform(s.joint())
    np.testing.assert_allclose(g.g_os[2, 7], np.linalg.norm(zo[2] - zs[7]), rtol=1e-14)


def test_median_heuristic_default():
    d, s, g = _problem(30, 5, GAUSSIAN)
    sc = g.standardizer
    pts = np.vstack([sc.transform(d.joint()), sc.transform(s.joint())])
    assert g.bandwidth == pytest.approx(median_heuristic(pts))


def test_single_pair_value():
    g = gram_from_points(np.array([[0.0]]), np.array([[1.0]]))
    assert weighted_energy_distance(g, [1.0]).value == 2.0


def test_zero_at_identity():
    for kind in KINDS:
        d = random_dataset(40, seed=6)
        s = shift_dataset(ScalePolicy(np.ones(2)), d)
        g = build_gram(d, s, kind=kind)
        assert abs(weighted_energy_distance(g, np.ones(40)).value) <= 1e-12
        assert np.linalg.norm(energy_gradient(g, np.ones(40))) < 1e-10


def test_gradient_zero_at_identity_euclidean():
    d = random_dataset(25, seed=7)
    s = shift_dataset(ScalePolicy(np.ones(2)), d)
    g = build_gram(d, s)
    assert np.linalg.norm(energy_gradient(g, np.ones(25))) < 1e-10


@pytest.mark.parametrize("kind", KINDS)
def test_matches_direct_oracle(kind):
    rng = np.random.default_rng(8)
    for trial in range(5):
        obs = rng.standard_normal((5, 3))
        shifted = obs * 0.7 + 0.2
        w = _random_weights(rng, 5)
        g = gram_from_points(obs, shifted, kind=kind, bandwidth=1.3)
        got = weighted_energy_distance(g, w).value
        want = energy_direct(obs.tolist(), shifted.tolist(), w.tolist(), kind, 1.3)
        assert got == pytest.approx(want, abs=1e-10)


def test_nonnegative_random_weights():
    rng = np.random.default_rng(9)
    count = 0
    for seed in range(20):
        n = int(rng.integers(2, 51))
        for kind in KINDS:
            _, _, g = _problem(n, seed, kind, tau=float(rng.uniform(0.5, 1.5)))
            for _ in range(25):
                assert weighted_energy_distance(g, _random_weights(rng, n)).value >= -1e-10
                count += 1
    assert count == 1000


def test_permutation_symmetry():
    rng = np.random.default_rng(10)
    d = random_dataset(30, seed=11)
    s = shift_dataset(ScalePolicy([0.9, 1.2]), d)
    w = _random_weights(rng, 30)
    perm = rng.permutation(30)
    dp = d.take(perm)
    sp = shift_dataset(ScalePolicy([0.9, 1.2]), dp)
    for kind in KINDS:
        g1 = build_gram(d, s, kind=kind)
        g2 = build_gram(dp, sp, kind=kind, bandwidth=g1.bandwidth)
        v1 = weighted_energy_distance(g1, w).value
        v2 = weighted_energy_distance(g2, w[perm]).value
        assert v1 == pytest.approx(v2, abs=1e-12)


def _fd_check(g, w, h=1e-5):
    grad = energy_gradient(g, w)
    fd = np.empty_like(w)
    for i in range(len(w)):
        e = np.zeros_like(w)
        e[i] = h
        fd[i] = (weighted_energy_distance(g, w + e, validate=False).value
                 - weighted_energy_distance(g, w - e, validate=False).value) / (2 * h)
    return np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-300)


@pytest.mark.parametrize("kind", KINDS)
def test_gradient_finite_differences(kind):
    rng = np.random.default_rng(12)
    for trial in range(50):
        n = int(rng.integers(3, 20))
        _, _, g = _problem(n, 100 + trial, kind, tau=float(rng.uniform(0.5, 1.5)))
        assert _fd_check(g, _random_weights(rng, n)) < 1e-5


def test_gradient_scalar_case():
    g = gram_from_points(np.array([[0.0]]), np.array([[1.5]]))
    assert energy_gradient(g, [1.0])[0] == pytest.approx(2.0 * (1.5 - 1.0 * 0.0))


def test_weight_validation():
    _, _, g = _problem(5, 13, EUCLIDEAN)
    with pytest.raises(InvalidWeights):
        weighted_energy_distance(g, [1, 1, 1, 1, 2])
    with pytest.raises(InvalidWeights):
        weighted_energy_distance(g, [-1, 2, 2, 1, 1])
    with pytest.raises(DimensionMismatch):
        weighted_energy_distance(g, np.ones(4))


def test_dimension_checks():
    with pytest.raises(DimensionMismatch):
        gram_from_points(np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(DimensionMismatch):
        BalanceGram(np.zeros((3, 3)), np.zeros((3, 2)), np.zeros((3, 3)))
    d = random_dataset(5, seed=1)
    s = shift_dataset(ScalePolicy(np.ones(2)), random_dataset(6, seed=1))
    with pytest.raises(DimensionMismatch):
        build_gram(d, s)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 25), st.floats(0.3, 2.0), st.integers(0, 10_000))
def test_statistic_nonnegative_property(n, tau, seed):
    rng = np.random.default_rng(seed)
    for kind in KINDS:
        _, _, g = _problem(n, seed, kind, tau=tau)
        assert weighted_energy_distance(g, _random_weights(rng, n)).value >= -1e-10
