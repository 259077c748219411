import json

import numpy as np
import pytest

from mvtp import estimate as est_mod
from mvtp.balance import SolverConfig, classification_weights, uniform_weights
from mvtp.data import Dataset
from mvtp.errors import BootstrapUnstable, DimensionMismatch
from mvtp.estimate import (ESTIMATORS, WEIGHTINGS, EstimationRecipe, augmented_estimate,
                           bootstrap_ci, make_augmented_population, observed_mean, run_pipeline,
                           weighted_estimate)
from mvtp.outcome import OutcomeConfig, fit
from mvtp.plasmode import PlasmodeConfig, generate_dataset, plasmode_mu_rows, shift_policy
from mvtp.policy import Block, Policy, ScalePolicy, shift_dataset

from conftest import random_dataset

FAST = OutcomeConfig(n_trees=20)


class _Const:
    def __init__(self, c):
        self.c = c

    def predict(self, z):
        return np.full(np.asarray(z).shape[0], self.c)


class _TrueMean:
    def __init__(self, p):
        self.p = p

    def predict(self, z):
        return plasmode_mu_rows(z[:, :self.p], z[:, self.p:])


def _recipe(policy, weighting="energy-penalized", estimator="augmented", kind="ridge-poly"):
    return EstimationRecipe(policy=policy, weighting=weighting, estimator=estimator,
                            outcome_kind=kind, outcome=FAST)


def test_weighted_examples():
    d = Dataset(x=np.zeros((2, 0)), a=[[1.0], [2.0]], y=[1.0, 5.0])
    assert weighted_estimate(d, [2.0, 0.0]) == 1.0
    assert weighted_estimate(d, uniform_weights(2)) == 3.0 == observed_mean(d)
    with pytest.raises(DimensionMismatch):
        weighted_estimate(d, [1.0, 1.0, 1.0])


def test_augmented_with_zero_and_constant_model():
    d = random_dataset(30, seed=1)
    s = shift_dataset(ScalePolicy([0.8, 1.1]), d)
    rng = np.random.default_rng(2)
    w = rng.exponential(size=30)
    w *= 30 / w.sum()
    base = weighted_estimate(d, w)
    assert augmented_estimate(d, s, w, _Const(0.0)) == pytest.approx(base, abs=1e-12)
    assert augmented_estimate(d, s, w, _Const(7.5)) == pytest.approx(base, abs=1e-10)


def test_augmented_constant_shift_invariance():
    d = random_dataset(40, seed=3)
    s = shift_dataset(ScalePolicy([0.9, 0.9]), d)
    m = fit("ridge-poly", d.joint(), d.y)
    w = np.random.default_rng(4).dirichlet(np.ones(40)) * 40
    po, ps = m.predict(d.joint()), m.predict(s.joint())
    a = augmented_estimate(d, s, w, pred_obs=po, pred_shift=ps)
    b = augmented_estimate(d, s, w, pred_obs=po + 3.3, pred_shift=ps + 3.3)
    assert a == pytest.approx(b, abs=1e-10)


def test_augmented_identity_telescopes():
    d = random_dataset(40, seed=5)
    s = shift_dataset(ScalePolicy(np.ones(2)), d)
    m = fit("ridge-poly", d.joint(), d.y * 3 + 1)
    assert augmented_estimate(d, s, np.ones(40), m) == pytest.approx(d.y.mean(), abs=1e-10)


def test_augmented_requires_model_or_predictions():
    d = random_dataset(5, seed=1)
    s = shift_dataset(ScalePolicy(np.ones(2)), d)
    with pytest.raises(ValueError):
        augmented_estimate(d, s, np.ones(5))
    with pytest.raises(DimensionMismatch):
        augmented_estimate(d, s, np.ones(5), pred_obs=np.zeros(4), pred_shift=np.zeros(5))


def test_augmented_population():
    d = Dataset(x=[[1.0]], a=[[2.0]], y=[3.0])
    s = shift_dataset(ScalePolicy([0.5]), d)
    pop = make_augmented_population(d, s)
    assert pop.n == 2
    np.testing.assert_array_equal(pop.z, [0, 1])
    np.testing.assert_array_equal(pop.a[:, 0], [2.0, 1.0])
    d2 = random_dataset(6, seed=2)
    pop = make_augmented_population(d2, shift_dataset(ScalePolicy(np.ones(2)), d2))
    np.testing.assert_array_equal(pop.a[:6], pop.a[6:])
    np.testing.assert_array_equal(pop.x[:6], pop.x[6:])


def _location(delta):
    return Policy(blocks=(Block(membership=lambda x, a: np.ones(a.shape[0], dtype=bool),
                                apply=lambda x, a: a + delta, invert=lambda x, a: a - delta),))


def test_att_form_matches_true_ratio_weighting():
    n, delta = 100_000, 0.4
    rng = np.random.default_rng(6)
    a = rng.standard_normal((n, 1))
    y = 1.0 + a[:, 0] + 0.5 * rng.standard_normal(n)
    d = Dataset(x=np.empty((n, 0)), a=a, y=y)
    s = shift_dataset(_location(delta), d)
    ratio = np.exp(delta * a[:, 0] - delta ** 2 / 2)
    mvtp_weighted = weighted_estimate(d, ratio)
    # ATT form on the augmented population: odds-weighted mean of the Z = 0 half
    pop = make_augmented_population(d, s)
    control = pop.z == 0
    odds = np.exp(delta * pop.a[control, 0] - delta ** 2 / 2)
    att = float(odds @ pop.y[control] / odds.sum())
    assert att == pytest.approx(mvtp_weighted, abs=0.01)
    # and the fitted classifier reproduces it
    w = classification_weights(d, s)
    assert weighted_estimate(d, w) == pytest.approx(att, abs=0.01)
    assert att == pytest.approx(1.0 + delta, abs=0.02)


@pytest.mark.parametrize("weighting", WEIGHTINGS)
@pytest.mark.parametrize("estimator", ESTIMATORS)
def test_identity_policy_has_no_effect(weighting, estimator):
    d = random_dataset(60, seed=7)
    r = run_pipeline(d, _recipe(ScalePolicy(np.ones(2)), weighting, estimator))
    assert abs(r.effect) <= 1e-6


def test_solved_weights_identity_mean():
    d = random_dataset(50, seed=8)
    r = run_pipeline(d, _recipe(ScalePolicy(np.ones(2)), estimator="weighted"))
    assert r.mu_q_hat == pytest.approx(d.y.mean(), abs=1e-6)


def test_double_robust_with_true_model_and_uniform_weights():
    # one dataset at 2 SE fails 5% of the time by design, so check 40 datasets:
    # the averaged error within 2 SE of the mean, and >= 85% individually within 2 SE
    cfg = PlasmodeConfig(n=2000, p=12, tau=0.1, truth_draws=200_000)
    m = _TrueMean(12)
    errs, ses, naive = [], [], []
    for seed in range(40):
        d, truth = generate_dataset(cfg, seed=seed)
        s = shift_dataset(shift_policy(0.1), d)
        est = augmented_estimate(d, s, np.ones(d.n), m)
        contrib = d.y - m.predict(d.joint()) + m.predict(s.joint())
        errs.append(est - truth.mu_q_true)
        ses.append(np.sqrt(contrib.var(ddof=1) / d.n + truth.se ** 2))
        naive.append(weighted_estimate(d, np.ones(d.n)) - truth.mu_q_true)
    errs, ses = np.array(errs), np.array(ses)
    assert abs(errs.mean()) <= 2 * errs.std(ddof=1) / np.sqrt(len(errs))
    assert np.mean(np.abs(errs) <= 2 * ses) >= 0.85
    # plain weighting with the same junk weights is far off
    assert abs(np.mean(naive)) > 10 * ses.mean()


def test_bootstrap_constant_outcome():
    d = random_dataset(30, seed=9).with_outcome(np.full(30, 2.5))
    e = bootstrap_ci(d, _recipe(ScalePolicy([0.9, 0.9])), n_boot=50)
    assert e.mu_q_hat == pytest.approx(2.5, abs=1e-8)
    assert e.ci_low == pytest.approx(2.5, abs=1e-8) and e.ci_high == pytest.approx(2.5, abs=1e-8)


def test_bootstrap_deterministic_and_thread_invariant():
    d = random_dataset(40, seed=10)
    rec = _recipe(ScalePolicy([0.9, 1.1]), weighting="energy-kernel")
    a = bootstrap_ci(d, rec, n_boot=50, seed=3, threads=1)
    b = bootstrap_ci(d, rec, n_boot=50, seed=3, threads=1)
    c = bootstrap_ci(d, rec, n_boot=50, seed=3, threads=2)
    assert a.to_json() == b.to_json() == c.to_json()
    np.testing.assert_array_equal(a.replicate_estimates, c.replicate_estimates)
    assert bootstrap_ci(d, rec, n_boot=50, seed=4).to_json() != a.to_json()


def test_identity_effect_ci_covers_zero():
    rec = _recipe(ScalePolicy(np.ones(2)), estimator="weighted")
    covered = 0
    for k in range(200):
        d = random_dataset(30, seed=1000 + k)
        e = bootstrap_ci(d, rec, n_boot=50, seed=k)
        covered += e.effect_ci[0] <= 0.0 <= e.effect_ci[1]
    assert covered / 200 >= 0.94


def test_bootstrap_argument_checks():
    d = random_dataset(20, seed=1)
    rec = _recipe(ScalePolicy(np.ones(2)))
    with pytest.raises(ValueError):
        bootstrap_ci(d, rec, n_boot=49)
    with pytest.raises(ValueError):
        bootstrap_ci(d, rec, n_boot=50, level=1.0)


def test_bootstrap_unstable_when_replicates_fail():
    d = random_dataset(40, seed=12)
    rec = EstimationRecipe(policy=ScalePolicy([0.5, 1.6]), estimator="weighted",
                           solver=SolverConfig(lam=1e-4, max_iter=1))
    with pytest.warns(Warning):
        with pytest.raises(BootstrapUnstable):
            bootstrap_ci(d, rec, n_boot=50)


def test_failed_replicate_retried_with_fresh_resample(monkeypatch):
    d = random_dataset(30, seed=13)
    rec = _recipe(ScalePolicy([0.9, 0.9]), estimator="weighted")
    seen = []
    real = est_mod._ReplicateTask._attempt

    def flaky(self, key):
        seen.append(tuple(key))
        if len(key) == 2 and key[1] % 10 == 0:
            return None
        return real(self, key)

    monkeypatch.setattr(est_mod._ReplicateTask, "_attempt", flaky)
    e = bootstrap_ci(d, rec, n_boot=50, seed=5)
    assert e.n_missing == 0
    assert (5, 0, 1) in seen and (5, 10, 1) in seen and (5, 1, 1) not in seen


def test_missing_replicates_counted(monkeypatch):
    d = random_dataset(30, seed=14)
    rec = _recipe(ScalePolicy([0.9, 0.9]), estimator="weighted")
    real = est_mod._ReplicateTask._attempt
    monkeypatch.setattr(est_mod._ReplicateTask, "_attempt",
                        lambda self, key: None if key[1] in (3, 7) else real(self, key))
    e = bootstrap_ci(d, rec, n_boot=50, seed=5)
    assert e.n_missing == 2 and len(e.replicate_estimates) == 48
    monkeypatch.setattr(est_mod._ReplicateTask, "_attempt",
                        lambda self, key: None if key[1] < 3 else real(self, key))
    with pytest.raises(BootstrapUnstable):
        bootstrap_ci(d, rec, n_boot=50, seed=5)


def test_estimate_serialization():
    d = random_dataset(30, seed=15)
    e = bootstrap_ci(d, _recipe(ScalePolicy([0.95, 0.95])), n_boot=50, tau=0.95)
    doc = json.loads(e.to_json())
    for key in ("policy", "tau", "estimator", "mu_q_hat", "effect", "ci", "n_boot", "ess",
                "converged"):
        assert key in doc
    assert doc["schema_version"] == 1
    assert doc["effect"] == pytest.approx(e.mu_q_hat - e.observed_mean)
    assert doc["wide_bootstrap"] == (not e.ci_low <= e.mu_q_hat <= e.ci_high)
    assert e.ci == (e.ci_low, e.ci_high)


def test_recipe_validation():
    with pytest.raises(ValueError):
        EstimationRecipe(policy=ScalePolicy([1.0]), weighting="entropy")
    with pytest.raises(ValueError):
        EstimationRecipe(policy=ScalePolicy([1.0]), estimator="doubly")
