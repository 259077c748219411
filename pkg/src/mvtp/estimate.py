"""Weighted and augmented estimators of the policy mean, with pairs-bootstrap intervals.

The augmented estimator is

    (1/n) sum_i w_i (Y_i - m(X_i, A_i)) + (1/n) sum_i m(X_i, q(X_i, A_i))

with ``m`` an outcome regression (out-of-fold predictions when cross-fitting).
All sums are dot products with a fixed reduction order, so under the identity
policy with unit weights the estimate reproduces ``ones @ y / n`` exactly for
the weighted estimator.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._parallel import parallel_map
from .balance import (SolverConfig, Weights, classification_weights, effective_sample_size,
                      solve_energy_weights, uniform_weights)
from .data import Dataset, resample_indices
from .energy import EUCLIDEAN, GAUSSIAN, BalanceGram, build_gram
from .errors import BootstrapUnstable, DimensionMismatch, MVTPError
from .outcome import OutcomeConfig, crossfit_predict
from .outcome import fit as fit_outcome
from .policy import Policy, ShiftedSample, shift_dataset

WEIGHTINGS = ("energy-penalized", "energy-kernel", "uniform", "classification-logistic")
ESTIMATORS = ("weighted", "augmented")
SCHEMA_VERSION = 1


def _w(w) -> np.ndarray:
    return np.asarray(getattr(w, "w", w), dtype=np.float64).reshape(-1)


def observed_mean(d: Dataset) -> float:
    """Sample mean of ``y`` computed as ``ones @ y / n`` (same reduction as the weighted estimator)."""
    return float(np.ones(d.n) @ d.y) / d.n


def weighted_estimate(d: Dataset, w) -> float:
    """``(1/n) sum_i w_i y_i``."""
    w = _w(w)
    if w.shape[0] != d.n:
        raise DimensionMismatch(f"{w.shape[0]} weights for {d.n} rows")
    return float(w @ d.y) / d.n


def augmented_estimate(d: Dataset, s: ShiftedSample, w, m=None, *, pred_obs=None,
                       pred_shift=None) -> float:
    """Weighted residual term plus the plug-in mean at the shifted points.

    Either pass a fitted model ``m`` or precomputed predictions at the observed
    and shifted rows (e.g. out-of-fold predictions).
    """
    w = _w(w)
    n = d.n
    if w.shape[0] != n or s.n != n:
        raise DimensionMismatch("weights, dataset and shifted sample must agree in length")
    if pred_obs is None or pred_shift is None:
        if m is None:
            raise ValueError("need a model or both prediction vectors")
        pred_obs = m.predict(d.joint())
        pred_shift = m.predict(s.joint())
    pred_obs = np.asarray(pred_obs, dtype=np.float64)
    pred_shift = np.asarray(pred_shift, dtype=np.float64)
    if pred_obs.shape != (n,) or pred_shift.shape != (n,):
        raise DimensionMismatch("prediction vectors must have one entry per row")
    return float(w @ (d.y - pred_obs)) / n + float(np.ones(n) @ pred_shift) / n


@dataclass(frozen=True, eq=False)
class AugmentedPopulation:
    """Stacked observed (``z = 0``) and shifted (``z = 1``) rows."""
    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    z: np.ndarray

    @property
    def n(self) -> int:
        return self.z.shape[0]


def make_augmented_population(d: Dataset, s: ShiftedSample) -> AugmentedPopulation:
    if d.n != s.n:
        raise DimensionMismatch("dataset and shifted sample differ in size")
    return AugmentedPopulation(
        x=np.vstack([d.x, s.x]), a=np.vstack([d.a, s.a]),
        y=np.concatenate([d.y, d.y]),
        z=np.concatenate([np.zeros(d.n, dtype=np.int64), np.ones(d.n, dtype=np.int64)]))


@dataclass(frozen=True)
class EstimationRecipe:
    """Everything needed to turn a dataset into a policy-mean estimate."""
    policy: Policy
    weighting: str = "energy-penalized"
    estimator: str = "augmented"
    outcome_kind: str = "stack"
    outcome: OutcomeConfig = OutcomeConfig()
    crossfit: bool = True
    solver: SolverConfig = SolverConfig()
    bandwidth: Optional[float] = None

    def __post_init__(self):
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"unknown weighting {self.weighting!r}; choose from {WEIGHTINGS}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}; choose from {ESTIMATORS}")


def kernel_kind(weighting: str) -> Optional[str]:
    return {"energy-penalized": EUCLIDEAN, "energy-kernel": GAUSSIAN}.get(weighting)


def compute_weights(d: Dataset, s: ShiftedSample, weighting: str,
                    solver: SolverConfig = SolverConfig(), bandwidth=None,
                    gram: Optional[BalanceGram] = None) -> Weights:
    if weighting == "uniform":
        return uniform_weights(d.n)
    if weighting == "classification-logistic":
        return classification_weights(d, s)
    kind = kernel_kind(weighting)
    if kind is None:
        raise ValueError(f"unknown weighting {weighting!r}")
    if gram is None:
        gram = build_gram(d, s, kind=kind, bandwidth=bandwidth)
    return solve_energy_weights(gram, solver)


def outcome_predictions(d: Dataset, s: ShiftedSample, kind: str, cfg: OutcomeConfig,
                        crossfit: bool = True):
    """Outcome predictions at the observed and shifted rows."""
    if crossfit:
        pred_obs, (pred_shift,) = crossfit_predict(kind, d.joint(), d.y, [s.joint()], cfg)
        return pred_obs, pred_shift
    m = fit_outcome(kind, d.joint(), d.y, cfg)
    return m.predict(d.joint()), m.predict(s.joint())


@dataclass(frozen=True, eq=False)
class PipelineResult:
    mu_q_hat: float
    observed_mean: float
    weights: Weights
    resid: np.ndarray
    plug_in: float

    @property
    def effect(self) -> float:
        return self.mu_q_hat - self.observed_mean


def run_pipeline(d: Dataset, recipe: EstimationRecipe) -> PipelineResult:
    """Shift, weight, (optionally) fit the outcome model and estimate."""
    d.require_estimable()
    s = shift_dataset(recipe.policy, d)
    w = compute_weights(d, s, recipe.weighting, recipe.solver, recipe.bandwidth)
    if recipe.estimator == "augmented":
        pred_obs, pred_shift = outcome_predictions(d, s, recipe.outcome_kind, recipe.outcome,
                                                   recipe.crossfit)
        mu = augmented_estimate(d, s, w, pred_obs=pred_obs, pred_shift=pred_shift)
        resid = d.y - pred_obs
        plug_in = float(np.ones(d.n) @ pred_shift) / d.n
    else:
        mu = weighted_estimate(d, w)
        resid = np.array(d.y)
        plug_in = 0.0
    return PipelineResult(mu_q_hat=mu, observed_mean=observed_mean(d), weights=w,
                          resid=resid, plug_in=plug_in)


@dataclass(frozen=True, eq=False)
class PolicyEffectEstimate:
    mu_q_hat: float
    observed_mean: float
    ci_low: float
    ci_high: float
    effect_ci: tuple
    level: float
    estimator_kind: str
    weighting: str
    n_boot: int
    replicate_estimates: np.ndarray
    n_missing: int = 0
    ess: float = float("nan")
    converged: bool = True
    policy: str = ""
    tau: Optional[float] = None
    point: Optional[PipelineResult] = None
    replicates: tuple = ()

    @property
    def effect(self) -> float:
        return self.mu_q_hat - self.observed_mean

    @property
    def ci(self) -> tuple:
        return (self.ci_low, self.ci_high)

    @property
    def wide_bootstrap(self) -> bool:
        return not (self.ci_low <= self.mu_q_hat <= self.ci_high)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "policy": self.policy,
            "tau": self.tau,
            "estimator": self.estimator_kind,
            "weighting": self.weighting,
            "mu_q_hat": self.mu_q_hat,
            "observed_mean": self.observed_mean,
            "effect": self.effect,
            "ci": [self.ci_low, self.ci_high],
            "effect_ci": list(self.effect_ci),
            "level": self.level,
            "n_boot": self.n_boot,
            "n_missing": self.n_missing,
            "wide_bootstrap": self.wide_bootstrap,
            "ess": self.ess,
            "converged": self.converged,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def percentile_interval(values, level: float) -> tuple:
    values = np.asarray(values, dtype=np.float64)
    lo, hi = np.quantile(values, [(1.0 - level) / 2.0, (1.0 + level) / 2.0])
    return float(lo), float(hi)


@dataclass(frozen=True, eq=False)
class Replicate:
    mu_q_hat: float
    observed_mean: float
    w: np.ndarray
    resid: np.ndarray
    plug_in: float


class _ReplicateTask:
    def __init__(self, d: Dataset, recipe: EstimationRecipe, seed):
        self.d = d
        self.recipe = recipe
        self.seed = seed

    def _attempt(self, key):
        rng = np.random.default_rng(key)
        idx = resample_indices(self.d.n, self.d.n, rng)
        db = self.d.take(idx)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            r = run_pipeline(db, self.recipe)
        if not r.weights.converged or not math.isfinite(r.mu_q_hat):
            return None
        return Replicate(r.mu_q_hat, r.observed_mean, np.array(r.weights.w), r.resid, r.plug_in)

    def __call__(self, b):
        for key in ([*self._seed_list(), b], [*self._seed_list(), b, 1]):
            try:
                out = self._attempt(key)
            except (MVTPError, np.linalg.LinAlgError, FloatingPointError):
                out = None
            if out is not None:
                return out
        return None

    def _seed_list(self):
        s = self.seed
        return list(s) if isinstance(s, (list, tuple)) else [int(s)]


def bootstrap_replicates(d: Dataset, recipe: EstimationRecipe, n_boot: int, seed=0,
                         threads: int = 1) -> list:
    """Pairs-bootstrap replicates (``None`` for failures), with the full pipeline refitted."""
    task = _ReplicateTask(d, recipe, seed)
    return parallel_map(task, range(n_boot), threads)


def bootstrap_ci(d: Dataset, recipe: EstimationRecipe, n_boot: int = 200, level: float = 0.95,
                 seed=0, threads: int = 1, max_missing: float = 0.05,
                 tau: Optional[float] = None) -> PolicyEffectEstimate:
    """Point estimate plus percentile pairs-bootstrap interval.

    Replicate ``b`` draws its resample from ``default_rng([seed, b])``; a failed
    replicate is retried once with ``[seed, b, 1]`` and otherwise recorded as
    missing. More than ``max_missing`` missing replicates raises
    :class:`BootstrapUnstable`.
    """
    if n_boot < 50:
        raise ValueError("n_boot must be at least 50")
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    point = run_pipeline(d, recipe)
    reps = bootstrap_replicates(d, recipe, n_boot, seed, threads)
    good = [r for r in reps if r is not None]
    n_missing = n_boot - len(good)
    if n_missing > max_missing * n_boot:
        raise BootstrapUnstable(f"{n_missing} of {n_boot} bootstrap replicates failed")
    mus = np.array([r.mu_q_hat for r in good])
    effects = np.array([r.mu_q_hat - r.observed_mean for r in good])
    lo, hi = percentile_interval(mus, level)
    return PolicyEffectEstimate(
        mu_q_hat=point.mu_q_hat, observed_mean=point.observed_mean, ci_low=lo, ci_high=hi,
        effect_ci=percentile_interval(effects, level), level=level,
        estimator_kind=recipe.estimator, weighting=recipe.weighting, n_boot=n_boot,
        replicate_estimates=mus, n_missing=n_missing, ess=effective_sample_size(point.weights),
        converged=point.weights.converged, policy=recipe.policy.name, tau=tau, point=point,
        replicates=tuple(reps))
