"""Marginal sensitivity analysis through bounded weight ratios.

Under the sensitivity model the true weights ``w*`` satisfy
``w_i / lam <= w*_i <= w_i * lam``. The normalized weighted mean
``sum(w* y) / sum(w*)`` is a linear-fractional function of ``w*`` over a box,
so its extremes sit at vertices where every row with ``y`` above a threshold
takes one end of its interval and every row below takes the other. Scanning
the ``n + 1`` thresholds of the sorted outcomes gives the exact bounds.

Effect bounds apply this to the residual term of the augmented estimator and
add back the plug-in term; significance uses percentile-bootstrap intervals of
the relevant bound, reusing the estimate module's replicates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch

SCHEMA_VERSION = 1
DEFAULT_LAMBDAS = tuple(np.round(np.arange(1.0, 3.0 + 1e-9, 0.1), 10))


class _SortedBox:
    """Pre-sorted outcomes and weights for repeated bound evaluation."""

    def __init__(self, y, w):
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        w = np.asarray(getattr(w, "w", w), dtype=np.float64).reshape(-1)
        if y.shape != w.shape:
            raise DimensionMismatch("outcome and weight vectors differ in length")
        if y.size == 0:
            raise DimensionMismatch("need at least one row")
        if np.any(w < 0) or not w.sum() > 0:
            raise ValueError("weights must be nonnegative with a positive total")
        order = np.argsort(y, kind="stable")
        self.y = y[order]
        self.w = w[order]
        self.wy = self.w * self.y
        self.point = float(w @ y) / float(w.sum())

    def bounds(self, lam: float) -> tuple:
        if lam < 1:
            raise ValueError("lambda must be at least 1")
        if lam == 1:
            return self.point, self.point
        zero = np.zeros(1)
        # prefix sums of the first k sorted rows (k = 0..n)
        cw = np.concatenate([zero, np.cumsum(self.w)])
        cwy = np.concatenate([zero, np.cumsum(self.wy)])
        tw, twy = cw[-1], cwy[-1]
        lo_f, hi_f = 1.0 / lam, lam
        # upper: smallest k rows at w/lam, the rest at w*lam
        num_u = lo_f * cwy + hi_f * (twy - cwy)
        den_u = lo_f * cw + hi_f * (tw - cw)
        # lower: smallest k rows at w*lam, the rest at w/lam
        num_l = hi_f * cwy + lo_f * (twy - cwy)
        den_l = hi_f * cw + lo_f * (tw - cw)
        upper = float(np.max(num_u / den_u))
        lower = float(np.min(num_l / den_l))
        return min(lower, self.point), max(upper, self.point)


def extremal_bounds(y, w, lam: float) -> tuple:
    """Sharp ``(lower, upper)`` bounds of ``sum(w* y) / sum(w*)`` over ``w* in [w/lam, w*lam]``."""
    return _SortedBox(y, w).bounds(float(lam))


def effect_bounds(d, s, w, m=None, lam: float = 1.0, *, pred_obs=None, pred_shift=None) -> tuple:
    """Bounds on ``mu_q - E[Y]`` at sensitivity level ``lam``.

    With an outcome model (or predictions) the residuals ``y - m(x, a)`` are
    bounded and the plug-in mean of ``m(x, q(x, a))`` added back; with no
    model the raw outcomes are bounded. The observed mean is subtracted.
    """
    n = d.n
    ones = np.ones(n)
    if m is not None and (pred_obs is None or pred_shift is None):
        pred_obs = m.predict(d.joint())
        pred_shift = m.predict(s.joint())
    if pred_obs is None:
        resid, plug_in = np.asarray(d.y), 0.0
    else:
        resid = np.asarray(d.y) - np.asarray(pred_obs, dtype=np.float64)
        plug_in = float(ones @ np.asarray(pred_shift, dtype=np.float64)) / n
    ybar = float(ones @ d.y) / n
    lo, hi = extremal_bounds(resid, w, lam)
    return lo + plug_in - ybar, hi + plug_in - ybar


class _EffectBox:
    """Effect-scale bounds for one pipeline result (point fit or bootstrap replicate)."""

    def __init__(self, resid, w, plug_in, obs_mean):
        self.box = _SortedBox(resid, w)
        self.offset = float(plug_in) - float(obs_mean)

    def bounds(self, lam):
        lo, hi = self.box.bounds(lam)
        return lo + self.offset, hi + self.offset


def _boxes_from(point, replicates):
    pbox = _EffectBox(point.resid, point.weights.w, point.plug_in, point.observed_mean)
    rboxes = [_EffectBox(r.resid, r.w, r.plug_in, r.observed_mean)
              for r in replicates if r is not None]
    if not rboxes:
        raise ValueError("no usable bootstrap replicates")
    return pbox, rboxes


def _scale(point) -> float:
    return 1.0 + float(np.max(np.abs(point.resid))) + abs(point.plug_in) + abs(point.observed_mean)


@dataclass(frozen=True, eq=False)
class SensitivityCurve:
    lambdas: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    point_effect: float
    level: float
    lambda_star: float
    not_significant_at_one: bool
    significant_at_max: bool

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "point_effect": self.point_effect,
            "level": self.level,
            "lambda_star": self.lambda_star,
            "not_significant_at_one": self.not_significant_at_one,
            "significant_at_max": self.significant_at_max,
            "rows": [{"lambda": float(l), "lower": float(a), "upper": float(b),
                      "ci_lower": float(c), "ci_upper": float(e)}
                     for l, a, b, c, e in zip(self.lambdas, self.lower, self.upper,
                                              self.ci_lower, self.ci_upper)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


class _Significance:
    def __init__(self, point, replicates, level: float):
        self.pbox, self.rboxes = _boxes_from(point, replicates)
        self.level = level
        self.effect = self.pbox.bounds(1.0)[0]
        self.tol = 1e-9 * _scale(point)

    def band(self, lam):
        """Point bounds and the outer percentile limits of the bound replicates."""
        lo, hi = self.pbox.bounds(lam)
        reps = np.array([b.bounds(lam) for b in self.rboxes])
        a = (1.0 - self.level) / 2.0
        ci_lo = float(np.quantile(reps[:, 0], a))
        ci_hi = float(np.quantile(reps[:, 1], 1.0 - a))
        return lo, hi, ci_lo, ci_hi, reps

    def significant(self, lam) -> bool:
        lo, hi, _, _, reps = self.band(lam)
        a = (1.0 - self.level) / 2.0
        # positive effect: the lower bound's interval must sit above 0;
        # negative effect: the upper bound's interval must sit below 0
        if self.effect > 0:
            return bool(np.quantile(reps[:, 0], a) > self.tol)
        return bool(np.quantile(reps[:, 1], 1.0 - a) < -self.tol)


@dataclass(frozen=True)
class LambdaStar:
    value: float
    not_significant_at_one: bool
    significant_at_max: bool


def lambda_star_from_replicates(point, replicates, lambda_max: float = 5.0, level: float = 0.95,
                                tol: float = 0.01) -> LambdaStar:
    """Largest ``lam`` in ``[1, lambda_max]`` whose relevant-bound interval excludes 0.

    The relevant bound is the lower bound for a positive point effect and the
    upper bound otherwise. Bisection to absolute tolerance ``tol``, relying on
    the bounds being nested in ``lam``.
    """
    if lambda_max < 1:
        raise ValueError("lambda_max must be at least 1")
    sig = _Significance(point, replicates, level)
    if not sig.significant(1.0):
        return LambdaStar(1.0, True, False)
    if sig.significant(lambda_max):
        return LambdaStar(float(lambda_max), False, True)
    lo, hi = 1.0, float(lambda_max)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if sig.significant(mid):
            lo = mid
        else:
            hi = mid
    return LambdaStar(lo, False, False)


def sensitivity_curve(point, replicates, lambdas: Sequence[float] = DEFAULT_LAMBDAS,
                      level: float = 0.95, lambda_max: float = 5.0) -> SensitivityCurve:
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if lambdas.ndim != 1 or lambdas.size == 0 or np.any(lambdas < 1) or np.any(np.diff(lambdas) <= 0):
        raise ValueError("lambda grid must be strictly increasing and >= 1")
    sig = _Significance(point, replicates, level)
    rows = [sig.band(l)[:4] for l in lambdas]
    arr = np.array(rows)
    star = lambda_star_from_replicates(point, replicates, lambda_max, level)
    return SensitivityCurve(lambdas=lambdas, lower=arr[:, 0], upper=arr[:, 1],
                            ci_lower=arr[:, 2], ci_upper=arr[:, 3], point_effect=sig.effect,
                            level=level, lambda_star=star.value,
                            not_significant_at_one=star.not_significant_at_one,
                            significant_at_max=star.significant_at_max)


def largest_significant_lambda(d, recipe, lambda_max: float = 5.0, n_boot: int = 200,
                               seed=0, level: float = 0.95, threads: int = 1,
                               estimate=None) -> LambdaStar:
    """Bootstrap the pipeline (or reuse ``estimate``'s replicates) and search for the largest significant ``lam``."""
    from .estimate import bootstrap_ci
    if estimate is None:
        estimate = bootstrap_ci(d, recipe, n_boot=n_boot, level=level, seed=seed, threads=threads)
    return lambda_star_from_replicates(estimate.point, estimate.replicates, lambda_max, level)
