"""Balance diagnostics: permutation test, effective sample size, tau sweeps, error decomposition."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .balance import effective_sample_size
from .data import Dataset
from .energy import EUCLIDEAN, BalanceGram, build_gram, weighted_energy_distance
from .errors import DimensionMismatch, MVTPError, TruthUnavailable
from .estimate import EstimationRecipe, bootstrap_ci, kernel_kind
from .policy import Policy, ShiftedSample, shift_dataset
from .sensitivity import lambda_star_from_replicates

SCHEMA_VERSION = 1
SWEEP_COLUMNS = ("tau", "estimate", "ci_lo", "ci_hi", "observed_stat", "threshold", "pass",
                 "lambda_star")

__all__ = ["BalanceDiagnostic", "permutation_balance_test", "permutation_null", "effective_sample_size",
           "TauSweep", "tau_sweep", "error_decomposition"]


@dataclass(frozen=True, eq=False)
class BalanceDiagnostic:
    observed_stat: float
    threshold: float
    alpha: float
    n_perm: int
    null_stats: np.ndarray
    kind: str = EUCLIDEAN

    @property
    def passed(self) -> bool:
        return bool(self.observed_stat <= self.threshold)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "observed_stat": self.observed_stat,
                "threshold": self.threshold, "alpha": self.alpha, "n_perm": self.n_perm,
                "pass": self.passed, "kind": self.kind}


def _rowdot(a, b):
    return np.einsum("ij,ij->i", a, b)


def permutation_null(g: BalanceGram, n_perm: int = 500, seed=0, chunk: int = 64) -> np.ndarray:
    """Unweighted statistics after randomly splitting the pooled observed and shifted points.

    The ``2n`` observed and shifted points are pooled and permuted with
    ``default_rng([seed, b]).permutation(2n)``; the first ``n`` positions form
    one pseudo-sample and the rest the other. With ``u``, ``v`` their
    indicator vectors and ``K`` the pooled Gram matrix the statistic is
    ``(2 u'Kv - u'Ku - v'Kv) / n^2`` for the energy distance (signs flipped
    for MMD). ``K`` is never formed; each quadratic form is assembled from
    the three blocks. Rounding below zero is floored at 0.
    """
    n = g.n
    base = list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]
    out = np.empty(n_perm)
    for start in range(0, n_perm, chunk):
        m = min(chunk, n_perm - start)
        U = np.zeros((m, 2 * n))
        for r in range(m):
            U[r, np.random.default_rng([*base, start + r]).permutation(2 * n)[:n]] = 1.0
        V = 1.0 - U
        Uo, Us, Vo, Vs = U[:, :n], U[:, n:], V[:, :n], V[:, n:]
        UoGoo, UoGos, UsGss = Uo @ g.g_oo, Uo @ g.g_os, Us @ g.g_ss
        VoGoo, VoGos, VsGss = Vo @ g.g_oo, Vo @ g.g_os, Vs @ g.g_ss
        uv = _rowdot(UoGoo, Vo) + _rowdot(UoGos, Vs) + _rowdot(VoGos, Us) + _rowdot(UsGss, Vs)
        uu = _rowdot(UoGoo, Uo) + 2.0 * _rowdot(UoGos, Us) + _rowdot(UsGss, Us)
        vv = _rowdot(VoGoo, Vo) + 2.0 * _rowdot(VoGos, Vs) + _rowdot(VsGss, Vs)
        stat = (2.0 * uv - uu - vv) / (n * n)
        if g.kind != EUCLIDEAN:
            stat = -stat
        out[start:start + m] = np.maximum(stat, 0.0)
    return out


def permutation_balance_test(d: Dataset, p: Optional[Policy], w, g: BalanceGram,
                             n_perm: int = 500, alpha: float = 0.10, seed=0) -> BalanceDiagnostic:
    """Compare the weighted energy statistic with the permutation ``1 - alpha`` quantile.

    The null distribution comes from :func:`permutation_null`; it does not
    depend on the weights, so dispersed weights cannot raise their own
    threshold. ``d`` and ``p`` are only used to check that ``g`` matches
    the data.
    """
    if n_perm < 100:
        raise ValueError("n_perm must be at least 100")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    if d is not None and d.n != g.n:
        raise DimensionMismatch("Gram size does not match the dataset")
    observed = weighted_energy_distance(g, w).value
    null = permutation_null(g, n_perm, seed)
    threshold = max(float(np.quantile(null, 1.0 - alpha)), 0.0)
    return BalanceDiagnostic(observed_stat=float(observed), threshold=threshold, alpha=alpha,
                             n_perm=n_perm, null_stats=null, kind=g.kind)


def error_decomposition(d: Dataset, s: ShiftedSample, w, true_mu: Optional[Callable],
                        mu_q_true: Optional[float]) -> dict:
    """Split the weighted estimator's error into confounding, sampling and noise parts.

    ``true_mu(x, a)`` evaluates the mean function row-wise; ``mu_q_true`` is
    the population policy mean.
    """
    if true_mu is None or mu_q_true is None:
        raise TruthUnavailable("the error decomposition needs the true mean function and mu_q")
    w = np.asarray(getattr(w, "w", w), dtype=np.float64)
    n = d.n
    if w.shape[0] != n or s.n != n:
        raise DimensionMismatch("weights, dataset and shifted sample must agree in length")
    ones = np.ones(n)
    mu_obs = np.asarray(true_mu(d.x, d.a), dtype=np.float64)
    mu_shift = np.asarray(true_mu(s.x, s.a), dtype=np.float64)
    eps = np.asarray(d.y) - mu_obs
    plug = float(ones @ mu_shift) / n
    confounding = float(w @ mu_obs) / n - plug
    sampling = plug - float(mu_q_true)
    noise = float(w @ eps) / n
    total = float(w @ d.y) / n - float(mu_q_true)
    return {"confounding_error": confounding, "sampling_error": sampling, "noise_term": noise,
            "total_error": total}


@dataclass(frozen=True, eq=False)
class TauSweep:
    taus: np.ndarray
    rows: list

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        extra = ("effect", "effect_ci_lo", "effect_ci_hi", "ess", "lambda_flag", "error")
        w.writerow(("schema_version",) + SWEEP_COLUMNS + extra)
        for r in self.rows:
            w.writerow([SCHEMA_VERSION] + [_fmt(r.get(c)) for c in SWEEP_COLUMNS + extra])
        return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def tau_sweep(d: Dataset, family: Callable[[float], Policy], taus: Sequence[float],
              recipe: EstimationRecipe, seed=0, n_boot: int = 200, level: float = 0.95,
              n_perm: int = 500, alpha: float = 0.10, lambda_max: float = 5.0,
              sensitivity: bool = True, threads: int = 1) -> TauSweep:
    """Estimate, balance diagnostic and sensitivity level for each ``tau`` in the grid.

    Every ``tau`` uses the same seed, so bootstrap resamples and permutation
    swaps are shared across the grid. Failures are recorded per row and the
    sweep continues.
    """
    taus = np.asarray(taus, dtype=np.float64)
    if taus.ndim != 1 or taus.size == 0:
        raise ValueError("tau grid must be a non-empty 1-D sequence")
    if np.any(taus <= 0):
        raise ValueError("all tau values must be positive")
    if np.any(np.diff(taus) <= 0):
        raise ValueError("tau grid must be strictly increasing")
    rows = []
    diag_kind = kernel_kind(recipe.weighting) or EUCLIDEAN
    for tau in taus:
        row = {"tau": float(tau)}
        try:
            policy = family(float(tau))
            rec = replace(recipe, policy=policy)
            est = bootstrap_ci(d, rec, n_boot=n_boot, level=level, seed=seed, threads=threads,
                               tau=float(tau))
            row.update(estimate=est.mu_q_hat, ci_lo=est.ci_low, ci_hi=est.ci_high,
                       effect=est.effect, effect_ci_lo=est.effect_ci[0],
                       effect_ci_hi=est.effect_ci[1], ess=est.ess)
            s = shift_dataset(policy, d)
            g = build_gram(d, s, kind=diag_kind, bandwidth=recipe.bandwidth)
            diag = permutation_balance_test(d, policy, est.point.weights, g, n_perm=n_perm,
                                            alpha=alpha, seed=seed)
            row.update(observed_stat=diag.observed_stat, threshold=diag.threshold,
                       **{"pass": diag.passed})
            if sensitivity:
                star = lambda_star_from_replicates(est.point, est.replicates, lambda_max, level)
                row["lambda_star"] = star.value
                row["lambda_flag"] = ("not_significant_at_one" if star.not_significant_at_one
                                      else "significant_at_max" if star.significant_at_max else "")
        except (MVTPError, np.linalg.LinAlgError, ValueError) as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return TauSweep(taus=taus, rows=rows)
