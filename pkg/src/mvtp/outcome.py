"""Outcome regressions for the augmented estimator.

Three model kinds are available:

``ridge-poly``
    ridge regression on a degree-2 polynomial expansion (squares and pairwise
    interactions) of the standardized features, penalty chosen by GCV unless
    given;
``forest``
    bagged CART regression trees (see :mod:`mvtp._cart`);
``stack``
    a convex combination of the two, with combination weights fitted by
    least squares on out-of-fold predictions.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ._cart import Forest
from .data import Standardizer
from .errors import DimensionMismatch, SingularDesign, TooFewRows

KINDS = ("ridge-poly", "forest", "stack")


@dataclass(frozen=True)
class OutcomeConfig:
    ridge_penalty: Optional[float] = None
    degree: int = 2
    n_trees: int = 200
    max_depth: int = 12
    min_leaf: int = 5
    max_features: Optional[int] = None
    n_folds: int = 5
    learners: tuple = ("ridge-poly", "forest")
    seed: int = 0


def poly_features(z: np.ndarray, degree: int = 2) -> np.ndarray:
    """Columns of ``z`` followed by all degree-2 products ``z_i z_j`` with ``i <= j``."""
    if degree not in (1, 2):
        raise ValueError("only degree 1 or 2 expansions are supported")
    m = z.shape[1]
    if degree == 1 or m == 0:
        return np.array(z, dtype=np.float64)
    cols = [z] + [z[:, i:] * z[:, i:i + 1] for i in range(m)]
    return np.hstack(cols)


# GCV penalty grid, relative to the largest eigenvalue of the centered Gram matrix
_GCV_GRID = np.logspace(-10, 0, 41)


class _Ridge:
    """Ridge regression with an unpenalized intercept on polynomial features.

    Works from the centered Gram matrix ``Phi'Phi`` and its eigendecomposition,
    so GCV over the whole penalty grid costs one small symmetric eigensolve.
    """

    def __init__(self, penalty=None, degree=2):
        self.penalty = penalty
        self.degree = degree

    def fit(self, z, y):
        phi = poly_features(z, self.degree)
        n = phi.shape[0]
        self.center_ = phi.mean(axis=0)
        self.intercept_ = float(y.mean())
        if phi.shape[1] == 0:
            self.coef_ = np.zeros(0)
            return self
        phi = phi - self.center_
        yc = y - self.intercept_
        if self.penalty is not None and float(self.penalty) == 0.0:
            s = np.linalg.svd(phi, compute_uv=False)
            tol = s.max() * max(phi.shape) * np.finfo(float).eps
            if s.size < phi.shape[1] or np.any(s <= tol):
                raise SingularDesign("unpenalized design matrix is rank deficient")
            self.coef_ = np.linalg.lstsq(phi, yc, rcond=None)[0]
            self.alpha_ = 0.0
            return self
        evals, V = np.linalg.eigh(phi.T @ phi)
        evals = np.maximum(evals, 0.0)
        vty = V.T @ (phi.T @ yc)
        if self.penalty is None:
            top = float(evals[-1]) if evals[-1] > 0 else 1.0
            alphas = top * _GCV_GRID
            pos = evals > top * 1e-14
            # squared projections of y onto the left singular vectors
            u2 = np.zeros_like(evals)
            u2[pos] = vty[pos] ** 2 / evals[pos]
            resid_out = max(float(yc @ yc) - float(u2.sum()), 0.0)
            shrink = evals[None, :] / (evals[None, :] + alphas[:, None])
            rss = ((1.0 - shrink) ** 2 * u2[None, :]).sum(axis=1) + resid_out
            df = shrink.sum(axis=1)
            ok = n - df > 0
            gcv = np.where(ok, n * rss / np.where(ok, n - df, 1.0) ** 2, np.inf)
            alpha = float(alphas[int(np.argmin(gcv))]) if np.any(ok) else float(alphas[-1])
        else:
            alpha = float(self.penalty)
        self.coef_ = V @ (vty / (evals + alpha))
        self.alpha_ = alpha
        return self

    def predict(self, z):
        phi = poly_features(z, self.degree) - self.center_
        return phi @ self.coef_ + self.intercept_


def _make_learner(kind: str, cfg: OutcomeConfig, seed_offset: int = 0):
    if kind == "ridge-poly":
        return _Ridge(cfg.ridge_penalty, cfg.degree)
    if kind == "forest":
        return Forest(n_trees=cfg.n_trees, max_depth=cfg.max_depth, min_leaf=cfg.min_leaf,
                      max_features=cfg.max_features, seed=[cfg.seed, seed_offset])
    raise ValueError(f"unknown learner {kind!r}")


def simplex_least_squares(P: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Minimize ``|P b - y|^2`` over ``b >= 0, sum(b) = 1`` by enumerating supports."""
    m = P.shape[1]
    best = None
    for size in range(1, m + 1):
        for support in itertools.combinations(range(m), size):
            S = list(support)
            A = P[:, S]
            kkt = np.zeros((size + 1, size + 1))
            kkt[:size, :size] = 2.0 * A.T @ A
            kkt[:size, size] = 1.0
            kkt[size, :size] = 1.0
            rhs = np.concatenate([2.0 * A.T @ y, [1.0]])
            sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
            b = np.zeros(m)
            b[S] = sol[:size]
            if np.any(b < -1e-12):
                continue
            b = np.maximum(b, 0.0)
            b /= b.sum()
            loss = float(np.sum((P @ b - y) ** 2))
            if best is None or loss < best[0] - 1e-15:
                best = (loss, b)
    return best[1]


def _fold_ids(n: int, n_folds: int, seed) -> np.ndarray:
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=np.int64)
    folds[perm] = np.arange(n) % n_folds
    return folds


class OutcomeModel:
    """A fitted outcome regression ``mu(x, a)`` over the joint feature matrix."""

    def __init__(self, kind, scaler, learners, stack_weights, n_features, cv_losses=None):
        self.kind = kind
        self.scaler = scaler
        self.learners = learners
        self.stack_weights = stack_weights
        self.n_features = n_features
        self.cv_losses = cv_losses

    def predict(self, x_features) -> np.ndarray:
        x_features = np.asarray(x_features, dtype=np.float64)
        if x_features.ndim == 1:
            x_features = x_features.reshape(-1, self.n_features) if x_features.size else \
                np.empty((0, self.n_features))
        if x_features.shape[1] != self.n_features:
            raise DimensionMismatch(
                f"model was fitted on {self.n_features} features, got {x_features.shape[1]}")
        if x_features.shape[0] == 0:
            return np.zeros(0)
        z = self.scaler.transform(x_features)
        preds = np.column_stack([lr.predict(z) for lr in self.learners])
        return preds @ self.stack_weights


def _check_rows(kind: str, n: int) -> None:
    if kind not in KINDS:
        raise ValueError(f"unknown outcome model kind {kind!r}; choose from {KINDS}")
    if kind in ("forest", "stack") and n < 10:
        raise TooFewRows(f"{kind} needs at least 10 rows, got {n}")
    if n < 2:
        raise TooFewRows("outcome models need at least 2 rows")


def fit(kind: str, x_features, y, cfg: OutcomeConfig = OutcomeConfig()) -> OutcomeModel:
    """Fit an outcome model of the given kind to ``y`` on ``x_features``."""
    x_features = np.asarray(x_features, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = y.shape[0]
    if x_features.shape[0] != n:
        raise DimensionMismatch("features and outcome differ in length")
    _check_rows(kind, n)
    scaler = Standardizer.fit(x_features)
    z = scaler.transform(x_features)
    if kind != "stack":
        learner = _make_learner(kind, cfg).fit(z, y)
        return OutcomeModel(kind, scaler, [learner], np.ones(1), x_features.shape[1])
    folds = _fold_ids(n, cfg.n_folds, [cfg.seed, 7])
    oof = np.zeros((n, len(cfg.learners)))
    for k in range(cfg.n_folds):
        train = folds != k
        test = ~train
        for j, name in enumerate(cfg.learners):
            lr = _make_learner(name, cfg, seed_offset=100 + k).fit(z[train], y[train])
            oof[test, j] = lr.predict(z[test])
    beta = simplex_least_squares(oof, y)
    cv_losses = {name: float(np.mean((oof[:, j] - y) ** 2)) for j, name in enumerate(cfg.learners)}
    cv_losses["stack"] = float(np.mean((oof @ beta - y) ** 2))
    learners = [_make_learner(name, cfg).fit(z, y) for name in cfg.learners]
    return OutcomeModel("stack", scaler, learners, beta, x_features.shape[1], cv_losses)


def predict(m: OutcomeModel, x_features) -> np.ndarray:
    return m.predict(x_features)


def crossfit_predict(kind: str, x_features, y, targets: Sequence[np.ndarray],
                     cfg: OutcomeConfig = OutcomeConfig()):
    """Out-of-fold predictions at the training rows and at row-aligned target points.

    Rows are split into ``cfg.n_folds`` folds; the prediction for row ``i`` (and
    for ``targets[j][i]``) comes from models fitted without row ``i``'s fold.
    For ``stack`` the combination weights are fitted on the same out-of-fold
    predictions, so one set of fold fits serves both purposes.

    Returns ``(pred_train, [pred_target_0, ...])``.
    """
    x_features = np.asarray(x_features, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = y.shape[0]
    _check_rows(kind, n)
    targets = [np.asarray(t, dtype=np.float64) for t in targets]
    for t in targets:
        if t.shape != x_features.shape:
            raise DimensionMismatch("cross-fit targets must be row-aligned with the features")
    n_folds = min(cfg.n_folds, n // 2)
    if n_folds < 2:
        m = fit(kind, x_features, y, cfg)
        return m.predict(x_features), [m.predict(t) for t in targets]
    scaler = Standardizer.fit(x_features)
    z = scaler.transform(x_features)
    zt = [scaler.transform(t) for t in targets]
    names = list(cfg.learners) if kind == "stack" else [kind]
    folds = _fold_ids(n, n_folds, [cfg.seed, 11])
    oof = np.zeros((n, len(names)))
    oof_t = [np.zeros((n, len(names))) for _ in targets]
    for k in range(n_folds):
        train = folds != k
        test = ~train
        for j, name in enumerate(names):
            if name == "forest" and train.sum() < 10:
                raise TooFewRows("forest folds need at least 10 training rows")
            lr = _make_learner(name, cfg, seed_offset=200 + k).fit(z[train], y[train])
            oof[test, j] = lr.predict(z[test])
            for t_idx, zz in enumerate(zt):
                oof_t[t_idx][test, j] = lr.predict(zz[test])
    beta = simplex_least_squares(oof, y) if len(names) > 1 else np.ones(1)
    return oof @ beta, [o @ beta for o in oof_t]
