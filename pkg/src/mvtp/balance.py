"""Penalized energy balancing weights and comparator weights.

The balancing problem is

    minimize    E(w) + (lam / n^2) * sum(w_i^2)
    subject to  w_i >= 0,  sum(w_i) = n

where ``E`` is the weighted energy distance (or Gaussian MMD^2) from
:mod:`mvtp.energy`. It is a dense convex quadratic over a scaled simplex and
is solved by accelerated projected gradient with restarts.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .data import Dataset, Standardizer
from .energy import EUCLIDEAN, BalanceGram, quadratic_matrix
from .errors import (DimensionMismatch, NonConvexObjectiveWarning,
                     NotConvergedWarning, SeparationWarning, TooFewRows)
from .policy import ShiftedSample


@dataclass(frozen=True, eq=False)
class Weights:
    w: np.ndarray
    lam: float = 0.0
    converged: bool = True
    iterations: int = 0
    objective: float = float("nan")
    history: Optional[np.ndarray] = None
    nonconvex: bool = False
    separated: bool = False
    method: str = ""

    def __post_init__(self):
        w = np.ascontiguousarray(self.w, dtype=np.float64)
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def n(self) -> int:
        return self.w.shape[0]

    @property
    def ess(self) -> float:
        return effective_sample_size(self.w)


def effective_sample_size(w) -> float:
    """Kish effective sample size ``(sum w)^2 / sum w^2``."""
    w = np.asarray(getattr(w, "w", w), dtype=np.float64)
    return float(w.sum() ** 2 / np.dot(w, w))


@dataclass(frozen=True)
class SolverConfig:
    lam: float = 1.0
    tol: float = 1e-8
    max_iter: int = 20000
    backtracking: bool = True
    check_convexity: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


def project_scaled_simplex(v, total: Optional[float] = None) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``{w >= 0, sum(w) = total}`` (``total`` defaults to ``len(v)``).

    Sort-and-threshold algorithm; ties are broken by index so the result is
    deterministic.
    """
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    n = v.shape[0]
    if total is None:
        total = float(n)
    if n == 0:
        return v.copy()
    order = np.argsort(-v, kind="stable")
    u = v[order]
    css = np.cumsum(u) - total
    ranks = np.arange(1, n + 1)
    support = np.flatnonzero(u - css / ranks > 0)
    rho = support[-1] if support.size else n - 1
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def uniform_weights(n: int) -> Weights:
    if n < 1:
        raise ValueError("n must be at least 1")
    return Weights(np.ones(n), method="uniform")


def _lanczos_min_eig(matvec, n: int, steps: int = 20) -> float:
    """Smallest Ritz value of a symmetric operator restricted to ``sum(v) = 0``."""
    if n < 2:
        return math.inf
    steps = min(steps, n - 1)
    ones = np.ones(n) / math.sqrt(n)
    q = np.cos(np.arange(n) * 1.3 + 0.7)
    q -= ones * (ones @ q)
    q /= np.linalg.norm(q)
    basis = [q]
    alphas, betas = [], []
    for j in range(steps):
        z = matvec(basis[-1])
        z -= ones * (ones @ z)
        alpha = float(basis[-1] @ z)
        alphas.append(alpha)
        for b in basis:
            z -= b * (b @ z)
        beta = float(np.linalg.norm(z))
        if j == steps - 1 or beta < 1e-12:
            break
        betas.append(beta)
        basis.append(z / beta)
    return float(eigh_tridiagonal(np.array(alphas), np.array(betas[:len(alphas) - 1]),
                                  eigvals_only=True)[0])


def stationarity_residual(w: np.ndarray, grad: np.ndarray) -> float:
    """``max |w - P(w - grad)|`` with ``P`` the projection onto the feasible set."""
    return float(np.max(np.abs(w - project_scaled_simplex(w - grad))))


def _stationary(w: np.ndarray, grad: np.ndarray, tol: float) -> bool:
    # the residual cannot resolve below rounding of the gradient itself (huge penalties)
    floor = 16.0 * np.finfo(float).eps * float(np.max(np.abs(grad)))
    return stationarity_residual(w, grad) <= max(tol, floor)


def solve_energy_weights(g: BalanceGram, cfg: SolverConfig = SolverConfig(),
                         w0: Optional[np.ndarray] = None) -> Weights:
    """Penalized energy balancing weights for the problem encoded by ``g``.

    Starts from uniform weights (or ``w0``) and runs FISTA with backtracking
    and function-value restarts; the recorded objective is non-increasing.
    Convergence is declared when the projected-gradient fixed-point residual
    drops below ``cfg.tol``
    (or below the rounding floor of the gradient, which matters only for huge
    penalties).
    """
    n = g.n
    if n == 1:
        return Weights(np.ones(1), lam=cfg.lam, converged=True, iterations=0,
                       objective=_objective_at(g, cfg.lam, np.ones(1)),
                       history=np.array([_objective_at(g, cfg.lam, np.ones(1))]),
                       method=g.kind)
    Q = quadratic_matrix(g)
    scale = 2.0 / (n * n)
    sign = 1.0 if g.kind == EUCLIDEAN else -1.0
    c = sign * scale * g.row_sums_os
    const = (-1.0 if g.kind == EUCLIDEAN else 1.0) * g.total_ss / (n * n)
    lam = cfg.lam

    def hess(v):
        return scale * (Q @ v + lam * v)

    nonconvex = False
    if cfg.check_convexity and g.kind == EUCLIDEAN:
        lo = _lanczos_min_eig(lambda v: Q @ v + lam * v, n)
        qscale = float(np.max(np.abs(g.g_oo))) * n + lam
        if lo < -1e-10 * qscale:
            nonconvex = True
            warnings.warn(f"projected Hessian has eigenvalue {lo:.3g} < 0",
                          NonConvexObjectiveWarning, stacklevel=2)

    def fval(v, hv):
        return 0.5 * float(v @ hv) + float(c @ v) + const

    # Lipschitz estimate by power iteration on the full Hessian
    v = np.cos(np.arange(n) * 0.37 + 0.1)
    v /= np.linalg.norm(v)
    L = 0.0
    for _ in range(30):
        hv = hess(v)
        L = float(np.linalg.norm(hv))
        if L == 0:
            break
        v = hv / L
    L = max(L, 1e-300)

    x = np.ones(n) if w0 is None else project_scaled_simplex(w0)
    hx = hess(x)
    fx = fval(x, hx)
    # objective differences below this are rounding noise; comparisons use it as slack
    slack = 16.0 * np.finfo(float).eps * (0.5 * abs(float(x @ hx)) + abs(float(c @ x)) + abs(const))
    history = [fx]
    x_prev, hx_prev = x, hx
    t = 1.0
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        grad_x = hx + c
        if _stationary(x, grad_x, cfg.tol):
            converged = True
            it -= 1
            break
        beta = (t - 1.0) / (t_next := (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0)
        y = x + beta * (x - x_prev)
        hy = hx + beta * (hx - hx_prev)
        fy = fval(y, hy)
        grad_y = hy + c
        while True:
            z = project_scaled_simplex(y - grad_y / L)
            hz = hess(z)
            fz = fval(z, hz)
            dz = z - y
            if not cfg.backtracking or fz <= fy + grad_y @ dz + 0.5 * L * (dz @ dz) + slack:
                break
            L *= 2.0
        if fz > fx + slack:
            # momentum made things worse: restart from x with a plain gradient step
            t_next = 1.0
            while True:
                z = project_scaled_simplex(x - grad_x / L)
                hz = hess(z)
                fz = fval(z, hz)
                dz = z - x
                if fz <= fx + grad_x @ dz + 0.5 * L * (dz @ dz) + slack:
                    break
                L *= 2.0
            if fz > fx + slack:
                z, hz, fz = x, hx, fx
        x_prev, hx_prev = x, hx
        x, hx, fx = z, hz, fz
        t = t_next
        history.append(fx)
    else:
        grad_x = hx + c
        converged = _stationary(x, grad_x, cfg.tol)
    if not converged:
        warnings.warn(f"weight solver did not converge in {cfg.max_iter} iterations",
                      NotConvergedWarning, stacklevel=2)
    # renormalize away rounding drift in the sum
    x = np.maximum(x, 0.0)
    x *= n / x.sum()
    return Weights(x, lam=lam, converged=converged, iterations=it,
                   objective=fx, history=np.array(history), nonconvex=nonconvex,
                   method=g.kind)


def _objective_at(g: BalanceGram, lam: float, w: np.ndarray) -> float:
    from .energy import _value
    return _value(g, w) + lam * float(w @ w) / g.n ** 2


def balancing_objective(g: BalanceGram, w, lam: float) -> float:
    """The penalized objective ``E(w) + lam/n^2 * |w|^2``."""
    w = np.asarray(getattr(w, "w", w), dtype=np.float64)
    return _objective_at(g, lam, w)


def _logistic_irls(F: np.ndarray, z: np.ndarray, ridge: float, max_iter: int = 100,
                   tol: float = 1e-10):
    n, m = F.shape
    beta = np.zeros(m)
    penalty = np.full(m, ridge)
    penalty[0] = 0.0
    converged = False
    for it in range(max_iter):
        eta = np.clip(F @ beta, -700, 700)
        prob = 1.0 / (1.0 + np.exp(-eta))
        wts = np.maximum(prob * (1.0 - prob), 1e-12)
        grad = F.T @ (z - prob) - penalty * beta
        H = (F * wts[:, None]).T @ F + np.diag(penalty)
        step = np.linalg.solve(H, grad)
        beta = beta + step
        if np.max(np.abs(step)) < tol * (1.0 + np.max(np.abs(beta))):
            converged = True
            break
    return beta, converged


def classification_weights(d: Dataset, s: ShiftedSample, ridge: float = 1e-6,
                           clip: float = 1e-6) -> Weights:
    """Odds weights from a logistic classifier of shifted (Z=1) versus observed (Z=0) rows.

    Features are the joint ``(x, a)`` coordinates standardized on the
    observed sample, plus an intercept. Each observed row gets weight
    proportional to ``p / (1 - p)`` with ``p`` its fitted probability of
    belonging to the shifted population, rescaled to sum to ``n``.
    """
    if d.n < 2:
        raise TooFewRows("classification weights need at least 2 rows")
    if s.n != d.n:
        raise DimensionMismatch("dataset and shifted sample differ in size")
    obs = d.joint()
    scaler = Standardizer.fit(obs)
    zo = scaler.transform(obs)
    zs = scaler.transform(s.joint())
    F = np.vstack([zo, zs])[:, ~scaler.constant]
    F = np.hstack([np.ones((2 * d.n, 1)), F])
    labels = np.concatenate([np.zeros(d.n), np.ones(d.n)])
    beta, converged = _logistic_irls(F, labels, ridge)
    eta = F[: d.n] @ beta
    prob = 1.0 / (1.0 + np.exp(-np.clip(eta, -700, 700)))
    all_prob = 1.0 / (1.0 + np.exp(-np.clip(F @ beta, -700, 700)))
    separated = (not converged) or bool(np.any(all_prob < clip) or np.any(all_prob > 1.0 - clip))
    if separated:
        warnings.warn("observed and shifted rows are nearly separable; probabilities clipped",
                      SeparationWarning, stacklevel=2)
    prob = np.clip(prob, clip, 1.0 - clip)
    odds = prob / (1.0 - prob)
    w = odds * (d.n / odds.sum())
    return Weights(w, converged=converged, separated=separated, method="classification-logistic")
