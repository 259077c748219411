"""Weighted energy distance and Gaussian MMD between observed and shifted samples.

Both statistics are quadratic forms in the weight vector built from three
pairwise blocks: observed/observed, observed/shifted and shifted/shifted.
Every sum is a matrix-vector product followed by a dot product, so that an
all-ones weight vector reproduces the shifted-sample term bit for bit (the
statistic is exactly zero under the identity policy).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .data import Dataset, Standardizer
from .errors import DimensionMismatch, InvalidWeights
from .policy import ShiftedSample

EUCLIDEAN = "euclidean-energy"
GAUSSIAN = "gaussian-mmd"
KINDS = (EUCLIDEAN, GAUSSIAN)

# pooled points beyond this count are thinned before the median heuristic
_MEDIAN_MAX_POINTS = 2000


@dataclass(frozen=True, eq=False)
class BalanceGram:
    g_oo: np.ndarray
    g_os: np.ndarray
    g_ss: np.ndarray
    kind: str = EUCLIDEAN
    bandwidth: Optional[float] = None
    standardizer: Optional[Standardizer] = None

    def __post_init__(self):
        n = self.g_oo.shape[0]
        for name in ("g_oo", "g_os", "g_ss"):
            if getattr(self, name).shape != (n, n):
                raise DimensionMismatch(f"{name} must be {n}x{n}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        # row sums reused by every evaluation
        ones = np.ones(n)
        object.__setattr__(self, "_r_os", self.g_os @ ones)
        object.__setattr__(self, "_s_ss", float(ones @ (self.g_ss @ ones)))

    @property
    def n(self) -> int:
        return self.g_oo.shape[0]

    @property
    def row_sums_os(self) -> np.ndarray:
        return self._r_os

    @property
    def total_ss(self) -> float:
        return self._s_ss


@dataclass(frozen=True)
class EnergyStat:
    value: float
    kind: str


def median_heuristic(points: np.ndarray) -> float:
    """Median pairwise Euclidean distance, thinning large inputs by a fixed stride."""
    m = points.shape[0]
    if m > _MEDIAN_MAX_POINTS:
        stride = int(np.ceil(m / _MEDIAN_MAX_POINTS))
        points = points[::stride]
    d = pdist(points)
    d = d[d > 0]
    if d.size == 0:
        return 1.0
    return float(np.median(d))


def gram_from_points(obs: np.ndarray, shifted: np.ndarray, kind: str = EUCLIDEAN,
                     bandwidth: Optional[float] = None) -> BalanceGram:
    """Gram blocks for already-prepared point clouds of identical shape."""
    obs = np.asarray(obs, dtype=np.float64)
    shifted = np.asarray(shifted, dtype=np.float64)
    if obs.ndim == 1:
        obs = obs.reshape(-1, 1)
    if shifted.ndim == 1:
        shifted = shifted.reshape(-1, 1)
    if obs.shape != shifted.shape:
        raise DimensionMismatch(f"observed {obs.shape} vs shifted {shifted.shape}")
    if kind not in KINDS:
        raise ValueError(f"unknown kernel kind {kind!r}")
    g_oo = cdist(obs, obs)
    g_os = cdist(obs, shifted)
    g_ss = cdist(shifted, shifted)
    if kind == GAUSSIAN:
        if bandwidth is None:
            bandwidth = median_heuristic(np.vstack([obs, shifted]))
        if not bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        c = -0.5 / bandwidth ** 2
        g_oo = np.exp(c * g_oo ** 2)
        g_os = np.exp(c * g_os ** 2)
        g_ss = np.exp(c * g_ss ** 2)
    return BalanceGram(g_oo, g_os, g_ss, kind=kind,
                       bandwidth=None if kind == EUCLIDEAN else float(bandwidth))


def build_gram(d: Dataset, s: ShiftedSample, kind: str = EUCLIDEAN,
               bandwidth: Optional[float] = None, standardize: bool = True) -> BalanceGram:
    """Pairwise blocks between observed ``(x, a)`` rows and shifted ``(x, q(x, a))`` rows.

    Coordinates are standardized with a :class:`Standardizer` fitted on the
    observed joint sample; the shifted rows reuse it. For the Gaussian kernel
    a missing bandwidth is set by the median heuristic on the pooled points.
    """
    if d.n != s.n:
        raise DimensionMismatch(f"dataset has {d.n} rows, shifted sample {s.n}")
    obs = d.joint()
    shifted = s.joint()
    scaler = None
    if standardize:
        scaler = Standardizer.fit(obs)
        obs = scaler.transform(obs)
        shifted = scaler.transform(shifted)
    g = gram_from_points(obs, shifted, kind=kind, bandwidth=bandwidth)
    object.__setattr__(g, "standardizer", scaler)
    return g


def _weights_array(w, n: int) -> np.ndarray:
    w = np.asarray(getattr(w, "w", w), dtype=np.float64).reshape(-1)
    if w.shape[0] != n:
        raise DimensionMismatch(f"expected {n} weights, got {w.shape[0]}")
    if not np.all(np.isfinite(w)):
        raise InvalidWeights("weights must be finite")
    return w


def check_weights(w, n: int, tol: float = 1e-8) -> np.ndarray:
    w = _weights_array(w, n)
    if np.any(w < 0):
        raise InvalidWeights("weights must be nonnegative")
    if abs(w.sum() - n) > tol * max(n, 1):
        raise InvalidWeights(f"weights sum to {w.sum()}, expected {n}")
    return w


def quadratic_matrix(g: BalanceGram) -> np.ndarray:
    """The matrix ``Q`` with ``w'Qw`` the weight-quadratic part of ``n^2`` times the statistic."""
    return -g.g_oo if g.kind == EUCLIDEAN else g.g_oo


def _value(g: BalanceGram, w: np.ndarray) -> float:
    n = g.n
    t_os = float(w @ g.row_sums_os)
    t_oo = float(w @ (g.g_oo @ w))
    if g.kind == EUCLIDEAN:
        total = 2.0 * t_os - t_oo - g.total_ss
    else:
        total = t_oo - 2.0 * t_os + g.total_ss
    return total / (n * n)


def weighted_energy_distance(g: BalanceGram, w, validate: bool = True) -> EnergyStat:
    """Energy distance (or biased MMD^2) between the ``w``-weighted observed and the shifted sample."""
    w = check_weights(w, g.n) if validate else _weights_array(w, g.n)
    return EnergyStat(value=_value(g, w), kind=g.kind)


def energy_gradient(g: BalanceGram, w, validate: bool = False) -> np.ndarray:
    """Gradient of :func:`weighted_energy_distance` with respect to the weights."""
    w = check_weights(w, g.n) if validate else _weights_array(w, g.n)
    n = g.n
    gw = g.g_oo @ w
    if g.kind == EUCLIDEAN:
        return (2.0 * g.row_sums_os - 2.0 * gw) / (n * n)
    return (2.0 * gw - 2.0 * g.row_sums_os) / (n * n)
