"""Modified treatment policies and the ventilation policies built on them.

A policy maps each unit's covariates and observed treatment vector to a
modified treatment vector. It is described by blocks: each block owns a
region of the treatment support (its membership predicate) and a smooth,
invertible map on that region. Block callables are vectorized over rows:
``membership(x, a) -> bool (n,)``, ``apply(x, a) -> (n, k)``,
``invert(x, a_new) -> (n, k)`` with ``x`` of shape (n, p) and ``a`` (n, k).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .data import Dataset
from .errors import (DimensionMismatch, LayoutMismatch, MultipleBlocksMatch,
                     NoBlockMatches, UnknownPolicyName)

VENT_ROLES = ("rr", "vt", "p_peak", "p_plateau", "peep", "dp")
BUILTIN_POLICIES = ("q1", "q2", "q3", "identity", "scale")


@dataclass(frozen=True)
class Block:
    membership: Callable
    apply: Callable
    invert: Callable


@dataclass(frozen=True)
class Policy:
    blocks: tuple
    name: str = "policy"

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if not self.blocks:
            raise ValueError("a policy needs at least one block")

    def block_index(self, x, a) -> np.ndarray:
        """Index of the matching block for every row; raises on partition violations."""
        x, a = _as_rows(x, a)
        hits = np.column_stack([np.asarray(b.membership(x, a), dtype=bool).reshape(-1)
                                for b in self.blocks])
        counts = hits.sum(axis=1)
        if np.any(counts == 0):
            raise NoBlockMatches(int(np.flatnonzero(counts == 0)[0]))
        if np.any(counts > 1):
            raise MultipleBlocksMatch(int(np.flatnonzero(counts > 1)[0]))
        return np.argmax(hits, axis=1)

    def apply_rows(self, x, a) -> np.ndarray:
        x, a = _as_rows(x, a)
        if len(self.blocks) == 1:
            self.block_index(x, a)
            return np.asarray(self.blocks[0].apply(x, a), dtype=np.float64)
        which = self.block_index(x, a)
        out = np.empty_like(a)
        for j, block in enumerate(self.blocks):
            rows = which == j
            if rows.any():
                out[rows] = block.apply(x[rows], a[rows])
        return out

    def invert_rows(self, x, a_new, which) -> np.ndarray:
        """Undo :meth:`apply_rows` given the block index of every row."""
        x, a_new = _as_rows(x, a_new)
        out = np.empty_like(a_new)
        for j, block in enumerate(self.blocks):
            rows = np.asarray(which) == j
            if rows.any():
                out[rows] = block.invert(x[rows], a_new[rows])
        return out


class ScalePolicy(Policy):
    """Single-block policy multiplying treatment ``j`` by ``scale[j]``."""

    def __init__(self, scale: Sequence[float], name: str = "scale"):
        scale = np.asarray(scale, dtype=np.float64).reshape(-1)
        if np.any(scale == 0) or not np.all(np.isfinite(scale)):
            raise ValueError("scale factors must be finite and nonzero")
        scale.setflags(write=False)
        object.__setattr__(self, "scale", scale)
        block = Block(
            membership=lambda x, a: np.ones(a.shape[0], dtype=bool),
            apply=lambda x, a: _check_width(a, scale) * scale,
            invert=lambda x, a: _check_width(a, scale) / scale,
        )
        super().__init__(blocks=(block,), name=name)

    def __reduce__(self):
        return (ScalePolicy, (self.scale.tolist(), self.name))


def _check_width(a, scale):
    if a.shape[1] != scale.shape[0]:
        raise DimensionMismatch(f"policy expects {scale.shape[0]} treatments, got {a.shape[1]}")
    return a


def _as_rows(x, a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(a.shape[0], -1) if x.size else np.empty((a.shape[0], 0))
    if x.shape[0] != a.shape[0]:
        raise DimensionMismatch("x and a have different row counts")
    return x, a


def apply_policy(p: Policy, x, a) -> np.ndarray:
    """Modified treatment for a single unit (1-D ``x`` and ``a``)."""
    out = p.apply_rows(np.asarray(x, dtype=np.float64).reshape(1, -1),
                       np.asarray(a, dtype=np.float64).reshape(1, -1))
    return out[0]


@dataclass(frozen=True, eq=False)
class ShiftedSample:
    """Rows ``(x_i, q(x_i, a_i))`` in the order of the source dataset."""

    x: np.ndarray
    a: np.ndarray
    block: np.ndarray
    policy_name: str = "policy"

    @property
    def n(self) -> int:
        return self.a.shape[0]

    def joint(self) -> np.ndarray:
        return np.hstack([self.x, self.a])


def shift_dataset(p: Policy, d: Dataset) -> ShiftedSample:
    which = p.block_index(d.x, d.a)
    shifted = p.apply_rows(d.x, d.a)
    if shifted.shape != d.a.shape:
        raise DimensionMismatch("policy changed the number of treatments")
    shifted = np.ascontiguousarray(shifted, dtype=np.float64)
    shifted.setflags(write=False)
    return ShiftedSample(x=d.x, a=shifted, block=which, policy_name=p.name)


@dataclass(frozen=True)
class VentSettings:
    rr: float
    vt: float
    p_peak: float
    p_plateau: float
    peep: float

    def __post_init__(self):
        for name in ("rr", "vt", "p_peak", "p_plateau", "peep"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @property
    def dp(self) -> float:
        return self.p_plateau - self.peep

    @property
    def compliance(self) -> float:
        if self.dp == 0:
            raise ZeroDivisionError("compliance is undefined when driving pressure is 0")
        return self.vt / self.dp


def mechanical_power(v: VentSettings) -> float:
    """Mechanical power in J/min: ``0.098 * VT * RR * (Ppeak - (Pplat - PEEP) / 2)``."""
    return 0.098 * v.vt * v.rr * (v.p_peak - 0.5 * (v.p_plateau - v.peep))


_POLICY_FACTORS = {
    "q1": lambda tau: {"vt": tau},
    "q2": lambda tau: {"p_peak": tau, "p_plateau": tau, "peep": tau},
    "q3": lambda tau: {"rr": 1.0 / tau, "vt": tau, "dp": tau},
}


def builtin_policy(name: str, tau: float, layout: Optional[Mapping[str, str]] = None,
                   treatment_names: Sequence[str] = ()) -> ScalePolicy:
    """Construct one of the named policies over the given treatment columns.

    ``layout`` maps ventilation roles (``rr``, ``vt``, ``p_peak``,
    ``p_plateau``, ``peep``, ``dp``) to treatment column names; it is only
    consulted for ``q1``, ``q2`` and ``q3``; a role missing from the layout
    falls back to a treatment column of the same name. ``identity`` and ``scale`` act on
    every treatment column (``scale`` multiplies all of them by ``tau``).
    """
    if name not in BUILTIN_POLICIES:
        raise UnknownPolicyName(f"unknown policy {name!r}; choose from {BUILTIN_POLICIES}")
    if not tau > 0:
        raise ValueError("tau must be positive")
    names = list(treatment_names)
    k = len(names)
    if k == 0:
        raise LayoutMismatch("treatment column names are required")
    label = f"{name}(tau={tau:g})"
    if name == "identity":
        return ScalePolicy(np.ones(k), name="identity")
    if name == "scale":
        return ScalePolicy(np.full(k, float(tau)), name=label)
    layout = dict(layout or {})
    factors = _POLICY_FACTORS[name](float(tau))
    scale = np.ones(k)
    for role, factor in factors.items():
        col = layout.get(role, role if role in names else None)
        if col is None:
            raise LayoutMismatch(f"policy {name} needs the {role!r} role in the layout")
        if col not in names:
            raise LayoutMismatch(f"layout column {col!r} for role {role!r} is not a treatment")
        scale[names.index(col)] = factor
    return ScalePolicy(scale, name=label)


def policy_from_config(doc: Mapping, treatment_names: Sequence[str]) -> ScalePolicy:
    """Build a policy from ``{"name": ..., "tau": ..., "roles": {...}}``."""
    unknown = set(doc) - {"name", "tau", "roles", "units"}
    if unknown:
        raise LayoutMismatch(f"unknown policy keys: {sorted(unknown)}")
    return builtin_policy(doc["name"], float(doc.get("tau", 1.0)), doc.get("roles"),
                          treatment_names)
