"""Observational datasets of (covariates, treatments, outcome).

A :class:`Dataset` is an immutable container; all transformations return new
instances. CSV is the only on-disk format and column roles always come from
an explicit schema (see :func:`load_csv`).
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import EmptyDataset, ParseError, SchemaMismatch, DimensionMismatch

_TRUE = {"1", "true", "t", "yes", "y"}
_FALSE = {"0", "false", "f", "no", "n"}


def as_rng(seed) -> np.random.Generator:
    """Return a Generator for an int seed, a seed sequence or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Covariates ``x`` (n, p), treatments ``a`` (n, k) and outcome ``y`` (n,)."""

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    subgroup: Optional[np.ndarray] = None
    covariate_names: tuple = ()
    treatment_names: tuple = ()
    outcome_name: str = "y"

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        n = y.shape[0]
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim == 1 and x.size == 0:
            x = x.reshape(n, 0)
        a = np.asarray(self.a, dtype=np.float64)
        if a.ndim == 1:
            a = a.reshape(-1, 1)
        if x.ndim != 2 or a.ndim != 2:
            raise DimensionMismatch("x and a must be two-dimensional")
        if x.shape[0] != n or a.shape[0] != n:
            raise DimensionMismatch(
                f"row counts disagree: x={x.shape[0]}, a={a.shape[0]}, y={n}")
        if a.shape[1] < 1:
            raise DimensionMismatch("at least one treatment column is required")
        for name, arr in (("x", x), ("a", a), ("y", y)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in {name}")
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "a", _readonly(a))
        object.__setattr__(self, "y", _readonly(y))
        if self.subgroup is not None:
            sg = np.asarray(self.subgroup, dtype=bool).reshape(-1)
            if sg.shape[0] != n:
                raise DimensionMismatch("subgroup mask length differs from n")
            sg = sg.copy()
            sg.setflags(write=False)
            object.__setattr__(self, "subgroup", sg)
        cov = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        trt = tuple(self.treatment_names) or tuple(f"a{j + 1}" for j in range(a.shape[1]))
        if len(cov) != x.shape[1] or len(trt) != a.shape[1]:
            raise DimensionMismatch("column names do not match array widths")
        object.__setattr__(self, "covariate_names", cov)
        object.__setattr__(self, "treatment_names", trt)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def k(self) -> int:
        return self.a.shape[1]

    def joint(self) -> np.ndarray:
        """The (n, p + k) matrix of covariates followed by treatments."""
        return np.hstack([self.x, self.a])

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        sg = None if self.subgroup is None else self.subgroup[idx]
        return replace(self, x=self.x[idx], a=self.a[idx], y=self.y[idx], subgroup=sg)

    def with_treatments(self, a) -> "Dataset":
        return replace(self, a=a)

    def with_outcome(self, y) -> "Dataset":
        return replace(self, y=y)

    def restrict_to_subgroup(self) -> "Dataset":
        if self.subgroup is None:
            return self
        return replace(self.take(np.flatnonzero(self.subgroup)), subgroup=None)

    def require_estimable(self) -> None:
        if self.n < 2:
            raise EmptyDataset(f"estimation needs at least 2 rows, got {self.n}")


@dataclass(frozen=True, eq=False)
class Standardizer:
    """Column-wise centering and scaling fitted on one sample.

    Zero-variance columns map to a constant 0 and back to their mean.
    """

    mean: np.ndarray
    scale: np.ndarray
    constant: np.ndarray = field(default=None)

    @classmethod
    def fit(cls, z) -> "Standardizer":
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2:
            raise DimensionMismatch("Standardizer expects a 2-D array")
        if z.shape[0] == 0:
            raise EmptyDataset("cannot fit a standardizer on zero rows")
        mean = z.mean(axis=0)
        sd = z.std(axis=0)
        constant = sd <= 1e-14 * np.maximum(1.0, np.abs(mean))
        scale = np.where(constant, 1.0, sd)
        return cls(mean=mean, scale=scale, constant=constant)

    def transform(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.mean.shape[0]:
            raise DimensionMismatch(
                f"expected {self.mean.shape[0]} columns, got {z.shape[-1]}")
        out = (z - self.mean) / self.scale
        out[..., self.constant] = 0.0
        return out

    def inverse_transform(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        out = z * self.scale + self.mean
        out[..., self.constant] = self.mean[self.constant]
        return out


def _parse_float(text: str, row: int, col: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(row, col, text) from None
    if not math.isfinite(value):
        raise ParseError(row, col, text)
    return value


def _parse_bool(text: str, row: int, col: str) -> bool:
    t = text.strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise ParseError(row, col, text)


def read_schema(path) -> dict:
    """Read a JSON column-role document."""
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def validate_schema(schema: Mapping) -> dict:
    allowed = {"covariates", "treatments", "outcome", "subgroup", "ignore"}
    unknown = set(schema) - allowed
    if unknown:
        raise SchemaMismatch(f"unknown schema keys: {sorted(unknown)}")
    if "outcome" not in schema or not isinstance(schema["outcome"], str):
        raise SchemaMismatch("schema must name exactly one outcome column")
    treatments = list(schema.get("treatments", []))
    if not treatments:
        raise SchemaMismatch("schema must name at least one treatment column")
    out = {
        "covariates": list(schema.get("covariates", [])),
        "treatments": treatments,
        "outcome": schema["outcome"],
        "subgroup": schema.get("subgroup"),
    }
    used = out["covariates"] + out["treatments"] + [out["outcome"]]
    if out["subgroup"] is not None:
        used.append(out["subgroup"])
    if len(set(used)) != len(used):
        raise SchemaMismatch("a column is assigned more than one role")
    return out


def load_csv(path, schema: Mapping) -> Dataset:
    """Load a dataset from a CSV file with a header row.

    ``schema`` maps roles to column names: ``covariates`` and ``treatments``
    are lists, ``outcome`` a single name and ``subgroup`` an optional name.
    Columns not named in the schema are ignored. Rows are numbered from 1
    (the first line after the header) in :class:`ParseError`.
    """
    schema = validate_schema(schema)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyDataset(f"{path} is empty") from None
        position = {name: j for j, name in enumerate(header)}
        wanted = schema["covariates"] + schema["treatments"] + [schema["outcome"]]
        if schema["subgroup"] is not None:
            wanted.append(schema["subgroup"])
        missing = [c for c in wanted if c not in position]
        if missing:
            raise SchemaMismatch(f"columns absent from {path}: {missing}")
        xs, as_, ys, sgs = [], [], [], []
        for row, fields in enumerate(reader, start=1):
            if not fields or all(not f.strip() for f in fields):
                continue
            if len(fields) != len(header):
                raise ParseError(row, None, f"expected {len(header)} fields, got {len(fields)}")
            xs.append([_parse_float(fields[position[c]], row, c) for c in schema["covariates"]])
            as_.append([_parse_float(fields[position[c]], row, c) for c in schema["treatments"]])
            ys.append(_parse_float(fields[position[schema["outcome"]]], row, schema["outcome"]))
            if schema["subgroup"] is not None:
                sgs.append(_parse_bool(fields[position[schema["subgroup"]]], row, schema["subgroup"]))
    n = len(ys)
    if n < 2:
        raise EmptyDataset(f"{path} has {n} data rows; at least 2 are required")
    return Dataset(
        x=np.array(xs, dtype=np.float64).reshape(n, len(schema["covariates"])),
        a=np.array(as_, dtype=np.float64).reshape(n, len(schema["treatments"])),
        y=np.array(ys, dtype=np.float64),
        subgroup=None if schema["subgroup"] is None else np.array(sgs, dtype=bool),
        covariate_names=tuple(schema["covariates"]),
        treatment_names=tuple(schema["treatments"]),
        outcome_name=schema["outcome"],
    )


def write_csv(d: Dataset, path, subgroup_name: str = "subgroup") -> dict:
    """Write ``d`` to CSV with 17 significant digits and return its schema."""
    header = list(d.covariate_names) + list(d.treatment_names) + [d.outcome_name]
    if d.subgroup is not None:
        header.append(subgroup_name)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(d.n):
            row = [format(v, ".17g") for v in d.x[i]]
            row += [format(v, ".17g") for v in d.a[i]]
            row.append(format(d.y[i], ".17g"))
            if d.subgroup is not None:
                row.append("1" if d.subgroup[i] else "0")
            writer.writerow(row)
    schema = {
        "covariates": list(d.covariate_names),
        "treatments": list(d.treatment_names),
        "outcome": d.outcome_name,
    }
    if d.subgroup is not None:
        schema["subgroup"] = subgroup_name
    return schema


def resample_indices(n: int, n_out: int, rng) -> np.ndarray:
    """Indices drawn uniformly with replacement as ``floor(u * n)``, ``u ~ U[0, 1)``."""
    u = as_rng(rng).random(n_out)
    return np.minimum((u * n).astype(np.int64), n - 1)


def resample_with_replacement(d: Dataset, n_out: int, rng) -> Dataset:
    """Draw ``n_out`` rows of ``d`` i.i.d. uniformly with replacement."""
    if d.n < 1:
        raise EmptyDataset("cannot resample an empty dataset")
    if n_out < 1:
        raise ValueError("n_out must be at least 1")
    return d.take(resample_indices(d.n, n_out, rng))


def jitter_treatments(d: Dataset, fraction: float, rng, reference_sd: Optional[Sequence[float]] = None) -> Dataset:
    """Add Gaussian noise with sd ``fraction * sd(a_j)`` to every treatment column.

    ``reference_sd`` overrides the per-column standard deviations (used by the
    plasmode generator so that every replicate uses the source-population sd).
    """
    if fraction < 0:
        raise ValueError("fraction must be nonnegative")
    if fraction == 0:
        return d
    sd = d.a.std(axis=0, ddof=1) if d.n > 1 else np.zeros(d.k)
    if reference_sd is not None:
        sd = np.asarray(reference_sd, dtype=np.float64)
    noise = as_rng(rng).standard_normal(d.a.shape) * (fraction * sd)
    a = np.where(sd > 0, d.a + noise, d.a)
    return d.with_treatments(a)
