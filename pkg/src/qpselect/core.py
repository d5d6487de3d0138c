"""Shared domain types: datasets, model indicators, prior and run settings."""

from __future__ import annotations

import csv
import functools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import (
    DimensionMismatchError,
    DuplicateColumnError,
    InputError,
    NonFiniteError,
    TooManyPredictorsError,
)

MAX_PREDICTORS = 4096


@dataclass(frozen=True, eq=False)
class Dataset:
    """Response vector ``y`` and ``(n, p)`` design matrix ``X``.

    Arrays are copied and made read-only on construction so a dataset can be
    shared between threads and processes without defensive copies.
    """

    y: np.ndarray
    X: np.ndarray
    column_names: tuple

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        X = np.array(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y.setflags(write=False)
        X.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "column_names", tuple(str(c) for c in self.column_names))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @classmethod
    def from_arrays(cls, y, X, column_names=None) -> "Dataset":
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if column_names is None:
            column_names = [f"x{j}" for j in range(X.shape[1])]
        return validate_dataset(cls(y=y, X=X, column_names=tuple(column_names)))

    def subset_rows(self, idx) -> "Dataset":
        return Dataset(self.y[idx], self.X[idx], self.column_names)

    def intercept_columns(self) -> tuple:
        """Indices of columns that are identically one."""
        return tuple(int(j) for j in np.flatnonzero(np.all(self.X == 1.0, axis=0)))


def validate_dataset(d: Dataset) -> Dataset:
    """Return ``d`` unchanged if it is well formed, otherwise raise."""
    if d.y.ndim != 1 or d.X.ndim != 2:
        raise DimensionMismatchError(f"expected 1-d y and 2-d X, got {d.y.shape} and {d.X.shape}")
    if d.X.shape[0] != d.y.shape[0]:
        raise DimensionMismatchError(
            f"y has {d.y.shape[0]} rows but X has {d.X.shape[0]}"
        )
    if d.n < 1 or d.p < 1:
        raise DimensionMismatchError(f"need n >= 1 and p >= 1, got n={d.n}, p={d.p}")
    if len(d.column_names) != d.p:
        raise DimensionMismatchError(
            f"{len(d.column_names)} column names for {d.p} columns"
        )
    if d.p > MAX_PREDICTORS:
        raise TooManyPredictorsError(f"p={d.p} exceeds the supported maximum {MAX_PREDICTORS}")
    seen = set()
    for name in d.column_names:
        if name in seen:
            raise DuplicateColumnError(name)
        seen.add(name)
    bad_y = np.flatnonzero(~np.isfinite(d.y))
    if bad_y.size:
        raise NonFiniteError(int(bad_y[0]), "y")
    bad = np.argwhere(~np.isfinite(d.X))
    if bad.size:
        # argwhere is row-major so the first hit is the earliest row
        row, col = bad[0]
        raise NonFiniteError(int(row), int(col))
    return d


def read_csv(path, add_intercept: bool = False, standardize: bool = False) -> Dataset:
    """Load a dataset from a CSV whose first column is named ``y``.

    Remaining columns are predictors in file order. ``add_intercept`` puts a
    column of ones named ``intercept`` at position 0; ``standardize`` z-scores
    the non-constant predictors.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        if not header or header[0] != "y":
            raise InputError(f"{path}: first column must be named 'y', found {header[:1]}")
        if len(header) < 2:
            raise InputError(f"{path}: no predictor columns after 'y'")
        rows = []
        for lineno, row in enumerate(reader):
            if not row:
                continue
            if len(row) != len(header):
                raise DimensionMismatchError(
                    f"{path}: data row {lineno} has {len(row)} fields, header has {len(header)}"
                )
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                col = next(i for i, v in enumerate(row) if not _is_float(v))
                raise NonFiniteError(lineno, col - 1, header[col]) from None
    if not rows:
        raise InputError(f"{path}: no data rows")
    data = np.array(rows, dtype=float)
    bad = np.argwhere(~np.isfinite(data))
    if bad.size:
        # data rows are 0-based; predictor columns are indexed as in X (y is "y")
        row, col = (int(v) for v in bad[0])
        raise NonFiniteError(row, "y" if col == 0 else col - 1, header[col])
    y = data[:, 0]
    X = data[:, 1:]
    names = header[1:]
    if standardize:
        X = standardize_columns(X)
    if add_intercept:
        X = np.column_stack([np.ones(len(y)), X])
        names = ["intercept"] + names
    return validate_dataset(Dataset(y=y, X=X, column_names=tuple(names)))


def _is_float(v: str) -> bool:
    try:
        float(v)
    except ValueError:
        return False
    return True


def standardize_columns(X: np.ndarray) -> np.ndarray:
    X = np.array(X, dtype=float)
    sd = X.std(axis=0)
    keep = sd > 0
    X[:, keep] = (X[:, keep] - X[:, keep].mean(axis=0)) / sd[keep]
    return X


def _popcount(v: int) -> int:
    return bin(v).count("1")


@functools.total_ordering
class ModelIndicator:
    """Inclusion vector over ``p`` columns, stored as an integer bitset.

    Bit ``j`` of ``bits`` is column ``j``. Ordering is lexicographic on the
    bit vector read from column 0 upwards.
    """

    __slots__ = ("p", "bits", "forced")

    def __init__(self, p: int, bits: int = 0, forced: int = 0):
        if p > MAX_PREDICTORS:
            raise TooManyPredictorsError(f"p={p} exceeds the supported maximum {MAX_PREDICTORS}")
        full = (1 << p) - 1
        if bits & ~full or forced & ~full:
            raise ValueError("indicator has bits set beyond column p-1")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "bits", bits | forced)
        object.__setattr__(self, "forced", forced)

    def __setattr__(self, name, value):
        raise AttributeError("ModelIndicator is immutable")

    @classmethod
    def from_columns(cls, p: int, columns, forced=()) -> "ModelIndicator":
        return cls(p, _mask(columns), _mask(forced))

    @classmethod
    def from_array(cls, arr, forced=()) -> "ModelIndicator":
        arr = np.asarray(arr).astype(bool)
        return cls(len(arr), _mask(np.flatnonzero(arr)), _mask(forced))

    def size(self) -> int:
        return _popcount(self.bits)

    def columns(self) -> list:
        return bits_to_columns(self.bits)

    def to_array(self) -> np.ndarray:
        out = np.zeros(self.p, dtype=bool)
        out[self.columns()] = True
        return out

    def with_bit(self, j: int, value: bool) -> "ModelIndicator":
        if not value and (self.forced >> j) & 1:
            raise ValueError(f"column {j} is forced in")
        bits = self.bits | (1 << j) if value else self.bits & ~(1 << j)
        return ModelIndicator(self.p, bits, self.forced)

    def __contains__(self, j) -> bool:
        return bool((self.bits >> j) & 1)

    def issubset(self, other: "ModelIndicator") -> bool:
        return self.bits & ~other.bits == 0

    def hex(self) -> str:
        return format(self.bits, "x")

    def bitstring(self) -> str:
        return "".join("1" if (self.bits >> j) & 1 else "0" for j in range(self.p))

    def __eq__(self, other):
        if not isinstance(other, ModelIndicator):
            return NotImplemented
        return self.p == other.p and self.bits == other.bits

    def __hash__(self):
        return hash((self.p, self.bits))

    def __lt__(self, other):
        if not isinstance(other, ModelIndicator):
            return NotImplemented
        return (self.p, self.bitstring()) < (other.p, other.bitstring())

    def __repr__(self):
        return f"ModelIndicator(p={self.p}, bits={self.bitstring()})"


def _mask(columns) -> int:
    m = 0
    for j in columns:
        m |= 1 << int(j)
    return m


def bits_to_columns(bits: int) -> list:
    cols = []
    j = 0
    while bits:
        if bits & 1:
            cols.append(j)
        bits >>= 1
        j += 1
    return cols


@dataclass(frozen=True)
class FixedW:
    w: float

    def __post_init__(self):
        if not 0.0 < self.w < 1.0:
            raise ValueError(f"fixed inclusion probability must lie in (0, 1), got {self.w}")


@dataclass(frozen=True)
class BetaBinomial:
    a: float = 1.0
    b: float = 1.0

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError(f"Beta hyperparameters must be positive, got a={self.a}, b={self.b}")


@dataclass(frozen=True)
class PriorConfig:
    """Gaussian slab variance and the prior on the inclusion probability."""

    slab_variance: float = 9.0
    sparsity: Union[FixedW, BetaBinomial] = field(default_factory=BetaBinomial)

    def __post_init__(self):
        if not self.slab_variance > 0:
            raise ValueError(f"slab variance must be positive, got {self.slab_variance}")


@dataclass(frozen=True)
class FullModelQMLE:
    pass


@dataclass(frozen=True)
class L1Regularized:
    n_lambdas: int = 20
    folds: int = 5
    lambda_ratio: float = 1e-3


@dataclass(frozen=True)
class FixedDispersion:
    value: float

    def __post_init__(self):
        if not self.value > 0:
            raise ValueError(f"fixed dispersion must be positive, got {self.value}")


DispersionMode = Union[FullModelQMLE, L1Regularized, FixedDispersion]


@dataclass(frozen=True)
class RunConfig:
    sweeps: int = 3000
    burn_in: int = 1500
    seed: int = 0
    fdr_alpha: float = 0.05
    newton_tol: float = 1e-8
    newton_max_iter: int = 100
    cache_cap: int | None = None
    dispersion_mode: DispersionMode = field(default_factory=FullModelQMLE)
    # None: force every all-ones column (the intercept); () forces nothing
    forced_in: Sequence[int] | None = None

    def __post_init__(self):
        if self.sweeps < 1:
            raise ValueError("sweeps must be positive")
        if not 0 <= self.burn_in < self.sweeps:
            raise ValueError(f"burn_in must lie in [0, sweeps), got {self.burn_in}")
        if not 0.0 < self.fdr_alpha < 1.0:
            raise ValueError(f"fdr_alpha must lie in (0, 1), got {self.fdr_alpha}")
        if not self.newton_tol > 0 or self.newton_max_iter < 1:
            raise ValueError("newton_tol and newton_max_iter must be positive")
        if self.cache_cap is not None and self.cache_cap < 1:
            raise ValueError("cache_cap must be positive when given")

    def forced_columns(self, d: Dataset) -> tuple:
        if self.forced_in is None:
            return d.intercept_columns()[:1]
        cols = tuple(int(j) for j in self.forced_in)
        if any(j < 0 or j >= d.p for j in cols):
            raise ValueError(f"forced_in columns {cols} out of range for p={d.p}")
        return cols
