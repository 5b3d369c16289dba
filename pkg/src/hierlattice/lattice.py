"""Lattice partition of the input space.

A lattice is an ordered list of dimensions, each either categorical or a binned
continuous column. A row maps to exactly one cell ``kappa`` (one level index per
dimension); cells are flattened row-major in dimension order.

Bins are left-closed, right-open ``[e_{k-1}, e_k)``. Values below the first edge
land in bin 0 and values at or above the last edge land in the final bin, so
assignment is total on unseen data.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Literal, Mapping, Sequence

import numpy as np

from .errors import (
    DegenerateBinning,
    InfeasibleLattice,
    MissingLatticeFeature,
    ModelLatticeMismatch,
    UnknownLevel,
)

DimKind = Literal["categorical", "binned"]

DEFAULT_N_THRESHOLD = 20


def _level_key(value: Any) -> str:
    if isinstance(value, (float, np.floating)) and float(value).is_integer():
        return str(int(value))
    if isinstance(value, (bytes, np.bytes_)):
        return value.decode()
    return str(value)


def _is_missing(value: Any) -> bool:
    if value is None:
        return True
    if isinstance(value, (float, np.floating)) and math.isnan(value):
        return True
    return isinstance(value, str) and value.strip() == ""


@dataclass(frozen=True)
class LatticeDim:
    name: str
    kind: DimKind
    levels: int
    edges: tuple[float, ...] = ()
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"dimension {self.name!r} needs at least one level")
        if self.kind == "binned":
            edges = tuple(float(e) for e in self.edges)
            object.__setattr__(self, "edges", edges)
            if len(edges) != self.levels - 1:
                raise ValueError(
                    f"dimension {self.name!r}: {self.levels} levels need "
                    f"{self.levels - 1} edges, got {len(edges)}"
                )
            if any(not np.isfinite(e) for e in edges):
                raise ValueError(f"dimension {self.name!r}: edges must be finite")
            if any(b <= a for a, b in zip(edges, edges[1:])):
                raise ValueError(f"dimension {self.name!r}: edges must be strictly increasing")
        elif self.kind == "categorical":
            labels = tuple(_level_key(v) for v in self.labels)
            object.__setattr__(self, "labels", labels)
            if len(labels) != self.levels:
                raise ValueError(
                    f"dimension {self.name!r}: {self.levels} levels need {self.levels} labels"
                )
            if len(set(labels)) != len(labels):
                raise ValueError(f"dimension {self.name!r}: duplicate labels")
        else:
            raise ValueError(f"unknown dimension kind {self.kind!r}")

    @classmethod
    def categorical(cls, name: str, labels: Sequence[Any]) -> "LatticeDim":
        return cls(name, "categorical", len(labels), labels=tuple(labels))

    @classmethod
    def binned(cls, name: str, edges: Sequence[float]) -> "LatticeDim":
        return cls(name, "binned", len(edges) + 1, edges=tuple(edges))

    def assign(self, values: Sequence[Any] | np.ndarray) -> np.ndarray:
        """Level index of each value (vectorized)."""
        if self.kind == "binned":
            try:
                arr = np.asarray(values, dtype=float)
            except (TypeError, ValueError):
                arr = np.array([np.nan if _is_missing(v) else float(v) for v in values])
            if np.isnan(arr).any():
                bad = int(np.flatnonzero(np.isnan(arr))[0])
                raise MissingLatticeFeature(f"missing value for {self.name!r} at row {bad}")
            return np.searchsorted(np.asarray(self.edges), arr, side="right").astype(np.int64)
        arr = np.asarray(values)
        if arr.dtype.kind in "iu" and self.labels == tuple(str(i) for i in range(self.levels)):
            bad = (arr < 0) | (arr >= self.levels)
            if bad.any():
                v = arr[np.flatnonzero(bad)[0]]
                raise UnknownLevel(f"unknown level {v!r} for dimension {self.name!r}")
            return arr.astype(np.int64)
        lookup = {label: i for i, label in enumerate(self.labels)}
        out = np.empty(len(values), dtype=np.int64)
        for i, v in enumerate(values):
            if _is_missing(v):
                raise MissingLatticeFeature(f"missing value for {self.name!r} at row {i}")
            try:
                out[i] = lookup[_level_key(v)]
            except KeyError:
                raise UnknownLevel(f"unknown level {v!r} for dimension {self.name!r}") from None
        return out

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"name": self.name, "kind": self.kind, "levels": self.levels}
        if self.kind == "binned":
            out["edges"] = list(self.edges)
        else:
            out["labels"] = list(self.labels)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LatticeDim":
        kind = data["kind"]
        if kind in ("binned", "binned-continuous"):
            edges = tuple(data.get("edges", ()))
            return cls(data["name"], "binned", int(data.get("levels", len(edges) + 1)), edges=edges)
        labels = tuple(data["labels"])
        return cls(data["name"], "categorical", int(data.get("levels", len(labels))), labels=labels)


@dataclass(frozen=True)
class LatticeSpec:
    dims: tuple[LatticeDim, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(self.dims))
        names = [dim.name for dim in self.dims]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate lattice dimension names: {names}")

    @property
    def d(self) -> int:
        return len(self.dims)

    @property
    def levels(self) -> tuple[int, ...]:
        return tuple(dim.levels for dim in self.dims)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(dim.name for dim in self.dims)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.levels, dtype=np.int64)) if self.dims else 1

    @property
    def d_cont(self) -> int:
        return sum(dim.kind == "binned" for dim in self.dims)

    def flat_index(self, kappa) -> np.ndarray | int:
        """Row-major flat cell index; accepts one ``kappa`` or an ``(N, d)`` array."""
        kappa = np.asarray(kappa, dtype=np.int64)
        if self.d == 0:
            return 0 if kappa.ndim <= 1 else np.zeros(kappa.shape[0], dtype=np.int64)
        if kappa.ndim == 1:
            return int(np.ravel_multi_index(tuple(kappa), self.levels))
        return np.ravel_multi_index(tuple(kappa.T), self.levels)

    def unflatten(self, flat) -> np.ndarray:
        if self.d == 0:
            return np.zeros((np.size(flat), 0), dtype=np.int64)
        return np.stack(np.unravel_index(np.asarray(flat), self.levels), axis=-1).astype(np.int64)

    def check_cells(self, cells: np.ndarray) -> np.ndarray:
        cells = np.asarray(cells, dtype=np.int64)
        if cells.ndim == 1 and cells.size == self.d:
            cells = cells.reshape(1, -1)
        if cells.ndim != 2 or cells.shape[1] != self.d:
            raise ModelLatticeMismatch(
                f"cell array has shape {cells.shape}, lattice has {self.d} dimensions"
            )
        if self.d and ((cells < 0).any() or (cells >= np.asarray(self.levels)).any()):
            raise ModelLatticeMismatch("cell index out of range for lattice levels")
        return cells

    def to_dict(self) -> dict:
        return {"dims": [dim.to_dict() for dim in self.dims]}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LatticeSpec":
        return cls(tuple(LatticeDim.from_dict(d) for d in data.get("dims", [])))

    @classmethod
    def uniform_categorical(cls, d: int, L: int) -> "LatticeSpec":
        """``d`` categorical dimensions named ``g0..g{d-1}`` with integer labels ``0..L-1``."""
        return cls(tuple(LatticeDim.categorical(f"g{i}", range(L)) for i in range(d)))


def build_bins(
    column: Sequence[float] | np.ndarray,
    L: int | None = None,
    strategy: Literal["quantile", "explicit-edges"] = "quantile",
    *,
    name: str = "x",
    edges: Sequence[float] | None = None,
) -> LatticeDim:
    """Build a binned-continuous dimension.

    Quantile edges sit at the ``k/L`` empirical quantiles (midpoint
    interpolation). Duplicate edges caused by ties are dropped, with a warning
    when fewer than ``L`` levels survive.
    """
    if strategy == "explicit-edges":
        if edges is None:
            raise ValueError("explicit-edges strategy requires edges")
        return LatticeDim.binned(name, edges)
    if strategy != "quantile":
        raise ValueError(f"unknown binning strategy {strategy!r}")
    if L is None or L < 2:
        raise ValueError("quantile binning needs L >= 2")
    col = np.asarray(column, dtype=float)
    col = col[np.isfinite(col)]
    n_distinct = np.unique(col).size
    if n_distinct < L:
        raise DegenerateBinning(
            f"column {name!r} has {n_distinct} distinct values, cannot form {L} bins"
        )
    qs = np.arange(1, L) / L
    raw = np.quantile(col, qs, method="midpoint")
    uniq = np.unique(raw)
    if uniq.size < raw.size:
        warnings.warn(
            f"column {name!r}: tied quantiles reduced bins from {L} to {uniq.size + 1}",
            stacklevel=2,
        )
    return LatticeDim.binned(name, uniq.tolist())


def assign_cells(columns: Mapping[str, Sequence[Any]], spec: LatticeSpec) -> np.ndarray:
    """Cell index ``(N, d)`` for a column-oriented table."""
    if spec.d == 0:
        n = len(next(iter(columns.values()))) if columns else 0
        return np.zeros((n, 0), dtype=np.int64)
    out = []
    for dim in spec.dims:
        if dim.name not in columns:
            raise MissingLatticeFeature(f"lattice source column {dim.name!r} not present")
        out.append(dim.assign(columns[dim.name]))
    return np.stack(out, axis=1)


def assign_cell(row: Mapping[str, Any], spec: LatticeSpec) -> np.ndarray:
    """Cell index ``kappa`` of a single record."""
    for dim in spec.dims:
        if dim.name not in row:
            raise MissingLatticeFeature(f"row lacks lattice feature {dim.name!r}")
    return assign_cells({dim.name: [row[dim.name]] for dim in spec.dims}, spec)[0]


def max_bins(N: int, p: int, d_cont: int, safety: float = 1.0) -> int:
    """Largest per-dimension bin count keeping ``p * L**d_cont / N`` within budget.

    Returns ``floor(safety * (N/p) ** (1/d_cont))`` evaluated in exact rational
    arithmetic, so perfect powers such as ``1000 ** (1/3)`` are not lost to
    rounding. Never below 1.
    """
    if N <= p:
        raise InfeasibleLattice(f"N={N} does not exceed p={p}")
    if p < 1 or d_cont < 1:
        raise ValueError("need p >= 1 and d_cont >= 1")
    if not 0 < safety <= 1:
        raise ValueError("safety must lie in (0, 1]")
    bound = Fraction(safety) ** d_cont * Fraction(N, p)
    guess = int(math.floor(safety * (N / p) ** (1.0 / d_cont)))
    guess = max(guess, 0)
    while guess > 0 and Fraction(guess) ** d_cont > bound:
        guess -= 1
    while Fraction(guess + 1) ** d_cont <= bound:
        guess += 1
    return max(guess, 1)


def gamma_local(N: int, p: int, L: int, d_cont: int) -> float:
    """Local parameter-to-sample ratio ``p L^d_cont / N``."""
    return p * L**d_cont / N


def feasible_refinement(n_min: int, L: int, n_threshold: int = DEFAULT_N_THRESHOLD) -> bool:
    return n_min / L >= n_threshold
