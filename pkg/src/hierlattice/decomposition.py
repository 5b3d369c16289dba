"""Hierarchical additive expansion of cell-specific parameters.

The parameter of cell ``kappa`` is the exact sum of one slice from every
retained component: the global term, one main effect per dimension, one
pairwise term per pair of dimensions and so on up to truncation order ``K``.
A component is identified by the sorted tuple of lattice-dimension indices it
varies over; ``()`` is the global term.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import comb
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InvalidRefinement, InvalidTruncation, ModelLatticeMismatch
from .lattice import LatticeSpec

Component = tuple[int, ...]


def enumerate_components(d: int, K: int) -> list[Component]:
    """All subsets of ``range(d)`` of size at most ``K``, by (order, lexicographic)."""
    if K < 0 or K > d:
        raise InvalidTruncation(f"truncation order K={K} must lie in [0, d={d}]")
    return [c for k in range(K + 1) for c in itertools.combinations(range(d), k)]


def n_components(d: int, K: int) -> int:
    return sum(comb(d, k) for k in range(K + 1))


def component_size(levels: Sequence[int], comp: Component) -> int:
    return int(np.prod([levels[i] for i in comp], dtype=np.int64)) if comp else 1


def combo_index(cells: np.ndarray, levels: Sequence[int], comp: Component) -> np.ndarray:
    """Row-major index of each row's level combination within ``comp``."""
    cells = np.asarray(cells, dtype=np.int64)
    if not comp:
        return np.zeros(cells.shape[0], dtype=np.int64)
    return np.ravel_multi_index(tuple(cells[:, i] for i in comp), tuple(levels[i] for i in comp))


@dataclass
class DecomposedParameter:
    """Dense component tensors; ``tensors[comp]`` has shape ``(prod L_i over comp, p)``."""

    levels: tuple[int, ...]
    K: int
    p: int
    tensors: dict[Component, np.ndarray]

    def __post_init__(self):
        self.levels = tuple(int(l) for l in self.levels)
        expected = enumerate_components(len(self.levels), self.K)
        if list(self.tensors) != expected:
            missing = set(expected) - set(self.tensors)
            extra = set(self.tensors) - set(expected)
            if missing or extra:
                raise ModelLatticeMismatch(
                    f"component set mismatch: missing {sorted(missing)}, extra {sorted(extra)}"
                )
            self.tensors = {c: self.tensors[c] for c in expected}
        for comp, t in self.tensors.items():
            shape = (component_size(self.levels, comp), self.p)
            t = np.asarray(t, dtype=float)
            if t.shape != shape:
                raise ModelLatticeMismatch(f"component {comp} has shape {t.shape}, expected {shape}")
            self.tensors[comp] = t

    @classmethod
    def zeros(cls, levels: Sequence[int], K: int, p: int) -> "DecomposedParameter":
        comps = enumerate_components(len(levels), K)
        return cls(tuple(levels), K, p, {c: np.zeros((component_size(levels, c), p)) for c in comps})

    @property
    def d(self) -> int:
        return len(self.levels)

    @property
    def components(self) -> list[Component]:
        return list(self.tensors)

    @property
    def size(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "DecomposedParameter":
        return DecomposedParameter(self.levels, self.K, self.p, {c: t.copy() for c, t in self.tensors.items()})

    def to_vector(self) -> np.ndarray:
        if not self.tensors:
            return np.zeros(0)
        return np.concatenate([t.ravel() for t in self.tensors.values()])

    def with_vector(self, vec: np.ndarray) -> "DecomposedParameter":
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.size:
            raise ModelLatticeMismatch(f"vector of length {vec.size}, expected {self.size}")
        out, start = {}, 0
        for comp, t in self.tensors.items():
            out[comp] = vec[start : start + t.size].reshape(t.shape).copy()
            start += t.size
        return DecomposedParameter(self.levels, self.K, self.p, out)

    def check_cells(self, cells) -> np.ndarray:
        cells = np.asarray(cells, dtype=np.int64)
        if cells.ndim == 1:
            cells = cells.reshape(1, -1)
        if cells.shape[1] != self.d:
            raise ModelLatticeMismatch(
                f"cells have {cells.shape[1]} dimensions, parameter expects {self.d}"
            )
        if self.d and ((cells < 0).any() or (cells >= np.asarray(self.levels)).any()):
            raise ModelLatticeMismatch("cell index out of range for parameter levels")
        return cells

    def materialize(self, cells, index: Mapping[Component, np.ndarray] | None = None) -> np.ndarray:
        """Cell parameters ``(N, p)`` for an ``(N, d)`` array of cells."""
        cells = self.check_cells(cells)
        out = np.zeros((cells.shape[0], self.p))
        for comp, t in self.tensors.items():
            idx = index[comp] if index is not None else combo_index(cells, self.levels, comp)
            out += t[idx]
        return out

    def order_entries(self, k: int) -> np.ndarray:
        """All tensor entries belonging to order-``k`` components."""
        parts = [t.ravel() for c, t in self.tensors.items() if len(c) == k]
        return np.concatenate(parts) if parts else np.zeros(0)


def materialize_cell_params(dp: DecomposedParameter, cell) -> np.ndarray:
    """Parameter vector (length ``p``) of a single cell."""
    return dp.materialize(np.asarray(cell, dtype=np.int64).reshape(1, -1))[0]


def warm_start(
    coarse: DecomposedParameter,
    refinement: Mapping[int, Sequence[int]] | None = None,
    new_K: int | None = None,
) -> DecomposedParameter:
    """Initialize a finer or higher-order decomposition from a coarse one.

    ``refinement`` maps a dimension index to its parent map: entry ``j`` is the
    coarse level that fine level ``j`` splits from. Fine cells inherit parent
    values; components above the coarse order start at zero, so predictions are
    unchanged until refitted.
    """
    refinement = dict(refinement or {})
    new_K = coarse.K if new_K is None else new_K
    if new_K < coarse.K:
        raise InvalidTruncation(f"new_K={new_K} below coarse K={coarse.K}")
    maps: dict[int, np.ndarray] = {}
    new_levels = list(coarse.levels)
    for dim, pmap in refinement.items():
        if not 0 <= dim < coarse.d:
            raise InvalidRefinement(f"refined dimension {dim} outside lattice of {coarse.d} dims")
        pmap = np.asarray(pmap, dtype=np.int64)
        L = coarse.levels[dim]
        if pmap.ndim != 1 or pmap.size == 0:
            raise InvalidRefinement(f"parent map for dimension {dim} must be a non-empty vector")
        if (pmap < 0).any() or (pmap >= L).any():
            raise InvalidRefinement(f"parent map for dimension {dim} points outside [0, {L})")
        if np.unique(pmap).size != L:
            raise InvalidRefinement(f"parent map for dimension {dim} is not surjective onto {L} levels")
        maps[dim] = pmap
        new_levels[dim] = pmap.size
    fine = DecomposedParameter.zeros(new_levels, new_K, coarse.p)
    for comp, t in coarse.tensors.items():
        block = t.reshape(tuple(coarse.levels[i] for i in comp) + (coarse.p,))
        for axis, dim in enumerate(comp):
            if dim in maps:
                block = np.take(block, maps[dim], axis=axis)
        fine.tensors[comp] = block.reshape(fine.tensors[comp].shape).copy()
    return fine


def anova_project(dp: DecomposedParameter) -> DecomposedParameter:
    """Identified form with every component centered over its own levels.

    Materializes the full cell table and returns its functional ANOVA
    expansion under uniform cell weights: each component sums to zero along
    each of its axes. Cell parameters are unchanged.
    """
    levels = dp.levels
    if not levels:
        return dp.copy()
    grid = np.stack(np.unravel_index(np.arange(int(np.prod(levels))), levels), axis=1)
    table = dp.materialize(grid).reshape(levels + (dp.p,))
    out = {}
    for comp in dp.components:
        shape = tuple(levels[i] for i in comp) + (dp.p,)
        effect = np.zeros(shape)
        for r in range(len(comp) + 1):
            for sub in itertools.combinations(comp, r):
                drop = tuple(i for i in range(dp.d) if i not in sub)
                marg = table.mean(axis=drop, keepdims=True)
                marg = np.squeeze(marg, axis=tuple(i for i in range(dp.d) if i not in comp))
                effect += (-1) ** (len(comp) - r) * np.broadcast_to(marg, shape)
        out[comp] = effect.reshape(-1, dp.p)
    return DecomposedParameter(levels, dp.K, dp.p, out)


@dataclass(frozen=True)
class ComponentStats:
    component: Component
    counts: np.ndarray
    fractions: np.ndarray

    @property
    def N(self) -> int:
        return int(self.counts.sum())


def component_stats(cells, component: Component, lattice: LatticeSpec | Sequence[int]) -> ComponentStats:
    """Row count and data fraction per level-combination of ``component``."""
    levels = lattice.levels if isinstance(lattice, LatticeSpec) else tuple(lattice)
    cells = np.asarray(cells, dtype=np.int64)
    if cells.ndim == 1:
        cells = cells.reshape(-1, len(levels))
    n = cells.shape[0]
    if n == 0:
        raise ValueError("component_stats needs at least one cell")
    idx = combo_index(cells, levels, component)
    counts = np.bincount(idx, minlength=component_size(levels, component))
    return ComponentStats(tuple(component), counts, counts / n)


def all_component_stats(
    cells, lattice: LatticeSpec | Sequence[int], components: Iterable[Component]
) -> dict[Component, ComponentStats]:
    return {c: component_stats(cells, c, lattice) for c in components}
