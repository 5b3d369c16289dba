"""In-memory dataset shared by fitting, evaluation and the simulation harness."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyData, IngestError
from .lattice import LatticeSpec, assign_cells


@dataclass
class Dataset:
    """Design matrix, response and the raw columns that define lattice cells.

    ``X`` carries an explicit leading column of ones when an intercept
    coefficient is wanted.
    """

    X: np.ndarray
    y: np.ndarray
    lattice_columns: dict[str, np.ndarray] = field(default_factory=dict)
    feature_names: tuple[str, ...] = ()
    response_name: str = "y"
    meta: dict = field(default_factory=dict, compare=False)
    _cell_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X.reshape(-1, 1)
        if self.X.shape[0] == 0:
            raise EmptyData("dataset has no rows")
        if self.y.shape != (self.X.shape[0],):
            raise IngestError(f"response length {self.y.shape} does not match {self.X.shape[0]} rows")
        if not np.isfinite(self.X).all() or not np.isfinite(self.y).all():
            raise IngestError("dataset contains non-finite values")
        self.lattice_columns = {k: np.asarray(v) for k, v in self.lattice_columns.items()}
        for name, col in self.lattice_columns.items():
            if col.shape[0] != self.N:
                raise IngestError(f"lattice column {name!r} has {col.shape[0]} rows, expected {self.N}")
        if not self.feature_names:
            self.feature_names = tuple(f"x{j}" for j in range(self.p))

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def cells(self, lattice: LatticeSpec) -> np.ndarray:
        if lattice not in self._cell_cache:
            if lattice.d == 0:
                self._cell_cache[lattice] = np.zeros((self.N, 0), dtype=np.int64)
            else:
                self._cell_cache[lattice] = assign_cells(self.lattice_columns, lattice)
        return self._cell_cache[lattice]

    def subset(self, idx: Sequence[int] | np.ndarray) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.X[idx],
            self.y[idx],
            {k: v[idx] for k, v in self.lattice_columns.items()},
            self.feature_names,
            self.response_name,
            dict(self.meta),
        )


def train_test_split(
    n: int, train_fraction: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint, exhaustive index split."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    perm = rng.permutation(n)
    n_train = int(round(train_fraction * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])
