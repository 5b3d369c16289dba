"""Local stacking of base-model linear predictors.

Each cell gets its own convex combination of the ``M`` base predictors. The
per-cell weights are a softmax over ``v_m(kappa)``, where ``v`` is itself a
decomposed parameter with ``p = M``. Weights are fitted by minimizing a
leave-one-out loss in which each row's negative log-likelihood is inflated by
``1 / (1 - h)`` with leverage ``h = min(M / n_cell, H_CAP)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.special import softmax

from .decomposition import DecomposedParameter, combo_index, component_size
from .errors import DimensionError, Diverged, EmptyData, ModelLatticeMismatch
from .fit import FitConfig
from .glm import FamilySpec, check_response, nll, nll_grad
from .lattice import LatticeSpec

H_CAP = 0.9
GAUGE_RIDGE = 1e-6


@dataclass
class StackingModel:
    lattice: LatticeSpec
    weight_decomp: DecomposedParameter
    family: FamilySpec = field(default_factory=lambda: FamilySpec("bernoulli-logit"))
    diagnostics: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.weight_decomp.levels != self.lattice.levels:
            raise ModelLatticeMismatch("weight parameter levels do not match the stacking lattice")

    @property
    def M(self) -> int:
        return self.weight_decomp.p

    @property
    def K_w(self) -> int:
        return self.weight_decomp.K

    @classmethod
    def zeros(cls, lattice: LatticeSpec, M: int, K_w: int = 1, family: FamilySpec | None = None) -> "StackingModel":
        family = family or FamilySpec("bernoulli-logit")
        return cls(lattice, DecomposedParameter.zeros(lattice.levels, K_w, M), family)

    def weights(self, cells) -> np.ndarray:
        """Per-row weights ``(N, M)``."""
        cells = self.lattice.check_cells(cells)
        return softmax(self.weight_decomp.materialize(cells), axis=1)


def stack_weights(sm: StackingModel, cell) -> np.ndarray:
    return sm.weights(np.asarray(cell, dtype=np.int64).reshape(1, -1))[0]


def _check_logits(base_logits, M: int | None = None) -> np.ndarray:
    eta = np.asarray(base_logits, dtype=float)
    if eta.ndim == 1:
        eta = eta.reshape(-1, 1)
    if eta.ndim != 2 or (M is not None and eta.shape[1] != M):
        raise DimensionError(f"base logits have shape {eta.shape}, expected (N, {M})")
    return eta


def ensemble_predict(sm: StackingModel, base_logits, cells) -> np.ndarray:
    eta = _check_logits(base_logits, sm.M)
    cells = sm.lattice.check_cells(cells)
    if cells.shape[0] != eta.shape[0]:
        raise DimensionError(f"{eta.shape[0]} logit rows but {cells.shape[0]} cells")
    return np.einsum("nm,nm->n", sm.weights(cells), eta)


def leverage(M: int, n_cell, h_cap: float = H_CAP):
    n = np.asarray(n_cell, dtype=float)
    if (n < 1).any():
        raise ValueError("n_cell must be at least 1")
    out = np.minimum(M / n, h_cap)
    return float(out) if out.ndim == 0 else out


def row_leverage(M: int, cells, lattice: LatticeSpec) -> np.ndarray:
    flat = np.atleast_1d(lattice.flat_index(lattice.check_cells(cells)))
    counts = np.bincount(flat, minlength=lattice.n_cells)
    return leverage(M, counts[flat]) * np.ones(flat.size)


class _LooObjective:
    def __init__(self, template: DecomposedParameter, eta, y, cells, family: FamilySpec, h, ridge: float):
        self.template = template
        self.eta = eta
        self.y = y
        self.family = family
        self.c = 1.0 / (1.0 - h)
        self.N = eta.shape[0]
        self.ridge = ridge
        self.cells = cells
        self.index = {comp: combo_index(cells, template.levels, comp) for comp in template.components}

    def __call__(self, vec: np.ndarray) -> tuple[float, np.ndarray]:
        dp = self.template.with_vector(vec)
        w = softmax(dp.materialize(self.cells, self.index), axis=1)
        ens = np.einsum("nm,nm->n", w, self.eta)
        loss = float(np.sum(self.c * nll(self.family, self.y, ens, check=False)) / self.N)
        loss += self.ridge * float(vec @ vec)
        # d ens / d v_m = w_m (eta_m - ens)
        g_rows = (self.c * nll_grad(self.family, self.y, ens) / self.N)[:, None] * w * (self.eta - ens[:, None])
        parts = []
        for comp, idx in self.index.items():
            size = component_size(dp.levels, comp)
            parts.append(np.stack([np.bincount(idx, weights=g_rows[:, m], minlength=size) for m in range(dp.p)], axis=1).ravel())
        grad = np.concatenate(parts) + 2.0 * self.ridge * vec
        return loss, grad


def loo_loss(sm: StackingModel, base_logits, y, cells, *, h=None, ridge: float = 0.0) -> float:
    """Leverage-weighted mean negative log-likelihood of the ensemble."""
    eta = _check_logits(base_logits, sm.M)
    cells = sm.lattice.check_cells(cells)
    h = row_leverage(sm.M, cells, sm.lattice) if h is None else np.broadcast_to(np.asarray(h, dtype=float), (eta.shape[0],))
    obj = _LooObjective(sm.weight_decomp, eta, np.asarray(y, dtype=float), cells, sm.family, h, ridge)
    return obj(sm.weight_decomp.to_vector())[0]


def loo_gradient(sm: StackingModel, base_logits, y, cells, *, ridge: float = GAUGE_RIDGE) -> np.ndarray:
    eta = _check_logits(base_logits, sm.M)
    cells = sm.lattice.check_cells(cells)
    h = row_leverage(sm.M, cells, sm.lattice)
    obj = _LooObjective(sm.weight_decomp, eta, np.asarray(y, dtype=float), cells, sm.family, h, ridge)
    return obj(sm.weight_decomp.to_vector())[1]


def fit_stacking(
    base_logits,
    y,
    cells,
    lattice: LatticeSpec,
    K_w: int = 1,
    cfg: FitConfig | None = None,
    *,
    family: FamilySpec | None = None,
    ridge: float = GAUGE_RIDGE,
) -> StackingModel:
    """Fit local stacking weights with Adam on the leverage-corrected LOO loss."""
    cfg = cfg or FitConfig()
    family = family or FamilySpec("bernoulli-logit")
    eta = _check_logits(base_logits)
    if eta.shape[0] == 0:
        raise EmptyData("no rows to stack")
    y = check_response(family, y)
    if y.shape[0] != eta.shape[0]:
        raise DimensionError(f"{eta.shape[0]} logit rows but {y.shape[0]} responses")
    cells = lattice.check_cells(cells)
    sm = StackingModel.zeros(lattice, eta.shape[1], K_w, family)
    h = row_leverage(sm.M, cells, lattice)
    obj = _LooObjective(sm.weight_decomp, eta, y, cells, family, h, ridge)

    vec = sm.weight_decomp.to_vector()
    m = np.zeros_like(vec)
    v = np.zeros_like(vec)
    initial, _ = obj(vec)
    prev, quiet, converged, step = initial, 0, False, 0
    for step in range(1, cfg.max_steps + 1):
        loss, g = obj(vec)
        if not np.isfinite(loss) or not np.isfinite(g).all():
            raise Diverged(f"stacking loss became non-finite at step {step}", step=step)
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mhat = m / (1 - cfg.beta1**step)
        vhat = v / (1 - cfg.beta2**step)
        vec = vec - cfg.lr(step - 1) * mhat / (np.sqrt(vhat) + cfg.eps)
        if abs(prev - loss) <= cfg.tol * max(1.0, abs(loss)):
            quiet += 1
            if quiet >= cfg.patience:
                converged = True
                break
        else:
            quiet = 0
        prev = loss
    final, g = obj(vec)
    sm.weight_decomp = sm.weight_decomp.with_vector(vec)
    sm.diagnostics = {
        "initial_loss": initial,
        "final_loss": final,
        "steps": step,
        "converged": converged,
        "grad_norm": float(np.linalg.norm(g)),
        "N": int(eta.shape[0]),
        "M": sm.M,
        "K_w": K_w,
    }
    return sm
