"""Prior scales that keep each added component's effective complexity bounded.

Every component level-combination gets a Gaussian prior ``N(0, tau^2 I)``. The
MAP penalty is the matching negative log-prior ``||theta||^2 / (2 tau^2)``.
With ``tau`` at the per-component bound a null component adds at most half an
effective degree of freedom.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Literal, Mapping

import numpy as np
import scipy.linalg

from .decomposition import Component, DecomposedParameter, combo_index, component_size
from .errors import EmptyComponentWarning, NumericalError
from .glm import FamilySpec, fisher_weight

Mode = Literal["per-component", "per-parameter"]
Blocks = Mapping[str, DecomposedParameter]

WBAR_TOL = 1e-4
MAX_OUTER = 10


def shrinkage(N_alpha: float, tau: float, sigma: float) -> float:
    """Fraction of the sample mean kept by the posterior mean under an ``N(0, tau^2)`` prior."""
    if N_alpha < 0 or tau <= 0 or sigma <= 0:
        raise ValueError("need N_alpha >= 0, tau > 0, sigma > 0")
    if np.isinf(tau):
        return 1.0 if N_alpha > 0 else 0.0
    a = N_alpha * tau**2
    return float(a / (a + sigma**2))


def tau_glm(p: int, wbar: float, N_alpha: float, floor: float | None = None) -> float:
    """``1 / sqrt(2 p wbar N_alpha)``; falls back to ``floor`` when the component is empty."""
    if p < 1:
        raise ValueError("p must be positive")
    if N_alpha <= 0 or wbar <= 0:
        if floor is None:
            raise ValueError("empty component and no floor configured")
        warnings.warn("component with no data; prior scale floored", EmptyComponentWarning, stacklevel=2)
        return float(floor)
    return float(1.0 / np.sqrt(2.0 * p * wbar * N_alpha))


def tau_gaussian(sigma: float, p: int, N_alpha: float, floor: float | None = None) -> float:
    """``sigma / sqrt(2 p N_alpha)``."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if N_alpha <= 0:
        return tau_glm(p, 1.0, 0, floor)
    return float(sigma / np.sqrt(2.0 * p * N_alpha))


def tau_per_parameter(sigma: float, N_alpha: float, floor: float | None = None) -> float:
    """``sigma / sqrt(N_alpha)``: each coefficient separately capped at half a degree of freedom."""
    if N_alpha <= 0:
        return tau_glm(1, 1.0, 0, floor)
    return float(sigma / np.sqrt(N_alpha))


def df_eff_ridge(X, W=None, tau: float = 1.0) -> float:
    """``trace[(X'WX + tau^-2 I)^-1 X'WX]``, computed with a symmetric solve.

    ``W`` is the diagonal of the weight matrix (or ``None`` for identity).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    w = np.ones(X.shape[0]) if W is None else np.asarray(W, dtype=float)
    if w.ndim == 2:
        w = np.diag(w)
    if not (np.isfinite(X).all() and np.isfinite(w).all()) or np.isnan(tau):
        raise NumericalError("non-finite entries in df_eff_ridge input")
    A = X.T @ (w[:, None] * X)
    if np.isinf(tau):
        return float(np.linalg.matrix_rank(A))
    M = A + np.eye(A.shape[0]) / tau**2
    return float(np.trace(scipy.linalg.solve(M, A, assume_a="pos")))


def signal_improvement_check(beta_true_norms, N_g, sigma: float, G: int | None = None, p: int = 1) -> bool:
    """True when the total signal energy clears the regularization cost ``G p / 2``.

    ``beta_true_norms`` are the per-group norms ``||beta_g||`` (not squared).
    """
    norms = np.asarray(beta_true_norms, dtype=float)
    N_g = np.asarray(N_g, dtype=float)
    if norms.shape != N_g.shape:
        raise ValueError("beta_true_norms and N_g must have equal length")
    G = norms.size if G is None else G
    energy = float(np.sum(N_g * norms**2) / (2.0 * sigma**2))
    return energy > G * p / 2.0


@dataclass
class RegularizationPlan:
    """Prior scale per block, component and level-combination.

    ``taus[block][component]`` is a vector over level-combinations; ``inf``
    leaves that parameter unpenalized.
    """

    taus: dict[str, dict[Component, np.ndarray]]
    mode: str = "per-component"
    label: str = "custom"

    def __post_init__(self):
        for block, comps in self.taus.items():
            for comp, t in comps.items():
                t = np.asarray(t, dtype=float)
                if (np.isnan(t) | (t <= 0)).any():
                    raise ValueError(f"prior scale must be positive ({block}, {comp})")
                comps[comp] = t

    def inv_tau2(self, block: str, comp: Component) -> np.ndarray:
        return 1.0 / self.taus[block][comp] ** 2

    def penalty_weight(self, block: str, comp: Component) -> np.ndarray:
        """``lambda = 1 / (2 tau^2)`` multiplying the squared parameter norm."""
        return 0.5 * self.inv_tau2(block, comp)

    def penalty(self, blocks: Blocks) -> float:
        total = 0.0
        for name, dp in blocks.items():
            for comp, t in dp.tensors.items():
                total += float(np.sum(self.penalty_weight(name, comp) * np.sum(t**2, axis=1)))
        return total

    def covers(self, blocks: Blocks) -> bool:
        for name, dp in blocks.items():
            comps = self.taus.get(name)
            if comps is None:
                return False
            for comp in dp.components:
                if comp not in comps or comps[comp].shape != (component_size(dp.levels, comp),):
                    return False
        return True

    def restrict(self, blocks: Blocks) -> "RegularizationPlan":
        return RegularizationPlan(
            {name: {c: self.taus[name][c].copy() for c in dp.components} for name, dp in blocks.items()},
            self.mode,
            self.label,
        )

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "label": self.label,
            "taus": {
                block: {"/".join(map(str, c)): t.tolist() for c, t in comps.items()}
                for block, comps in self.taus.items()
            },
        }

    # -- constructors --------------------------------------------------

    @classmethod
    def by_order(cls, blocks: Blocks, tau_of_order: Callable[[int], float], label: str = "by-order"):
        return cls(
            {
                name: {c: np.full(component_size(dp.levels, c), float(tau_of_order(len(c)))) for c in dp.components}
                for name, dp in blocks.items()
            },
            "fixed",
            label,
        )

    @classmethod
    def constant(cls, blocks: Blocks, tau: float, label: str = "fixed"):
        return cls.by_order(blocks, lambda k: tau, label)

    @classmethod
    def unregularized(cls, blocks: Blocks):
        return cls.by_order(blocks, lambda k: np.inf, "unregularized")


def _combo_counts(cells: np.ndarray, dp: DecomposedParameter, comp: Component) -> np.ndarray:
    return np.bincount(combo_index(cells, dp.levels, comp), minlength=component_size(dp.levels, comp))


def _bound(p: int, wbar, n, mode: str, floor: float) -> np.ndarray:
    wbar = np.broadcast_to(np.asarray(wbar, dtype=float), np.shape(n))
    n = np.asarray(n, dtype=float)
    out = np.full(n.shape, float(floor))
    ok = (n > 0) & (wbar > 0)
    scale = 2.0 * p if mode == "per-component" else 1.0
    out[ok] = 1.0 / np.sqrt(scale * wbar[ok] * n[ok])
    if (~ok).any():
        warnings.warn(
            f"{int((~ok).sum())} empty level-combination(s); prior scale floored at {floor:.4g}",
            EmptyComponentWarning,
            stacklevel=3,
        )
    return out


def generalization_preserving(
    blocks: Blocks,
    cells: np.ndarray,
    *,
    sigma: float | None = None,
    wbar: Mapping[str, Mapping[Component, np.ndarray]] | float | None = None,
    mode: Mode = "per-component",
    penalize_global: bool = False,
) -> RegularizationPlan:
    """Prior scales at the generalization-preserving bound.

    Pass ``sigma`` for Gaussian noise (equivalent to a constant Fisher weight
    ``1/sigma^2``) or ``wbar`` with mean Fisher weights, either a scalar or per
    block/component/level-combination. Empty combinations fall back to the
    bound evaluated with the total sample size.
    """
    if mode not in ("per-component", "per-parameter"):
        raise ValueError(f"unknown mode {mode!r}")
    if (sigma is None) == (wbar is None):
        raise ValueError("pass exactly one of sigma or wbar")
    cells = np.asarray(cells, dtype=np.int64)
    N = cells.shape[0]
    taus: dict[str, dict[Component, np.ndarray]] = {}
    for name, dp in blocks.items():
        comps = {}
        p_eff = dp.p
        for comp in dp.components:
            n = _combo_counts(cells, dp, comp)
            if sigma is not None:
                w = np.full(n.shape, 1.0 / sigma**2)
                w_global = 1.0 / sigma**2
            elif np.isscalar(wbar):
                w = np.full(n.shape, float(wbar))
                w_global = float(wbar)
            else:
                w = np.asarray(wbar[name][comp], dtype=float)
                w_global = float(np.sum(w * n) / max(n.sum(), 1))
            floor_scale = 2.0 * p_eff if mode == "per-component" else 1.0
            floor = 1.0 / np.sqrt(floor_scale * max(w_global, 1e-12) * N)
            if not comp and not penalize_global:
                comps[comp] = np.full(n.shape, np.inf)
            else:
                comps[comp] = _bound(p_eff, w, n, mode, floor)
        taus[name] = comps
    label = "generalization-preserving" if mode == "per-component" else "per-parameter"
    return RegularizationPlan(taus, mode, label)


@dataclass
class FisherState:
    """Mean Fisher weight per block, component and level-combination."""

    wbar: dict[str, dict[Component, np.ndarray]]
    iteration: int = 0
    history: list[float] = field(default_factory=list)

    def max_change(self, other: "FisherState") -> float:
        diffs = [
            float(np.max(np.abs(self.wbar[b][c] - other.wbar[b][c]), initial=0.0))
            for b in self.wbar
            for c in self.wbar[b]
        ]
        return max(diffs, default=0.0)

    def global_wbar(self, block: str = "coeff") -> float:
        return float(self.wbar[block][()][0])

    @classmethod
    def constant(cls, blocks: Blocks, value: float) -> "FisherState":
        return cls(
            {name: {c: np.full(component_size(dp.levels, c), float(value)) for c in dp.components} for name, dp in blocks.items()}
        )


def fisher_state_from_weights(blocks: Blocks, cells: np.ndarray, w: np.ndarray, iteration: int = 0) -> FisherState:
    """Average per-row Fisher weights over every level-combination."""
    out: dict[str, dict[Component, np.ndarray]] = {}
    for name, dp in blocks.items():
        comps = {}
        for comp in dp.components:
            idx = combo_index(cells, dp.levels, comp)
            size = component_size(dp.levels, comp)
            n = np.bincount(idx, minlength=size)
            s = np.bincount(idx, weights=w, minlength=size)
            comps[comp] = np.divide(s, n, out=np.zeros(size), where=n > 0)
        out[name] = comps
    return FisherState(out, iteration)


def iterate_weights(model, data, *, iteration: int = 0) -> tuple[FisherState, RegularizationPlan]:
    """One reweighting step: Fisher weights at the current fit, then refreshed prior scales."""
    from .fit import predict_dataset

    cells = data.cells(model.lattice)
    _, mu = predict_dataset(model, data)
    w = np.asarray(fisher_weight(model.family, mu))
    state = fisher_state_from_weights(model.blocks, cells, w, iteration)
    state.history = [state.global_wbar(next(iter(model.blocks)))]
    global_free = any(np.isinf(model.reg.taus[b][()]).all() for b in model.blocks if () in model.reg.taus[b])
    plan = generalization_preserving(
        model.blocks,
        cells,
        wbar=state.wbar,
        mode=model.reg.mode if model.reg.mode in ("per-component", "per-parameter") else "per-component",
        penalize_global=not global_free,
    )
    return state, plan


def df_eff_by_component(blocks: Blocks, X_blocks: Mapping[str, np.ndarray], cells, w, plan: RegularizationPlan):
    """Effective degrees of freedom of each component, summed over its level-combinations."""
    out: dict[str, dict[Component, float]] = {}
    w = np.asarray(w, dtype=float)
    for name, dp in blocks.items():
        Xb = X_blocks[name]
        res = {}
        for comp in dp.components:
            idx = combo_index(cells, dp.levels, comp)
            taus = plan.taus[name][comp]
            order = np.argsort(idx, kind="stable")
            bounds = np.searchsorted(idx[order], np.arange(taus.size + 1))
            total = 0.0
            for j, tau in enumerate(taus):
                rows = order[bounds[j] : bounds[j + 1]]
                if rows.size:
                    total += df_eff_ridge(Xb[rows], w[rows], tau)
            res[comp] = total
        out[name] = res
    return out


def mean_fisher_weight(family: FamilySpec, y) -> float:
    """Mean Fisher weight of the intercept-only fit; ``ybar (1 - ybar)`` for logistic data."""
    y = np.asarray(y, dtype=float)
    if family.family == "gaussian":
        return 1.0 / family.dispersion
    return float(fisher_weight(family, np.clip(y.mean(), 1e-12, None)))
