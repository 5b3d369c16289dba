"""MAP estimation of decomposed piecewise GLMs.

The objective is the summed negative log-likelihood plus the negative log of
the Gaussian component priors. Two solvers share it:

* ``adam`` (default): full-batch or minibatch Adam under a warmup-cosine
  learning-rate schedule.
* ``newton``: damped Newton / IRLS on the same objective. Exact in one step for
  the Gaussian family; used by the simulation harness where hundreds of fits
  are needed.

Internally every model is linear in a sparse design ``Z`` (rows x all
component parameters), so ``eta = Z @ theta`` and gradients are ``Z.T @ g``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Literal, Mapping

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .data import Dataset
from .decomposition import Component, DecomposedParameter, combo_index, component_size
from .errors import (
    Diverged,
    EmptyData,
    InvalidTruncation,
    ModelLatticeMismatch,
    NonConvergence,
    NumericalError,
)
from .glm import FamilySpec, check_response, eta_weight, mean, nll, nll_grad
from .lattice import LatticeSpec
from .regularization import (
    MAX_OUTER,
    WBAR_TOL,
    FisherState,
    RegularizationPlan,
    df_eff_by_component,
    generalization_preserving,
    iterate_weights,
    mean_fisher_weight,
)

logger = logging.getLogger(__name__)

Blocks = dict[str, DecomposedParameter]


@dataclass(frozen=True)
class FitConfig:
    max_steps: int = 3000
    lr_start: float = 1e-3
    lr_peak: float = 0.02
    lr_end: float = 1e-3
    warmup_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tol: float = 1e-10
    patience: int = 20
    seed: int = 0
    batch_size: int | None = None  # None = full batch
    solver: Literal["adam", "newton"] = "adam"
    newton_max_iter: int = 100

    def __post_init__(self):
        if min(self.lr_start, self.lr_peak, self.lr_end) <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.solver not in ("adam", "newton"):
            raise ValueError(f"unknown solver {self.solver!r}")

    def lr(self, step: int) -> float:
        """Linear warmup to ``lr_peak`` followed by cosine decay to ``lr_end``."""
        warm = int(self.warmup_fraction * self.max_steps)
        if step < warm:
            return self.lr_start + (self.lr_peak - self.lr_start) * step / warm
        decay = max(self.max_steps - warm, 1)
        frac = min((step - warm) / decay, 1.0)
        return self.lr_end + 0.5 * (self.lr_peak - self.lr_end) * (1 + math.cos(math.pi * frac))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FittedModel:
    lattice: LatticeSpec
    blocks: Blocks
    family: FamilySpec
    reg: RegularizationPlan
    diagnostics: dict[str, Any] = field(default_factory=dict)
    fisher: FisherState | None = None
    preprocess: dict[str, Any] | None = None

    @property
    def coeff_decomp(self) -> DecomposedParameter:
        return self.blocks["coeff"]

    @property
    def intercept_decomp(self) -> DecomposedParameter | None:
        return self.blocks.get("intercept")

    @property
    def K(self) -> int:
        return self.coeff_decomp.K

    @property
    def p(self) -> int:
        return self.coeff_decomp.p


def model_blocks(lattice: LatticeSpec, K: int, p: int, intercept_K: int | None = None) -> Blocks:
    """Zero-initialized parameter blocks: ``coeff`` over the features, optional ``intercept``."""
    if K > lattice.d or K < 0:
        raise InvalidTruncation(f"truncation order K={K} must lie in [0, d={lattice.d}]")
    blocks = {"coeff": DecomposedParameter.zeros(lattice.levels, K, p)}
    if intercept_K is not None:
        if intercept_K > lattice.d or intercept_K < 0:
            raise InvalidTruncation(f"intercept order {intercept_K} must lie in [0, d={lattice.d}]")
        blocks["intercept"] = DecomposedParameter.zeros(lattice.levels, intercept_K, 1)
    return blocks


def block_design(name: str, X: np.ndarray) -> np.ndarray:
    return np.ones((X.shape[0], 1)) if name == "intercept" else X


class Problem:
    """Penalized objective for fixed data, cells, family and prior plan."""

    def __init__(self, blocks: Blocks, X, y, cells, family: FamilySpec, plan: RegularizationPlan):
        self.template = {k: v for k, v in blocks.items()}
        self.family = family
        self.y = np.asarray(y, dtype=float)
        X = np.asarray(X, dtype=float)
        N = X.shape[0]
        if blocks["coeff"].p != X.shape[1]:
            raise ModelLatticeMismatch(f"model has p={blocks['coeff'].p}, data has {X.shape[1]} features")
        rows, cols, vals, inv_tau2 = [], [], [], []
        self.slices: dict[tuple[str, Component], slice] = {}
        offset = 0
        for name, dp in blocks.items():
            Xb = block_design(name, X)
            pb = dp.p
            for comp in dp.components:
                size = component_size(dp.levels, comp)
                idx = combo_index(cells, dp.levels, comp)
                for j in range(pb):
                    rows.append(np.arange(N))
                    cols.append(offset + idx * pb + j)
                    vals.append(Xb[:, j])
                it2 = plan.inv_tau2(name, comp)
                inv_tau2.append(np.repeat(it2, pb))
                self.slices[(name, comp)] = slice(offset, offset + size * pb)
                offset += size * pb
        self.P = offset
        self.Z = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, self.P)
        )
        self.ZT = self.Z.T.tocsr()
        self.inv_tau2 = np.concatenate(inv_tau2) if inv_tau2 else np.zeros(0)

    @property
    def N(self) -> int:
        return self.Z.shape[0]

    def vector(self, blocks: Blocks) -> np.ndarray:
        return np.concatenate([blocks[name].to_vector() for name in self.template])

    def unpack(self, theta: np.ndarray) -> Blocks:
        out, start = {}, 0
        for name, dp in self.template.items():
            out[name] = dp.with_vector(theta[start : start + dp.size])
            start += dp.size
        return out

    def eta(self, theta) -> np.ndarray:
        return self.Z @ theta

    def penalty(self, theta) -> float:
        return float(0.5 * np.sum(self.inv_tau2 * theta**2))

    def loss(self, theta) -> float:
        return float(np.sum(nll(self.family, self.y, self.eta(theta), check=False))) + self.penalty(theta)

    def loss_grad(self, theta, rows: np.ndarray | None = None) -> tuple[float, np.ndarray]:
        if rows is None:
            eta = self.Z @ theta
            y, ZT, scale = self.y, self.ZT, 1.0
        else:
            Zb = self.Z[rows]
            eta = Zb @ theta
            y, ZT, scale = self.y[rows], Zb.T, self.N / rows.size
        data_loss = float(np.sum(nll(self.family, y, eta, check=False)))
        g = scale * (ZT @ nll_grad(self.family, y, eta)) + self.inv_tau2 * theta
        return scale * data_loss + self.penalty(theta), g

    def hessian(self, theta) -> np.ndarray:
        w = eta_weight(self.family, self.Z @ theta)
        H = (self.ZT @ sp.diags(w) @ self.Z).toarray()
        H[np.diag_indices_from(H)] += self.inv_tau2
        return H


def _solve_sym(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    try:
        c = scipy.linalg.cho_factor(H, check_finite=False)
        return scipy.linalg.cho_solve(c, g, check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        # singular when some directions are unpenalized and unidentified
        return scipy.linalg.lstsq(H, g, lapack_driver="gelsd", check_finite=False)[0]


def _newton(problem: Problem, theta: np.ndarray, cfg: FitConfig) -> tuple[np.ndarray, dict]:
    loss = problem.loss(theta)
    initial = loss
    converged = False
    it = 0
    for it in range(1, cfg.newton_max_iter + 1):
        _, g = problem.loss_grad(theta)
        step = _solve_sym(problem.hessian(theta), g)
        t = 1.0
        while True:
            cand = theta - t * step
            new = problem.loss(cand)
            if np.isfinite(new) and new <= loss + 1e-12 * max(1.0, abs(loss)):
                break
            t *= 0.5
            if t < 1e-10:
                cand, new = theta, loss
                break
        if not np.isfinite(new):
            raise Diverged("Newton iterate left the finite domain", step=it)
        change = abs(loss - new)
        theta, loss = cand, new
        if change <= cfg.tol * max(1.0, abs(loss)) or np.max(np.abs(t * step), initial=0.0) < 1e-12:
            converged = True
            break
    return theta, {"initial_loss": initial, "final_loss": loss, "steps": it, "converged": converged}


def _adam(problem: Problem, theta: np.ndarray, cfg: FitConfig) -> tuple[np.ndarray, dict]:
    rng = np.random.default_rng(cfg.seed)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    initial = problem.loss(theta)
    prev = initial
    quiet = 0
    converged = False
    step = 0
    full = cfg.batch_size is None or cfg.batch_size >= problem.N
    for step in range(1, cfg.max_steps + 1):
        rows = None if full else rng.choice(problem.N, size=cfg.batch_size, replace=False)
        loss, g = problem.loss_grad(theta, rows)
        if not np.isfinite(loss) or not np.isfinite(g).all():
            raise Diverged(f"loss became non-finite at step {step}", step=step)
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mhat = m / (1 - cfg.beta1**step)
        vhat = v / (1 - cfg.beta2**step)
        theta = theta - cfg.lr(step - 1) * mhat / (np.sqrt(vhat) + cfg.eps)
        if full:
            if abs(prev - loss) <= cfg.tol * max(1.0, abs(loss)):
                quiet += 1
                if quiet >= cfg.patience:
                    converged = True
                    break
            else:
                quiet = 0
            prev = loss
    final = problem.loss(theta)
    if not np.isfinite(final):
        raise Diverged("final loss is non-finite", step=step)
    return theta, {"initial_loss": initial, "final_loss": final, "steps": step, "converged": converged}


def default_plan(blocks: Blocks, data: Dataset, lattice: LatticeSpec, family: FamilySpec, **kw) -> RegularizationPlan:
    cells = data.cells(lattice)
    if family.family == "gaussian":
        return generalization_preserving(blocks, cells, sigma=family.sigma, **kw)
    return generalization_preserving(blocks, cells, wbar=mean_fisher_weight(family, data.y), **kw)


def map_fit(
    data: Dataset,
    lattice: LatticeSpec,
    K: int,
    family: FamilySpec,
    reg: RegularizationPlan | None = None,
    cfg: FitConfig | None = None,
    init: Blocks | DecomposedParameter | None = None,
    *,
    intercept_K: int | None = None,
) -> FittedModel:
    """Fit component tensors by minimizing the penalized negative log-likelihood.

    ``reg=None`` uses generalization-preserving scales (``sigma`` from the
    family for Gaussian data, ``sigma_eff = 1/sqrt(wbar)`` with ``wbar`` the
    intercept-only Fisher weight otherwise). ``init`` is used verbatim.
    """
    cfg = cfg or FitConfig()
    if data is None or data.N == 0:
        raise EmptyData("cannot fit an empty dataset")
    blocks = model_blocks(lattice, K, data.p, intercept_K)
    cells = data.cells(lattice)
    check_response(family, data.y)
    if reg is None:
        reg = default_plan(blocks, data, lattice, family)
    if not reg.covers(blocks):
        raise ModelLatticeMismatch("regularization plan does not cover every component")
    reg = reg.restrict(blocks)
    if isinstance(init, DecomposedParameter):
        init = {"coeff": init}
    if init is not None:
        for name, dp in blocks.items():
            if name not in init:
                continue
            if init[name].levels != dp.levels or init[name].K != dp.K or init[name].p != dp.p:
                raise ModelLatticeMismatch(f"initial {name} parameters do not match the model layout")
            blocks[name] = init[name].copy()
    problem = Problem(blocks, data.X, data.y, cells, family, reg)
    theta0 = problem.vector(blocks)
    solver = _newton if cfg.solver == "newton" else _adam
    theta, info = solver(problem, theta0, cfg)
    fitted = problem.unpack(theta)
    eta = problem.eta(theta)
    w = eta_weight(family, eta)
    df = df_eff_by_component(fitted, {n: block_design(n, data.X) for n in fitted}, cells, w, reg)
    info.update(
        solver=cfg.solver,
        train_nll=float(np.sum(nll(family, data.y, eta))),
        penalty=problem.penalty(theta),
        df_eff={b: {"/".join(map(str, c)) or "()": v for c, v in comps.items()} for b, comps in df.items()},
        df_total=float(sum(v for comps in df.values() for v in comps.values())),
        N=data.N,
        K=K,
    )
    if not info["converged"]:
        logger.info("map_fit stopped after %d steps without meeting tol", info["steps"])
    return FittedModel(lattice, fitted, family, reg, info)


def predict(model: FittedModel, X, cells) -> tuple[np.ndarray, np.ndarray]:
    """Linear predictor and mean for each row."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != model.p:
        raise ModelLatticeMismatch(f"rows have {X.shape[1]} features, model expects {model.p}")
    cells = model.lattice.check_cells(cells)
    eta = np.zeros(X.shape[0])
    for name, dp in model.blocks.items():
        theta = dp.materialize(cells)
        eta += np.einsum("np,np->n", block_design(name, X), theta)
    return eta, np.asarray(mean(model.family, eta))


def predict_dataset(model: FittedModel, data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    return predict(model, data.X, data.cells(model.lattice))


def penalized_nll(model: FittedModel, data: Dataset, blocks: Blocks | None = None) -> float:
    blocks = model.blocks if blocks is None else blocks
    problem = Problem(blocks, data.X, data.y, data.cells(model.lattice), model.family, model.reg)
    return problem.loss(problem.vector(blocks))


def laplace_covariance(model: FittedModel, data: Dataset) -> dict[tuple[str, Component], np.ndarray]:
    """Block-diagonal Laplace posterior covariance.

    One ``p x p`` block per component level-combination:
    ``(X_a' W X_a + tau^-2 I)^-1`` with ``W`` the Fisher weights at the fit.
    Returns arrays of shape ``(n_combos, p, p)`` keyed by ``(block, component)``.
    """
    cells = data.cells(model.lattice)
    eta, _ = predict_dataset(model, data)
    w = np.asarray(eta_weight(model.family, eta))
    out = {}
    for name, dp in model.blocks.items():
        Xb = block_design(name, data.X)
        pb = dp.p
        outer = (Xb[:, :, None] * Xb[:, None, :]).reshape(Xb.shape[0], pb * pb) * w[:, None]
        for comp in dp.components:
            size = component_size(dp.levels, comp)
            idx = combo_index(cells, dp.levels, comp)
            A = np.stack([np.bincount(idx, weights=outer[:, j], minlength=size) for j in range(pb * pb)], axis=1)
            A = A.reshape(size, pb, pb)
            A = A + model.reg.inv_tau2(name, comp)[:, None, None] * np.eye(pb)
            try:
                chol = np.linalg.cholesky(A)
            except np.linalg.LinAlgError:
                raise NumericalError(f"posterior precision of component {name}:{comp} is not positive definite") from None
            eye = np.broadcast_to(np.eye(pb), A.shape)
            inv_chol = np.linalg.solve(chol, eye)
            out[(name, comp)] = np.einsum("kji,kjl->kil", inv_chol, inv_chol)
    return out


def estimate_sigma(data: Dataset, ridge: float = 1e-8) -> float:
    """Residual standard deviation of a global (K=0) ridge fit."""
    X, y = data.X, data.y
    A = X.T @ X + ridge * np.eye(data.p)
    beta = scipy.linalg.solve(A, X.T @ y, assume_a="pos")
    resid = y - X @ beta
    dof = max(data.N - data.p, 1)
    return float(np.sqrt(resid @ resid / dof))


def fit_adaptive(
    data: Dataset,
    lattice: LatticeSpec,
    K: int,
    family: FamilySpec,
    cfg: FitConfig | None = None,
    *,
    mode: str = "per-component",
    penalize_global: bool = False,
    wbar0: float = 0.25,
    tol: float = WBAR_TOL,
    max_outer: int = MAX_OUTER,
    intercept_K: int | None = None,
) -> FittedModel:
    """Alternate MAP fits with Fisher-weight updates of the prior scales.

    Starts from a constant mean weight ``wbar0`` and stops once no
    level-combination's mean weight moves by more than ``tol``.
    """
    blocks = model_blocks(lattice, K, data.p, intercept_K)
    cells = data.cells(lattice)
    state = FisherState.constant(blocks, wbar0)
    plan = generalization_preserving(blocks, cells, wbar=state.wbar, mode=mode, penalize_global=penalize_global)
    history = [wbar0]
    model = None
    for outer in range(1, max_outer + 1):
        model = map_fit(data, lattice, K, family, plan, cfg, init=None if model is None else model.blocks, intercept_K=intercept_K)
        new_state, plan = iterate_weights(model, data, iteration=outer)
        change = new_state.max_change(state)
        history.append(new_state.global_wbar(next(iter(blocks))))
        state = new_state
        model.fisher = state
        if change < tol:
            model = map_fit(data, lattice, K, family, plan, cfg, init=model.blocks, intercept_K=intercept_K)
            model.fisher = state
            state.history = history
            model.diagnostics["outer_iterations"] = outer
            return model
    state.history = history
    raise NonConvergence(f"Fisher weights still moving after {max_outer} outer iterations", state=state)
