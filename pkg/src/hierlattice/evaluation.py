"""WAIC, generalization gaps and truncation-flow quantities.

Two WAIC routes are provided: a sampled route that draws from the block
Laplace posterior of a fitted model, and an exact route for the conjugate
Normal-Inverse-Gamma linear model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb
from typing import Mapping, Sequence

import numpy as np
from scipy import stats
from scipy.special import logsumexp, polygamma

from .data import Dataset
from .decomposition import DecomposedParameter, anova_project
from .errors import IllDefinedFlow, InsufficientConcentration, NumericalError, UndefinedRho
from .fit import FittedModel, Problem, laplace_covariance
from .glm import nll
from .regularization import df_eff_ridge


@dataclass
class WaicReport:
    lppd_term: float  # -sum_n log E[f(y_n | theta)]
    penalty_term: float  # sum_n Var[log f(y_n | theta)]
    per_obs_lppd: np.ndarray
    per_obs_penalty: np.ndarray

    @property
    def total(self) -> float:
        return self.lppd_term + self.penalty_term

    @property
    def N(self) -> int:
        return self.per_obs_lppd.size

    def as_row(self) -> dict:
        return {"lppd_term": self.lppd_term, "penalty_term": self.penalty_term, "waic": self.total, "N": self.N}


def _report(log_f: np.ndarray) -> WaicReport:
    """``log_f`` has shape ``(S, N)``."""
    S = log_f.shape[0]
    lppd = logsumexp(log_f, axis=0) - np.log(S)
    var = np.var(log_f, axis=0, ddof=1)
    return WaicReport(float(-lppd.sum()), float(var.sum()), -lppd, var)


def waic(model: FittedModel, data: Dataset, S: int = 1000, seed: int = 0, chunk: int = 200) -> WaicReport:
    """WAIC from ``S`` draws of the block-diagonal Laplace posterior."""
    if S < 2:
        raise ValueError("need at least two posterior draws")
    cov = laplace_covariance(model, data)
    problem = Problem(model.blocks, data.X, data.y, data.cells(model.lattice), model.family, model.reg)
    theta_hat = problem.vector(model.blocks)
    chols = []
    for (name, comp), c in cov.items():
        try:
            chols.append((problem.slices[(name, comp)], np.linalg.cholesky(c), c.shape[-1]))
        except np.linalg.LinAlgError:
            raise NumericalError(f"degenerate posterior covariance for {name}:{comp}") from None
    rng = np.random.default_rng(seed)
    log_f = np.empty((S, data.N))
    for start in range(0, S, chunk):
        s = min(chunk, S - start)
        draws = np.repeat(theta_hat[None, :], s, axis=0)
        for sl, chol, pb in chols:
            z = rng.standard_normal((s, chol.shape[0], pb))
            draws[:, sl] += np.einsum("kij,skj->ski", chol, z).reshape(s, -1)
        eta = (problem.Z @ draws.T).T
        log_f[start : start + s] = -nll(model.family, data.y[None, :], eta, check=False)
    return _report(log_f)


def pointwise_log_lik(model: FittedModel, data: Dataset) -> np.ndarray:
    from .fit import predict_dataset

    eta, _ = predict_dataset(model, data)
    return -np.asarray(nll(model.family, data.y, eta))


# -- conjugate Normal-Inverse-Gamma route --------------------------------


@dataclass
class ConjugatePosterior:
    a_N: float
    b_N: float
    mean: np.ndarray
    V: np.ndarray  # coefficient covariance is sigma^2 * V
    leverage: np.ndarray
    residual: np.ndarray


def conjugate_posterior(X, y, *, prior_scale: float = 10.0, a0: float = 1.0, b0: float = 1.0, m0=None) -> ConjugatePosterior:
    """NIG posterior with prior ``beta | s2 ~ N(m0, s2 prior_scale^2 I)``, ``s2 ~ InvGamma(a0, b0)``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    y = np.asarray(y, dtype=float)
    N, p = X.shape
    m0 = np.zeros(p) if m0 is None else np.asarray(m0, dtype=float)
    P0 = np.eye(p) / prior_scale**2
    prec = X.T @ X + P0
    V = np.linalg.solve(prec, np.eye(p))
    m = V @ (P0 @ m0 + X.T @ y)
    a_N = a0 + N / 2.0
    b_N = b0 + 0.5 * (y @ y + m0 @ P0 @ m0 - m @ prec @ m)
    h = np.einsum("ni,ij,nj->n", X, V, X)
    r = y - X @ m
    return ConjugatePosterior(float(a_N), float(b_N), m, V, h, r)


def waic_variance_conjugate(post: ConjugatePosterior) -> np.ndarray:
    """Exact per-observation posterior variance of the log-likelihood."""
    a, b = post.a_N, post.b_N
    if a <= 2:
        raise InsufficientConcentration(f"a_N = {a} must exceed 2")
    r2 = post.residual**2
    h = post.leverage
    return a * r2 * h / b + h**2 / 2 + polygamma(1, a) / 4 + a * r2**2 / (4 * b**2) - r2 / (2 * b)


def conjugate_log_predictive(post: ConjugatePosterior, X, y) -> np.ndarray:
    """``log E[f(y|x, beta, s2)]``: Student-t posterior predictive density."""
    X = np.asarray(X, dtype=float).reshape(len(y), -1)
    h = np.einsum("ni,ij,nj->n", X, post.V, X)
    scale = np.sqrt(post.b_N / post.a_N * (1.0 + h))
    return stats.t.logpdf(y, df=2 * post.a_N, loc=X @ post.mean, scale=scale)


def waic_conjugate(X, y, **prior) -> WaicReport:
    post = conjugate_posterior(X, y, **prior)
    lppd = conjugate_log_predictive(post, X, y)
    var = waic_variance_conjugate(post)
    return WaicReport(float(-lppd.sum()), float(var.sum()), -lppd, var)


def conjugate_loo(X, y, **prior) -> float:
    """Exact leave-one-out score ``-sum_n log p(y_n | y_-n)`` for the NIG model."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    y = np.asarray(y, dtype=float)
    total = 0.0
    for n in range(len(y)):
        keep = np.arange(len(y)) != n
        post = conjugate_posterior(X[keep], y[keep], **prior)
        total -= float(conjugate_log_predictive(post, X[n : n + 1], y[n : n + 1])[0])
    return total


# -- truncation flow -----------------------------------------------------


def generalization_gap(s_list: Sequence[float]) -> np.ndarray:
    """``S_K - S_{K-1}`` for ``K >= 1``."""
    return np.diff(np.asarray(s_list, dtype=float))


def _check_flow(L: float, rho: float):
    if rho <= 0:
        raise ValueError("rho must be positive")
    if rho >= L:
        raise IllDefinedFlow(f"rho={rho} >= L={L}: no sharp truncation transition")


def critical_order(N: float, sigma2: float, L: float, rho: float) -> float:
    """Real-valued order where the per-cell signal-to-noise ratio reaches one."""
    _check_flow(L, rho)
    if N / sigma2 < 1:
        raise ValueError("need N / sigma2 >= 1")
    return float(np.log(N / sigma2) / np.log(L / rho))


def snr_at_order(N: float, rho: float, sigma2: float, L: float, K: float) -> float:
    # ratio form keeps large K finite when rho is close to L
    return float(N / sigma2 * (rho / L) ** K)


def kstar_bracket(kstar: float) -> tuple[int, int]:
    lo = int(np.floor(kstar))
    return lo, lo + 1


def correlation_length(d: int, Kstar: int, L: float, rho: float) -> float:
    _check_flow(L, rho)
    if not 0 <= Kstar <= d:
        raise ValueError("Kstar must lie in [0, d]")
    return float(2.0 / (comb(d, Kstar) * L**Kstar * np.log(L / rho)))


def replica_df(p: int, N: int, lambda2: float, sigma2: float) -> float:
    if np.isinf(lambda2):
        return float(p)
    return float(p * N * lambda2 / (N * lambda2 + sigma2))


def order_mean_square(dp: DecomposedParameter, k: int) -> float:
    """Mean square of order-``k`` entries (spread about the zero prior mean)."""
    entries = dp.order_entries(k)
    if entries.size == 0:
        raise UndefinedRho(f"parameter has no order-{k} entries")
    return float(np.mean(entries**2))


def estimate_rho(
    fits: Mapping[int, FittedModel] | Sequence[FittedModel],
    orders: tuple[int, int] = (0, 1),
    *,
    block: str = "coeff",
    centered: bool = True,
) -> float:
    """Ratio of effect variances between two orders.

    Effects come from the lowest-order fit containing both orders. With
    ``centered`` the fit is first mapped to its identified ANOVA form, since
    the raw tensors are only defined up to shifts between orders. Variances
    are mean squares of tensor entries about zero.
    """
    fits = dict(enumerate(fits)) if not isinstance(fits, Mapping) else dict(fits)
    lo, hi = orders
    candidates = sorted(K for K, m in fits.items() if m.K >= hi)
    if not candidates:
        raise UndefinedRho(f"no fit reaches order {hi}")
    dp = fits[candidates[0]].blocks[block]
    if centered:
        dp = anova_project(dp)
    denom = order_mean_square(dp, lo)
    if denom == 0:
        raise UndefinedRho(f"order-{lo} effects are all zero")
    return order_mean_square(dp, hi) / denom


@dataclass
class RgFlowReport:
    orders: list[int]
    waic: list[float]
    test_mse: list[float]
    test_nll: list[float]
    df_total: list[float] = field(default_factory=list)
    rho_hat: float | None = None
    kstar: float | None = None
    xi: float | None = None

    @property
    def delta_s(self) -> np.ndarray:
        return generalization_gap(self.waic)

    @property
    def kstar_bracket(self) -> tuple[int, int] | None:
        return None if self.kstar is None else kstar_bracket(self.kstar)

    def bracket_gaps(self) -> dict[int, float | None]:
        """Generalization gaps at the two integers bracketing ``K*`` (None when out of range)."""
        if self.kstar is None:
            return {}
        gaps = dict(zip(self.orders[1:], self.delta_s.tolist()))
        return {k: gaps.get(k) for k in self.kstar_bracket}

    def rows(self) -> list[dict]:
        ds = [None] + self.delta_s.tolist()
        return [
            {"K": K, "waic": w, "delta_s": g, "test_mse": m, "test_nll": t}
            for K, w, g, m, t in zip(self.orders, self.waic, ds, self.test_mse, self.test_nll)
        ]


def rg_flow_report(
    fits: Mapping[int, FittedModel],
    train: Dataset,
    test: Dataset,
    *,
    S: int = 1000,
    seed: int = 0,
    sigma2: float | None = None,
) -> RgFlowReport:
    """Score a ladder of truncation orders on train (WAIC) and test data."""
    from .fit import predict_dataset

    orders = sorted(fits)
    if orders != list(range(orders[0], orders[0] + len(orders))):
        raise ValueError("orders must be contiguous")
    w, mse, tn, df = [], [], [], []
    for K in orders:
        m = fits[K]
        w.append(waic(m, train, S=S, seed=seed).total)
        eta, mu = predict_dataset(m, test)
        mse.append(float(np.mean((test.y - mu) ** 2)))
        tn.append(float(np.mean(nll(m.family, test.y, eta))))
        df.append(float(m.diagnostics.get("df_total", np.nan)))
    report = RgFlowReport(orders, w, mse, tn, df)
    try:
        report.rho_hat = estimate_rho(fits)
    except UndefinedRho:
        report.rho_hat = None
    model = fits[orders[0]]
    L = float(np.mean(model.lattice.levels)) if model.lattice.d else 1.0
    s2 = sigma2 if sigma2 is not None else (model.family.dispersion if model.family.family == "gaussian" else 1.0)
    if report.rho_hat is not None and 0 < report.rho_hat < L:
        report.kstar = critical_order(train.N, s2, L, report.rho_hat)
        kint = min(int(round(report.kstar)), model.lattice.d)
        report.xi = correlation_length(model.lattice.d, kint, L, report.rho_hat)
    return report


def replica_mc(p: int, N: int, lambda2: float, sigma2: float, draws: int, rng: np.random.Generator) -> np.ndarray:
    """Effective degrees of freedom of ridge fits on random Gaussian designs.

    Entries are drawn ``N(0, 1/N)`` and rescaled by ``sqrt(N)`` so that rows have
    unit-variance features; the ridge penalty is ``sigma2 / lambda2``.
    """
    out = np.empty(draws)
    for i in range(draws):
        X = rng.normal(0.0, 1.0 / np.sqrt(N), size=(N, p)) * np.sqrt(N)
        out[i] = df_eff_ridge(X, np.full(N, 1.0 / sigma2), np.sqrt(lambda2))
    return out


@dataclass
class OrderSelection:
    selected: int
    orders: list[int]
    waic: list[float]

    @property
    def delta_s(self) -> np.ndarray:
        return generalization_gap(self.waic)

    def rows(self) -> list[dict]:
        ds = [None] + self.delta_s.tolist()
        return [{"K": K, "waic": w, "delta_s": g, "selected": K == self.selected} for K, w, g in zip(self.orders, self.waic, ds)]


def select_order(
    train: Dataset,
    lattice,
    family,
    K_max: int,
    *,
    fit_fn=None,
    S: int = 1000,
    seed: int = 0,
) -> tuple[OrderSelection, dict[int, FittedModel]]:
    """Raise the truncation order while the generalization gap stays negative.

    ``fit_fn(K)`` returns a fitted model of order ``K``; by default a MAP fit
    under generalization-preserving priors.
    """
    from .fit import map_fit

    if fit_fn is None:
        def fit_fn(K):
            return map_fit(train, lattice, K, family)

    fits = {0: fit_fn(0)}
    scores = [waic(fits[0], train, S=S, seed=seed).total]
    selected = 0
    for K in range(1, K_max + 1):
        fits[K] = fit_fn(K)
        scores.append(waic(fits[K], train, S=S, seed=seed).total)
        if scores[-1] - scores[-2] >= 0:
            break
        selected = K
    return OrderSelection(selected, list(range(len(scores))), scores), fits
