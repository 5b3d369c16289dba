"""Synthetic hierarchical data and the experiment harnesses built on it.

Every replication draws from its own generator seeded by
``SeedSequence([master_seed, replication])`` so runs are reproducible and
replications are independent.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Any, Callable

import numpy as np

from .data import Dataset, train_test_split
from .decomposition import DecomposedParameter
from .evaluation import RgFlowReport, critical_order, kstar_bracket, replica_df, replica_mc, rg_flow_report
from .fit import FitConfig, FittedModel, map_fit, model_blocks, predict_dataset
from .glm import FamilySpec, nll, sample_response
from .lattice import LatticeSpec
from .regularization import RegularizationPlan, generalization_preserving, mean_fisher_weight

SCHEMES = ("unregularized", "fixed", "ad-hoc", "generalization-preserving")
GAMMA_WARN = 0.9


def replication_rng(seed: int, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(rep)]))


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class SimConfig:
    d: int = 3
    L: int = 4
    N: int = 10000
    rho: float = 0.3
    sigma: float = 1.0
    p: int = 1
    family: str = "gaussian"
    train_fraction: float = 0.8
    K_max: int = 2
    solver: str = "newton"
    penalize_global: bool = False
    waic_draws: int = 1000

    def __post_init__(self):
        if self.d < 1 or self.L < 1 or self.N < 2 or self.p < 1:
            raise ValueError("d, L, p must be positive and N at least 2")
        if self.rho < 0 or self.sigma <= 0:
            raise ValueError("need rho >= 0 and sigma > 0")
        if not 0 <= self.K_max <= self.d:
            raise ValueError(f"K_max must lie in [0, d={self.d}]")

    @property
    def family_spec(self) -> FamilySpec:
        return FamilySpec(self.family, self.sigma**2 if self.family == "gaussian" else 1.0)

    @property
    def lattice(self) -> LatticeSpec:
        return LatticeSpec.uniform_categorical(self.d, self.L)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())


@dataclass
class SyntheticTruth:
    lattice: LatticeSpec
    true_decomp: DecomposedParameter
    rho: float
    sigma: float
    seed: int
    family: FamilySpec = field(default_factory=FamilySpec)


def _draw(d, L, N, rho, sigma, p, family, rng, seed) -> tuple[Dataset, SyntheticTruth]:
    lattice = LatticeSpec.uniform_categorical(d, L)
    truth = DecomposedParameter.zeros(lattice.levels, d, p)
    for comp, t in truth.tensors.items():
        # order-0 entries have unit variance, order-k entries rho**k
        truth.tensors[comp] = rng.normal(0.0, np.sqrt(rho ** len(comp)), size=t.shape)
    cells = rng.integers(0, L, size=(N, d))
    X = np.ones((N, p))
    if p > 1:
        X[:, 1:] = rng.standard_normal((N, p - 1))
    eta = np.einsum("np,np->n", X, truth.materialize(cells))
    y = sample_response(family, eta, rng)
    data = Dataset(X, y, {name: cells[:, i] for i, name in enumerate(lattice.names)})
    return data, SyntheticTruth(lattice, truth, rho, sigma, seed, family)


def gen_hierarchical(
    d: int,
    L: int,
    N: int,
    rho: float,
    sigma: float = 1.0,
    p: int = 1,
    family: FamilySpec | None = None,
    seed: int = 0,
) -> tuple[Dataset, SyntheticTruth]:
    """Uniform random cells with geometrically decaying true effects.

    Order-``k`` tensor entries are i.i.d. ``N(0, rho**k)``. ``X`` is a ones
    column followed by ``p - 1`` standard normal features.
    """
    if rho < 0 or sigma <= 0:
        raise ValueError("need rho >= 0 and sigma > 0")
    family = family or FamilySpec("gaussian", sigma**2)
    return _draw(d, L, N, rho, sigma, p, family, np.random.default_rng(seed), seed)


def _replicate(cfg: SimConfig, seed: int, rep: int) -> tuple[Dataset, Dataset, SyntheticTruth]:
    rng = replication_rng(seed, rep)
    data, truth = _draw(cfg.d, cfg.L, cfg.N, cfg.rho, cfg.sigma, cfg.p, cfg.family_spec, rng, seed)
    tr, te = train_test_split(data.N, cfg.train_fraction, rng)
    return data.subset(tr), data.subset(te), truth


def scheme_plan(scheme: str, blocks, cells, family: FamilySpec, y=None, *, penalize_global: bool = False) -> RegularizationPlan:
    if scheme == "unregularized":
        return RegularizationPlan.unregularized(blocks)
    if scheme == "fixed":
        return RegularizationPlan.constant(blocks, 1.0, "fixed")
    if scheme == "ad-hoc":
        return RegularizationPlan.by_order(blocks, lambda k: 5.0 * 0.9**k, "ad-hoc")
    if scheme == "generalization-preserving":
        if family.family == "gaussian":
            return generalization_preserving(blocks, cells, sigma=family.sigma, penalize_global=penalize_global)
        return generalization_preserving(blocks, cells, wbar=mean_fisher_weight(family, y), penalize_global=penalize_global)
    raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")


def _test_ll(model: FittedModel, test: Dataset) -> float:
    eta, _ = predict_dataset(model, test)
    return float(-np.mean(nll(model.family, test.y, eta)))


@dataclass
class HarnessResult:
    """Long-format rows ``(scheme, K, replication, metric, value)`` plus run metadata."""

    rows: list[dict[str, Any]]
    config: dict
    seed: int
    replications: int

    @property
    def config_hash(self) -> str:
        return config_hash({**self.config, "seed": self.seed, "replications": self.replications})

    def values(self, metric: str, scheme: str | None = None, K: int | None = None) -> np.ndarray:
        sel = [
            r["value"]
            for r in self.rows
            if r["metric"] == metric and (scheme is None or r["scheme"] == scheme) and (K is None or r["K"] == K)
        ]
        return np.asarray(sel, dtype=float)

    def summary(self, metric: str) -> list[dict[str, Any]]:
        keys = sorted({(r["scheme"], r["K"]) for r in self.rows if r["metric"] == metric}, key=lambda t: (t[1], str(t[0])))
        out = []
        for scheme, K in keys:
            v = self.values(metric, scheme, K)
            se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")
            out.append({"scheme": scheme, "K": K, "metric": metric, "mean": float(v.mean()), "stderr": se, "n": int(v.size)})
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["scheme", "K", "replication", "metric", "value", "seed", "config_hash"])
        writer.writeheader()
        h = self.config_hash
        for r in self.rows:
            writer.writerow({**r, "seed": self.seed, "config_hash": h})
        return buf.getvalue()


def run_regularization_comparison(
    cfg: SimConfig | None = None, replications: int = 20, seed: int = 0, schemes: tuple[str, ...] = SCHEMES
) -> HarnessResult:
    """Test log-likelihood per observation of each scheme and order, and its gain over the unregularized fit."""
    cfg = cfg or SimConfig()
    if replications < 1:
        raise ValueError("replications must be positive")
    fit_cfg = FitConfig(solver=cfg.solver)
    family = cfg.family_spec
    lattice = cfg.lattice
    rows = []
    for rep in range(replications):
        train, test, _ = _replicate(cfg, seed, rep)
        cells = train.cells(lattice)
        for K in range(cfg.K_max + 1):
            blocks = model_blocks(lattice, K, cfg.p)
            ll = {}
            for scheme in dict.fromkeys(("unregularized",) + tuple(schemes)):
                plan = scheme_plan(scheme, blocks, cells, family, train.y, penalize_global=cfg.penalize_global)
                ll[scheme] = _test_ll(map_fit(train, lattice, K, family, plan, fit_cfg), test)
            for scheme in schemes:
                rows.append({"scheme": scheme, "K": K, "replication": rep, "metric": "test_ll", "value": ll[scheme]})
                rows.append(
                    {"scheme": scheme, "K": K, "replication": rep, "metric": "test_ll_improvement", "value": ll[scheme] - ll["unregularized"]}
                )
    return HarnessResult(rows, cfg.to_dict(), seed, replications)


@dataclass
class RgFlowAggregate:
    reports: list[RgFlowReport]
    config: dict
    seed: int
    kstar_true: float | None

    @property
    def replications(self) -> int:
        return len(self.reports)

    def delta_s(self) -> np.ndarray:
        """``(replications, K_max)`` generalization gaps."""
        return np.array([r.delta_s for r in self.reports])

    def test_loss(self) -> np.ndarray:
        return np.array([r.test_mse for r in self.reports])

    def frac_negative_gap(self) -> np.ndarray:
        return np.mean(self.delta_s() < 0, axis=0)

    def frac_strictly_decreasing(self) -> float:
        t = self.test_loss()
        return float(np.mean(np.all(np.diff(t, axis=1) < 0, axis=1)))

    def frac_bracket_hits(self) -> float:
        hits = []
        for r in self.reports:
            if r.kstar is None:
                hits.append(False)
                continue
            best = r.orders[int(np.argmin(r.test_mse))]
            lo, hi = r.kstar_bracket
            hits.append(lo <= best <= hi)
        return float(np.mean(hits))

    def rows(self) -> list[dict]:
        out = []
        for rep, r in enumerate(self.reports):
            for row in r.rows():
                for metric in ("waic", "delta_s", "test_mse", "test_nll"):
                    if row[metric] is not None:
                        out.append({"scheme": "generalization-preserving", "K": row["K"], "replication": rep, "metric": metric, "value": row[metric]})
        return out

    def to_csv(self) -> str:
        return HarnessResult(self.rows(), self.config, self.seed, self.replications).to_csv()


def run_rg_flow(cfg: SimConfig | None = None, replications: int = 20, seed: int = 0) -> RgFlowAggregate:
    """Fit orders ``0..K_max`` under generalization-preserving priors and score each by WAIC and test loss."""
    cfg = cfg or SimConfig()
    fit_cfg = FitConfig(solver=cfg.solver)
    family = cfg.family_spec
    lattice = cfg.lattice
    reports = []
    for rep in range(replications):
        train, test, _ = _replicate(cfg, seed, rep)
        cells = train.cells(lattice)
        fits = {}
        for K in range(cfg.K_max + 1):
            blocks = model_blocks(lattice, K, cfg.p)
            plan = scheme_plan("generalization-preserving", blocks, cells, family, train.y, penalize_global=cfg.penalize_global)
            fits[K] = map_fit(train, lattice, K, family, plan, fit_cfg)
        reports.append(rg_flow_report(fits, train, test, S=cfg.waic_draws, seed=int(replication_rng(seed, rep).integers(2**31)), sigma2=cfg.sigma**2))
    kstar = None
    if 0 < cfg.rho < cfg.L:
        kstar = critical_order(cfg.N * cfg.train_fraction, cfg.sigma**2, cfg.L, cfg.rho)
    return RgFlowAggregate(reports, cfg.to_dict(), seed, kstar)


@dataclass
class ReplicaResult:
    closed_form: float
    mc_mean: float
    mc_stderr: float
    p: int
    N: int
    seed: int

    @property
    def rel_error(self) -> float:
        return abs(self.mc_mean - self.closed_form) / self.closed_form


def run_replica_check(p: int, N: int, lambda2: float, sigma2: float = 1.0, draws: int = 200, seed: int = 0) -> ReplicaResult:
    """Closed-form replica df against the Monte Carlo trace on random Gaussian designs."""
    if N <= p:
        raise ValueError("need N > p")
    if p / N > GAMMA_WARN:
        warnings.warn(f"p/N = {p / N:.3f} is close to 1; the replica-symmetric result may not hold", stacklevel=2)
    mc = replica_mc(p, N, lambda2, sigma2, draws, np.random.default_rng(seed))
    se = float(mc.std(ddof=1) / np.sqrt(draws)) if draws > 1 else float("nan")
    return ReplicaResult(replica_df(p, N, lambda2, sigma2), float(mc.mean()), se, p, N, seed)


def run_rho_estimates(cfg: SimConfig, seeds: range, estimator: Callable[[dict], float]) -> np.ndarray:
    """Apply ``estimator`` to ladders of unregularized fits ``{K: FittedModel}`` over many seeds."""
    fit_cfg = FitConfig(solver=cfg.solver)
    out = []
    for s in seeds:
        train, _, _ = _replicate(cfg, s, 0)
        fits = {}
        for K in range(cfg.K_max + 1):
            plan = RegularizationPlan.unregularized(model_blocks(cfg.lattice, K, cfg.p))
            fits[K] = map_fit(train, cfg.lattice, K, cfg.family_spec, plan, fit_cfg)
        out.append(estimator(fits))
    return np.asarray(out)


__all__ = [
    "SCHEMES",
    "SimConfig",
    "SyntheticTruth",
    "gen_hierarchical",
    "run_regularization_comparison",
    "run_rg_flow",
    "run_replica_check",
    "run_rho_estimates",
    "kstar_bracket",
]
