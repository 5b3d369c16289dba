"""Canonical-link likelihood families.

All functions are vectorized over numpy arrays. Per-observation negative
log-likelihoods include their normalizing constants so that scores are
comparable across models.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.special import expit, gammaln

from .errors import DimensionError, InvalidResponse

FamilyName = Literal["gaussian", "bernoulli-logit", "poisson-log"]
FAMILIES: tuple[str, ...] = ("gaussian", "bernoulli-logit", "poisson-log")


@dataclass(frozen=True)
class FamilySpec:
    family: FamilyName = "gaussian"
    dispersion: float = 1.0  # sigma^2; fixed at 1 for the non-gaussian families

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; choose one of {FAMILIES}")
        if self.family == "gaussian":
            if not self.dispersion > 0:
                raise ValueError("gaussian dispersion must be positive")
        elif self.dispersion != 1.0:
            object.__setattr__(self, "dispersion", 1.0)

    @property
    def sigma(self) -> float:
        return float(np.sqrt(self.dispersion))

    def with_dispersion(self, dispersion: float) -> "FamilySpec":
        return FamilySpec(self.family, dispersion)


def linear_predictor(theta, x) -> np.ndarray | float:
    """Row-wise dot product; ``theta`` and ``x`` are ``(p,)`` or ``(N, p)``."""
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(x, dtype=float)
    if theta.shape[-1] != x.shape[-1]:
        raise DimensionError(f"parameter length {theta.shape[-1]} != feature length {x.shape[-1]}")
    out = np.einsum("...p,...p->...", theta, x)
    return float(out) if out.ndim == 0 else out


def check_response(family: FamilySpec, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if not np.isfinite(y).all():
        raise InvalidResponse("response contains non-finite values")
    if family.family == "bernoulli-logit" and not np.isin(y, (0.0, 1.0)).all():
        raise InvalidResponse("bernoulli-logit response must be 0 or 1")
    if family.family == "poisson-log" and ((y < 0).any() or (y != np.round(y)).any()):
        raise InvalidResponse("poisson-log response must be a non-negative integer")
    return y


def mean(family: FamilySpec, eta):
    eta = np.asarray(eta, dtype=float)
    if family.family == "gaussian":
        out = eta.copy()
    elif family.family == "bernoulli-logit":
        out = expit(eta)
    else:
        out = np.exp(eta)
    return float(out) if out.ndim == 0 else out


def nll(family: FamilySpec, y, eta, *, check: bool = True):
    """Per-observation negative log-likelihood."""
    y = check_response(family, y) if check else np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if family.family == "gaussian":
        s2 = family.dispersion
        out = 0.5 * np.log(2 * np.pi * s2) + (y - eta) ** 2 / (2 * s2)
    elif family.family == "bernoulli-logit":
        # log(1 + e^eta) without overflow
        out = np.logaddexp(0.0, eta) - y * eta
    else:
        out = np.exp(eta) - y * eta + gammaln(y + 1.0)
    return float(out) if out.ndim == 0 else out


def nll_grad(family: FamilySpec, y, eta):
    """d nll / d eta."""
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if family.family == "gaussian":
        return (eta - y) / family.dispersion
    return mean(family, eta) - y


def fisher_weight(family: FamilySpec, mu):
    """Curvature b''(eta) / a(phi) expressed through the mean."""
    mu = np.asarray(mu, dtype=float)
    if family.family == "gaussian":
        out = np.full_like(mu, 1.0 / family.dispersion)
    elif family.family == "bernoulli-logit":
        out = mu * (1.0 - mu)
    else:
        out = mu.copy()
    return float(out) if out.ndim == 0 else out


def eta_weight(family: FamilySpec, eta):
    """Fisher weight evaluated at the linear predictor (d^2 nll / d eta^2)."""
    return fisher_weight(family, mean(family, eta))


def sigma_eff(family: FamilySpec, wbar: float | None = None) -> float:
    """Noise scale entering the prior-scale law: sigma for gaussian, 1/sqrt(wbar) otherwise."""
    if family.family == "gaussian":
        return family.sigma
    if wbar is None or wbar <= 0:
        raise ValueError("non-gaussian families need a positive mean Fisher weight")
    return float(1.0 / np.sqrt(wbar))


def sample_response(family: FamilySpec, eta, rng: np.random.Generator) -> np.ndarray:
    eta = np.asarray(eta, dtype=float)
    if family.family == "gaussian":
        return eta + rng.normal(0.0, family.sigma, size=eta.shape)
    if family.family == "bernoulli-logit":
        return (rng.random(eta.shape) < expit(eta)).astype(float)
    return rng.poisson(np.exp(eta)).astype(float)
