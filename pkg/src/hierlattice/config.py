"""Run configuration: one YAML document shared by every subcommand.

Unknown keys and type errors are collected and reported together. The
resolved document (defaults filled in) is echoed by every command.
"""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .fit import FitConfig
from .glm import FAMILIES
from .lattice import LatticeSpec
from .simulate import SCHEMES, SimConfig

REG_SCHEMES = SCHEMES + ("adaptive",)
EXPERIMENTS = ("comparison", "rg-flow", "replica")

DEFAULTS: dict[str, Any] = {
    "data": {
        "path": None,
        "test_path": None,
        "response": "y",
        "features": [],
        "intercept": True,
        "standardize": True,
    },
    "family": "gaussian",
    "dispersion": None,
    "lattice": {"spec": None, "dims": []},
    "bins": {"L": 4, "safety": 0.5, "strategy": "quantile", "columns": {}},
    "fit": {
        "K": 1,
        "intercept_K": None,
        "regularization": {"scheme": "generalization-preserving", "mode": "per-component", "penalize_global": False, "tau": 1.0},
        **FitConfig().to_dict(),
    },
    "eval": {"waic_draws": 1000, "seed": 0, "K_max": 2},
    "stack": {"logits": None, "K_w": 1},
    "simulate": {"experiment": "comparison", "replications": 20, "seed": 0, **SimConfig().to_dict(),
                 "replica": {"p": 50, "N": 1000, "lambda2": 0.001, "sigma2": 1.0, "draws": 200}},
}

_TYPES = {
    "family": str,
    "bins.L": int,
    "bins.safety": (int, float),
    "fit.K": int,
    "fit.max_steps": int,
    "fit.seed": int,
    "eval.waic_draws": int,
    "eval.K_max": int,
    "stack.K_w": int,
    "simulate.replications": int,
    "simulate.seed": int,
}


def _merge(base: dict, override: dict, path: str, problems: list[str]) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            problems.append(f"unknown key {where!r}")
        elif isinstance(base[key], dict) and base[key] and key not in ("columns",):
            if not isinstance(value, dict):
                problems.append(f"{where!r} must be a mapping")
            else:
                out[key] = _merge(base[key], value, where + ".", problems)
        else:
            out[key] = value
    return out


def _get(cfg: dict, dotted: str):
    node = cfg
    for part in dotted.split("."):
        node = node[part]
    return node


def validate(cfg: dict) -> list[str]:
    problems = []
    for dotted, typ in _TYPES.items():
        value = _get(cfg, dotted)
        if value is not None and (isinstance(value, bool) or not isinstance(value, typ)):
            problems.append(f"{dotted!r} has invalid type {type(value).__name__}")
    if cfg["family"] not in FAMILIES:
        problems.append(f"family must be one of {FAMILIES}, got {cfg['family']!r}")
    scheme = cfg["fit"]["regularization"]["scheme"]
    if scheme not in REG_SCHEMES:
        problems.append(f"fit.regularization.scheme must be one of {REG_SCHEMES}, got {scheme!r}")
    if cfg["fit"]["regularization"]["mode"] not in ("per-component", "per-parameter"):
        problems.append("fit.regularization.mode must be per-component or per-parameter")
    if cfg["simulate"]["experiment"] not in EXPERIMENTS:
        problems.append(f"simulate.experiment must be one of {EXPERIMENTS}")
    if isinstance(cfg["bins"]["safety"], (int, float)) and not 0 < cfg["bins"]["safety"] <= 1:
        problems.append("bins.safety must lie in (0, 1]")
    for name, kind in (cfg["bins"]["columns"] or {}).items():
        if kind not in ("binned", "categorical"):
            problems.append(f"bins.columns.{name} must be binned or categorical")
    fit = {k: v for k, v in cfg["fit"].items() if k in FitConfig.__dataclass_fields__}
    try:
        FitConfig(**fit)
    except (TypeError, ValueError) as exc:
        problems.append(f"fit: {exc}")
    return problems


def resolve(raw: dict | None, base_dir: Path | None = None) -> dict:
    problems: list[str] = []
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config document must be a mapping")
    cfg = _merge(DEFAULTS, raw, "", problems)
    try:
        problems += validate(cfg)
    except (KeyError, TypeError):
        problems.append("config sections have the wrong structure")
    if problems:
        raise ConfigError(problems)
    if base_dir is not None:
        for section, key in (("data", "path"), ("data", "test_path"), ("lattice", "spec"), ("stack", "logits")):
            value = cfg[section][key]
            if value and not Path(value).is_absolute():
                cfg[section][key] = str(base_dir / value)
    return cfg


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return resolve({})
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
    return resolve(raw, path.parent)


def fit_config(cfg: dict) -> FitConfig:
    return FitConfig(**{k: v for k, v in cfg["fit"].items() if k in FitConfig.__dataclass_fields__})


def sim_config(cfg: dict) -> SimConfig:
    return SimConfig(**{k: v for k, v in cfg["simulate"].items() if k in SimConfig.__dataclass_fields__})


def lattice_from_config(cfg: dict) -> LatticeSpec:
    """Lattice spec from the referenced spec file, else the inline ``dims``."""
    spec = cfg["lattice"]["spec"]
    if spec:
        return read_lattice(spec)
    return LatticeSpec.from_dict({"dims": cfg["lattice"]["dims"]})


def read_lattice(path: str | Path) -> LatticeSpec:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"lattice spec {path} not found") from None
    try:
        return LatticeSpec.from_dict(data or {})
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"lattice spec {path} is invalid: {exc}") from None


def write_lattice(spec: LatticeSpec, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(spec.to_dict(), sort_keys=False))
