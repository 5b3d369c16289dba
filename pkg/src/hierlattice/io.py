"""CSV ingestion, feature standardization and the binary model artifact.

Artifact layout (all integers little-endian)::

    b"HLAT" | uint16 version | uint64 payload length | payload | sha256(payload)

The payload is a uint32-prefixed JSON header followed by the raw float64
bytes of every array listed in the header, in order. No timestamps are
written, so identical inputs give byte-identical files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .data import Dataset
from .decomposition import Component, DecomposedParameter
from .errors import ChecksumError, EmptyData, IngestError, UnsupportedVersion
from .fit import FittedModel
from .glm import FamilySpec
from .lattice import LatticeSpec
from .regularization import RegularizationPlan
from .stacking import StackingModel

MAGIC = b"HLAT"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<4sHQ")


# -- ingestion -----------------------------------------------------------


@dataclass(frozen=True)
class Schema:
    """Column roles. Unlisted columns are ignored."""

    response: str | None
    features: tuple[str, ...] = ()
    lattice: tuple[str, ...] = ()
    intercept: bool = True

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        object.__setattr__(self, "lattice", tuple(self.lattice))

    def to_dict(self) -> dict:
        return {"response": self.response, "features": list(self.features), "lattice": list(self.lattice), "intercept": self.intercept}


def _parse_float(text: str, row: int, col: str) -> float:
    try:
        value = float(text.strip())
    except ValueError:
        raise IngestError(f"row {row}, column {col!r}: cannot parse {text!r} as a number") from None
    if not np.isfinite(value):
        raise IngestError(f"row {row}, column {col!r}: non-finite value {text!r}")
    return value


def read_table(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise EmptyData(f"{path}: file is empty")
    header, body = rows[0], [r for r in rows[1:] if r]
    if len(set(header)) != len(header):
        raise IngestError(f"{path}: duplicate column names in header")
    return header, body


def ingest_csv(path: str | Path, schema: Schema) -> Dataset:
    """Parse a headed CSV into a Dataset.

    Numbers are parsed with ``float`` (``.`` decimal separator regardless of
    locale). Rows with an empty lattice-source value are dropped and counted
    in ``meta["dropped_missing_lattice"]``; any other unparseable value is an
    error naming its row (1-based, header excluded) and column. A schema
    without a response yields ``y = 0`` (prediction input).
    """
    header, body = read_table(path)
    if not body:
        raise EmptyData(f"{path}: no data rows")
    pos = {name: i for i, name in enumerate(header)}
    needed = ((schema.response,) if schema.response else ()) + schema.features + schema.lattice
    missing = [c for c in needed if c not in pos]
    if missing:
        raise IngestError(f"{path}: columns not in header: {missing}")
    X, y, lat = [], [], {c: [] for c in schema.lattice}
    dropped = 0
    for r, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise IngestError(f"row {r}: expected {len(header)} fields, found {len(row)}")
        if any(row[pos[c]].strip() == "" for c in schema.lattice):
            dropped += 1
            continue
        y.append(_parse_float(row[pos[schema.response]], r, schema.response) if schema.response else 0.0)
        X.append([_parse_float(row[pos[c]], r, c) for c in schema.features])
        for c in schema.lattice:
            lat[c].append(row[pos[c]].strip())
    if not y:
        raise EmptyData(f"{path}: every row lacks a lattice feature")
    X = np.asarray(X, dtype=float).reshape(len(y), len(schema.features))
    names = schema.features
    if schema.intercept:
        X = np.hstack([np.ones((len(y), 1)), X])
        names = ("(intercept)",) + names
    return Dataset(
        X,
        np.asarray(y),
        {c: np.asarray(v) for c, v in lat.items()},
        names,
        schema.response or "",
        {"source": str(path), "dropped_missing_lattice": dropped, "intercept": schema.intercept},
    )


@dataclass
class Standardizer:
    """Per-column z-scoring; constant columns (such as the intercept) pass through."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray, skip: Sequence[int] = ()) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        const = scale == 0
        mean[const] = 0.0
        scale[const] = 1.0
        for j in skip:
            mean[j], scale[j] = 0.0, 1.0
        return cls(mean, scale)

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[1] != self.mean.size:
            raise IngestError(f"expected {self.mean.size} feature columns, found {X.shape[1]}")
        return (X - self.mean) / self.scale

    def apply(self, data: Dataset) -> Dataset:
        return Dataset(self.transform(data.X), data.y, data.lattice_columns, data.feature_names, data.response_name, dict(data.meta))

    def to_dict(self) -> dict:
        return {"mean": self.mean, "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["scale"], dtype=float))


# -- artifact container ---------------------------------------------------


def _comp_key(c: Component) -> str:
    return "/".join(map(str, c)) or "()"


def _parse_comp(key: str) -> Component:
    return () if key == "()" else tuple(int(i) for i in key.split("/"))


def _jsonable(obj: Any):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def pack(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    names = sorted(arrays)
    index = [{"name": n, "shape": list(np.shape(arrays[n]))} for n in names]
    header = json.dumps({"meta": _jsonable(meta), "arrays": index}, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes() for n in names)
    payload = struct.pack("<I", len(header)) + header + body
    return _HEAD.pack(MAGIC, FORMAT_VERSION, len(payload)) + payload + hashlib.sha256(payload).digest()


def unpack(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < _HEAD.size:
        raise ChecksumError("artifact is truncated")
    magic, version, length = _HEAD.unpack_from(blob)
    if magic != MAGIC:
        raise ChecksumError("not a model artifact (bad magic bytes)")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"artifact format v{version} cannot be read by this v{FORMAT_VERSION} reader")
    end = _HEAD.size + length
    if len(blob) != end + 32:
        raise ChecksumError(f"artifact length {len(blob)} does not match declared {end + 32}")
    payload = blob[_HEAD.size : end]
    if hashlib.sha256(payload).digest() != blob[end:]:
        raise ChecksumError("artifact checksum mismatch")
    (hlen,) = struct.unpack_from("<I", payload)
    header = json.loads(payload[4 : 4 + hlen])
    arrays, offset = {}, 4 + hlen
    for entry in header["arrays"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arrays[entry["name"]] = np.frombuffer(payload, dtype="<f8", count=n, offset=offset).reshape(entry["shape"]).copy()
        offset += 8 * n
    return header["meta"], arrays


def _decomp_arrays(prefix: str, dp: DecomposedParameter, arrays: dict) -> dict:
    for c, t in dp.tensors.items():
        arrays[f"{prefix}:{_comp_key(c)}"] = t
    return {"levels": list(dp.levels), "K": dp.K, "p": dp.p}


def _decomp_from(prefix: str, info: dict, arrays: dict) -> DecomposedParameter:
    tensors = {_parse_comp(k.split(":", 1)[1]): v for k, v in arrays.items() if k.split(":", 1)[0] == prefix}
    return DecomposedParameter(tuple(info["levels"]), info["K"], info["p"], tensors)


def model_to_bytes(model: FittedModel | StackingModel, config: dict | None = None) -> bytes:
    from .simulate import config_hash

    arrays: dict[str, np.ndarray] = {}
    meta: dict[str, Any] = {
        "lattice": model.lattice.to_dict(),
        "family": {"family": model.family.family, "dispersion": model.family.dispersion},
        "diagnostics": model.diagnostics,
        "config": config or {},
        "config_hash": config_hash(config or {}),
        "created_by": f"hierlattice {__version__}",
    }
    if isinstance(model, StackingModel):
        meta["kind"] = "stacking"
        meta["weights"] = _decomp_arrays("weights", model.weight_decomp, arrays)
        return pack(meta, arrays)
    meta["kind"] = "glm"
    meta["blocks"] = {name: _decomp_arrays(f"block.{name}", dp, arrays) for name, dp in model.blocks.items()}
    meta["reg"] = {"mode": model.reg.mode, "label": model.reg.label}
    for name, comps in model.reg.taus.items():
        for c, t in comps.items():
            arrays[f"tau.{name}:{_comp_key(c)}"] = t
    if model.preprocess is not None:
        meta["preprocess"] = {k: v for k, v in model.preprocess.items() if k not in ("mean", "scale")}
        for k in ("mean", "scale"):
            if k in model.preprocess:
                arrays[f"pre:{k}"] = np.asarray(model.preprocess[k], dtype=float)
    return pack(meta, arrays)


def model_from_bytes(blob: bytes) -> FittedModel | StackingModel:
    meta, arrays = unpack(blob)
    lattice = LatticeSpec.from_dict(meta["lattice"])
    family = FamilySpec(meta["family"]["family"], meta["family"]["dispersion"])
    if meta["kind"] == "stacking":
        return StackingModel(lattice, _decomp_from("weights", meta["weights"], arrays), family, meta["diagnostics"])
    blocks = {name: _decomp_from(f"block.{name}", info, arrays) for name, info in meta["blocks"].items()}
    taus: dict[str, dict[Component, np.ndarray]] = {}
    for key, t in arrays.items():
        head, comp = key.split(":", 1)
        if head.startswith("tau."):
            taus.setdefault(head[4:], {})[_parse_comp(comp)] = t
    reg = RegularizationPlan(taus, meta["reg"]["mode"], meta["reg"]["label"])
    preprocess = None
    if "preprocess" in meta:
        preprocess = dict(meta["preprocess"])
        for k in ("mean", "scale"):
            if f"pre:{k}" in arrays:
                preprocess[k] = arrays[f"pre:{k}"]
    return FittedModel(lattice, blocks, family, reg, meta["diagnostics"], None, preprocess)


def save_model(model: FittedModel | StackingModel, path: str | Path, config: dict | None = None) -> None:
    Path(path).write_bytes(model_to_bytes(model, config))


def load_model(path: str | Path) -> FittedModel | StackingModel:
    return model_from_bytes(Path(path).read_bytes())


def artifact_meta(path: str | Path) -> dict:
    return unpack(Path(path).read_bytes())[0]
