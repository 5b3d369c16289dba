import json
import struct

import numpy as np
import pytest
import yaml

from hierlattice.cli import main as cli_main
from hierlattice.config import DEFAULTS, load_config, read_lattice, resolve, write_lattice
from hierlattice.errors import ChecksumError, ConfigError, EmptyData, IngestError, InvalidTruncation, UnsupportedVersion
from hierlattice.fit import FitConfig, map_fit, predict
from hierlattice.glm import FamilySpec
from hierlattice.io import (
    FORMAT_VERSION,
    MAGIC,
    Schema,
    Standardizer,
    ingest_csv,
    load_model,
    model_from_bytes,
    model_to_bytes,
    pack,
    save_model,
    unpack,
)
from hierlattice.lattice import LatticeDim, LatticeSpec
from hierlattice.simulate import config_hash, gen_hierarchical
from hierlattice.stacking import StackingModel


def _write(path, text):
    path.write_text(text)
    return path


# -- ingestion -------------------------------------------------------------


def test_three_row_file(tmp_path):
    f = _write(tmp_path / "d.csv", "y,x,g\n1.5,0.1,a\n2.0,-0.3,b\n0.5,2.25,a\n")
    data = ingest_csv(f, Schema("y", ("x",), ("g",)))
    assert data.N == 3 and data.p == 2
    assert data.feature_names == ("(intercept)", "x")
    np.testing.assert_array_equal(data.X[:, 0], 1.0)
    np.testing.assert_array_equal(data.y, [1.5, 2.0, 0.5])
    assert list(data.lattice_columns["g"]) == ["a", "b", "a"]


def test_missing_response_names_row(tmp_path):
    f = _write(tmp_path / "d.csv", "y,x,g\n1.5,0.1,a\n,0.2,b\n")
    with pytest.raises(IngestError, match="row 2.*'y'"):
        ingest_csv(f, Schema("y", ("x",), ("g",)))


def test_unparseable_and_non_finite_cells(tmp_path):
    f = _write(tmp_path / "d.csv", "y,x\n1,2\n3,1,5\n")
    with pytest.raises(IngestError, match="row 2"):
        ingest_csv(f, Schema("y", ("x",)))
    f = _write(tmp_path / "e.csv", "y,x\n1,inf\n")
    with pytest.raises(IngestError, match="non-finite"):
        ingest_csv(f, Schema("y", ("x",)))
    # decimal comma is not accepted whatever the locale
    f = _write(tmp_path / "c.csv", 'y,x\n1,"2,5"\n')
    with pytest.raises(IngestError, match="cannot parse"):
        ingest_csv(f, Schema("y", ("x",)))


def test_empty_inputs(tmp_path):
    with pytest.raises(EmptyData):
        ingest_csv(_write(tmp_path / "a.csv", ""), Schema("y"))
    with pytest.raises(EmptyData):
        ingest_csv(_write(tmp_path / "b.csv", "y,x\n"), Schema("y", ("x",)))


def test_missing_lattice_rows_are_dropped_and_counted(tmp_path):
    f = _write(tmp_path / "d.csv", "y,g\n1,a\n2,\n3,b\n4, \n")
    data = ingest_csv(f, Schema("y", (), ("g",)))
    assert data.N == 2 and data.meta["dropped_missing_lattice"] == 2
    assert np.isfinite(data.X).all() and np.isfinite(data.y).all()


def test_missing_column(tmp_path):
    with pytest.raises(IngestError, match="not in header"):
        ingest_csv(_write(tmp_path / "d.csv", "y\n1\n"), Schema("y", ("x",)))


def test_standardizer_moments():
    rng = np.random.default_rng(0)
    X = np.column_stack([np.ones(500), 3 + 7 * rng.normal(size=500), rng.exponential(size=500), np.full(500, 2.0)])
    sc = Standardizer.fit(X, skip=(0,))
    Z = sc.transform(X)
    np.testing.assert_allclose(Z[:, 1:3].mean(axis=0), 0, atol=1e-10)
    np.testing.assert_allclose(Z[:, 1:3].std(axis=0), 1, atol=1e-10)
    np.testing.assert_array_equal(Z[:, 0], 1.0)
    # constant columns pass through untouched
    np.testing.assert_array_equal(Z[:, 3], 2.0)
    # the training transform is reused as is on new rows
    new = X[:5] + 1.0
    np.testing.assert_array_equal(Standardizer.from_dict(sc.to_dict()).transform(new), sc.transform(new))
    with pytest.raises(IngestError):
        sc.transform(X[:, :2])


# -- artifacts -------------------------------------------------------------


@pytest.fixture(scope="module")
def fitted():
    data, _ = gen_hierarchical(2, 3, 400, 0.3, p=2, seed=5)
    lattice = LatticeSpec.uniform_categorical(2, 3)
    model = map_fit(data, lattice, 2, FamilySpec(), cfg=FitConfig(solver="newton"))
    return model, data


def test_round_trip_predictions_are_bit_exact(fitted, tmp_path):
    model, data = fitted
    save_model(model, tmp_path / "m.hlm", {"K": 2})
    loaded = load_model(tmp_path / "m.hlm")
    cells = data.cells(model.lattice)
    rng = np.random.default_rng(1)
    X_new = rng.normal(size=(50, 2)) * 1e3
    c_new = rng.integers(0, 3, size=(50, 2))
    for X, c in ((data.X, cells), (X_new, c_new)):
        a, b = predict(model, X, c), predict(loaded, X, c)
        assert all(np.array_equal(u, v) for u, v in zip(a, b))
    assert loaded.reg.taus.keys() == model.reg.taus.keys()
    assert loaded.family == model.family


def test_serialization_is_deterministic(fitted):
    model, _ = fitted
    assert model_to_bytes(model, {"a": 1}) == model_to_bytes(model, {"a": 1})
    blob = model_to_bytes(model_from_bytes(model_to_bytes(model)))
    assert blob == model_to_bytes(model)


def test_stacking_round_trip():
    lattice = LatticeSpec.uniform_categorical(2, 3)
    sm = StackingModel.zeros(lattice, 3, 1)
    sm.weight_decomp = sm.weight_decomp.with_vector(np.random.default_rng(2).normal(size=sm.weight_decomp.size))
    back = model_from_bytes(model_to_bytes(sm))
    cells = np.array([[0, 1], [2, 2]])
    assert np.array_equal(back.weights(cells), sm.weights(cells))


def test_truncated_and_corrupted_artifacts(fitted):
    blob = model_to_bytes(fitted[0])
    for bad in (blob[:-1], blob[: len(blob) // 2], blob[:5], blob + b"\0"):
        with pytest.raises(ChecksumError):
            model_from_bytes(bad)
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0x01
    with pytest.raises(ChecksumError, match="checksum"):
        model_from_bytes(bytes(flipped))
    with pytest.raises(ChecksumError, match="magic"):
        model_from_bytes(b"XXXX" + blob[4:])


def test_old_version_is_refused_naming_both(fitted):
    blob = model_to_bytes(fitted[0])
    _, _, length = struct.unpack_from("<4sHQ", blob)
    v0 = struct.pack("<4sHQ", MAGIC, 0, length) + blob[struct.calcsize("<4sHQ") :]
    with pytest.raises(UnsupportedVersion, match=f"v0.*v{FORMAT_VERSION}"):
        model_from_bytes(v0)


def test_pack_unpack_arrays():
    arrays = {"b": np.arange(6.0).reshape(2, 3), "a": np.array([np.pi, -0.0, 1e-300])}
    meta, back = unpack(pack({"x": [1, 2]}, arrays))
    assert meta == {"x": [1, 2]}
    for k, v in arrays.items():
        assert back[k].tobytes() == v.tobytes()


# -- configuration ---------------------------------------------------------


def test_defaults_resolve_without_file():
    cfg = load_config(None)
    assert cfg == resolve({})
    assert cfg["fit"]["regularization"]["scheme"] == DEFAULTS["fit"]["regularization"]["scheme"]


def test_config_problems_are_collected(tmp_path):
    f = _write(tmp_path / "c.yaml", "fit: {K: two, colour: red}\nfamily: weibull\nbogus: 1\nbins: {safety: 3}\n")
    with pytest.raises(ConfigError) as info:
        load_config(f)
    problems = "\n".join(info.value.problems)
    assert len(info.value.problems) >= 5
    for needle in ("fit.colour", "bogus", "fit.K", "family", "bins.safety"):
        assert needle in problems


def test_config_relative_paths(tmp_path):
    cfg = load_config(_write(tmp_path / "c.yaml", "data: {path: d.csv}\n"))
    assert cfg["data"]["path"] == str(tmp_path / "d.csv")


def test_lattice_yaml_round_trip(tmp_path):
    spec = LatticeSpec((LatticeDim.categorical("colour", ["red", "blue"]), LatticeDim.binned("age", [18.0, 40.0, 65.0])))
    write_lattice(spec, tmp_path / "lat.yaml")
    assert read_lattice(tmp_path / "lat.yaml").to_dict() == spec.to_dict()
    assert yaml.safe_load((tmp_path / "lat.yaml").read_text()) == spec.to_dict()


# -- command line ----------------------------------------------------------


def _synthetic_csv(path, d=2, L=3, N=600, rho=0.3, seed=0):
    data, _ = gen_hierarchical(d, L, N, rho, p=2, seed=seed)
    names = list(data.lattice_columns)
    cols = [data.y, data.X[:, 1]] + [data.lattice_columns[n] for n in names]
    lines = [",".join(["y", "x"] + names)] + [",".join(repr(float(v)) if i < 2 else str(v) for i, v in enumerate(r)) for r in zip(*cols)]
    path.write_text("\n".join(lines) + "\n")
    return LatticeSpec.uniform_categorical(d, L).to_dict()


def _config(tmp_path, lattice, **extra):
    cfg = {"data": {"path": "d.csv", "response": "y", "features": ["x"]}, "lattice": lattice, "eval": {"waic_draws": 200}}
    for k, v in extra.items():
        cfg.setdefault(k, {}).update(v) if isinstance(v, dict) else cfg.__setitem__(k, v)
    return _write(tmp_path / "run.yaml", yaml.safe_dump(cfg))


def test_fit_rejects_order_above_d_before_reading_data(tmp_path, capsys):
    lattice = LatticeSpec.uniform_categorical(2, 3).to_dict()
    cfg = _config(tmp_path, lattice)  # data.path points at a file that does not exist
    assert cli_main(["fit", "--config", str(cfg), "--K", "3"]) == InvalidTruncation.exit_code
    assert "InvalidTruncation" in capsys.readouterr().err


def test_config_errors_exit_with_every_problem(tmp_path, capsys):
    cfg = _write(tmp_path / "bad.yaml", "fit: {K: x}\nfamily: nope\n")
    assert cli_main(["fit", "--config", str(cfg)]) == ConfigError.exit_code
    err = capsys.readouterr().err
    assert "fit.K" in err and "family" in err


def test_fit_eval_predict_pipeline(tmp_path, capsys):
    lattice = _synthetic_csv(tmp_path / "d.csv")
    cfg = _config(tmp_path, lattice, fit={"solver": "newton"})
    model_path = tmp_path / "m.hlm"
    assert cli_main(["fit", "--config", str(cfg), "--K", "2", "--out", str(model_path)]) == 0
    report = json.loads(capsys.readouterr().out)
    # the report carries the fully resolved config, defaults included
    assert report["config"]["fit"]["K"] == 2
    assert report["config"]["bins"] == DEFAULTS["bins"]
    assert report["config_hash"] == config_hash(report["config"])

    assert cli_main(["eval", "--config", str(cfg), "--model", str(model_path), "--test", str(tmp_path / "d.csv")]) == 0
    result = json.loads(capsys.readouterr().out)["result"]
    assert result["waic"]["N"] == 600 and result["test"]["N"] == 600

    new = tmp_path / "new.csv"
    new.write_text("x,g0,g1\n0.5,0,1\n-1.0,2,2\n")
    out = tmp_path / "pred.csv"
    assert cli_main(["predict", "--model", str(model_path), "--data", str(new), "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "eta,mean" and len(rows) == 3

    # predictions apply the stored training z-score
    model = load_model(model_path)
    sc = Standardizer.from_dict(model.preprocess)
    X = sc.transform(np.array([[1.0, 0.5], [1.0, -1.0]]))
    eta, _ = predict(model, X, np.array([[0, 1], [2, 2]]))
    np.testing.assert_array_equal([float(r.split(",")[0]) for r in rows[1:]], eta)


def test_bin_writes_a_lattice_spec(tmp_path, capsys):
    rng = np.random.default_rng(3)
    lines = ["y,a,c"] + [f"{rng.normal():.6f},{rng.normal():.6f},{'uv'[i % 2]}" for i in range(400)]
    _write(tmp_path / "d.csv", "\n".join(lines) + "\n")
    cfg = _write(tmp_path / "run.yaml", "data: {path: d.csv}\nbins: {columns: {a: binned, c: categorical}}\n")
    out = tmp_path / "lat.yaml"
    assert cli_main(["bin", "--config", str(cfg), "--L", "5", "--out", str(out)]) == 0
    spec = read_lattice(out)
    assert spec.levels == (5, 2)
    report = json.loads(capsys.readouterr().out)
    # N/p = 400 with one binned column: 400 / 2
    assert report["result"]["max_bins"] == 200 and not report["result"]["forced"]


def test_simulate_replica_command(tmp_path, capsys):
    cfg = _write(tmp_path / "run.yaml", "simulate: {experiment: replica, replica: {p: 20, N: 400, draws: 50}}\n")
    assert cli_main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "r.csv")]) == 0
    result = json.loads(capsys.readouterr().out)["result"]
    assert result["rel_error"] < 0.05
    assert (tmp_path / "r.csv").read_text().startswith("metric,value")


def test_select_order_picks_two_on_structured_data(tmp_path, capsys):
    picks = []
    for seed in range(3):
        sub = tmp_path / str(seed)
        sub.mkdir()
        lattice = _synthetic_csv(sub / "d.csv", d=3, L=4, N=10000, rho=0.3, seed=seed)
        cfg = _config(sub, lattice, fit={"solver": "newton"})
        assert cli_main(["select-order", "--config", str(cfg)]) == 0
        picks.append(json.loads(capsys.readouterr().out)["result"]["selected_K"])
    assert sum(k == 2 for k in picks) >= 2, picks
