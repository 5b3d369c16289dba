"""Command-line entry point: ``python -m hierlattice <command> --config run.yaml``.

Every command prints a JSON report holding the resolved config and its
result. Failures print the error to stderr and exit with the error class's
code (see ``errors``); 0 means success.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Any

import numpy as np

from .config import fit_config, lattice_from_config, load_config, sim_config, write_lattice
from .data import Dataset
from .errors import ConfigError, HierLatticeError, InfeasibleLattice, InvalidTruncation
from .evaluation import select_order, waic
from .fit import FittedModel, fit_adaptive, map_fit, model_blocks, predict_dataset
from .glm import FamilySpec, nll
from .io import Schema, Standardizer, ingest_csv, load_model, read_table, save_model
from .lattice import LatticeDim, LatticeSpec, build_bins, max_bins
from .simulate import config_hash, run_regularization_comparison, run_replica_check, run_rg_flow, scheme_plan
from .stacking import StackingModel, fit_stacking, loo_loss


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return str(obj)


def _emit(command: str, cfg: dict, result: Any, out=None) -> None:
    report = {"command": command, "config": cfg, "config_hash": config_hash(cfg), "result": result}
    print(json.dumps(report, indent=2, default=_json_default), file=out or sys.stdout)


def _write_rows(path: str | None, rows: list[dict]) -> None:
    if not path or not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def _schema(cfg: dict, lattice: LatticeSpec) -> Schema:
    return Schema(cfg["data"]["response"], tuple(cfg["data"]["features"]), lattice.names, cfg["data"]["intercept"])


def _require(cfg: dict, section: str, key: str) -> Any:
    value = cfg[section][key]
    if value in (None, ""):
        raise ConfigError(f"{section}.{key} is required for this command")
    return value


def _family(cfg: dict, data: Dataset | None = None) -> FamilySpec:
    if cfg["family"] != "gaussian":
        return FamilySpec(cfg["family"])
    disp = cfg["dispersion"]
    if disp is None and data is not None:
        from .fit import estimate_sigma

        disp = estimate_sigma(data) ** 2
    return FamilySpec("gaussian", float(disp or 1.0))


def _load_training(cfg: dict, lattice: LatticeSpec) -> tuple[Dataset, Standardizer | None]:
    data = ingest_csv(_require(cfg, "data", "path"), _schema(cfg, lattice))
    if not cfg["data"]["standardize"]:
        return data, None
    scaler = Standardizer.fit(data.X, skip=(0,) if cfg["data"]["intercept"] else ())
    return scaler.apply(data), scaler


def _fit(cfg: dict, data: Dataset, lattice: LatticeSpec, family: FamilySpec, K: int) -> FittedModel:
    reg = cfg["fit"]["regularization"]
    fcfg = fit_config(cfg)
    ik = cfg["fit"]["intercept_K"]
    if reg["scheme"] == "adaptive":
        return fit_adaptive(data, lattice, K, family, fcfg, mode=reg["mode"], penalize_global=reg["penalize_global"], intercept_K=ik)
    blocks = model_blocks(lattice, K, data.p, ik)
    cells = data.cells(lattice)
    if reg["scheme"] == "generalization-preserving":
        from .fit import default_plan

        plan = default_plan(blocks, data, lattice, family, mode=reg["mode"], penalize_global=reg["penalize_global"])
    elif reg["scheme"] == "fixed":
        from .regularization import RegularizationPlan

        plan = RegularizationPlan.constant(blocks, float(reg["tau"]))
    else:
        plan = scheme_plan(reg["scheme"], blocks, cells, family, data.y)
    return map_fit(data, lattice, K, family, plan, fcfg, intercept_K=ik)


# -- subcommands -----------------------------------------------------------


def cmd_bin(args, cfg: dict) -> dict:
    columns = cfg["bins"]["columns"]
    if not columns:
        raise ConfigError("bins.columns must name at least one lattice source column")
    header, body = read_table(_require(cfg, "data", "path"))
    pos = {c: i for i, c in enumerate(header)}
    missing = [c for c in columns if c not in pos]
    if missing:
        raise ConfigError(f"bins.columns not in data header: {missing}")
    N = len(body)
    p = len(cfg["data"]["features"]) + int(cfg["data"]["intercept"])
    L = args.L or cfg["bins"]["L"]
    d_cont = sum(kind == "binned" for kind in columns.values())
    limit = None
    if d_cont:
        limit = max_bins(N, p, d_cont, cfg["bins"]["safety"])
        if L > limit and not args.force:
            raise InfeasibleLattice(
                f"L={L} exceeds the bin limit {limit} for N={N}, p={p}, d_cont={d_cont} "
                f"at safety {cfg['bins']['safety']}; pass --force to override"
            )
    dims = []
    for name, kind in columns.items():
        raw = [row[pos[name]].strip() for row in body]
        raw = [v for v in raw if v != ""]
        if kind == "binned":
            dims.append(build_bins(np.asarray(raw, dtype=float), L, cfg["bins"]["strategy"], name=name))
        else:
            dims.append(LatticeDim.categorical(name, sorted(set(raw))))
    spec = LatticeSpec(tuple(dims))
    if args.out:
        write_lattice(spec, args.out)
    return {"lattice": spec.to_dict(), "L": L, "max_bins": limit, "forced": bool(args.force and limit is not None and L > limit), "written": args.out}


def cmd_fit(args, cfg: dict) -> dict:
    lattice = lattice_from_config(cfg)
    K = args.K if args.K is not None else cfg["fit"]["K"]
    cfg["fit"]["K"] = K
    if not 0 <= K <= lattice.d:
        raise InvalidTruncation(f"K={K} must lie in [0, d={lattice.d}]")
    data, scaler = _load_training(cfg, lattice)
    family = _family(cfg, data)
    model = _fit(cfg, data, lattice, family, K)
    model.preprocess = {"schema": _schema(cfg, lattice).to_dict(), **(scaler.to_dict() if scaler else {})}
    out = args.out or "model.hlm"
    save_model(model, out, cfg)
    return {"artifact": out, "family": {"family": family.family, "dispersion": family.dispersion}, "diagnostics": model.diagnostics, "dropped_rows": data.meta.get("dropped_missing_lattice", 0)}


def _apply_preprocess(model: FittedModel, path: str, require_response: bool = True) -> Dataset:
    if not model.preprocess or "schema" not in model.preprocess:
        raise ConfigError("model artifact lacks an ingestion schema")
    schema = Schema(**model.preprocess["schema"])
    if not require_response and schema.response not in read_table(path)[0]:
        schema = Schema(None, schema.features, schema.lattice, schema.intercept)
    data = ingest_csv(path, schema)
    if "mean" in model.preprocess:
        data = Standardizer.from_dict(model.preprocess).apply(data)
    return data


def cmd_eval(args, cfg: dict) -> dict:
    model = load_model(args.model)
    if not isinstance(model, FittedModel):
        raise ConfigError("eval needs a GLM artifact")
    train = _apply_preprocess(model, args.data or _require(cfg, "data", "path"))
    rep = waic(model, train, S=cfg["eval"]["waic_draws"], seed=cfg["eval"]["seed"])
    result = {"waic": rep.as_row()}
    test_path = args.test or cfg["data"]["test_path"]
    if test_path:
        test = _apply_preprocess(model, test_path)
        eta, mu = predict_dataset(model, test)
        result["test"] = {"N": test.N, "mean_nll": float(np.mean(nll(model.family, test.y, eta))), "mse": float(np.mean((test.y - mu) ** 2))}
    return result


def cmd_select_order(args, cfg: dict) -> dict:
    lattice = lattice_from_config(cfg)
    K_max = min(args.K_max if args.K_max is not None else cfg["eval"]["K_max"], lattice.d)
    data, _ = _load_training(cfg, lattice)
    family = _family(cfg, data)
    sel, _ = select_order(
        data, lattice, family, K_max, fit_fn=lambda K: _fit(cfg, data, lattice, family, K), S=cfg["eval"]["waic_draws"], seed=cfg["eval"]["seed"]
    )
    _write_rows(args.report_csv, sel.rows())
    return {"selected_K": sel.selected, "orders": sel.rows()}


def cmd_stack(args, cfg: dict) -> dict:
    lattice = lattice_from_config(cfg)
    header, body = read_table(_require(cfg, "stack", "logits"))
    logits = np.array([[float(v) for v in row] for row in body])
    data = ingest_csv(_require(cfg, "data", "path"), Schema(cfg["data"]["response"], (), lattice.names, False))
    if data.meta["dropped_missing_lattice"]:
        raise ConfigError("stacking data has rows without lattice features; logits rows would misalign")
    family = _family(cfg, data)
    cells = data.cells(lattice)
    sm = fit_stacking(logits, data.y, cells, lattice, cfg["stack"]["K_w"], fit_config(cfg), family=family)
    single = []
    for m in range(sm.M):
        one = StackingModel.zeros(lattice, 1, 0, family)
        single.append(loo_loss(one, logits[:, [m]], data.y, cells))
    out = args.out or "stack.hlm"
    save_model(sm, out, cfg)
    return {"artifact": out, "models": header, "loo_loss": loo_loss(sm, logits, data.y, cells), "single_model_loo": dict(zip(header, single)), "diagnostics": sm.diagnostics}


def cmd_simulate(args, cfg: dict) -> dict:
    sim = cfg["simulate"]
    experiment = args.experiment or sim["experiment"]
    reps = args.replications or sim["replications"]
    seed = sim["seed"] if args.seed is None else args.seed
    if experiment == "replica":
        r = sim["replica"]
        res = run_replica_check(r["p"], r["N"], r["lambda2"], r["sigma2"], r["draws"], seed)
        rows = [{"metric": "closed_form", "value": res.closed_form}, {"metric": "mc_mean", "value": res.mc_mean}, {"metric": "mc_stderr", "value": res.mc_stderr}]
        _write_rows(args.out, rows)
        return {"closed_form": res.closed_form, "mc_mean": res.mc_mean, "mc_stderr": res.mc_stderr, "rel_error": res.rel_error, "seed": seed}
    scfg = sim_config(cfg)
    if experiment == "comparison":
        res = run_regularization_comparison(scfg, reps, seed)
        text, summary = res.to_csv(), res.summary("test_ll_improvement")
    else:
        res = run_rg_flow(scfg, reps, seed)
        text = res.to_csv()
        summary = {
            "frac_negative_gap": res.frac_negative_gap().tolist(),
            "frac_test_loss_decreasing": res.frac_strictly_decreasing(),
            "kstar_true": res.kstar_true,
        }
    if args.out:
        Path(args.out).write_text(text)
    return {"experiment": experiment, "replications": reps, "seed": seed, "summary": summary, "csv": args.out}


def cmd_predict(args, cfg: dict) -> dict:
    model = load_model(args.model)
    if isinstance(model, StackingModel):
        raise ConfigError("predict needs a GLM artifact; use the stacking API for ensembles")
    data = _apply_preprocess(model, args.data, require_response=False)
    eta, mu = predict_dataset(model, data)
    rows = [{"eta": repr(float(e)), "mean": repr(float(m))} for e, m in zip(eta, mu)]
    out = args.out or "predictions.csv"
    _write_rows(out, rows)
    return {"predictions": out, "N": data.N}


COMMANDS = {
    "bin": cmd_bin,
    "fit": cmd_fit,
    "eval": cmd_eval,
    "select-order": cmd_select_order,
    "stack": cmd_stack,
    "simulate": cmd_simulate,
    "predict": cmd_predict,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierlattice", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML run configuration")
        return p

    p = add("bin", "build a lattice spec from data columns")
    p.add_argument("--L", type=int, help="bins per continuous dimension")
    p.add_argument("--force", action="store_true", help="allow L above the bin limit")
    p.add_argument("--out", help="write the lattice spec here")
    p = add("fit", "fit a decomposed GLM and save the artifact")
    p.add_argument("--K", type=int, help="truncation order")
    p.add_argument("--out", help="artifact path")
    p = add("eval", "WAIC and held-out scores of a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="training CSV (defaults to data.path)")
    p.add_argument("--test", help="held-out CSV")
    p = add("select-order", "choose the truncation order by generalization gap")
    p.add_argument("--K-max", dest="K_max", type=int)
    p.add_argument("--report-csv")
    p = add("stack", "fit local stacking weights over base-model logits")
    p.add_argument("--out", help="artifact path")
    p = add("simulate", "run a synthetic experiment")
    p.add_argument("--experiment", choices=("comparison", "rg-flow", "replica"))
    p.add_argument("--replications", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="CSV output path")
    p = add("predict", "score new rows with a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        result = COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return exc.exit_code
    except HierLatticeError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    _emit(args.command, cfg, result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
