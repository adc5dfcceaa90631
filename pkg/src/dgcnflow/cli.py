"""``dgcnflow`` command line: synthesize, train, transfer, evaluate, predict, check, experiment, map.

Exit codes: 0 ok, 2 bad configuration or arguments, 3 missing or unreadable
artifact, 4 training diverged, 5 gradient check failed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .datapipe import (
    DatasetError,
    ScenarioConfig,
    ScenarioConfigError,
    generate_synthetic,
    load_dataset,
    prepare,
)
from .datapipe.dataset import save_dataset
from .nnmodels import KINDS, ConfigError, init_params
from .persistence import (
    ArtifactError,
    ArtifactShapeError,
    MissingArtifactError,
    ModelArtifact,
    check_nodes,
    fingerprint,
    load_model,
    save_model,
)
from .trainer import (
    EVACUATION_RATIOS,
    REGULAR_RATIOS,
    DivergenceError,
    TrainConfig,
    bind_scalers,
    check_gradients,
    evaluate,
    fit,
    fit_transfer,
    make_spec,
    metrics,
    predict_flows,
    run_experiment,
)

log = logging.getLogger("dgcnflow")

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 2, 3, 4, 5

DEFAULTS = {
    "synth": {"out": "data", "seed": None, "nodes": None},
    "train": {
        "data": "data", "out": "runs/train", "model": "dgcnlstm", "epochs": 70, "lr": 0.001,
        "batch_size": 16, "seed": 0, "clip_norm": None, "hidden_size": None, "phase": "regular",
    },
    "transfer": {
        "data": "data", "out": "runs/transfer", "pretrained": None, "epochs": 150, "lr": 0.001,
        "batch_size": 16, "seed": 0, "clip_norm": None, "hidden_size": None, "unfreeze": False,
    },
    "evaluate": {"data": "data", "out": "runs/evaluate", "model": None, "split": "test", "seed": None},
    "predict": {"data": "data", "out": "runs/predict", "model": None, "split": "test", "seed": None},
    "gradcheck": {"out": "runs/gradcheck", "model": "all", "seed": 0, "tol": 1e-4},
    "experiment": {
        "data": "data", "out": "runs/experiment", "models": "dgcnlstm,lstm,convlstm,gcnlstm",
        "seeds": 10, "jobs": 1, "epochs": 70, "lr": 0.001, "batch_size": 16, "clip_norm": None,
        "phase": "regular",
    },
    "congestion-map": {"data": "data", "out": "runs/map", "model": None, "hours": None},
}


class UsageError(ValueError):
    pass


def _timestamp(args) -> dict:
    if args.no_timestamps:
        return {}
    return {"created": datetime.now(timezone.utc).replace(microsecond=0).isoformat()}


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _require(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"{what} not found: {p}")
    return p


def _prepared(data: str):
    return prepare(load_dataset(_require(data, "data")))


def _phase(prep, phase: str):
    if phase == "regular":
        return prep.regular, REGULAR_RATIOS
    if phase == "evacuation":
        return prep.evacuation, EVACUATION_RATIOS
    raise UsageError(f"unknown phase {phase!r}")


def _bound_samples(art: ModelArtifact, prep, seed):
    model = art.model
    phase = art.provenance.get("phase", "evacuation" if model.spec.kind == "transfer" else "regular")
    samples, ratios = _phase(prep, phase)
    check_nodes(model, samples.n_nodes)
    seed = art.provenance.get("seed", 0) if seed is None else seed
    return bind_scalers(model, samples.with_split(tuple(art.provenance.get("ratios", ratios)), seed))


def _train_cfg(o: dict, ratios) -> TrainConfig:
    return TrainConfig(o["lr"], int(o["epochs"]), int(o["batch_size"]), int(o["seed"]), o["clip_norm"], ratios)


def _report_fig(fn, *a, **kw):
    from . import plotting

    return getattr(plotting, fn)(*a, **kw)


def cmd_synth(o: dict, args) -> int:
    cfg = ScenarioConfig.load(o["config"]) if o.get("config") else ScenarioConfig()
    if o["seed"] is not None:
        cfg.seed = int(o["seed"])
    if o["nodes"] is not None:
        cfg.n_nodes = int(o["nodes"])
    cfg.validate()
    paths = save_dataset(generate_synthetic(cfg), o["out"])
    for p in paths:
        print(p)
    return EXIT_OK


def _provenance(o, args, samples, res, phase, ratios, test) -> dict:
    return {
        "seed": int(o["seed"]),
        "epochs": int(o["epochs"]),
        "best_epoch": res.best_epoch,
        "phase": phase,
        "ratios": list(ratios),
        "val_loss": res.best_val,
        "test_rmse": test.rmse,
        "test_mae": test.mae,
        "test_r2": test.r2,
        "data_fingerprint": fingerprint(samples.flow, samples.features),
        **_timestamp(args),
    }


def _finish_run(out: Path, model, res, split, prov: dict, extra: dict | None = None) -> None:
    save_model(ModelArtifact(model, prov), out / "model.json")
    (out / "loss_history.csv").write_text(res.history_csv())
    val = evaluate(model, split, "val")
    test = evaluate(model, split, "test")
    body = {"val": val.to_dict(), "test": test.to_dict(), **(extra or {})}
    _write_json(out / "metrics.json", body)
    _report_fig("loss_curves", {model.spec.kind: (res.train_loss, res.val_loss)}, out / "loss.png")
    print(f"best_epoch,{res.best_epoch}")
    print(f"val_rmse,{val.rmse!r}")
    print(f"test_rmse,{test.rmse!r}")


def cmd_train(o: dict, args) -> int:
    if o["model"] == "transfer":
        raise UsageError("use the transfer subcommand for transfer models")
    prep = _prepared(o["data"])
    samples, ratios = _phase(prep, o["phase"])
    cfg = _train_cfg(o, ratios)
    split = samples.with_split(ratios, cfg.seed)
    over = {"hidden_size": int(o["hidden_size"])} if o["hidden_size"] else {}
    spec = make_spec(
        o["model"], split, seed=cfg.seed, corridors=prep.network.corridor_segments(), tt_std=prep.tt_std, **over
    )
    model = init_params(spec, cfg.seed)
    res = fit(model, split, cfg)
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    test = evaluate(model, split, "test")
    _finish_run(out, model, res, split, _provenance(o, args, samples, res, o["phase"], ratios, test))
    return EXIT_OK


def cmd_transfer(o: dict, args) -> int:
    pre = load_model(_require(o["pretrained"], "pretrained")).model
    if pre.spec.kind != "dgcnlstm":
        raise UsageError(f"pretrained model must be dgcnlstm, got {pre.spec.kind}")
    prep = _prepared(o["data"])
    samples = prep.evacuation
    check_nodes(pre, samples.n_nodes)
    cfg = _train_cfg(o, EVACUATION_RATIOS)
    pre_scaler = bind_scalers(pre, samples).input_scaler
    split = samples.with_split(EVACUATION_RATIOS, cfg.seed, input_scaler=pre_scaler)
    over = {"hidden_size": int(o["hidden_size"])} if o["hidden_size"] else {}
    spec = make_spec("transfer", split, seed=cfg.seed, tt_std=prep.tt_std, **over)
    model = init_params(spec, cfg.seed, pre)
    model.set_frozen(not o["unfreeze"])
    res = fit_transfer(model, split, cfg)
    test_idx = split.splits["test"]
    direct = metrics(predict_flows(pre, split, test_idx), split.raw_targets(test_idx))
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    test = evaluate(model, split, "test")
    prov = _provenance(o, args, samples, res, "evacuation", EVACUATION_RATIOS, test)
    _finish_run(out, model, res, split, prov, {"pretrained_direct_test": direct.to_dict()})
    print(f"pretrained_direct_test_rmse,{direct.rmse!r}")
    return EXIT_OK


def cmd_evaluate(o: dict, args) -> int:
    art = load_model(_require(o["model"], "model"))
    samples = _bound_samples(art, _prepared(o["data"]), o["seed"])
    rep = evaluate(art.model, samples, o["split"])
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "metrics.json", {"split": o["split"], **rep.to_dict()})
    print("split,rmse,mae,r2")
    print(f"{o['split']},{rep.rmse!r},{rep.mae!r},{rep.r2!r}")
    return EXIT_OK


def _split_idx(samples, split: str) -> np.ndarray:
    if split == "all":
        return np.arange(len(samples))
    if split not in samples.splits:
        raise UsageError(f"unknown split {split!r}")
    return samples.splits[split]


def cmd_predict(o: dict, args) -> int:
    art = load_model(_require(o["model"], "model"))
    samples = _bound_samples(art, _prepared(o["data"]), o["seed"])
    idx = _split_idx(samples, o["split"])
    pred = predict_flows(art.model, samples, idx)
    true = samples.raw_targets(idx)
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "horizon_step", "node_id", "flow_pred", "flow_true"])
        for a, s in enumerate(idx):
            for step in range(pred.shape[1]):
                for node in range(pred.shape[2]):
                    w.writerow([int(s), step + 1, node + 1, repr(float(pred[a, step, node])), repr(float(true[a, step, node]))])
    _report_fig("prediction_scatter", pred, true, out / "scatter.png", title=f"{art.model.spec.kind} {o['split']}")
    print(out / "predictions.csv")
    return EXIT_OK


def cmd_gradcheck(o: dict, args) -> int:
    kinds = KINDS if o["model"] == "all" else tuple(o["model"].split(","))
    for k in kinds:
        if k not in KINDS:
            raise UsageError(f"unknown model kind {k!r}")
    reports = check_gradients(kinds, int(o["seed"]), float(o["tol"]))
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    rows = ["model,parameter,max_rel_error,passed"]
    failed = []
    for kind, rep in reports.items():
        for name, err in rep.errors.items():
            rows.append(f"{kind},{name},{err!r},{err <= rep.tol}")
        worst, err = rep.worst
        print(f"{kind}: {'pass' if rep.passed else 'FAIL'} worst {worst} {err:.3e}")
        if not rep.passed:
            failed.append((kind, worst, err))
    (out / "gradcheck.csv").write_text("\n".join(rows) + "\n")
    if failed:
        kind, worst, err = max(failed, key=lambda t: t[2])
        print(f"gradcheck failed: worst parameter {kind}/{worst} rel err {err:.3e}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_experiment(o: dict, args) -> int:
    prep = _prepared(o["data"])
    samples, ratios = _phase(prep, o["phase"])
    models = [m.strip() for m in str(o["models"]).split(",") if m.strip()]
    for m in models:
        if m not in KINDS or m == "transfer":
            raise UsageError(f"experiment models must be baseline or dgcnlstm kinds, got {m!r}")
    cfg = TrainConfig(o["lr"], int(o["epochs"]), int(o["batch_size"]), 0, o["clip_norm"], ratios)
    seeds = o["seeds"]
    seeds = [int(s) for s in seeds.split(",")] if isinstance(seeds, str) and "," in seeds else int(seeds)
    res = run_experiment(
        models, samples, seeds, cfg, {"corridors": prep.network.corridor_segments(), "tt_std": prep.tt_std},
        jobs=int(o["jobs"]),
    )
    out = Path(o["out"])
    (out / "histories").mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(res.to_csv())
    summary = json.loads(res.summary_json())
    summary.update(_timestamp(args))
    _write_json(out / "summary.json", summary)
    curves = {}
    for r in res.runs:
        name = r.model.replace("#", "_")
        lines = ["epoch,train_loss,val_loss"] + [
            f"{k},{a!r},{b!r}" for k, (a, b) in enumerate(zip(r.train_loss, r.val_loss), start=1)
        ]
        (out / "histories" / f"{name}_seed{r.seed}.csv").write_text("\n".join(lines) + "\n")
        if r.seed == res.seeds[0] and r.train_loss:
            curves[r.model] = (r.train_loss, r.val_loss)
    _report_fig("rmse_bars", res.summary(), out / "rmse.png")
    if curves:
        _report_fig("loss_curves", curves, out / "loss.png")
    print("model,runs,mean_rmse,std_rmse,mean_mae,mean_r2")
    for name, s in res.summary().items():
        print(f"{name},{s['runs']},{s['mean_rmse']!r},{s['std_rmse']!r},{s['mean_mae']!r},{s['mean_r2']!r}")
    return EXIT_OK


def congestion_rows(art: ModelArtifact, prep, hours: list[int]) -> list[tuple]:
    """Forecast rows ``(hour, node_id, lat, lon, corridor, milepost, flow)`` for each request hour.

    A request hour ``h`` uses inputs ``h-l .. h-1`` and emits targets ``h .. h+p-1``
    (hours counted from the start of the evacuation phase).
    """
    model = art.model
    samples = bind_scalers(model, prep.evacuation)
    check_nodes(model, samples.n_nodes)
    l, p, T = samples.l, samples.p, samples.flow.shape[0]
    starts = []
    for h in hours:
        if h - l < 0 or h + p > T:
            raise IndexError(f"request hour {h} outside dataset range [{l}, {T - p}]")
        starts.append(h - l)
    sub = dataclasses.replace(samples, starts=np.asarray(starts))
    pred = predict_flows(model, sub, np.arange(len(starts)))
    nodes = prep.network.nodes
    rows = []
    for a, h in enumerate(hours):
        for step in range(p):
            for k, n in enumerate(nodes):
                rows.append((h + step, n.id, n.lat, n.lon, n.corridor, n.milepost, float(pred[a, step, k])))
    rows.sort(key=lambda r: (r[0], r[4], r[5], r[1]))
    return rows


def cmd_congestion_map(o: dict, args) -> int:
    art = load_model(_require(o["model"], "model"))
    prep = _prepared(o["data"])
    if o["hours"] is None:
        raise UsageError("--hours is required")
    hours = [int(h) for h in str(o["hours"]).split(",")]
    rows = congestion_rows(art, prep, hours)
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "congestion_map.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hour", "node_id", "lat", "lon", "corridor", "milepost", "flow_pred"])
        for r in rows:
            w.writerow([r[0], r[1], repr(r[2]), repr(r[3]), r[4], repr(r[5]), repr(r[6])])
    print(out / "congestion_map.csv")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "transfer": cmd_transfer,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "experiment": cmd_experiment,
    "congestion-map": cmd_congestion_map,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dgcnflow", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file of option values; flags override it")
        p.add_argument("--out", help="output directory")
        p.add_argument("--no-timestamps", action="store_true", help="omit creation timestamps from outputs")
        return p

    p = add("synth", "generate a synthetic dataset directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--nodes", type=int)

    for name, help_ in (("train", "train a model on one phase"), ("transfer", "train the gated transfer model")):
        p = add(name, help_)
        p.add_argument("--data")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--clip-norm", type=float)
        p.add_argument("--hidden-size", type=int)
        if name == "train":
            p.add_argument("--model", choices=KINDS)
            p.add_argument("--phase", choices=("regular", "evacuation"))
        else:
            p.add_argument("--pretrained", help="regular-phase dgcnlstm model.json")
            p.add_argument("--unfreeze", action="store_true", default=None)

    for name, help_ in (("evaluate", "score a saved model"), ("predict", "write per-cell predictions")):
        p = add(name, help_)
        p.add_argument("--data")
        p.add_argument("--model", help="model.json")
        p.add_argument("--split", choices=("train", "val", "test", "all") if name == "predict" else ("train", "val", "test"))
        p.add_argument("--seed", type=int, help="split seed (default: the training seed)")

    p = add("gradcheck", "finite-difference gradient check of every model kind")
    p.add_argument("--model", help="model kind, comma list, or 'all'")
    p.add_argument("--seed", type=int)
    p.add_argument("--tol", type=float)

    p = add("experiment", "multi-seed resplit/retrain comparison")
    p.add_argument("--data")
    p.add_argument("--models", help="comma-separated model kinds")
    p.add_argument("--seeds", help="seed count, or comma-separated seed list")
    p.add_argument("--jobs", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--phase", choices=("regular", "evacuation"))

    p = add("congestion-map", "tabular evacuation forecast per node for request hours")
    p.add_argument("--data")
    p.add_argument("--model", help="transfer model.json")
    p.add_argument("--hours", help="comma-separated evacuation-phase hours")
    return ap


def resolve_options(args) -> dict:
    """Defaults, then the JSON config, then explicit flags."""
    opts = dict(DEFAULTS[args.command])
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        if args.command != "synth":
            unknown = set(k.replace("-", "_") for k in cfg) - set(opts)
            if unknown:
                raise UsageError(f"unknown config keys for {args.command}: {sorted(unknown)}")
            opts.update({k.replace("-", "_"): v for k, v in cfg.items()})
    opts["config"] = args.config
    for k, v in vars(args).items():
        if k in ("command", "config", "verbose", "no_timestamps"):
            continue
        if v is not None:
            opts[k] = v
    return opts


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        opts = resolve_options(args)
        return COMMANDS[args.command](opts, args)
    except (UsageError, ConfigError, ScenarioConfigError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactShapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, DatasetError, ArtifactError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
