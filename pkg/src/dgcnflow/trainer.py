"""Training loops, evaluation metrics and the multi-seed experiment harness."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .datapipe.samples import FlowScaler, SampleSet
from .nnmodels import KINDS, Model, ModelSpec, assign_params, init_params, snapshot, toy_instance, zero_grads
from .numcore import AdamState, GradcheckReport, NumericDomainError, Tensor, adam_step, backward, global_norm_clip, gradcheck

log = logging.getLogger(__name__)

REGULAR_RATIOS = (0.90, 0.05, 0.05)
EVACUATION_RATIOS = (0.80, 0.10, 0.10)


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite training loss {loss} at epoch {epoch}")
        self.epoch = epoch


class EmptySplitError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.001
    epochs: int = 70
    batch_size: int = 16
    seed: int = 0
    clip_norm: float | None = None
    ratios: tuple[float, float, float] = REGULAR_RATIOS

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {self.ratios}")


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean over horizon steps of the per-step mean squared error (and over the batch)."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return (pred - target).square().mean()


@dataclass
class FitResult:
    model: Model
    train_loss: list[float]
    val_loss: list[float]
    best_epoch: int

    @property
    def best_val(self) -> float:
        return self.val_loss[self.best_epoch - 1]

    def history_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,train_loss,val_loss\n")
        for k, (a, b) in enumerate(zip(self.train_loss, self.val_loss), start=1):
            buf.write(f"{k},{a!r},{b!r}\n")
        return buf.getvalue()


def model_inputs(model: Model, batch: dict) -> tuple:
    return batch["x"], batch.get("adj"), batch.get("xd")


def predict_scaled(model: Model, samples: SampleSet, idx, chunk: int = 256) -> np.ndarray:
    """Scaled-space predictions ``[n, p, N]`` for sample indices ``idx``."""
    idx = np.asarray(idx)
    outs = []
    for k in range(0, len(idx), chunk):
        b = samples.batch(idx[k : k + chunk], model.adjacency_mode)
        x, adj, xd = model_inputs(model, b)
        outs.append(model.forward(x, adj, xd).data)
    if not outs:
        return np.zeros((0, samples.p, samples.n_nodes))
    return np.concatenate(outs, axis=0)


def split_loss(model: Model, samples: SampleSet, idx) -> float:
    pred = predict_scaled(model, samples, idx)
    y = samples.target_scaler.apply(samples.raw_targets(idx))
    return float(np.mean((pred - y) ** 2))


def fit(model: Model, samples: SampleSet, cfg: TrainConfig) -> FitResult:
    """Mini-batch ADAM on the training split; keeps the parameters with the lowest validation loss."""
    if model.spec.kind == "transfer" and samples.demand is None:
        raise ValueError("transfer training needs demand features in the sample set")
    train_idx = samples.splits.get("train")
    if train_idx is None or train_idx.size == 0:
        raise EmptySplitError("no training samples")
    val_idx = samples.splits.get("val")
    if val_idx is None or val_idx.size == 0:
        val_idx = train_idx
    params = model.trainable()
    state = AdamState.for_params(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    train_hist, val_hist = [], []
    best = (math.inf, 0, snapshot(model))
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(train_idx)
        total = 0.0
        try:
            for k in range(0, order.size, cfg.batch_size):
                b = samples.batch(order[k : k + cfg.batch_size], model.adjacency_mode)
                zero_grads(params)
                x, adj, xd = model_inputs(model, b)
                loss = mse_loss(model.forward(x, adj, xd), b["y"])
                value = float(loss.data)
                if not math.isfinite(value):
                    raise DivergenceError(epoch, value)
                backward(loss)
                if cfg.clip_norm is not None:
                    global_norm_clip(params, cfg.clip_norm)
                adam_step(state, params)
                total += value * len(b["y"])
            val = split_loss(model, samples, val_idx)
        except NumericDomainError as exc:
            # parameters overflowed, so the next forward pass refused them
            raise DivergenceError(epoch, math.nan) from exc
        train_hist.append(total / order.size)
        if not math.isfinite(val):
            raise DivergenceError(epoch, val)
        val_hist.append(val)
        if val < best[0]:
            best = (val, epoch, snapshot(model))
        log.debug("epoch %d train %.5f val %.5f", epoch, train_hist[-1], val)
    assign_params(model, best[2])
    zero_grads(params)
    return FitResult(model, train_hist, val_hist, best[1])


def fit_transfer(model: Model, samples: SampleSet, cfg: TrainConfig) -> FitResult:
    """Train the gate, demand LSTM and demand head; the pretrained block stays fixed unless unfrozen."""
    if model.spec.kind != "transfer":
        raise ValueError(f"expected a transfer model, got {model.spec.kind}")
    if model.params.pretrained is None:
        raise ValueError("transfer model has no pretrained block")
    if samples.demand is None:
        raise ValueError("evacuation samples carry no demand features")
    return fit(model, samples, cfg)


@dataclass
class MetricsReport:
    rmse: float
    mae: float
    r2: float
    rmse_by_step: list[float]
    mae_by_step: list[float]
    rmse_by_node: list[float]

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "mae": self.mae,
            "r2": self.r2,
            "rmse_by_step": self.rmse_by_step,
            "mae_by_step": self.mae_by_step,
            "rmse_by_node": self.rmse_by_node,
        }


def metrics(pred: np.ndarray, true: np.ndarray) -> MetricsReport:
    """RMSE, MAE and R^2 over ``[n, p, N]`` flow arrays; R^2 over the flattened tensor."""
    pred = np.asarray(pred, dtype=float)
    true = np.asarray(true, dtype=float)
    if pred.shape != true.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {true.shape}")
    if pred.size == 0:
        raise EmptySplitError("cannot score an empty split")
    err = pred - true
    sq = err**2
    sst = float(np.sum((true - true.mean()) ** 2))
    sse = float(np.sum(sq))
    r2 = 1.0 - sse / sst if sst > 0 else (1.0 if sse == 0 else -math.inf)
    return MetricsReport(
        rmse=float(np.sqrt(sq.mean())),
        mae=float(np.abs(err).mean()),
        r2=r2,
        rmse_by_step=np.sqrt(sq.mean(axis=(0, 2))).tolist(),
        mae_by_step=np.abs(err).mean(axis=(0, 2)).tolist(),
        rmse_by_node=np.sqrt(sq.mean(axis=(0, 1))).tolist(),
    )


def model_scaler(model: Model) -> FlowScaler:
    return FlowScaler(model.spec.flow_min, model.spec.flow_max)


def predict_flows(model: Model, samples: SampleSet, idx) -> np.ndarray:
    """Predictions in vehicles/hour, inverted with the model's own scaler and clamped at zero."""
    return model_scaler(model).invert(predict_scaled(model, samples, idx))


def bind_scalers(model: Model, samples: SampleSet) -> SampleSet:
    """Attach a trained model's own scalers so stored models see inputs as they did in training."""
    spec = model.spec
    if spec.flow_min is None or spec.flow_max is None:
        raise ValueError("model carries no fitted flow scaler")
    target = FlowScaler(spec.flow_min, spec.flow_max)
    inp = target
    if spec.kind == "transfer":
        inp = model_scaler(model.params.pretrained)
    return samples.with_scalers(inp, target, spec.demand_scale)


def evaluate(model: Model, samples: SampleSet, split: str = "test") -> MetricsReport:
    idx = samples.splits.get(split)
    if idx is None or idx.size == 0:
        raise EmptySplitError(f"split {split!r} is empty")
    return metrics(predict_flows(model, samples, idx), samples.raw_targets(idx))


def make_spec(kind: str, samples: SampleSet, seed: int = 0, corridors=None, tt_std=None, **over) -> ModelSpec:
    """Architecture spec sized to ``samples`` and carrying its fitted scalers."""
    defaults = {"num_layers": 2 if kind == "lstm" else 1}
    defaults.update(over)
    ts = samples.target_scaler
    return ModelSpec(
        kind=kind,
        n_nodes=samples.n_nodes,
        seq_len=samples.l,
        horizon=samples.p,
        n_features=samples.features.shape[-1],
        n_demand=samples.demand.shape[-1] if samples.demand is not None else 9,
        seed=seed,
        flow_min=ts.min if ts else None,
        flow_max=ts.max if ts else None,
        demand_scale=samples.demand_scale.tolist() if samples.demand_scale is not None else None,
        tt_std=tt_std,
        corridors=corridors if kind == "convlstm" else None,
        **defaults,
    )


@dataclass
class RunRecord:
    model: str
    seed: int
    report: MetricsReport | None
    error: str | None = None
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    model_state: Model | None = None
    seconds: float = 0.0


@dataclass
class ExperimentResult:
    runs: list[RunRecord]
    seeds: list[int]
    models: list[str]
    failed: list[tuple[str, int, str]] = field(default_factory=list)

    def summary(self) -> dict:
        out = {}
        for name in self.models:
            reps = [r.report for r in self.runs if r.model == name and r.report is not None]
            entry = {"runs": len(reps)}
            for metric in ("rmse", "mae", "r2"):
                vals = np.array([getattr(r, metric) for r in reps])
                entry[f"mean_{metric}"] = float(vals.mean()) if vals.size else None
                entry[f"std_{metric}"] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
            out[name] = entry
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "seed", "rmse", "mae", "r2"])
        for r in self.runs:
            if r.report is None:
                w.writerow([r.model, r.seed, "failed", "failed", "failed"])
            else:
                w.writerow([r.model, r.seed, repr(r.report.rmse), repr(r.report.mae), repr(r.report.r2)])
        return buf.getvalue()

    def summary_json(self) -> str:
        return json.dumps({"seeds": self.seeds, "models": self.summary()}, indent=2, sort_keys=True) + "\n"


def _one_run(label: str, kind: str, samples: SampleSet, seed: int, cfg: TrainConfig, spec_kw: dict, keep: bool):
    split = samples.with_split(cfg.ratios, seed)
    spec = make_spec(kind, split, seed=seed, **spec_kw)
    model = init_params(spec, seed)
    run_cfg = TrainConfig(cfg.lr, cfg.epochs, cfg.batch_size, seed, cfg.clip_norm, cfg.ratios)
    t0 = time.perf_counter()
    try:
        res = fit(model, split, run_cfg)
    except DivergenceError as exc:
        log.warning("%s seed %d diverged: %s", label, seed, exc)
        return RunRecord(label, seed, None, str(exc), seconds=time.perf_counter() - t0)
    return RunRecord(
        label, seed, evaluate(model, split, "test"), None, res.train_loss, res.val_loss,
        model if keep else None, time.perf_counter() - t0,
    )


def run_experiment(
    models: list[str],
    samples: SampleSet,
    seeds: int | list[int] = 10,
    cfg: TrainConfig | None = None,
    spec_kw: dict | None = None,
    jobs: int = 1,
    keep_models: bool = False,
) -> ExperimentResult:
    """Resplit, retrain and score every model once per seed; rows ordered by (seed, model)."""
    cfg = cfg or TrainConfig()
    seed_list = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    if len(seed_list) < 2:
        raise ValueError("an experiment needs at least 2 seeds")
    spec_kw = spec_kw or {}
    labels = []
    for name in models:
        label = name
        n = 2
        while label in labels:
            label = f"{name}#{n}"
            n += 1
        labels.append(label)
    tasks = [(label, kind, s) for s in seed_list for label, kind in zip(labels, models)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(lambda t: _one_run(t[0], t[1], samples, t[2], cfg, spec_kw, keep_models), tasks))
    else:
        runs = [_one_run(label, kind, samples, s, cfg, spec_kw, keep_models) for label, kind, s in tasks]
    failed = [(r.model, r.seed, r.error) for r in runs if r.report is None]
    if failed:
        log.warning("%d run(s) failed; aggregates use completed runs only", len(failed))
    return ExperimentResult(runs, seed_list, labels, failed)


def check_gradients(kinds=KINDS, seed: int = 0, tol: float = 1e-4, h: float = 1e-5) -> dict[str, GradcheckReport]:
    """Finite-difference gradcheck of each model kind on a small random instance."""
    out = {}
    for kind in kinds:
        model, b = toy_instance(kind, seed)
        params = model.trainable()
        out[kind] = gradcheck(
            lambda: mse_loss(model.forward(b["x"], b["adj"], b["xd"]), b["y"]), params, h=h, tol=tol
        )
    return out
