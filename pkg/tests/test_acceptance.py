"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5 and 6 train on the full default synthetic dataset over five seeds
and take the better part of an hour on one CPU core.
"""

import json
import time
from datetime import datetime

import numpy as np
import pytest

from dgcnflow.cli import main
from dgcnflow.datapipe import (
    DetectorSeries,
    EvacuationZone,
    RawDataset,
    ScenarioConfig,
    clean,
    cumulative_evacuation_population,
    drop_sparse_detectors,
    flag_outliers,
    generate_synthetic,
    period_one_hot,
    prepare,
)
from dgcnflow.graphdyn import (
    Detector,
    DetectorNetwork,
    build_dynamic_graph,
    normalize,
    spectral_radius,
    travel_time_std,
)
from dgcnflow.nnmodels import KINDS, ModelSpec, assign_params, graph_conv, init_params, snapshot, toy_instance
from dgcnflow.numcore import Tensor
from dgcnflow.persistence import (
    ArtifactShapeError,
    ArtifactVersionError,
    CorruptArtifactError,
    ModelArtifact,
    TruncatedArtifactError,
    check_nodes,
    load_model,
    save_model,
)
from dgcnflow.trainer import (
    EVACUATION_RATIOS,
    TrainConfig,
    check_gradients,
    evaluate,
    fit_transfer,
    make_spec,
    metrics,
    model_scaler,
    mse_loss,
    predict_flows,
    run_experiment,
)

SEEDS = 5
REGULAR_EPOCHS = 70
TRANSFER_EPOCHS = 150
RUN_LIMIT_S = 600.0


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300))) if a.size else 0.0


def test_gradient_correctness(criterion):
    c = criterion(1, "gradcheck at tol 1e-4 for every model kind")
    t0 = time.perf_counter()
    reports = check_gradients(KINDS, seed=0, tol=1e-4)
    elapsed = time.perf_counter() - t0
    for kind in KINDS:
        rep = reports[kind]
        c.check(f"{kind} worst {rep.worst[1]:.1e}", rep.passed)
    spec = toy_instance("dgcnlstm")[0].spec
    c.check(f"instance N={spec.n_nodes} l={spec.seq_len} p={spec.horizon} c={spec.n_features}",
            (spec.n_nodes, spec.seq_len, spec.horizon, spec.n_features) == (5, 2, 2, 3))
    c.check(f"{elapsed:.1f}s < 60s", elapsed < 60)
    c.verdict()


def test_oracle_equivalence(criterion):
    c = criterion(2, "graph_conv, normalize, mse_loss, RMSE/MAE match brute force on 50 seeds within 1e-9")
    worst = {"graph_conv": 0.0, "normalize": 0.0, "mse_loss": 0.0, "rmse": 0.0, "mae": 0.0}
    zeros_agree = True
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        N, C = int(rng.integers(2, 7)), int(rng.integers(1, 4))
        w, a, x = rng.normal(size=(N, N)), rng.uniform(size=(N, N)), rng.normal(size=(N, C))
        ref = np.zeros((N, C))
        for i in range(N):
            for k in range(C):
                ref[i, k] = max(0.0, sum(w[i, j] * a[i, j] * x[j, k] for j in range(N)))
        out = graph_conv(w, a, x).data
        mask = ref != 0
        worst["graph_conv"] = max(worst["graph_conv"], rel_err(out[mask], ref[mask]))
        zeros_agree &= bool((out[~mask] == 0).all())

        m = np.triu(rng.uniform(0.01, 1, (N, N)) * (rng.uniform(size=(N, N)) < 0.6), 1)
        m = m + m.T + np.eye(N)
        deg = [sum(m[i]) for i in range(N)]
        brute = np.array([[m[i][j] / (deg[i] ** 0.5 * deg[j] ** 0.5) for j in range(N)] for i in range(N)])
        nz = brute != 0
        worst["normalize"] = max(worst["normalize"], rel_err(normalize(m)[nz], brute[nz]))

        B, p = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        pred, y = rng.normal(size=(B, p, N)), rng.normal(size=(B, p, N))
        steps = [[sum((pred[b, s, n] - y[b, s, n]) ** 2 for n in range(N)) / N for s in range(p)] for b in range(B)]
        mse_ref = sum(sum(st) / p for st in steps) / B
        worst["mse_loss"] = max(worst["mse_loss"], rel_err(mse_loss(Tensor(pred), y).item(), mse_ref))

        fp, ft = rng.uniform(0, 3000, (B, p, N)), rng.uniform(0, 3000, (B, p, N))
        cells = list(zip(fp.ravel().tolist(), ft.ravel().tolist()))
        rmse_ref = (sum((u - v) ** 2 for u, v in cells) / len(cells)) ** 0.5
        mae_ref = sum(abs(u - v) for u, v in cells) / len(cells)
        rep = metrics(fp, ft)
        worst["rmse"] = max(worst["rmse"], rel_err(rep.rmse, rmse_ref))
        worst["mae"] = max(worst["mae"], rel_err(rep.mae, mae_ref))
    for name, err in worst.items():
        c.check(f"{name} {err:.1e}", err <= 1e-9)
    c.check("relu zeros agree", zeros_agree)
    c.verdict()


def _random_dynamic_graph(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 10))
    nodes = [Detector(k + 1, "A", float(k), int(rng.integers(2, 5))) for k in range(n)]
    edges = {(k + 1, k + 2): float(rng.uniform(0.3, 3.0)) for k in range(n - 1)}
    for _ in range(n // 2):
        i, j = (rng.choice(n, 2, replace=False) + 1).tolist()
        if (j, i) not in edges and (i, j) not in edges:
            edges[(i, j)] = float(rng.uniform(0.3, 3.0))
    net = DetectorNetwork(nodes, edges)
    speeds = rng.uniform(3.0, 70.0, (5, n))
    return net, speeds


def test_adjacency_invariants(criterion):
    c = criterion(3, "adjacency invariants on 50 seeded dynamic graphs")
    sym = 0.0
    nonneg = selfacc = mono = True
    radius = 0.0
    for seed in range(50):
        net, speeds = _random_dynamic_graph(seed)
        std = travel_time_std(net, speeds)
        g = build_dynamic_graph(net, speeds, 0.1, std)
        sym = max(sym, float(np.abs(g.a_hat - np.swapaxes(g.a_hat, 1, 2)).max()))
        nonneg &= bool((g.a_hat >= 0).all() and (g.a_bar >= 0).all())
        selfacc &= bool((np.diagonal(g.a_bar, axis1=1, axis2=2) >= 1).all())
        for t in range(len(g)):
            radius = max(radius, spectral_radius(g.a_hat[t], seed=seed))
        prev = None
        for r in (0.0, 0.1, 0.3, 0.6, 0.9):
            adj = build_dynamic_graph(net, speeds, r, std).adjacency
            if prev is not None:
                mono &= not np.any((prev == 0) & (adj != 0))
            prev = adj
    c.check(f"symmetry {sym:.1e} <= 1e-12", sym <= 1e-12)
    c.check("nonnegative", nonneg)
    c.check("A_bar_ii >= 1", selfacc)
    c.check("threshold monotone", mono)
    c.check(f"spectral radius {radius:.12f} <= 1+1e-9", radius <= 1 + 1e-9)
    c.verdict()


def test_reduction_identity(criterion):
    c = criterion(4, "constant adjacency makes dgcn_lstm_forward bit-identical to GCN-LSTM")
    for seed in range(5):
        model, b = toy_instance("dgcnlstm", seed)
        static = init_params(ModelSpec(**{**model.spec.to_dict(), "kind": "gcnlstm"}), seed)
        assign_params(static, snapshot(model))
        const = np.broadcast_to(b["adj"][:, :1], b["adj"].shape).copy()
        c.check(f"seed {seed}", np.array_equal(model.forward(b["x"], const).data, static.forward(b["x"], const).data))
    c.verdict()


@pytest.fixture(scope="module")
def default_data():
    return prepare(RawDataset.from_scenario(generate_synthetic(ScenarioConfig())))


@pytest.fixture(scope="module")
def regular_runs(default_data):
    prep = default_data
    cfg = TrainConfig(epochs=REGULAR_EPOCHS)
    spec_kw = {"corridors": prep.network.corridor_segments(), "tt_std": prep.tt_std}
    return run_experiment(["dgcnlstm", "lstm"], prep.regular, SEEDS, cfg, spec_kw, keep_models=True)


@pytest.mark.slow
def test_regular_ranking(criterion, default_data, regular_runs):
    c = criterion(5, f"DGCN-LSTM mean test RMSE >= 5% below LSTM over {SEEDS} seeds")
    assert default_data.regular.n_nodes == 40
    res = regular_runs
    summary = res.summary()
    dg, ls = summary["dgcnlstm"]["mean_rmse"], summary["lstm"]["mean_rmse"]
    c.check(f"runs {summary['dgcnlstm']['runs']}+{summary['lstm']['runs']} of {2 * SEEDS}", not res.failed)
    c.check(f"DGCN-LSTM {dg:.1f} vs LSTM {ls:.1f} ({100 * (1 - dg / ls):+.1f}%)", dg <= 0.95 * ls)
    slowest = max(r.seconds for r in res.runs)
    c.check(f"slowest run {slowest:.0f}s <= {RUN_LIMIT_S:.0f}s", slowest <= RUN_LIMIT_S)
    c.verdict()


@pytest.mark.slow
def test_transfer_benefit(criterion, default_data, regular_runs):
    c = criterion(6, f"direct RMSE >= 2x transfer RMSE and transfer R2 >= 0.85 over {SEEDS} seeds")
    prep = default_data
    direct, transfer, r2 = [], [], []
    for run in regular_runs.runs:
        if run.model != "dgcnlstm" or run.model_state is None:
            continue
        pre, seed = run.model_state, run.seed
        split = prep.evacuation.with_split(EVACUATION_RATIOS, seed, input_scaler=model_scaler(pre))
        model = init_params(make_spec("transfer", split, seed=seed, tt_std=prep.tt_std), seed, pre)
        fit_transfer(model, split, TrainConfig(epochs=TRANSFER_EPOCHS, seed=seed, ratios=EVACUATION_RATIOS))
        idx = split.splits["test"]
        direct.append(metrics(predict_flows(pre, split, idx), split.raw_targets(idx)).rmse)
        rep = evaluate(model, split)
        transfer.append(rep.rmse)
        r2.append(rep.r2)
    c.check(f"{len(transfer)} seeds", len(transfer) == SEEDS)
    ratio = np.mean(direct) / np.mean(transfer)
    c.check(f"direct {np.mean(direct):.1f} / transfer {np.mean(transfer):.1f} = {ratio:.2f}x", ratio >= 2.0)
    c.check(f"transfer R2 mean {np.mean(r2):.3f} min {np.min(r2):.3f}", np.mean(r2) >= 0.85)
    c.verdict()


def test_gate_behavior(criterion):
    c = criterion(7, "gate forced to 1 reproduces the pretrained output; b_C=-50 suppresses it")
    for seed in range(3):
        model, b = toy_instance("transfer", seed)
        pre = model.params.pretrained.forward(b["x"], b["adj"]).data
        model.params.gate_w.data[:] = 0
        model.params.demand_head_w.data[:] = 0
        model.params.demand_head_b.data[:] = 0
        model.params.gate_b.data[:] = 1e3
        c.check(f"gate=1 exact seed {seed}", np.array_equal(model.forward(b["x"], b["adj"], b["xd"]).data, pre))
        model.params.gate_b.data[:] = -50
        ratio = np.abs(model.forward(b["x"], b["adj"], b["xd"]).data).max() / np.abs(pre).max()
        c.check(f"suppressed {ratio:.1e}", ratio < 1e-10)
    c.verdict()


def _series(flow, lanes=None):
    flow = np.asarray(flow, float)
    n = flow.shape[1]
    speed = np.where(np.isnan(flow), np.nan, 55.0)
    lanes = np.full(n, 2.0) if lanes is None else np.asarray(lanes, float)
    return DetectorSeries(flow, speed, lanes, np.arange(1, n + 1), datetime(2020, 1, 1))


def test_pipeline_correctness(criterion):
    c = criterion(8, "drop rule, outlier rule, imputation idempotence, 18-h lag, one-hots")
    flow = np.full((100, 3), 400.0)
    flow[:21, 0] = np.nan
    flow[:20, 1] = np.nan
    kept, dropped = drop_sparse_detectors(_series(flow))
    c.check("21% dropped, 20% kept", [d[0] for d in dropped] == [1] and kept.node_ids.tolist() == [2, 3])

    out, count = flag_outliers(_series(np.array([[5000.0, 5000.01, 7500.0]]), lanes=[2, 2, 3]))
    c.check("outliers strictly above 2500/lane", count == 1 and np.isnan(out.flow[0, 1]) and out.flow[0, 2] == 7500.0)

    rng = np.random.default_rng(0)
    base = rng.uniform(300, 1200, (200, 1))
    noisy = base * rng.uniform(0.8, 1.2, (1, 5)) + rng.normal(0, 20, (200, 5))
    noisy[rng.random(noisy.shape) < 0.05] = np.nan
    once, _ = clean(_series(noisy))
    twice, rep = clean(once)
    c.check("imputation idempotent", np.array_equal(once.flow, twice.flow) and rep.imputed == 0)

    zones = [EvacuationZone(1, 1e5, 7, 26.0, -81.9), EvacuationZone(2, 3e4, 30, 26.1, -81.9)]
    hours = np.arange(80)
    lagged = cumulative_evacuation_population(zones, hours)
    unlagged = cumulative_evacuation_population(zones, hours, lag=0)
    c.check("P_evc shifted by exactly 18 rows",
            np.array_equal(lagged[18:], unlagged[:-18]) and (lagged[:18] == 0).all() and lagged[25] == 1e5)

    oh = period_one_hot(np.arange(24 * 7) % 24)
    c.check("one-hots sum to 1", (oh.sum(axis=-1) == 1).all())
    c.verdict()


def test_experiment_determinism(criterion, tmp_path):
    c = criterion(9, "cmd_experiment twice with fixed seeds gives byte-identical metric CSVs")
    (tmp_path / "c.json").write_text(json.dumps({"n_nodes": 8, "regular_hours": 300, "evacuation_hours": 120}))
    assert main(["synth", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "d")]) == 0
    outs = []
    for k in range(2):
        args = ["experiment", "--data", str(tmp_path / "d"), "--models", "dgcnlstm,lstm,convlstm,gcnlstm",
                "--seeds", "0,1", "--epochs", "2", "--out", str(tmp_path / f"r{k}"), "--no-timestamps"]
        c.check(f"run {k + 1} exit 0", main(args) == 0)
        outs.append((tmp_path / f"r{k}" / "metrics.csv").read_bytes())
    c.check("metrics.csv identical", outs[0] == outs[1])
    c.verdict()


def test_persistence(criterion, tmp_path):
    c = criterion(10, "save/load bit-exact; corrupted files fail loudly")
    exact = True
    for kind in KINDS:
        model, _ = toy_instance(kind, 7)
        back = load_model(save_model(ModelArtifact(model), tmp_path / f"{kind}.json")).model
        a, b = model.named_tensors(), back.named_tensors()
        exact &= list(a) == list(b) and all(np.array_equal(a[k].data, b[k].data) for k in a)
    c.check("all kinds bit-exact", exact)

    model, _ = toy_instance("dgcnlstm", 7)
    text = (tmp_path / "dgcnlstm.json").read_text()
    k = text.index('"data": [') + 12
    while not text[k].isdigit():
        k += 1
    (tmp_path / "flip.json").write_text(text[:k] + ("3" if text[k] != "3" else "4") + text[k + 1 :])
    (tmp_path / "cut.json").write_text(text[: len(text) // 3])
    body = json.loads(text)
    body["format_version"] = 0
    (tmp_path / "old.json").write_text(json.dumps(body))
    for name, err in (("flip", CorruptArtifactError), ("cut", TruncatedArtifactError), ("old", ArtifactVersionError)):
        try:
            load_model(tmp_path / f"{name}.json")
            raised = None
        except Exception as exc:
            raised = type(exc)
        c.check(f"{name} -> {raised.__name__ if raised else 'loaded'}", raised is err)
    try:
        check_nodes(model, 6)
        shape_ok = False
    except ArtifactShapeError as exc:
        shape_ok = "N=5" in str(exc) and "N=6" in str(exc)
    c.check("N mismatch names both Ns", shape_ok)
    c.verdict()
