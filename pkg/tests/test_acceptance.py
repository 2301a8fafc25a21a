"""Acceptance suite: one PASS/FAIL line per criterion.

The desk-scale criteria (4, 5, 6, 7, 10) share one pipeline run: five base models
on the 50k/10k synthetic set, parameter- and neuron-level prune traces and
from-scratch models. Set PRUNEKIT_ACCEPT_DIR to keep and reuse its outputs.
"""
import itertools
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import spearmanr

from conftest import kink_free_batch, quadratic_model, random_model
from prunekit import damage as dmg
from prunekit import experiment as ex
from prunekit.compress import evaluate_quantized, measure_sizes
from prunekit.config import parse_config
from prunekit.data import SynthConfig, resample, synth_generate
from prunekit.metrics import evaluate_model, roc_auc, tpr_at_fpr, v_shape_stats
from prunekit.nn import (
    Batch,
    DenseLayer,
    HiddenLayerSpec,
    Model,
    ModelSpec,
    TrainConfig,
    backward,
    forward,
    hessian_diag,
    init_random,
    model_loss,
    train,
)
from prunekit.prune import closest_pair, merge_neurons, prune_parameters, remove_neurons
from test_metrics import auc_oracle, tpr_oracle
from test_nn import fd_derivatives, rel_err

ROOT = Path(__file__).resolve().parent.parent
LINES = []


def report(capsys, number, ok, what, detail="", seconds=None, budget=None):
    timing = ""
    if seconds is not None:
        timing = f" [{seconds:.1f}s" + (f" / budget {budget}s]" if budget else "]")
    line = f"ACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}  {what}: {detail}{timing}"
    LINES.append(line)
    with capsys.disabled():
        print("\n" + line)
    return ok


@pytest.fixture(scope="module", autouse=True)
def summary(request):
    yield
    tr = request.config.pluginmanager.getplugin("terminalreporter")
    if tr is not None and LINES:
        tr.write_line("")
        for line in sorted(LINES, key=lambda l: int(l.split()[1])):
            tr.write_line(line)


# --------------------------------------------------------------------------
# Desk pipeline
# --------------------------------------------------------------------------

PARAM_RUNS = ["random", "magnitude", "obd", "obd_sd"]
NEURON_RUNS = ["magnitude", "obd_sd"]


def desk_config():
    cfg = json.loads((ROOT / "configs" / "desk.json").read_text())
    cfg["runs"] = (
        [{"name": f"param_{m}", "level": "parameter", "method": m} for m in PARAM_RUNS]
        + [{"name": f"neuron_{m}", "level": "neuron", "method": m} for m in NEURON_RUNS]
    )
    cfg["scratch"] = [
        {"name": "neuron_fraction", "mode": "fixed-neuron-fraction", "zip_targets": [0.25]},
        {"name": "connection_fraction", "mode": "fixed-connection-fraction", "amounts": [0.5], "seeds": [0]},
    ]
    return parse_config(cfg)


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    cfg = desk_config()
    env = os.environ.get("PRUNEKIT_ACCEPT_DIR")
    out = Path(env) if env else tmp_path_factory.mktemp("desk")
    train_set, test_set = ex.load_datasets(cfg)
    times = {}
    t0 = time.perf_counter()
    if not (out / "train_metrics.csv").exists():
        ex.run_train(cfg, out, train_set, test_set)
    times["train"] = time.perf_counter() - t0
    for level, runs in (("parameter", PARAM_RUNS), ("neuron", NEURON_RUNS)):
        prefix = "param" if level == "parameter" else "neuron"
        sub = cfg.model_copy(deep=True)
        sub.runs = [r for r in cfg.runs if r.level == level]
        missing = [f"{prefix}_{m}_seed{s}.csv" for m in runs for s in cfg.seeds
                   if not (out / "traces" / f"{prefix}_{m}_seed{s}.csv").exists()]
        t0 = time.perf_counter()
        if missing:
            ex.run_prune(sub, out, train_set, test_set)
        times[level] = time.perf_counter() - t0
    t0 = time.perf_counter()
    tables = ex.build_report(out)
    times["report"] = time.perf_counter() - t0
    return {"cfg": cfg, "out": out, "train": train_set, "test": test_set, "times": times, "tables": tables}


def base_model(desk, seed=0):
    return ex.load_model(ex.base_model_path(desk["out"], seed))


def trace_auc(desk, run, seed):
    rows = ex.read_rows(desk["out"] / "traces" / f"{run}_seed{seed}.csv")
    return {int(r["round"]): float(r["auc"]) for r in rows}


# --------------------------------------------------------------------------
# Criteria
# --------------------------------------------------------------------------


def test_c01_derivative_oracles(capsys):
    t0 = time.perf_counter()
    worst_g = worst_h = 0.0
    for seed in range(20):
        # desk topology (five ELU + batch-norm layers) at a width FD can afford
        spec = ModelSpec.desk_default(6, scale=1 / 128, dropout_rate=0.1)
        m = random_model(seed, spec)
        batch = kink_free_batch(m, 4, seed)
        g_fd, h_fd = fd_derivatives(m, batch)
        worst_g = max(worst_g, rel_err(backward(m, batch).grad, g_fd).max())
        worst_h = max(worst_h, rel_err(hessian_diag(m, batch).hess, h_fd, floor=1e-5).max())
    dt = time.perf_counter() - t0
    ok = worst_g < 1e-4 and worst_h < 1e-3 and dt < 60
    assert report(capsys, 1, ok, "derivative oracles, 20 models",
                  f"max grad rel err {worst_g:.2e} (<1e-4), max Hessian rel err {worst_h:.2e} (<1e-3)", dt, 60)


def test_c02_obd_quadratic_exactness(capsys):
    worst = 0.0
    for theta, x in ((3.0, 1.0), (-1.7, 0.5), (0.25, 2.0)):
        m = quadratic_model(theta)
        batch = Batch(np.array([[x]]), np.array([3.0]))
        d = dmg.damage_obd(m, batch).damage[0][0, 0]
        t = m.flat_params()
        t[0] = 0
        true = model_loss(m.set_flat_params(t), batch).mean() - model_loss(m, batch).mean()
        # at the minimum theta = 3/x the quadratic expansion is exact
        m_opt = quadratic_model(3.0 / x)
        d_opt = dmg.damage_obd(m_opt, batch).damage[0][0, 0]
        t = m_opt.flat_params()
        t[0] = 0
        true_opt = model_loss(m_opt.set_flat_params(t), batch).mean() - model_loss(m_opt, batch).mean()
        worst = max(worst, abs(d_opt - true_opt), abs(d - (x * theta) ** 2))
        assert np.isfinite(true)
    assert report(capsys, 2, worst <= 1e-8, "OBD quadratic exactness", f"max abs error {worst:.1e} (<=1e-8)")


def _true_zero_out(model, batch):
    """Exhaustive loss change from zeroing each parameter, in report (augmented) order."""
    base = model_loss(model, batch).mean()
    theta = model.flat_params()
    changes = np.empty(theta.size)
    for i in range(theta.size):
        t = theta.copy()
        t[i] = 0
        changes[i] = model_loss(model.set_flat_params(t), batch).mean() - base
    out, pos = [], 0
    for layer in model.layers:
        o, n = layer.weight.shape
        w = changes[pos:pos + o * n].reshape(o, n)
        b = changes[pos + o * n:pos + o * n + o]
        out.append(np.concatenate([w, b[:, None]], axis=1).ravel())
        pos += o * n + o
    return np.concatenate(out)


def test_c03_brute_force_damage(capsys):
    t0 = time.perf_counter()
    rhos = {m: [] for m in ("obd", "obd_sd", "lm", "magnitude")}
    for seed in range(5):
        train_set, _ = synth_generate(SynthConfig(n_train=2000, n_test=10, feature_dim=4, seed=seed))
        spec = ModelSpec(4, tuple(HiddenLayerSpec(w, "elu") for w in (8, 6)))
        m = train(init_random(spec, seed, np.float64), train_set, TrainConfig(5, 32, 0.05, seed))
        batch = resample(train_set, 500, seed).as_batch()
        assert m.param_count <= 200
        true = _true_zero_out(m, batch)
        for method in rhos:
            est = dmg.estimate(method, m, batch, seed=seed).flat_damage()
            rhos[method].append(spearmanr(est, true)[0])
    dt = time.perf_counter() - t0
    wins = {k: sum(abs(r) > 0.3 for r in v) for k, v in rhos.items()}
    ok = wins["obd_sd"] >= 4 and wins["magnitude"] >= 4 and dt < 120
    detail = ", ".join(f"{k} rho {np.round(v, 2).tolist()}" for k, v in rhos.items())
    assert report(capsys, 3, ok, "brute-force damage ranking (|rho|>0.3 in >=4/5 for obd_sd, magnitude)",
                  detail, dt, 120)


def test_c04_v_shape(desk, capsys):
    t0 = time.perf_counter()
    m = base_model(desk)
    batch = resample(desk["train"], 4096, [0, 4]).as_batch()
    st = v_shape_stats(dmg.damage_obd(m, batch))
    dt = time.perf_counter() - t0
    checks = (st.corr_abs >= 0.5, abs(st.corr_raw) <= 0.2, 0.5 <= st.fraction_nonneg_mean <= 0.9)
    ok = all(checks) and dt < 120
    detail = (f"corr_abs {st.corr_abs:.3f} (>=0.5 {'ok' if checks[0] else 'miss'}), "
              f"corr_raw {st.corr_raw:.3f} (|.|<=0.2 {'ok' if checks[1] else 'miss'}), "
              f"non-negative means {st.fraction_nonneg_mean:.3f} (in [0.5,0.9] {'ok' if checks[2] else 'miss'})")
    assert report(capsys, 4, ok, "V-shape on trained desk model, batch 4096", detail, dt, 120)


def test_c05_pruning_curves(desk, capsys):
    seeds = desk["cfg"].seeds
    auc = {m: np.array([[trace_auc(desk, f"param_{m}", s)[r] for r in range(11)] for s in seeds])
           for m in PARAM_RUNS}
    mean = {m: a.mean(axis=0) for m, a in auc.items()}
    late = range(6, 11)
    a_ok = all(mean["obd_sd"][r] >= mean["random"][r] for r in late)
    b_ok = mean["magnitude"][1] >= mean["random"][1]
    obd_worse = sum(all(auc["obd"][i, r] <= auc["random"][i, r] for r in late) for i in range(len(seeds)))
    c_flag = "" if obd_worse > len(seeds) / 2 else " FLAG: reversed (OBD not worse than random in most seeds)"
    dt = desk["times"]["train"] + desk["times"]["parameter"]
    ok = a_ok and b_ok and dt < 900
    detail = (f"(a) obd_sd-random mean AUC at rounds 6-10 "
              f"{np.round(mean['obd_sd'][6:] - mean['random'][6:], 4).tolist()} {'ok' if a_ok else 'miss'}; "
              f"(b) magnitude-random at round 1 {mean['magnitude'][1] - mean['random'][1]:+.4f} "
              f"{'ok' if b_ok else 'miss'}; (c) OBD <= random at rounds 6-10 in {obd_worse}/{len(seeds)} seeds"
              f"{c_flag}")
    assert report(capsys, 5, ok, "directional pruning curves, 10 rounds x 5 seeds", detail, dt, 900)


def test_c06_zip_vs_raw(desk, capsys):
    t0 = time.perf_counter()
    m = base_model(desk)
    masked = prune_parameters(m, dmg.damage_magnitude(m), 0.5)
    a, b = measure_sizes(m), measure_sizes(masked)
    zip_cut = 1 - b.zip_bytes / a.zip_bytes
    keep = [np.arange(w - w // 2) for w in m.spec.widths]
    small = remove_neurons(m, keep)
    dims = [m.spec.input_dim, *m.spec.widths, 1]
    dims_small = [m.spec.input_dim, *small.spec.widths, 1]
    # weights + biases + 4 batch-norm vectors per hidden layer, 4 bytes each
    def payload(d):
        return 4 * (sum(d[i] * d[i + 1] + d[i + 1] for i in range(len(d) - 1)) + 4 * sum(d[1:-1]))
    expect = payload(dims) - payload(dims_small)
    got = measure_sizes(m).payload_bytes - measure_sizes(small).payload_bytes
    interior = 1 - small.layers[2].weight.size / m.layers[2].weight.size
    dt = time.perf_counter() - t0
    ok = a.raw_bytes == b.raw_bytes and zip_cut >= 0.20 and got == expect and dt < 60
    detail = (f"masked raw {a.raw_bytes}->{b.raw_bytes}, zip cut {zip_cut:.1%} (>=20%); "
              f"neuron-pruned payload cut {got} B vs shape arithmetic {expect} B, interior layer cut {interior:.1%}")
    assert report(capsys, 6, ok, "zipped vs raw size", detail, dt, 60)


def test_c07_quantization(desk, capsys):
    t0 = time.perf_counter()
    deltas, ratios = [], []
    for seed in desk["cfg"].seeds:
        m = base_model(desk, seed)
        ratios.append(measure_sizes(m, "f16").payload_bytes / measure_sizes(m, "f32").payload_bytes)
        deltas.append(evaluate_quantized(m, desk["test"]).auc - evaluate_model(m, desk["test"]).auc)
    dt = time.perf_counter() - t0
    ok = all(r == 0.5 for r in ratios) and max(abs(d) for d in deltas) < 0.005 and dt < 60
    detail = f"payload ratios {sorted(set(ratios))}, AUC(f16)-AUC(f32) {np.round(deltas, 5).tolist()} (|.|<0.005)"
    assert report(capsys, 7, ok, "f16 quantization, 5 desk models", detail, dt, 60)


def test_c08_merge_conservation(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst_dup = 0.0
    pair_hits = trials = 0
    for seed in range(20):
        m = random_model(seed, ModelSpec(5, (HiddenLayerSpec(int(rng.integers(3, 33)), "elu"),
                                             HiddenLayerSpec(6, "elu"))))
        w = m.layers[0]
        i, j = rng.choice(w.weight.shape[0], 2, replace=False)
        w.weight[j], w.bias[j] = w.weight[i], w.bias[i]
        x = rng.normal(size=(50, 5))
        merged = merge_neurons(m, 0, 1)
        worst_dup = max(worst_dup, np.abs(forward(merged, x) - forward(m, x)).max())
        # fresh weights for the nearest-pair oracle
        vecs = rng.normal(size=(int(rng.integers(2, 33)), 7))
        best = min(itertools.combinations(range(len(vecs)), 2),
                   key=lambda p: np.sum((vecs[p[0]] - vecs[p[1]]) ** 2))
        pair_hits += tuple(sorted(closest_pair(vecs))) == best
        trials += 1
    dt = time.perf_counter() - t0
    ok = worst_dup <= 1e-6 and pair_hits == trials and dt < 60
    assert report(capsys, 8, ok, "neuron merge", f"duplicate merge max output change {worst_dup:.1e} (<=1e-6), "
                  f"nearest pair matches oracle {pair_hits}/{trials}", dt, 60)


def _planted(seed):
    rng = np.random.default_rng(seed)
    signal = seed % 4
    spec = ModelSpec(4, (HiddenLayerSpec(4, "identity"),))
    w = rng.normal(0, 0.05, (4, 4))
    w[signal] = [3.0, 0, 0, 0]
    out_w = rng.normal(0, 0.05, (1, 4))
    out_w[0, signal] = 1.5
    m = Model(spec, [DenseLayer(w, np.zeros(4), "identity"), DenseLayer(out_w, np.zeros(1), "sigmoid")])
    x = rng.normal(size=(256, 4))
    y = (x[:, 0] + 0.3 * rng.normal(size=256) > 0).astype(float)
    return m, Batch(x, y), signal


def test_c09_dropout_regression(capsys):
    t0 = time.perf_counter()
    hits = 0
    for seed in range(20):
        m, batch, signal = _planted(seed)
        rows, losses = [], []
        for drop in itertools.product((0, 1), repeat=4):
            losses.append(model_loss(m, batch, neuron_keep=[1.0 - np.array(drop, float)]).mean())
            rows.append([1.0, *drop])
        oracle = np.linalg.lstsq(np.array(rows), np.array(losses), rcond=None)[0][1:]
        cfg = dmg.DropoutRegressionConfig(batch, seed=seed)
        beta = dmg.damage_dropout_regression(m, cfg).damage[0]
        hits += int(np.argmax(beta) == np.argmax(oracle) == signal)
    dt = time.perf_counter() - t0
    ok = hits >= 18 and dt < 60
    assert report(capsys, 9, ok, "dropout regression top-1 (sampled design vs 16-mask oracle)",
                  f"{hits}/20 seeds (>=18)", dt, 60)


def test_c10_scratch_vs_prune(desk, capsys):
    rows = desk["tables"]["scratch_vs_prune"]
    levels = {r["level"] for r in rows}
    neuron = [r for r in rows if r["level"] == "neuron" and r["metric"] == "auc"
              and r["amount"] == "zip0.25"]
    deltas = {r["prune_run"]: r["delta"] for r in neuron}
    pct = np.mean([r["pct_zip_reduction"] for r in neuron]) if neuron else float("nan")
    complete = levels == {"parameter", "neuron"} and set(deltas) == {f"neuron_{m}" for m in NEURON_RUNS}
    within = complete and all(abs(d) <= 0.02 for d in deltas.values())
    direction = ", ".join(f"{k} {'scratch better' if d > 0 else 'prune better'} by {abs(d):.4f}"
                          for k, d in sorted(deltas.items()))
    detail = (f"levels {sorted(levels)}; at {pct:.1f}% zip reduction scratch-minus-prune AUC "
              f"{ {k: round(v, 4) for k, v in sorted(deltas.items())} } (|.|<=0.02); {direction}")
    assert report(capsys, 10, within, "scratch vs prune at 75% size reduction", detail)


def test_c11_metric_oracles(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    worst_auc = worst_tpr = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 40))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = rng.integers(0, 6, n) / 5.0 if rng.random() < 0.5 else rng.random(n)
        worst_auc = max(worst_auc, abs(roc_auc(s, y) - auc_oracle(s, y)))
        target = float(rng.choice([1e-3, 0.1, 0.3]))
        worst_tpr = max(worst_tpr, abs(tpr_at_fpr(s, y, target) - tpr_oracle(s, y, target)))
    dt = time.perf_counter() - t0
    ok = worst_auc <= 1e-12 and worst_tpr <= 1e-12 and dt < 60
    assert report(capsys, 11, ok, "metric oracles, 200 instances",
                  f"max AUC error {worst_auc:.1e}, max TPR@FPR error {worst_tpr:.1e} (<=1e-12)", dt, 60)
