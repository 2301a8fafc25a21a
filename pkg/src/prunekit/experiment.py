"""Experiment orchestration: base/scratch training, pruning sweeps and report tables.

Output directory layout::

    models/base_seed{S}.prk                 trained base models
    models/scratch_{name}_a{amount}_seed{S}.prk
    train_metrics.csv                       one row per trained model
    traces/{run}_seed{S}.csv                prune/fine-tune traces
    vshape/{run}_seed{S}.csv                mean/SD correlations (OBD family)
    report/*.csv                            aggregated, plot-ready tables
"""
from __future__ import annotations

import csv
import logging
import re
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from prunekit import damage as dmg
from prunekit.compress import deserialize, measure_sizes, serialize
from prunekit.config import ExperimentConfig, RunSection, ScratchSection
from prunekit.data import Dataset, SynthConfig, load_csv, resample, synth_generate
from prunekit.metrics import evaluate_model
from prunekit.nn import HiddenLayerSpec, Model, ModelSpec, TrainConfig, init_random, train
from prunekit.prune import (
    PruneSchedule,
    PruneTrace,
    amount_for_zip_target,
    build_scratch_model,
    derive_scratch_architectures,
    prune_finetune_loop,
    write_trace_csv,
)

log = logging.getLogger(__name__)

TRAIN_COLUMNS = [
    "kind", "name", "mode", "amount", "zip_target", "seed", "level", "params", "neurons_per_layer",
    "raw_bytes", "zip_bytes", "auc", "tpr_at_fpr", "loss", "accuracy",
]
MIN_TEST_NEGATIVES = 1000


class ExperimentError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Inputs
# --------------------------------------------------------------------------


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    ds = cfg.dataset
    if ds.synth is not None:
        train_set, test_set = synth_generate(SynthConfig(**ds.synth.model_dump()))
    else:
        train_set = load_csv(ds.csv.train, ds.csv.label_column, "train")
        test_set = load_csv(ds.csv.test, ds.csv.label_column, "test")
    negatives = int(np.sum(test_set.labels == 0))
    if negatives < MIN_TEST_NEGATIVES:
        log.warning("test set has only %d negatives; TPR at FPR=0.001 will be coarse", negatives)
    return train_set, test_set


def base_spec(cfg: ExperimentConfig, input_dim: int) -> ModelSpec:
    m = cfg.model
    if m.widths is not None:
        layers = tuple(HiddenLayerSpec(w, m.activation, m.batchnorm, m.dropout) for w in m.widths)
        return ModelSpec(input_dim, layers)
    return ModelSpec.desk_default(input_dim, m.scale, m.activation, m.batchnorm, m.dropout)


def train_config(cfg: ExperimentConfig, seed: int, epochs=None) -> TrainConfig:
    t = cfg.train
    return TrainConfig(t.epochs if epochs is None else epochs, t.batch_size, t.learning_rate, seed)


def train_base(cfg: ExperimentConfig, seed: int, train_set: Dataset) -> Model:
    model = init_random(base_spec(cfg, train_set.dim), seed)
    return train(model, train_set, train_config(cfg, seed))


def schedule_for(run: RunSection, cfg: ExperimentConfig, seed: int) -> PruneSchedule:
    return PruneSchedule(
        level=run.level, method=run.method, fraction=run.fraction, rounds=run.rounds,
        finetune_epochs=run.finetune_epochs, finetune_samples=run.finetune_samples,
        scope=run.scope, layer_floor=run.layer_floor, seed=seed,
        damage_samples=run.damage_samples,
        learning_rate=run.learning_rate or cfg.train.learning_rate,
        batch_size=cfg.train.batch_size, include_bias=run.include_bias,
        include_outgoing=run.include_outgoing, recompute_damage=run.recompute_damage,
        merge_outgoing=run.merge_outgoing,
    )


# --------------------------------------------------------------------------
# Paths
# --------------------------------------------------------------------------


def base_model_path(out: Path, seed: int) -> Path:
    return Path(out) / "models" / f"base_seed{seed}.prk"


def _amount_tag(a: float) -> str:
    return f"{a:.4f}".replace(".", "p")


def load_model(path) -> Model:
    return deserialize(Path(path).read_bytes())


def save_model(model: Model, path, precision="f32"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize(model, precision))


def _metric_row(kind, name, mode, amount, seed, level, model, test_set, zip_target=""):
    m = evaluate_model(model, test_set)
    s = measure_sizes(model)
    return {
        "kind": kind, "name": name, "mode": mode, "amount": amount, "zip_target": zip_target,
        "seed": seed, "level": level,
        "params": model.unmasked_count(), "neurons_per_layer": "-".join(map(str, model.spec.widths)),
        "raw_bytes": s.raw_bytes, "zip_bytes": s.zip_bytes, "auc": m.auc, "tpr_at_fpr": m.tpr_at_fpr,
        "loss": m.mean_loss, "accuracy": m.accuracy,
    }


def write_rows(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def scratch_amounts(sc: ScratchSection, spec: ModelSpec, seed: int, report=None) -> list[tuple]:
    """(amount, zip_target) pairs; zip_target is "" for explicitly listed amounts."""
    amounts = [(a, "") for a in sc.amounts]
    for t in sc.zip_targets:
        amounts.append((round(amount_for_zip_target(spec, sc.mode, t, seed, report), 4), t))
    return amounts


def neuron_report_for(model: Model, method: str, train_set: Dataset, samples: int, seed: int):
    batch = resample(train_set, min(samples, len(train_set)), [seed, 0, 1]).as_batch()
    rep = dmg.estimate(method, model, batch, seed=seed)
    return dmg.aggregate_to_neurons(rep, model)


def train_scratch(sc: ScratchSection, cfg: ExperimentConfig, seed: int, train_set: Dataset,
                  base: Model | None = None):
    """Yields (amount, zip_target, trained model) for every architecture of one scratch section."""
    spec = base_spec(cfg, train_set.dim)
    report = None
    if sc.mode == "from-neuron-report":
        if base is None:
            raise ExperimentError("from-neuron-report scratch runs need the trained base model")
        report = neuron_report_for(base, sc.report_method, train_set, cfg.damage_samples, seed)
    for a, target in scratch_amounts(sc, spec, seed, report):
        arch = derive_scratch_architectures(spec, sc.mode, a, report)[0]
        model = build_scratch_model(arch, seed)
        yield a, target, train(model, train_set, train_config(cfg, seed, sc.epochs))


def run_train(cfg: ExperimentConfig, out: Path, train_set: Dataset, test_set: Dataset,
              precision="f32") -> list[dict]:
    out = Path(out)
    rows = []
    bases = {}
    for seed in cfg.seeds:
        log.info("training base model, seed %d", seed)
        model = train_base(cfg, seed, train_set)
        bases[seed] = model
        save_model(model, base_model_path(out, seed), precision)
        rows.append(_metric_row("base", "base", "", 0.0, seed, "", model, test_set))
    for sc in cfg.scratch:
        level = "parameter" if sc.mode == "fixed-connection-fraction" else "neuron"
        for seed in sc.seeds or cfg.seeds:
            for a, target, model in train_scratch(sc, cfg, seed, train_set, bases.get(seed)):
                log.info("scratch %s amount %.4f seed %d", sc.name, a, seed)
                save_model(model, out / "models" / f"scratch_{sc.name}_a{_amount_tag(a)}_seed{seed}.prk", precision)
                rows.append(_metric_row("scratch", sc.name, sc.mode, a, seed, level, model, test_set, target))
    write_rows(out / "train_metrics.csv", TRAIN_COLUMNS, rows)
    return rows


# --------------------------------------------------------------------------
# Pruning
# --------------------------------------------------------------------------


@dataclass
class TraceResult:
    run: str
    seed: int
    trace: PruneTrace


def run_prune(cfg: ExperimentConfig, out: Path, train_set: Dataset, test_set: Dataset) -> list[TraceResult]:
    out = Path(out)
    results = []
    for run in cfg.runs:
        for seed in run.seeds or cfg.seeds:
            path = base_model_path(out, seed)
            if not path.exists():
                raise ExperimentError(
                    f"missing base model {path}; run `prunekit train` with the same config first"
                )
            base = load_model(path)
            log.info("pruning run %s seed %d", run.name, seed)
            trace = prune_finetune_loop(base, schedule_for(run, cfg, seed), train_set, test_set)
            write_trace_csv(trace, out / "traces" / f"{run.name}_seed{seed}.csv")
            if trace.vshape:
                cols = ["round", "corr_raw", "corr_abs", "n_params", "fraction_nonneg_mean", "degenerate"]
                write_rows(out / "vshape" / f"{run.name}_seed{seed}.csv", cols, trace.vshape)
            results.append(TraceResult(run.name, seed, trace))
    return results


# --------------------------------------------------------------------------
# Reporting
# --------------------------------------------------------------------------

_TRACE_RE = re.compile(r"^(?P<run>.+)_seed(?P<seed>-?\d+)\.csv$")
TABLES = {
    ("parameter", "auc"): "parameter_auc",
    ("neuron", "auc"): "neuron_auc",
    ("parameter", "tpr_at_fpr"): "parameter_tpr",
    ("neuron", "tpr_at_fpr"): "neuron_tpr",
}
LONG_COLUMNS = [
    "run", "seed", "round", "method", "level", "params", "neurons_per_layer", "raw_bytes",
    "zip_bytes", "pct_zip_reduction", "pct_raw_reduction", "auc", "tpr_at_fpr", "loss", "accuracy", "error",
]
CURVE_COLUMNS = [
    "series", "kind", "level", "round", "n_seeds", "pct_zip_reduction", "metric", "mean", "min", "max",
]
COMPARE_COLUMNS = [
    "level", "scratch", "amount", "prune_run", "n_seeds", "pct_zip_reduction", "metric",
    "scratch_mean", "prune_mean", "delta",
]


def load_traces(out: Path) -> list[dict]:
    rows = []
    for p in sorted((Path(out) / "traces").glob("*.csv")):
        m = _TRACE_RE.match(p.name)
        if not m:
            continue
        for r in read_rows(p):
            r["run"], r["seed"] = m["run"], int(m["seed"])
            rows.append(r)
    return rows


def add_percent_columns(rows: list[dict]) -> list[dict]:
    """Percent zip/raw reduction relative to each (run, seed) trace's round-0 row.

    Raises if traces sharing a seed disagree on their baseline.
    """
    baselines = {}
    by_trace = defaultdict(list)
    for r in rows:
        by_trace[(r["run"], int(r["seed"]))].append(r)
    for (run, seed), trs in by_trace.items():
        base = [r for r in trs if int(r["round"]) == 0]
        if len(base) != 1:
            raise ExperimentError(f"trace {run} seed {seed} has no unique round-0 baseline")
        key = (int(base[0]["zip_bytes"]), float(base[0]["auc"]))
        if seed in baselines and baselines[seed][0] != key:
            raise ExperimentError(
                f"inconsistent baselines for seed {seed}: {run} differs from {baselines[seed][1]}"
            )
        baselines.setdefault(seed, (key, run))
    out = []
    for (run, seed), trs in by_trace.items():
        b = next(r for r in trs if int(r["round"]) == 0)
        bz, br = int(b["zip_bytes"]), int(b["raw_bytes"])
        for r in sorted(trs, key=lambda r: int(r["round"])):
            r = dict(r)
            r["pct_zip_reduction"] = 100.0 * (1 - int(r["zip_bytes"]) / bz)
            r["pct_raw_reduction"] = 100.0 * (1 - int(r["raw_bytes"]) / br)
            out.append(r)
    return out


def _f(x):
    return float(x) if x not in ("", None) else float("nan")


def _aggregate_traces(rows, level, metric):
    groups = defaultdict(list)
    for r in rows:
        if r["level"] == level and not r.get("error"):
            groups[(r["run"], int(r["round"]))].append(r)
    out = []
    for (run, rnd), rs in sorted(groups.items()):
        vals = np.array([_f(r[metric]) for r in rs])
        out.append({
            "series": run, "kind": "prune", "level": level, "round": rnd, "n_seeds": len(rs),
            "pct_zip_reduction": float(np.mean([r["pct_zip_reduction"] for r in rs])),
            "metric": metric, "mean": float(vals.mean()), "min": float(vals.min()), "max": float(vals.max()),
        })
    return out


def _scratch_points(train_rows, base_zip, level, metric):
    groups = defaultdict(list)
    for r in train_rows:
        if r["kind"] != "scratch" or r["level"] != level:
            continue
        seed = int(r["seed"])
        if seed not in base_zip:
            continue
        pct = 100.0 * (1 - int(r["zip_bytes"]) / base_zip[seed])
        # zip-target runs pick a slightly different amount per seed; group them by target
        key = f"zip{float(r['zip_target']):g}" if r.get("zip_target") else f"{float(r['amount']):g}"
        groups[(r["name"], key)].append((seed, pct, _f(r[metric])))
    out = []
    for (name, amount), items in sorted(groups.items()):
        vals = np.array([v for _, _, v in items])
        out.append({
            "series": f"{name}@{amount}", "kind": "scratch", "level": level, "round": "",
            "n_seeds": len(items), "pct_zip_reduction": float(np.mean([p for _, p, _ in items])),
            "metric": metric, "mean": float(vals.mean()), "min": float(vals.min()), "max": float(vals.max()),
            "_items": items, "_name": name, "_amount": amount,
        })
    return out


def interpolate_trace(rows_one_trace, pct, metric):
    """Metric of one trace linearly interpolated at a percent-zip-reduction value (NaN outside range)."""
    xs = np.array([r["pct_zip_reduction"] for r in rows_one_trace])
    ys = np.array([_f(r[metric]) for r in rows_one_trace])
    order = np.argsort(xs, kind="stable")
    xs, ys = xs[order], ys[order]
    if pct < xs[0] or pct > xs[-1]:
        return float("nan")
    return float(np.interp(pct, xs, ys))


def build_report(out: Path) -> dict[str, list[dict]]:
    """Join traces (and scratch metrics when present) into plot-ready tables under ``report/``."""
    out = Path(out)
    raw = load_traces(out)
    if not raw:
        raise ExperimentError(f"no traces found under {out / 'traces'}")
    rows = add_percent_columns(raw)
    train_path = out / "train_metrics.csv"
    train_rows = read_rows(train_path) if train_path.exists() else []
    base_zip = {int(r["seed"]): int(r["zip_bytes"]) for r in train_rows if r["kind"] == "base"}
    for r in rows:
        if int(r["round"]) == 0:
            base_zip.setdefault(int(r["seed"]), int(r["zip_bytes"]))

    tables = {"long": rows}
    by_trace = defaultdict(list)
    for r in rows:
        if not r.get("error"):
            by_trace[(r["run"], r["level"], int(r["seed"]))].append(r)

    compare = []
    for (level, metric), name in TABLES.items():
        prune_pts = _aggregate_traces(rows, level, metric)
        scratch_pts = _scratch_points(train_rows, base_zip, level, metric)
        tables[name] = prune_pts + [{k: v for k, v in s.items() if not k.startswith("_")} for s in scratch_pts]
        runs = sorted({run for (run, lv, _) in by_trace if lv == level})
        for s in scratch_pts:
            for run in runs:
                pairs = []
                for seed, pct, val in s["_items"]:
                    tr = by_trace.get((run, level, seed))
                    if tr:
                        pv = interpolate_trace(tr, pct, metric)
                        if np.isfinite(pv):
                            pairs.append((val, pv, pct))
                if not pairs:
                    continue
                sv = float(np.mean([p[0] for p in pairs]))
                pv = float(np.mean([p[1] for p in pairs]))
                compare.append({
                    "level": level, "scratch": s["_name"], "amount": s["_amount"], "prune_run": run,
                    "n_seeds": len(pairs), "pct_zip_reduction": float(np.mean([p[2] for p in pairs])),
                    "metric": metric, "scratch_mean": sv, "prune_mean": pv, "delta": sv - pv,
                })
    tables["scratch_vs_prune"] = compare

    rep = out / "report"
    write_rows(rep / "long.csv", LONG_COLUMNS, rows)
    for (level, metric), name in TABLES.items():
        write_rows(rep / f"{name}.csv", CURVE_COLUMNS, tables[name])
    write_rows(rep / "scratch_vs_prune.csv", COMPARE_COLUMNS, compare)
    return tables


# --------------------------------------------------------------------------
# Quantization
# --------------------------------------------------------------------------

QUANT_COLUMNS = [
    "precision", "raw_bytes", "payload_bytes", "zip_bytes", "overflow_count", "auc", "tpr_at_fpr",
    "loss", "accuracy", "delta_auc", "delta_tpr_at_fpr", "payload_ratio",
]


def run_quantize(model_path, out: Path, test_set: Dataset, precision="f16") -> list[dict]:
    from prunekit.compress import quantize

    model = load_model(model_path)
    q = quantize(model, precision)
    out = Path(out)
    target = out / (Path(model_path).stem + f".{precision}.prk")
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(serialize(q, precision))
    rows = []
    ref = None
    for prec, m in (("f32", model), (precision, q)):
        s = measure_sizes(m, prec)
        met = evaluate_model(m, test_set)
        row = {
            "precision": prec, "raw_bytes": s.raw_bytes, "payload_bytes": s.payload_bytes,
            "zip_bytes": s.zip_bytes, "overflow_count": s.overflow_count, "auc": met.auc,
            "tpr_at_fpr": met.tpr_at_fpr, "loss": met.mean_loss, "accuracy": met.accuracy,
        }
        if ref is None:
            ref = row
        row["delta_auc"] = row["auc"] - ref["auc"]
        row["delta_tpr_at_fpr"] = row["tpr_at_fpr"] - ref["tpr_at_fpr"]
        row["payload_ratio"] = row["payload_bytes"] / ref["payload_bytes"]
        rows.append(row)
    write_rows(out / f"{Path(model_path).stem}.quantize.csv", QUANT_COLUMNS, rows)
    return rows
