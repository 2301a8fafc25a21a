"""Pruning operations and the iterative prune / fine-tune protocol.

Only hidden layers are ever pruned; the output layer is left intact.  Ties in
damage are broken by ascending (layer, row, col) order, with a layer's bias
treated as the column after its last weight.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from prunekit import damage as dmg
from prunekit.compress import measure_sizes
from prunekit.data import Dataset, resample
from prunekit.metrics import evaluate_model, v_shape_stats
from prunekit.nn import (
    Model,
    ModelSpec,
    NonFiniteError,
    TrainConfig,
    TrainingDivergence,
    init_random,
    train,
)

log = logging.getLogger(__name__)

NEURON_METHODS = dmg.METHODS + ("dropout", "merge")


class PruneError(ValueError):
    pass


def removal_count(n: int, p: float) -> int:
    """floor(p * n), tolerant of float error such as 0.1 * 70 = 7.000000000000001."""
    return int(math.floor(p * n + 1e-9))


def _check_fraction(p):
    if not 0.0 < p < 1.0:
        raise PruneError(f"pruning fraction must be in (0, 1), got {p}")


# --------------------------------------------------------------------------
# Parameter level
# --------------------------------------------------------------------------


def _kept_aug(layer):
    w = layer.weight_mask if layer.weight_mask is not None else np.ones(layer.weight.shape, bool)
    b = layer.bias_mask if layer.bias_mask is not None else np.ones(layer.bias.shape, bool)
    return np.concatenate([w, b[:, None]], axis=1)


def _set_kept_aug(layer, kept):
    layer.weight_mask = kept[:, :-1].copy()
    layer.bias_mask = kept[:, -1].copy()
    layer.apply_mask()


def prune_parameters(model: Model, report: dmg.DamageReport, p: float, scope="per-layer",
                     include_bias=True) -> Model:
    """Mask the lowest-damage unmasked parameters of every hidden layer.

    Per-layer scope masks floor(p * remaining) entries in each layer; global
    scope pools all hidden layers and masks floor(p * total remaining).
    """
    _check_fraction(p)
    report.check_matches(model)
    out = model.copy()
    n_hidden = len(out.hidden)
    kept = [_kept_aug(l) for l in out.hidden]
    eligible = []
    for k in kept:
        e = k.copy()
        if not include_bias:
            e[:, -1] = False
        eligible.append(e)

    if scope == "per-layer":
        for li in range(n_hidden):
            flat_ok = eligible[li].ravel()
            n_remove = removal_count(int(flat_ok.sum()), p)
            if n_remove == 0:
                continue
            cand = np.flatnonzero(flat_ok)
            d = report.damage[li].ravel()[cand]
            chosen = cand[np.argsort(d, kind="stable")[:n_remove]]
            k = kept[li].ravel()
            k[chosen] = False
    elif scope == "global":
        cands, dams = [], []
        for li in range(n_hidden):
            c = np.flatnonzero(eligible[li].ravel())
            cands.append(np.stack([np.full(c.size, li), c], axis=1))
            dams.append(report.damage[li].ravel()[c])
        cands = np.concatenate(cands)
        dams = np.concatenate(dams)
        n_remove = removal_count(len(dams), p)
        for li, idx in cands[np.argsort(dams, kind="stable")[:n_remove]]:
            kept[li].ravel()[idx] = False
    else:
        raise PruneError(f"unknown scope {scope!r}")

    for layer, k in zip(out.hidden, kept):
        _set_kept_aug(layer, k)
    return out


# --------------------------------------------------------------------------
# Neuron level
# --------------------------------------------------------------------------


def remove_neurons(model: Model, keep: list[np.ndarray]) -> Model:
    """Structurally keep only the listed neurons of each hidden layer.

    Drops each removed neuron's weight row, bias and batch-norm entries, and
    the matching column of the following layer.
    """
    if len(keep) != len(model.hidden):
        raise PruneError("need one keep-index array per hidden layer")
    out = model.copy()
    for li, idx in enumerate(keep):
        idx = np.sort(np.asarray(idx, dtype=int))
        if idx.size == 0:
            raise PruneError(f"hidden layer {li} would be emptied")
        layer, nxt = out.layers[li], out.layers[li + 1]
        layer.weight = layer.weight[idx].copy()
        layer.bias = layer.bias[idx].copy()
        if layer.weight_mask is not None:
            layer.weight_mask = layer.weight_mask[idx].copy()
        if layer.bias_mask is not None:
            layer.bias_mask = layer.bias_mask[idx].copy()
        if layer.bn is not None:
            layer.bn = layer.bn.take(idx)
        nxt.weight = nxt.weight[:, idx].copy()
        if nxt.weight_mask is not None:
            nxt.weight_mask = nxt.weight_mask[:, idx].copy()
    out.spec = out.spec.with_widths([l.weight.shape[0] for l in out.hidden])
    return out


def neurons_to_remove(width: int, p: float) -> int:
    """floor(p * width), but at least one neuron so every round shrinks the layer."""
    return max(1, removal_count(width, p))


def default_penalty(damages) -> float:
    allv = np.concatenate([np.ravel(d) for d in damages])
    return 0.01 * float(np.median(np.abs(allv))) if allv.size else 0.0


def global_neuron_selection(damages: list[np.ndarray], n_remove: int, layer_floor: int = 1,
                            base_widths=None, penalty: float | None = None) -> list[np.ndarray]:
    """Greedy global removal with a per-layer scarcity penalty.

    Each step removes the neuron minimising
    ``damage + penalty * base_width / remaining_width`` over layers still above
    ``layer_floor``; the penalty term grows as a layer empties.  Returns the
    surviving indices per layer.
    """
    if layer_floor < 1:
        raise PruneError("layer_floor must be >= 1")
    widths = [d.size for d in damages]
    base = list(widths if base_widths is None else base_widths)
    lam = default_penalty(damages) if penalty is None else penalty
    order = [np.argsort(d, kind="stable") for d in damages]
    ptr = [0] * len(damages)
    remaining = list(widths)
    for _ in range(n_remove):
        best, best_li = None, None
        for li, d in enumerate(damages):
            if remaining[li] <= layer_floor:
                continue
            score = d[order[li][ptr[li]]] + lam * base[li] / remaining[li]
            if best is None or score < best:
                best, best_li = score, li
        if best_li is None:
            break
        ptr[best_li] += 1
        remaining[best_li] -= 1
    return [np.sort(o[p:]) for o, p in zip(order, ptr)]


def prune_neurons(model: Model, report: dmg.NeuronDamageReport, p: float, scope="per-layer",
                  layer_floor: int = 1, base_widths=None, penalty=None) -> Model:
    _check_fraction(p)
    report.check_matches(model)
    if scope == "per-layer":
        keep = []
        for li, d in enumerate(report.damage):
            r = neurons_to_remove(d.size, p)
            if r >= d.size:
                raise PruneError(f"pruning would empty hidden layer {li} (width {d.size})")
            keep.append(np.sort(np.argsort(d, kind="stable")[r:]))
    elif scope == "global":
        total = sum(d.size for d in report.damage)
        keep = global_neuron_selection(report.damage, removal_count(total, p), layer_floor,
                                       base_widths, penalty)
    else:
        raise PruneError(f"unknown scope {scope!r}")
    return remove_neurons(model, keep)


def closest_pair(vecs: np.ndarray) -> tuple[int, int]:
    """Indices (i < j) of the closest rows by Euclidean distance; ties go to the smallest (i, j)."""
    vecs = np.asarray(vecs, dtype=np.float64)
    diff = vecs[:, None, :] - vecs[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=2))
    iu = np.triu_indices(len(vecs), k=1)
    k = int(np.argmin(d[iu]))
    return int(iu[0][k]), int(iu[1][k])


def merge_neurons(model: Model, layer_index: int, merge_count: int, outgoing="sum") -> Model:
    """Repeatedly merge the two closest neurons of one hidden layer.

    Distance is Euclidean over incoming weights plus bias and is recomputed
    after every merge.  The kept (lower-index) neuron takes the average of the
    pair's incoming parameters and batch-norm entries.  With ``outgoing="sum"``
    it also takes the sum of both outgoing weight columns, which leaves the
    function unchanged when the pair is identical; ``"drop"`` discards the
    removed neuron's outgoing weights instead.
    """
    if outgoing not in ("sum", "drop"):
        raise PruneError("outgoing must be 'sum' or 'drop'")
    if not 0 <= layer_index < len(model.hidden):
        raise PruneError("only hidden layers can be merged")
    out = model.copy()
    layer, nxt = out.layers[layer_index], out.layers[layer_index + 1]
    width = layer.weight.shape[0]
    if merge_count < 0 or merge_count > width - 1:
        raise PruneError(f"cannot merge {merge_count} times in a layer of width {width}")
    for _ in range(merge_count):
        vecs = np.concatenate([layer.effective_weight(), layer.effective_bias()[:, None]], axis=1)
        i, j = closest_pair(vecs)
        layer.weight[i] = (layer.weight[i] + layer.weight[j]) / 2
        layer.bias[i] = (layer.bias[i] + layer.bias[j]) / 2
        if layer.weight_mask is not None:
            layer.weight_mask[i] |= layer.weight_mask[j]
        if layer.bias_mask is not None:
            layer.bias_mask[i] |= layer.bias_mask[j]
        if layer.bn is not None:
            for a in layer.bn.arrays():
                a[i] = (a[i] + a[j]) / 2
        if outgoing == "sum":
            nxt.weight[:, i] += nxt.weight[:, j]
            if nxt.weight_mask is not None:
                nxt.weight_mask[:, i] |= nxt.weight_mask[:, j]
        keep = [np.arange(l.weight.shape[0]) for l in out.hidden]
        keep[layer_index] = np.delete(keep[layer_index], j)
        out = remove_neurons(out, keep)
        layer, nxt = out.layers[layer_index], out.layers[layer_index + 1]
    return out


# --------------------------------------------------------------------------
# Iterative protocol
# --------------------------------------------------------------------------


@dataclass
class PruneSchedule:
    level: str = "parameter"  # or "neuron"
    method: str = "magnitude"
    fraction: float = 0.10
    rounds: int = 10
    finetune_epochs: int = 1
    finetune_samples: int | None = None  # None: the whole training set
    scope: str = "per-layer"
    layer_floor: int = 1
    seed: int = 0
    damage_samples: int = 1024
    learning_rate: float = 0.01
    batch_size: int = 64
    include_bias: bool = True
    include_outgoing: bool = False
    recompute_damage: bool = True
    merge_outgoing: str = "sum"
    dropout_rate: float = 0.2
    dropout_ridge: float = 1e-6
    dropout_samples: int = 512

    def validate(self):
        if self.level not in ("parameter", "neuron"):
            raise PruneError(f"level must be 'parameter' or 'neuron', got {self.level!r}")
        allowed = dmg.METHODS if self.level == "parameter" else NEURON_METHODS
        if self.method not in allowed:
            raise PruneError(f"method {self.method!r} not available at {self.level} level")
        _check_fraction(self.fraction)
        if self.rounds < 0:
            raise PruneError("rounds must be >= 0")
        if self.scope not in ("per-layer", "global"):
            raise PruneError(f"unknown scope {self.scope!r}")
        if self.scope == "global" and self.layer_floor < 1:
            raise PruneError("global scope needs layer_floor >= 1")
        if self.method == "merge" and self.scope != "per-layer":
            raise PruneError("merge pruning is per-layer only")


TRACE_COLUMNS = [
    "round", "method", "level", "params", "neurons_per_layer", "raw_bytes", "zip_bytes",
    "auc", "tpr_at_fpr", "loss", "accuracy", "seed", "error",
]


@dataclass
class TraceRow:
    round: int
    method: str
    level: str
    params: int
    neurons_per_layer: tuple
    raw_bytes: int
    zip_bytes: int
    auc: float
    tpr_at_fpr: float
    loss: float
    accuracy: float
    seed: int
    error: str = ""

    def as_csv_row(self):
        return [
            self.round, self.method, self.level, self.params,
            "-".join(str(w) for w in self.neurons_per_layer), self.raw_bytes, self.zip_bytes,
            repr(self.auc), repr(self.tpr_at_fpr), repr(self.loss), repr(self.accuracy),
            self.seed, self.error,
        ]


@dataclass
class PruneTrace:
    rows: list[TraceRow] = field(default_factory=list)
    vshape: list[dict] = field(default_factory=list)
    model: Model | None = None  # final model
    error: str = ""


def _row(model, schedule, rnd, eval_set, error=""):
    m = evaluate_model(model, eval_set)
    s = measure_sizes(model, "f32")
    return TraceRow(
        rnd, schedule.method, schedule.level, model.unmasked_count(), model.spec.widths,
        s.raw_bytes, s.zip_bytes, m.auc, m.tpr_at_fpr, m.mean_loss, m.accuracy, schedule.seed, error,
    )


def _parameter_report(model, schedule, dataset, rnd):
    batch = None
    if schedule.method in ("obd", "obd_sd", "lm"):
        n = min(schedule.damage_samples, len(dataset))
        batch = resample(dataset, n, [schedule.seed, rnd, 1]).as_batch()
    return dmg.estimate(schedule.method, model, batch, seed=schedule.seed * 100_003 + rnd)


def _neuron_report(model, schedule, dataset, rnd):
    if schedule.method == "dropout":
        n = min(schedule.dropout_samples, len(dataset))
        batch = resample(dataset, n, [schedule.seed, rnd, 1]).as_batch()
        cfg = dmg.DropoutRegressionConfig(batch, None, schedule.dropout_rate, schedule.dropout_ridge,
                                          seed=schedule.seed * 100_003 + rnd)
        return None, dmg.damage_dropout_regression(model, cfg)
    rep = _parameter_report(model, schedule, dataset, rnd)
    return rep, dmg.aggregate_to_neurons(rep, model, schedule.include_outgoing)


def prune_finetune_loop(model: Model, schedule: PruneSchedule, dataset: Dataset, eval_set: Dataset) -> PruneTrace:
    """Round 0 is the untouched baseline; each later round prunes, fine-tunes, evaluates."""
    schedule.validate()
    trace = PruneTrace()
    current = model.copy()
    trace.rows.append(_row(current, schedule, 0, eval_set))
    base_widths = current.spec.widths
    orig_idx = [np.arange(w) for w in base_widths]
    fixed_report = fixed_neuron = None

    for rnd in range(1, schedule.rounds + 1):
        try:
            if schedule.level == "parameter":
                if schedule.recompute_damage or fixed_report is None:
                    report = _parameter_report(current, schedule, dataset, rnd)
                    fixed_report = report
                else:
                    report = fixed_report
                if report.mean is not None:
                    trace.vshape.append({"round": rnd, **v_shape_stats(report).__dict__})
                current = prune_parameters(current, report, schedule.fraction, schedule.scope,
                                           schedule.include_bias)
            elif schedule.method == "merge":
                for li, w in enumerate(current.spec.widths):
                    r = neurons_to_remove(w, schedule.fraction)
                    if r >= w:
                        raise PruneError(f"pruning would empty hidden layer {li} (width {w})")
                    current = merge_neurons(current, li, r, schedule.merge_outgoing)
            else:
                if schedule.recompute_damage or fixed_neuron is None:
                    rep, nrep = _neuron_report(current, schedule, dataset, rnd)
                    if rep is not None and rep.mean is not None:
                        trace.vshape.append({"round": rnd, **v_shape_stats(rep).__dict__})
                    if fixed_neuron is None:
                        fixed_neuron = nrep
                else:
                    nrep = dmg.NeuronDamageReport(
                        [fixed_neuron.damage[li][orig_idx[li]] for li in range(len(orig_idx))],
                        fixed_neuron.source, fixed_neuron.method,
                    )
                current = prune_neurons(current, nrep, schedule.fraction, schedule.scope,
                                        schedule.layer_floor, base_widths)
                # track which original neurons survive, for reused reports
                orig_idx = _surviving(orig_idx, nrep, schedule, base_widths)

            sub = dataset
            if schedule.finetune_samples is not None:
                sub = resample(dataset, min(schedule.finetune_samples, len(dataset)), [schedule.seed, rnd, 2])
            cfg = TrainConfig(schedule.finetune_epochs, schedule.batch_size, schedule.learning_rate,
                              seed=int(np.random.SeedSequence([schedule.seed, rnd, 3]).generate_state(1)[0]))
            current = train(current, sub, cfg)
            trace.rows.append(_row(current, schedule, rnd, eval_set))
        except (TrainingDivergence, NonFiniteError) as e:
            msg = f"round {rnd}: {e}"
            log.error("prune loop stopped: %s", msg)
            trace.error = msg
            last = trace.rows[-1]
            trace.rows.append(TraceRow(rnd, schedule.method, schedule.level, last.params,
                                       last.neurons_per_layer, last.raw_bytes, last.zip_bytes,
                                       float("nan"), float("nan"), float("nan"), float("nan"),
                                       schedule.seed, msg))
            break
    trace.model = current
    return trace


def _surviving(orig_idx, nrep, schedule, base_widths):
    if schedule.recompute_damage:
        return orig_idx
    # Re-derive which indices were kept by repeating the deterministic selection.
    if schedule.scope == "per-layer":
        keep = [np.sort(np.argsort(d, kind="stable")[neurons_to_remove(d.size, schedule.fraction):])
                for d in nrep.damage]
    else:
        total = sum(d.size for d in nrep.damage)
        keep = global_neuron_selection(nrep.damage, removal_count(total, schedule.fraction),
                                       schedule.layer_floor, base_widths)
    return [o[k] for o, k in zip(orig_idx, keep)]


def write_trace_csv(trace: PruneTrace, path):
    import csv
    from pathlib import Path

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for r in trace.rows:
            w.writerow(r.as_csv_row())


# --------------------------------------------------------------------------
# From-scratch architectures
# --------------------------------------------------------------------------


@dataclass
class ScratchArchitecture:
    spec: ModelSpec
    mode: str
    amount: float
    connection_fraction: float = 0.0


def derive_scratch_architectures(base: ModelSpec, mode: str, amounts=None, report=None,
                                 layer_floor: int = 1, penalty=None) -> list[ScratchArchitecture]:
    """Smaller architectures to train from random initialisation.

    * ``fixed-neuron-fraction``: every hidden width scaled by (1 - amount).
    * ``fixed-connection-fraction``: same widths; ``amount`` of each hidden
      weight matrix is masked at initialisation (see :func:`build_scratch_model`).
    * ``from-neuron-report``: widths surviving a global removal of ``amount``
      of all hidden neurons ranked by ``report``.
    """
    if amounts is None:
        raise PruneError("amounts required")
    amounts = [amounts] if np.isscalar(amounts) else list(amounts)
    out = []
    for a in amounts:
        if not 0.0 <= a < 1.0:
            raise PruneError(f"amount must be in [0, 1), got {a}")
        if mode == "fixed-neuron-fraction":
            widths = [int(math.floor(w * (1 - a) + 1e-9)) for w in base.widths]
            if min(widths, default=1) < 1:
                raise PruneError(f"amount {a} produces a zero-width layer")
            out.append(ScratchArchitecture(base.with_widths(widths), mode, a))
        elif mode == "fixed-connection-fraction":
            out.append(ScratchArchitecture(base, mode, a, connection_fraction=a))
        elif mode == "from-neuron-report":
            if report is None:
                raise PruneError("from-neuron-report mode needs a neuron damage report")
            if [d.size for d in report.damage] != list(base.widths):
                raise PruneError("neuron report does not match the base architecture")
            total = sum(base.widths)
            keep = global_neuron_selection(report.damage, removal_count(total, a), layer_floor,
                                           base.widths, penalty)
            out.append(ScratchArchitecture(base.with_widths([k.size for k in keep]), mode, a))
        else:
            raise PruneError(f"unknown scratch mode {mode!r}")
    return out


def build_scratch_model(arch: ScratchArchitecture, seed: int) -> Model:
    """Randomly initialised model; connection-fraction masks are fixed here and kept through training."""
    model = init_random(arch.spec, seed)
    if arch.connection_fraction > 0:
        rng = np.random.default_rng([seed, 7])
        for layer in model.hidden:
            n = layer.weight.size
            k = removal_count(n, arch.connection_fraction)
            mask = np.ones(n, dtype=bool)
            mask[rng.choice(n, size=k, replace=False)] = False
            layer.weight_mask = mask.reshape(layer.weight.shape)
            layer.bias_mask = np.ones(layer.bias.shape, dtype=bool)
            layer.apply_mask()
    return model


def amount_for_zip_target(base: ModelSpec, mode: str, target_ratio: float, seed: int = 0,
                          report=None, tol=1e-3) -> float:
    """Bisect the scratch ``amount`` whose zipped size is ``target_ratio`` of the base model's."""
    base_zip = measure_sizes(init_random(base, seed)).zip_bytes

    def ratio(a):
        arch = derive_scratch_architectures(base, mode, a, report)[0]
        return measure_sizes(build_scratch_model(arch, seed)).zip_bytes / base_zip

    lo, hi = 0.0, 0.99
    while hi - lo > tol:
        mid = (lo + hi) / 2
        try:
            r = ratio(mid)
        except PruneError:
            hi = mid
            continue
        if r > target_ratio:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2
