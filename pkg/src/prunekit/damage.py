"""Damage (saliency) estimates for parameters and neurons.

Parameter-level reports store one ``(out, in + 1)`` array per dense layer: the
weight matrix with the bias appended as a final column.  Flattening that array
row-major gives the canonical ``(layer, row, col)`` tie-breaking order used by
the pruning code.

Second-order estimators work from per-sample diagonal curvature ``h`` of the
loss.  Because ``theta`` is fixed across samples, every statistic of
``h * theta**2`` follows from the per-parameter mean and SD of ``h``, so one
derivative pass (:func:`curvature_stats`) serves OBD, OBD-SD and the
Levenberg-Marquardt surrogate.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

import numpy as np

from prunekit.nn import Batch, Model, NonFiniteError, iter_layer_derivatives, model_loss

METHODS = ("random", "magnitude", "obd", "obd_sd", "lm")


class DamageError(ValueError):
    pass


def augmented_params(model: Model) -> list[np.ndarray]:
    """Per layer ``[W | b]`` in float64, with masked entries at exactly 0."""
    return [
        np.concatenate([l.effective_weight(), l.effective_bias()[:, None]], axis=1).astype(np.float64)
        for l in model.layers
    ]


@dataclass
class DamageReport:
    method: str
    damage: list[np.ndarray]  # per dense layer, (out, in + 1)
    mean: list[np.ndarray] | None = None  # mean of h * theta^2
    sd: list[np.ndarray] | None = None  # sample SD of h * theta^2
    sample_count: int = 0
    seed: int | None = None

    @property
    def shapes(self):
        return [d.shape for d in self.damage]

    def flat_damage(self, layers=None) -> np.ndarray:
        idx = range(len(self.damage)) if layers is None else layers
        return np.concatenate([self.damage[i].ravel() for i in idx])

    def flat_stats(self, layers=None):
        if self.mean is None or self.sd is None:
            return None, None
        idx = range(len(self.damage)) if layers is None else layers
        return (
            np.concatenate([self.mean[i].ravel() for i in idx]),
            np.concatenate([self.sd[i].ravel() for i in idx]),
        )

    def check_matches(self, model: Model):
        want = [(l.weight.shape[0], l.weight.shape[1] + 1) for l in model.layers]
        if self.shapes != want:
            raise DamageError(f"report shapes {self.shapes} do not match model {want}")


@dataclass
class NeuronDamageReport:
    damage: list[np.ndarray]  # per hidden layer, (width,)
    source: str  # "parameter-aggregation" | "dropout-regression"
    method: str = ""

    def check_matches(self, model: Model):
        want = [l.weight.shape[0] for l in model.hidden]
        got = [d.size for d in self.damage]
        if got != want:
            raise DamageError(f"neuron report widths {got} do not match model {want}")


# --------------------------------------------------------------------------
# Zeroth / first-order estimators
# --------------------------------------------------------------------------


def damage_random(model: Model, seed: int) -> DamageReport:
    """Per-layer random permutation ranks, so the lowest ranks form a uniform random subset."""
    if model.param_count < 1:
        raise DamageError("model has no parameters")
    rng = np.random.default_rng(seed)
    damage = []
    for p in augmented_params(model):
        damage.append(rng.permutation(p.size).reshape(p.shape).astype(np.float64))
    return DamageReport("random", damage, seed=seed)


def damage_magnitude(model: Model) -> DamageReport:
    return DamageReport("magnitude", [np.abs(p) for p in augmented_params(model)])


# --------------------------------------------------------------------------
# Curvature-based estimators
# --------------------------------------------------------------------------


@dataclass
class CurvatureStats:
    """Per-parameter moments over samples, each a list of ``(out, in + 1)`` arrays."""

    h_mean: list[np.ndarray]
    h_sd: list[np.ndarray]  # n - 1 denominator (0 when n == 1)
    g2_mean: list[np.ndarray]  # mean of squared per-sample gradients
    g_mean: list[np.ndarray]
    theta: list[np.ndarray]
    n: int


class _Moments:
    """Chunk-wise mean / M2 accumulator (Chan et al. pairwise merge)."""

    def __init__(self):
        self.n = 0
        self.mean = None
        self.m2 = None

    def add(self, x):
        k = x.shape[0]
        cm = x.mean(axis=0)
        # columns that are constant within the chunk get an exact mean (and M2 = 0)
        const = x.min(axis=0) == x.max(axis=0)
        cm = np.where(const, x[0], cm)
        cm2 = np.where(const, 0.0, ((x - cm) ** 2).sum(axis=0))
        if self.n == 0:
            self.n, self.mean, self.m2 = k, cm, cm2
            return
        tot = self.n + k
        delta = cm - self.mean
        self.mean = self.mean + delta * (k / tot)
        self.m2 = self.m2 + cm2 + delta ** 2 * (self.n * k / tot)
        self.n = tot

    def sd(self):
        if self.n < 2:
            return np.zeros_like(self.mean)
        return np.sqrt(self.m2 / (self.n - 1))


def curvature_stats(model: Model, batch: Batch, chunk_size=128, dtype=np.float64) -> CurvatureStats:
    """One derivative pass over ``batch`` with frozen batch-norm (eval mode)."""
    if len(batch) < 1:
        raise DamageError("batch must be nonempty")
    work = model.astype(dtype) if model.dtype != dtype else model
    n_layers = len(work.layers)
    h_acc = [_Moments() for _ in range(n_layers)]
    g_acc = [_Moments() for _ in range(n_layers)]
    g2_sum = [None] * n_layers
    for chunk in iter_layer_derivatives(work, batch, chunk_size, second_order=True):
        for i, d in enumerate(chunk):
            h = np.concatenate([d.hess_w, d.hess_b[:, :, None]], axis=2).astype(np.float64)
            g = np.concatenate([d.grad_w, d.grad_b[:, :, None]], axis=2).astype(np.float64)
            if not (np.isfinite(h).all() and np.isfinite(g).all()):
                raise NonFiniteError(f"non-finite derivatives in layer {i}")
            h_acc[i].add(h)
            g_acc[i].add(g)
            s = (g * g).sum(axis=0)
            g2_sum[i] = s if g2_sum[i] is None else g2_sum[i] + s
    n = len(batch)
    return CurvatureStats(
        h_mean=[a.mean for a in h_acc],
        h_sd=[a.sd() for a in h_acc],
        g2_mean=[s / n for s in g2_sum],
        g_mean=[a.mean for a in g_acc],
        theta=augmented_params(model),
        n=n,
    )


def _stats(model, batch, stats):
    return stats if stats is not None else curvature_stats(model, batch)


def damage_obd(model: Model, batch: Batch | None = None, stats: CurvatureStats | None = None) -> DamageReport:
    """Mean over samples of 0.5 * h * theta^2.

    Also records mean and SD of ``h * theta^2`` (no 0.5 factor) for the
    mean-vs-SD diagnostics.
    """
    st = _stats(model, batch, stats)
    t2 = [t * t for t in st.theta]
    return DamageReport(
        "obd",
        [0.5 * m * t for m, t in zip(st.h_mean, t2)],
        mean=[m * t for m, t in zip(st.h_mean, t2)],
        sd=[s * t for s, t in zip(st.h_sd, t2)],
        sample_count=st.n,
    )


def damage_obd_sd(model: Model, batch: Batch | None = None, stats: CurvatureStats | None = None) -> DamageReport:
    """theta^2 * SD_s(h), sample SD with n - 1 denominator."""
    st = _stats(model, batch, stats)
    if st.n < 2:
        raise DamageError("OBD-SD needs a batch of at least 2 samples")
    t2 = [t * t for t in st.theta]
    return DamageReport(
        "obd_sd",
        [s * t for s, t in zip(st.h_sd, t2)],
        mean=[m * t for m, t in zip(st.h_mean, t2)],
        sd=[s * t for s, t in zip(st.h_sd, t2)],
        sample_count=st.n,
    )


def damage_lm(model: Model, batch: Batch | None = None, stats: CurvatureStats | None = None,
              theta_squared=True) -> DamageReport:
    """Levenberg-Marquardt surrogate: 2 * (dL/dtheta)^2 in place of the curvature.

    With ``theta_squared`` (default) the surrogate is substituted into the OBD
    form, giving mean_s(2 g_s^2 theta^2); otherwise mean_s(2 g_s^2) alone.
    """
    st = _stats(model, batch, stats)
    if theta_squared:
        dmg = [2.0 * g2 * t * t for g2, t in zip(st.g2_mean, st.theta)]
    else:
        dmg = [2.0 * g2 for g2 in st.g2_mean]
    return DamageReport("lm", dmg, sample_count=st.n)


def estimate(method: str, model: Model, batch: Batch | None = None, seed: int = 0,
             stats: CurvatureStats | None = None) -> DamageReport:
    """Dispatch by method name."""
    if method == "random":
        return damage_random(model, seed)
    if method == "magnitude":
        return damage_magnitude(model)
    if method in ("obd", "obd_sd", "lm"):
        if stats is None and batch is None:
            raise DamageError(f"{method} needs a batch")
        return {"obd": damage_obd, "obd_sd": damage_obd_sd, "lm": damage_lm}[method](model, batch, stats)
    raise DamageError(f"unknown damage method {method!r}")


# --------------------------------------------------------------------------
# Neuron level
# --------------------------------------------------------------------------


def aggregate_to_neurons(report: DamageReport, model: Model, include_outgoing=False) -> NeuronDamageReport:
    """Sum each hidden neuron's incoming-weight and bias damages (optionally outgoing weights too)."""
    report.check_matches(model)
    out = []
    for li in range(len(model.hidden)):
        d = report.damage[li].sum(axis=1)
        if include_outgoing:
            d = d + report.damage[li + 1][:, :-1].sum(axis=0)
        out.append(d)
    return NeuronDamageReport(out, "parameter-aggregation", report.method)


@dataclass
class DropoutRegressionConfig:
    batch: Batch
    rounds: int | None = None  # default 5 x scored neurons
    dropout_rate: float = 0.2
    ridge_lambda: float = 1e-6
    seed: int = 0
    design: str = "bernoulli"  # or "enumerate": every drop pattern exactly once
    layers: tuple[int, ...] | None = None  # hidden layers to score; default all


def _drop_design(cfg, k, rng):
    if cfg.design == "enumerate":
        if k > 20:
            raise DamageError("enumerate design limited to 20 neurons")
        return np.array(list(itertools.product((0, 1), repeat=k)), dtype=np.float64)
    if cfg.design != "bernoulli":
        raise DamageError(f"unknown design {cfg.design!r}")
    d = cfg.rounds if cfg.rounds is not None else 5 * k
    if d < k + 1:
        raise DamageError(f"need at least {k + 1} dropout rounds for {k} neurons, got {d}")
    return (rng.random((d, k)) < cfg.dropout_rate).astype(np.float64)


def fit_drop_regression(dropped: np.ndarray, losses: np.ndarray, ridge_lambda: float) -> tuple[float, np.ndarray]:
    """Least squares ``loss ~ b0 + dropped @ beta`` with an unpenalised intercept."""
    xm, ym = dropped.mean(axis=0), losses.mean()
    xc, yc = dropped - xm, losses - ym
    gram = xc.T @ xc
    k = gram.shape[0]
    if ridge_lambda == 0:
        if np.linalg.matrix_rank(gram) < k:
            raise DamageError("singular regression design; use ridge_lambda > 0")
    elif ridge_lambda < 0:
        raise DamageError("ridge_lambda must be >= 0")
    beta = np.linalg.solve(gram + ridge_lambda * np.eye(k), xc.T @ yc)
    return float(ym - xm @ beta), beta


def damage_dropout_regression(model: Model, config: DropoutRegressionConfig) -> NeuronDamageReport:
    """Regress mean batch loss on random neuron-drop indicators; damage = coefficient.

    Dropped units have their activations zeroed with no rescaling, and
    batch-norm stays in eval mode.
    """
    if not 0.0 < config.dropout_rate < 1.0 and config.design == "bernoulli":
        raise DamageError("dropout_rate must be in (0, 1)")
    hidden = model.hidden
    scored = tuple(range(len(hidden))) if config.layers is None else tuple(config.layers)
    widths = [l.weight.shape[0] for l in hidden]
    offsets = np.cumsum([0] + [widths[i] for i in scored])
    k = int(offsets[-1])
    if k < 1:
        raise DamageError("no neurons to score")
    rng = np.random.default_rng(config.seed)
    dropped = _drop_design(config, k, rng)
    losses = np.empty(dropped.shape[0])
    for r, row in enumerate(dropped):
        keep = [np.ones(w) for w in widths]
        for j, li in enumerate(scored):
            keep[li] = 1.0 - row[offsets[j]:offsets[j + 1]]
        losses[r] = model_loss(model, config.batch, neuron_keep=keep).astype(np.float64).mean()
    _, beta = fit_drop_regression(dropped, losses, config.ridge_lambda)
    out = [np.zeros(w) for w in widths]
    for j, li in enumerate(scored):
        out[li] = beta[offsets[j]:offsets[j + 1]]
    return NeuronDamageReport(out, "dropout-regression", "dropout")


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------


def write_damage_csv(report: DamageReport, path):
    """Columns ``layer,row,col,damage,mean,sd``; the bias column is written as ``b``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "row", "col", "damage", "mean", "sd"])
        for li, d in enumerate(report.damage):
            rows, cols = d.shape
            for r in range(rows):
                for c in range(cols):
                    mean = "" if report.mean is None else repr(float(report.mean[li][r, c]))
                    sd = "" if report.sd is None else repr(float(report.sd[li][r, c]))
                    w.writerow([li, r, "b" if c == cols - 1 else c, repr(float(d[r, c])), mean, sd])


def read_damage_csv(path, method="") -> DamageReport:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    layers = {}
    for row in rows:
        layers.setdefault(int(row["layer"]), []).append(row)
    damage, mean, sd = [], [], []
    has_stats = bool(rows) and rows[0]["mean"] != ""
    for li in sorted(layers):
        entries = layers[li]
        n_rows = max(int(e["row"]) for e in entries) + 1
        n_cols = len(entries) // n_rows
        d, m, s = (np.zeros((n_rows, n_cols)) for _ in range(3))
        for e in entries:
            r = int(e["row"])
            c = n_cols - 1 if e["col"] == "b" else int(e["col"])
            d[r, c] = float(e["damage"])
            if has_stats:
                m[r, c], s[r, c] = float(e["mean"]), float(e["sd"])
        damage.append(d)
        mean.append(m)
        sd.append(s)
    return DamageReport(method, damage, mean if has_stats else None, sd if has_stats else None)


def write_neuron_csv(report: NeuronDamageReport, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "neuron", "damage"])
        for li, d in enumerate(report.damage):
            for j, v in enumerate(d):
                w.writerow([li, j, repr(float(v))])
