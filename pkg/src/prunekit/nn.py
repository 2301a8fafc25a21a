"""Dense feed-forward network with exact per-sample first and diagonal second derivatives.

The network is a stack of fully connected hidden layers (optionally followed by
batch-norm and dropout) and a single-unit output layer.  A sigmoid output is
trained with binary cross-entropy; an identity output uses squared error, which
is mostly useful for building analytically tractable test models.

Parameters that the derivative and pruning code knows about are the dense
weights and biases.  Batch-norm affine terms are trained but never pruned, and
are frozen (running statistics) whenever derivatives are taken.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

ACTIVATIONS = ("elu", "relu", "identity")
OUTPUT_ACTIVATIONS = ("sigmoid", "identity")
SCORE_EPS = 1e-7
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

# Full-size hidden widths; desk runs scale them by 1/8.
FULL_WIDTHS = (1024, 768, 512, 512, 512)
DESK_SCALE = 1 / 8


class NonFiniteError(FloatingPointError):
    """Raised when a forward or derivative pass produces NaN or Inf."""


class TrainingDivergence(RuntimeError):
    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


# --------------------------------------------------------------------------
# Specs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class HiddenLayerSpec:
    width: int
    activation: str = "elu"
    has_batchnorm: bool = False
    dropout_rate: float = 0.0


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_layers: tuple[HiddenLayerSpec, ...] = ()
    output_width: int = 1
    output_activation: str = "sigmoid"

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(self.hidden_layers))
        self.validate()

    def validate(self):
        if int(self.input_dim) < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        for i, h in enumerate(self.hidden_layers):
            if int(h.width) < 1:
                raise ValueError(f"hidden layer {i}: width must be >= 1, got {h.width}")
            if h.activation not in ACTIVATIONS:
                raise ValueError(f"hidden layer {i}: unknown activation {h.activation!r}")
            if not 0.0 <= h.dropout_rate < 1.0:
                raise ValueError(f"hidden layer {i}: dropout_rate must be in [0, 1)")
        if self.output_width != 1:
            raise ValueError("only a single output unit is supported")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(h.width for h in self.hidden_layers)

    @property
    def loss_kind(self) -> str:
        return "bce" if self.output_activation == "sigmoid" else "squared"

    def with_widths(self, widths: Sequence[int]) -> "ModelSpec":
        if len(widths) != len(self.hidden_layers):
            raise ValueError("number of widths must match number of hidden layers")
        layers = tuple(replace(h, width=int(w)) for h, w in zip(self.hidden_layers, widths))
        return replace(self, hidden_layers=layers)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_layers": [
                {
                    "width": h.width,
                    "activation": h.activation,
                    "has_batchnorm": h.has_batchnorm,
                    "dropout_rate": h.dropout_rate,
                }
                for h in self.hidden_layers
            ],
            "output": {"width": self.output_width, "activation": self.output_activation},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        out = d.get("output", {})
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_layers=tuple(HiddenLayerSpec(**h) for h in d.get("hidden_layers", [])),
            output_width=int(out.get("width", 1)),
            output_activation=out.get("activation", "sigmoid"),
        )

    @classmethod
    def desk_default(
        cls,
        input_dim: int,
        scale: float = DESK_SCALE,
        activation: str = "elu",
        has_batchnorm: bool = True,
        dropout_rate: float = 0.0,
    ) -> "ModelSpec":
        widths = [max(1, int(round(w * scale))) for w in FULL_WIDTHS]
        return cls(
            input_dim=input_dim,
            hidden_layers=tuple(
                HiddenLayerSpec(w, activation, has_batchnorm, dropout_rate) for w in widths
            ),
        )


# --------------------------------------------------------------------------
# Model containers
# --------------------------------------------------------------------------


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray

    def scale_shift(self):
        """Eval-mode affine form ``s * z + t``."""
        s = self.gamma / np.sqrt(self.running_var + BN_EPS)
        return s, self.beta - s * self.running_mean

    def arrays(self):
        return [self.gamma, self.beta, self.running_mean, self.running_var]

    def take(self, idx) -> "BatchNorm":
        return BatchNorm(*(a[idx].copy() for a in self.arrays()))


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str
    bn: BatchNorm | None = None
    dropout_rate: float = 0.0
    weight_mask: np.ndarray | None = None  # True = parameter kept
    bias_mask: np.ndarray | None = None

    @property
    def shape(self):
        return self.weight.shape

    def effective_weight(self):
        if self.weight_mask is None:
            return self.weight
        return np.where(self.weight_mask, self.weight, 0).astype(self.weight.dtype)

    def effective_bias(self):
        if self.bias_mask is None:
            return self.bias
        return np.where(self.bias_mask, self.bias, 0).astype(self.bias.dtype)

    def apply_mask(self):
        if self.weight_mask is not None:
            self.weight[~self.weight_mask] = 0
        if self.bias_mask is not None:
            self.bias[~self.bias_mask] = 0


@dataclass
class Model:
    spec: ModelSpec
    layers: list[DenseLayer] = field(default_factory=list)

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    @property
    def hidden(self) -> list[DenseLayer]:
        return self.layers[:-1]

    @property
    def output(self) -> DenseLayer:
        return self.layers[-1]

    @property
    def param_count(self) -> int:
        """Number of dense weights and biases (the derivative/pruning parameter set)."""
        return sum(l.weight.size + l.bias.size for l in self.layers)

    @property
    def has_masks(self) -> bool:
        return any(l.weight_mask is not None or l.bias_mask is not None for l in self.layers)

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Model":
        m = self.copy()
        for l in m.layers:
            l.weight = l.weight.astype(dtype)
            l.bias = l.bias.astype(dtype)
            if l.bn is not None:
                l.bn = BatchNorm(*(a.astype(dtype) for a in l.bn.arrays()))
        return m

    def with_full_masks(self) -> "Model":
        """Copy with all-ones masks attached to every layer that lacks one."""
        m = self.copy()
        for l in m.layers:
            if l.weight_mask is None:
                l.weight_mask = np.ones(l.weight.shape, dtype=bool)
            if l.bias_mask is None:
                l.bias_mask = np.ones(l.bias.shape, dtype=bool)
        return m

    def drop_masks(self) -> "Model":
        m = self.copy()
        for l in m.layers:
            l.apply_mask()
            l.weight_mask = None
            l.bias_mask = None
        return m

    def flat_params(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.weight.ravel(), l.bias]) for l in self.layers])

    def set_flat_params(self, flat: np.ndarray) -> "Model":
        m = self.copy()
        pos = 0
        for l in m.layers:
            nw = l.weight.size
            l.weight = flat[pos:pos + nw].reshape(l.weight.shape).astype(l.weight.dtype)
            pos += nw
            l.bias = flat[pos:pos + l.bias.size].astype(l.bias.dtype)
            pos += l.bias.size
        if pos != flat.size:
            raise ValueError(f"expected {pos} parameters, got {flat.size}")
        return m

    def param_offsets(self) -> list[int]:
        offs, pos = [], 0
        for l in self.layers:
            offs.append(pos)
            pos += l.weight.size + l.bias.size
        return offs

    def unmasked_count(self, hidden_only=False) -> int:
        layers = self.hidden if hidden_only else self.layers
        total = 0
        for l in layers:
            total += int(l.weight_mask.sum()) if l.weight_mask is not None else l.weight.size
            total += int(l.bias_mask.sum()) if l.bias_mask is not None else l.bias.size
        return total


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features))
        self.labels = np.asarray(self.labels).ravel()
        if self.features.shape[0] < 1:
            raise ValueError("batch must contain at least one sample")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )

    def __len__(self):
        return self.features.shape[0]


@dataclass
class PerSampleDerivatives:
    """Per-sample derivatives in flat parameter order (layer by layer, weights row-major then bias)."""

    grad: np.ndarray  # (n, P)
    hess: np.ndarray | None  # (n, P) diagonal second derivatives
    n: int


@dataclass
class LayerDerivatives:
    """Per-sample derivatives for one dense layer over a chunk of samples."""

    grad_w: np.ndarray  # (n, out, in)
    grad_b: np.ndarray  # (n, out)
    hess_w: np.ndarray | None = None
    hess_b: np.ndarray | None = None


# --------------------------------------------------------------------------
# Construction
# --------------------------------------------------------------------------


def init_random(spec: ModelSpec, seed: int, dtype=np.float32) -> Model:
    """Glorot-uniform weights, zero biases, identity batch-norm."""
    spec.validate()
    rng = np.random.default_rng(seed)
    layers = []
    fan_in = spec.input_dim
    for h in spec.hidden_layers:
        layers.append(_new_layer(rng, fan_in, h.width, h.activation, h.has_batchnorm, h.dropout_rate, dtype))
        fan_in = h.width
    layers.append(_new_layer(rng, fan_in, spec.output_width, spec.output_activation, False, 0.0, dtype))
    return Model(spec, layers)


def _new_layer(rng, fan_in, fan_out, activation, has_bn, dropout, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype)
    bn = None
    if has_bn:
        bn = BatchNorm(
            np.ones(fan_out, dtype), np.zeros(fan_out, dtype),
            np.zeros(fan_out, dtype), np.ones(fan_out, dtype),
        )
    return DenseLayer(w, np.zeros(fan_out, dtype), activation, bn, dropout)


# --------------------------------------------------------------------------
# Activations
# --------------------------------------------------------------------------


def _act(name, v):
    if name == "elu":
        return np.where(v > 0, v, np.expm1(np.minimum(v, 0)))
    if name == "relu":
        return np.maximum(v, 0)
    return v


def _act_d1(name, v):
    if name == "elu":
        return np.where(v > 0, 1.0, np.exp(np.minimum(v, 0))).astype(v.dtype)
    if name == "relu":
        return (v > 0).astype(v.dtype)
    return np.ones_like(v)


def _act_d2(name, v):
    # ELU at exactly 0 takes the left limit e^0 = 1; RELU curvature is 0 everywhere.
    if name == "elu":
        return np.where(v > 0, 0.0, np.exp(np.minimum(v, 0))).astype(v.dtype)
    return np.zeros_like(v)


def sigmoid(u):
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    e = np.exp(u[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# --------------------------------------------------------------------------
# Forward / loss
# --------------------------------------------------------------------------


def _check_features(model, features):
    x = np.asarray(features, dtype=model.dtype)
    if x.ndim != 2 or x.shape[1] != model.spec.input_dim:
        raise ValueError(
            f"feature width {x.shape[-1] if x.ndim else '?'} does not match input_dim {model.spec.input_dim}"
        )
    return x


def forward_logits(model: Model, features, mode="eval", rng=None, neuron_keep=None) -> np.ndarray:
    """Pre-output-activation values, shape (n,).

    ``neuron_keep`` optionally gives one boolean/0-1 array per hidden layer (shape
    (width,) or (n, width)); dropped units have their activation zeroed with no
    rescaling.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    a = _check_features(model, features)
    if mode == "train" and rng is None:
        rng = np.random.default_rng(0)
    for li, layer in enumerate(model.hidden):
        z = a @ layer.effective_weight().T + layer.effective_bias()
        if layer.bn is not None:
            if mode == "eval":
                s, t = layer.bn.scale_shift()
                z = z * s + t
            else:
                mu, var = z.mean(axis=0), z.var(axis=0)
                z = (z - mu) / np.sqrt(var + BN_EPS) * layer.bn.gamma + layer.bn.beta
        a = _act(layer.activation, z)
        if mode == "train" and layer.dropout_rate > 0:
            keep = rng.random(a.shape) >= layer.dropout_rate
            a = a * keep / (1.0 - layer.dropout_rate)
        if neuron_keep is not None:
            a = a * np.asarray(neuron_keep[li], dtype=a.dtype)
    out = model.output
    u = (a @ out.effective_weight().T + out.effective_bias())[:, 0]
    if not np.all(np.isfinite(u)):
        raise NonFiniteError("non-finite activations in forward pass")
    return u


def forward(model: Model, batch_or_features, mode="eval", rng=None, neuron_keep=None) -> np.ndarray:
    """Scores for each sample: sigmoid probabilities, or raw values for identity outputs."""
    features = batch_or_features.features if isinstance(batch_or_features, Batch) else batch_or_features
    u = forward_logits(model, features, mode, rng, neuron_keep)
    return sigmoid(u) if model.spec.output_activation == "sigmoid" else u


def loss(scores, labels, kind="bce") -> np.ndarray:
    """Per-sample loss; BCE clamps scores to [1e-7, 1 - 1e-7]."""
    scores = np.asarray(scores)
    labels = np.asarray(labels, dtype=scores.dtype if scores.dtype.kind == "f" else float)
    if scores.shape != labels.shape:
        raise ValueError(f"scores shape {scores.shape} != labels shape {labels.shape}")
    if kind == "squared":
        return (scores - labels) ** 2
    p = np.clip(scores, SCORE_EPS, 1 - SCORE_EPS)
    return -(labels * np.log(p) + (1 - labels) * np.log(1 - p))


def model_loss(model: Model, batch: Batch, neuron_keep=None) -> np.ndarray:
    """Per-sample eval-mode loss of ``model`` on ``batch``."""
    scores = forward(model, batch.features, "eval", neuron_keep=neuron_keep)
    return loss(scores, batch.labels.astype(scores.dtype), model.spec.loss_kind)


def _output_derivs(model, u, y):
    """dL/du and d2L/du2 per sample, consistent with the clamped loss."""
    if model.spec.loss_kind == "squared":
        return 2 * (u - y), np.full_like(u, 2.0)
    p = sigmoid(u)
    active = ((p >= SCORE_EPS) & (p <= 1 - SCORE_EPS)).astype(u.dtype)
    return (p - y) * active, p * (1 - p) * active


# --------------------------------------------------------------------------
# Per-sample derivatives (eval mode, frozen batch-norm)
# --------------------------------------------------------------------------


def _eval_cache(model, x):
    inputs, d1, d2 = [], [], []
    a = x
    for layer in model.hidden:
        inputs.append(a)
        z = a @ layer.effective_weight().T + layer.effective_bias()
        if layer.bn is not None:
            s, t = layer.bn.scale_shift()
            v = z * s + t
        else:
            s, v = None, z
        fp, fpp = _act_d1(layer.activation, v), _act_d2(layer.activation, v)
        if s is not None:
            fp, fpp = fp * s, fpp * s * s
        d1.append(fp)
        d2.append(fpp)
        a = _act(layer.activation, v)
    inputs.append(a)
    out = model.output
    u = (a @ out.effective_weight().T + out.effective_bias())[:, 0]
    return inputs, d1, d2, u


def layer_derivatives(model: Model, features, labels, second_order=True) -> list[LayerDerivatives]:
    """Exact per-sample gradients and Hessian diagonals for every dense layer.

    Second derivatives back-propagate the full per-sample Hessian with respect
    to each layer's activations, so the diagonal entries are exact (no
    Gauss-Newton truncation).  Cost per sample is dominated by ``W^T H W``.
    """
    x = _check_features(model, features)
    y = np.asarray(labels, dtype=x.dtype).ravel()
    inputs, d1, d2, u = _eval_cache(model, x)
    g_u, h_u = _output_derivs(model, u, y)

    out = model.output
    w_out = out.effective_weight()
    a = inputs[-1]
    res = [None] * len(model.layers)
    res[-1] = LayerDerivatives(
        g_u[:, None, None] * a[:, None, :],
        g_u[:, None],
        h_u[:, None, None] * (a * a)[:, None, :] if second_order else None,
        h_u[:, None] if second_order else None,
    )
    ga = g_u[:, None] * w_out[0]  # dL/da for last hidden activation
    Ha = h_u[:, None, None] * np.outer(w_out[0], w_out[0])[None] if second_order else None

    for li in range(len(model.hidden) - 1, -1, -1):
        layer = model.hidden[li]
        fp, fpp = d1[li], d2[li]
        g_z = ga * fp
        a_in = inputs[li]
        gw = g_z[:, :, None] * a_in[:, None, :]
        hw = hb = None
        if second_order:
            diag_Ha = np.einsum("nii->ni", Ha)
            h_zdiag = fp * fp * diag_Ha + ga * fpp
            hw = h_zdiag[:, :, None] * (a_in * a_in)[:, None, :]
            hb = h_zdiag
        res[li] = LayerDerivatives(gw, g_z, hw, hb)
        if li == 0:
            break
        W = layer.effective_weight()
        if second_order:
            # H_z = D Ha D + diag(dL/da * f''); its diagonal is h_zdiag.
            H_z = fp[:, :, None] * Ha * fp[:, None, :]
            idx = np.arange(H_z.shape[1])
            H_z[:, idx, idx] = h_zdiag
            Ha = W.T @ (H_z @ W)
        ga = g_z @ W
    # Masked entries are constants (always 0), so their derivatives are 0.
    for layer, d in zip(model.layers, res):
        for attr, mask in (("grad_w", layer.weight_mask), ("hess_w", layer.weight_mask),
                           ("grad_b", layer.bias_mask), ("hess_b", layer.bias_mask)):
            arr = getattr(d, attr)
            if mask is not None and arr is not None:
                setattr(d, attr, arr * mask)
    return res


def iter_layer_derivatives(model: Model, batch: Batch, chunk_size=256, second_order=True) -> Iterator[list[LayerDerivatives]]:
    n = len(batch)
    for start in range(0, n, chunk_size):
        sl = slice(start, min(n, start + chunk_size))
        yield layer_derivatives(model, batch.features[sl], batch.labels[sl], second_order)


def _flatten(parts_w, parts_b):
    n = parts_w[0].shape[0]
    return np.concatenate(
        [np.concatenate([w.reshape(n, -1), b], axis=1) for w, b in zip(parts_w, parts_b)], axis=1
    )


def _check_finite(arr, what):
    bad = ~np.isfinite(arr)
    if bad.any():
        s, i = np.argwhere(bad)[0]
        raise NonFiniteError(f"non-finite {what} for parameter index {i} (sample {s})")


def backward(model: Model, batch: Batch) -> PerSampleDerivatives:
    """Per-sample gradients of the eval-mode loss, shape (n, param_count)."""
    derivs = layer_derivatives(model, batch.features, batch.labels, second_order=False)
    grad = _flatten([d.grad_w for d in derivs], [d.grad_b for d in derivs])
    _check_finite(grad, "gradient")
    return PerSampleDerivatives(grad, None, len(batch))


def hessian_diag(model: Model, batch: Batch) -> PerSampleDerivatives:
    """Per-sample gradients and exact Hessian diagonals, each (n, param_count)."""
    derivs = layer_derivatives(model, batch.features, batch.labels, second_order=True)
    grad = _flatten([d.grad_w for d in derivs], [d.grad_b for d in derivs])
    hess = _flatten([d.hess_w for d in derivs], [d.hess_b for d in derivs])
    _check_finite(grad, "gradient")
    _check_finite(hess, "second derivative")
    return PerSampleDerivatives(grad, hess, len(batch))


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 64
    learning_rate: float = 0.01
    seed: int = 0


def _train_grads(model: Model, x, y, rng):
    """Mean-loss gradients in train mode (batch statistics, dropout).

    Returns per-layer (dW, db, dgamma, dbeta), the mean loss, and the batch
    statistics seen by each batch-norm layer.
    """
    caches = []
    a = x
    for layer in model.hidden:
        z = a @ layer.effective_weight().T + layer.effective_bias()
        c = {"a_in": a, "bn": None, "drop": None}
        if layer.bn is not None:
            mu, var = z.mean(axis=0), z.var(axis=0)
            inv = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (z - mu) * inv
            v = xhat * layer.bn.gamma + layer.bn.beta
            c["bn"] = (xhat, inv, mu, var)
        else:
            v = z
        c["v"] = v
        a = _act(layer.activation, v)
        if layer.dropout_rate > 0:
            keep = (rng.random(a.shape) >= layer.dropout_rate) / (1.0 - layer.dropout_rate)
            a = a * keep
            c["drop"] = keep.astype(a.dtype)
        caches.append(c)
    out = model.output
    u = (a @ out.effective_weight().T + out.effective_bias())[:, 0]
    if not np.all(np.isfinite(u)):
        raise NonFiniteError("non-finite activations during training")
    scores = sigmoid(u) if model.spec.output_activation == "sigmoid" else u
    mean_loss = float(loss(scores, y, model.spec.loss_kind).mean())
    g_u, _ = _output_derivs(model, u, y)
    n = x.shape[0]
    g_u = g_u / n

    grads = [None] * len(model.layers)
    grads[-1] = (g_u[:, None].T @ a, g_u[None, :].sum(axis=1), None, None)
    ga = g_u[:, None] * out.effective_weight()[0]
    for li in range(len(model.hidden) - 1, -1, -1):
        layer, c = model.hidden[li], caches[li]
        if c["drop"] is not None:
            ga = ga * c["drop"]
        gv = ga * _act_d1(layer.activation, c["v"])
        dgamma = dbeta = None
        if c["bn"] is not None:
            xhat, inv, _, _ = c["bn"]
            dgamma = (gv * xhat).sum(axis=0)
            dbeta = gv.sum(axis=0)
            gx = gv * layer.bn.gamma
            gz = inv / n * (n * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0))
        else:
            gz = gv
        grads[li] = (gz.T @ c["a_in"], gz.sum(axis=0), dgamma, dbeta)
        if li > 0:
            ga = gz @ layer.effective_weight()
    stats = [c["bn"] for c in caches]
    return grads, mean_loss, stats


def train(model: Model, dataset, config: TrainConfig) -> Model:
    """Plain mini-batch SGD.  Masked gradients are zeroed, so masked parameters stay 0."""
    m = model.copy()
    for l in m.layers:
        l.apply_mask()
    if config.epochs <= 0:
        return m
    x_all = np.asarray(dataset.features, dtype=m.dtype)
    y_all = np.asarray(dataset.labels, dtype=m.dtype).ravel()
    n = x_all.shape[0]
    if n < 1:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(config.seed)
    lr = m.dtype.type(config.learning_rate)
    bs = max(1, int(config.batch_size))
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for step, start in enumerate(range(0, n, bs)):
            idx = order[start:start + bs]
            try:
                grads, mean_loss, stats = _train_grads(m, x_all[idx], y_all[idx], rng)
            except NonFiniteError as e:
                raise TrainingDivergence(f"{e} (epoch {epoch}, step {step})", epoch, step) from e
            if not np.isfinite(mean_loss):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}, step {step}", epoch, step)
            for layer, (dw, db, dg, dbt), st in zip(m.layers, grads, stats + [None]):
                if layer.weight_mask is not None:
                    dw = dw * layer.weight_mask
                if layer.bias_mask is not None:
                    db = db * layer.bias_mask
                layer.weight -= lr * dw.astype(m.dtype)
                layer.bias -= lr * db.astype(m.dtype)
                if layer.bn is not None and dg is not None:
                    layer.bn.gamma -= lr * dg.astype(m.dtype)
                    layer.bn.beta -= lr * dbt.astype(m.dtype)
                    _, _, mu, var = st
                    k = len(idx)
                    unbiased = var * k / (k - 1) if k > 1 else var
                    layer.bn.running_mean[:] = (1 - BN_MOMENTUM) * layer.bn.running_mean + BN_MOMENTUM * mu
                    layer.bn.running_var[:] = (1 - BN_MOMENTUM) * layer.bn.running_var + BN_MOMENTUM * unbiased
                layer.apply_mask()
    return m
