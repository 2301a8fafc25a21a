import numpy as np
import pytest

from prunekit.data import SynthConfig, synth_generate
from prunekit.nn import Batch, DenseLayer, HiddenLayerSpec, Model, ModelSpec, init_random


def small_spec(input_dim=4, widths=(5, 4, 3), activation="elu", bn=False, dropout=0.0, out="sigmoid"):
    layers = tuple(HiddenLayerSpec(w, activation, bn, dropout) for w in widths)
    return ModelSpec(input_dim, layers, output_activation=out)


def randomize_bn(model, rng):
    """Give every batch-norm layer non-trivial running statistics and affine terms."""
    for layer in model.hidden:
        if layer.bn is not None:
            w = layer.bias.size
            layer.bn.gamma[:] = rng.uniform(0.5, 1.5, w)
            layer.bn.beta[:] = rng.normal(0, 0.3, w)
            layer.bn.running_mean[:] = rng.normal(0, 0.3, w)
            layer.bn.running_var[:] = rng.uniform(0.5, 2.0, w)
    return model


def random_model(seed, spec=None, dtype=np.float64, bias_scale=0.3):
    spec = spec or small_spec()
    rng = np.random.default_rng([seed, 99])
    model = init_random(spec, seed, dtype=dtype)
    for layer in model.layers:
        layer.bias[:] = rng.normal(0, bias_scale, layer.bias.shape)
    return randomize_bn(model, rng)


def quadratic_model(theta, x=1.0):
    """No hidden layers, identity output, squared loss: L(w) = (w*x + b - y)^2."""
    spec = ModelSpec(1, (), output_activation="identity")
    layer = DenseLayer(np.array([[theta]], dtype=np.float64), np.zeros(1), "identity")
    return Model(spec, [layer])


def hidden_preacts(model, x):
    """Post-batch-norm pre-activations of every hidden layer (eval mode)."""
    from prunekit.nn import _act

    out, a = [], x
    for layer in model.hidden:
        v = a @ layer.effective_weight().T + layer.effective_bias()
        if layer.bn is not None:
            s, t = layer.bn.scale_shift()
            v = v * s + t
        out.append(v)
        a = _act(layer.activation, v)
    return out


def kink_free_batch(model, n, seed, margin=0.05):
    """Random batch whose hidden pre-activations all stay at least ``margin`` from 0."""
    rng = np.random.default_rng(seed)
    rows = []
    while len(rows) < n:
        x = rng.normal(size=(4 * n, model.spec.input_dim))
        ok = np.ones(x.shape[0], dtype=bool)
        for v in hidden_preacts(model, x):
            ok &= np.all(np.abs(v) >= margin, axis=1)
        rows.extend(x[ok])
    x = np.array(rows[:n])
    y = rng.integers(0, 2, n)
    return Batch(x, y)


@pytest.fixture(scope="session")
def small_data():
    return synth_generate(SynthConfig(n_train=3000, n_test=2000, feature_dim=8, seed=3))
