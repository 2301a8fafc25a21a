"""Pruning, quantization and zipped-size accounting for small dense binary classifiers."""

from prunekit.nn import HiddenLayerSpec, Model, ModelSpec, TrainConfig, init_random, train

__all__ = ["HiddenLayerSpec", "Model", "ModelSpec", "TrainConfig", "init_random", "train"]
__version__ = "0.1.0"
