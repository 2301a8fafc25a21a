"""Desk-scale datasets: a seeded Gaussian-mixture generator and CSV ingestion."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from prunekit.nn import Batch

# Class balances of the original malware corpus.
TRAIN_POS_BALANCE = 0.753
TEST_POS_BALANCE = 0.799


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    role: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.labels = np.asarray(self.labels).ravel()
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DataError("dataset needs a non-empty 2-D feature matrix")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DataError("feature and label counts differ")
        if np.isnan(self.features).any():
            raise DataError("features contain NaN")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def as_batch(self) -> Batch:
        return Batch(self.features, self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.role, dict(self.meta))


@dataclass
class SynthConfig:
    n_train: int = 50_000
    n_test: int = 10_000
    feature_dim: int = 64
    pos_balance_train: float = TRAIN_POS_BALANCE
    pos_balance_test: float = TEST_POS_BALANCE
    difficulty: float = 3.0
    clusters_per_class: int = 8
    seed: int = 0

    def validate(self):
        if self.n_train < 1 or self.n_test < 1 or self.feature_dim < 1:
            raise DataError("n_train, n_test and feature_dim must be positive")
        for name in ("pos_balance_train", "pos_balance_test"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise DataError(f"{name} must be in (0, 1), got {v}")
        if self.difficulty < 0:
            raise DataError("difficulty must be >= 0")
        if self.clusters_per_class < 1:
            raise DataError("clusters_per_class must be >= 1")


def synth_generate(config: SynthConfig) -> tuple[Dataset, Dataset]:
    """Two classes, each a mixture of isotropic unit-variance Gaussian clusters.

    Cluster centres sit at random directions on a sphere of radius
    ``difficulty / sqrt(2)``, so any two centres are ``difficulty`` standard
    deviations apart on average.  With ``difficulty == 0`` both classes collapse
    onto the same distribution.  Labels are drawn Bernoulli(balance).
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    k, d = config.clusters_per_class, config.feature_dim
    dirs = rng.normal(size=(2, k, d))
    dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
    centres = dirs * (config.difficulty / np.sqrt(2.0))

    def draw(n, balance, role):
        labels = (rng.random(n) < balance).astype(np.int8)
        comp = rng.integers(0, k, size=n)
        x = centres[labels, comp] + rng.normal(size=(n, d))
        meta = {"source": "synth", "seed": config.seed, "balance": balance}
        return Dataset(x.astype(np.float32), labels, role, meta)

    train = draw(config.n_train, config.pos_balance_train, "train")
    test = draw(config.n_test, config.pos_balance_test, "test")
    return train, test


def load_csv(path, label_column="label", role="train") -> Dataset:
    """Read a headered CSV with numeric feature columns and a 0/1 label column."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise DataError(f"{path}: no {label_column!r} column in header")
        li = header.index(label_column)
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                lab = float(row[li])
            except ValueError:
                raise DataError(f"{path}: line {lineno}: non-numeric label {row[li]!r}") from None
            if lab not in (0.0, 1.0):
                raise DataError(f"{path}: line {lineno}: label must be 0 or 1, got {row[li]!r}")
            try:
                values = [float(c) for j, c in enumerate(row) if j != li]
            except ValueError:
                raise DataError(f"{path}: line {lineno}: non-numeric feature value") from None
            if any(np.isnan(values)):
                raise DataError(f"{path}: line {lineno}: NaN feature value")
            feats.append(values)
            labels.append(int(lab))
    if not feats:
        raise DataError(f"{path}: no data rows")
    names = [h for j, h in enumerate(header) if j != li]
    return Dataset(
        np.asarray(feats, dtype=np.float32), np.asarray(labels, dtype=np.int8), role,
        {"source": str(path), "feature_names": names},
    )


def write_csv(dataset: Dataset, path, label_column="label"):
    names = dataset.meta.get("feature_names") or [f"f{i}" for i in range(dataset.dim)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(names) + [label_column])
        for x, y in zip(dataset.features, dataset.labels):
            w.writerow([f"{v:.9g}" for v in x] + [int(y)])


def resample(dataset: Dataset, count: int, seed) -> Dataset:
    """Seeded subset drawn without replacement."""
    n = len(dataset)
    if count > n:
        raise DataError(f"cannot draw {count} samples from {n} without replacement")
    if count < 1:
        raise DataError("count must be >= 1")
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=count, replace=False)
    return dataset.subset(idx)
