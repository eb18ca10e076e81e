"""Synthetic cluster data and the CIFAR-10 binary reader."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_RECORDS_PER_FILE = 10000


@dataclass(frozen=True)
class SyntheticSpec:
    n_clusters: int = 10
    latent_dim: int = 16
    input_dim: int = 128
    samples_per_cluster: int = 500
    spread: float = 0.1
    projection_seed: int = 0
    gain: float = 15.0
    activation: str = "sin"

    def __post_init__(self):
        if self.activation not in ("sin", "tanh"):
            raise ValueError("activation must be sin or tanh")
        if min(self.n_clusters, self.latent_dim, self.input_dim, self.samples_per_cluster) < 1:
            raise ValueError("synthetic dataset sizes must be positive")
        if self.spread < 0:
            raise ValueError("spread must be >= 0")


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    kind: str  # "vector" or "image"
    n_classes: int

    @property
    def data_std(self) -> np.ndarray | float:
        if self.kind == "vector":
            return self.x_train.std(axis=0)
        return 1.0


def latent_samples(spec: SyntheticSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Points around unit-sphere cluster centres, before the nonlinear map."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(spec.n_clusters, spec.latent_dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.repeat(np.arange(spec.n_clusters), spec.samples_per_cluster)
    z = centers[labels] + spec.spread * rng.normal(size=(len(labels), spec.latent_dim))
    return z, labels


def project(spec: SyntheticSpec, z: np.ndarray) -> np.ndarray:
    """Fixed random two-layer map ``latent -> input_dim``.

    The hidden layer is ``act(gain * z W1 + b1)``; a larger gain folds the
    clusters more, which keeps them locally coherent but makes them harder
    to separate with random features.
    """
    rng = np.random.default_rng([spec.projection_seed, 7919])
    hidden = spec.input_dim
    w1 = rng.normal(size=(spec.latent_dim, hidden)) * spec.gain / np.sqrt(spec.latent_dim)
    b1 = rng.uniform(0, 2 * np.pi, size=hidden)
    w2 = rng.normal(size=(hidden, spec.input_dim)) / np.sqrt(hidden)
    act = np.sin if spec.activation == "sin" else np.tanh
    return act(z @ w1 + b1) @ w2


def gen_synthetic(spec: SyntheticSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    z, labels = latent_samples(spec, seed)
    return project(spec, z), labels


def train_test_split(x, y, test_fraction: float, seed: int):
    """Stratified split; every class contributes the same test fraction."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng([seed, 104729])
    test_idx = []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        n_test = max(1, int(round(len(idx) * test_fraction)))
        test_idx.append(rng.permutation(idx)[:n_test])
    test = np.sort(np.concatenate(test_idx))
    train = np.setdiff1d(np.arange(len(y)), test)
    return x[train], y[train], x[test], y[test]


def synthetic_dataset(spec: SyntheticSpec, seed: int, test_fraction: float = 0.2) -> Dataset:
    x, y = gen_synthetic(spec, seed)
    return Dataset(*train_test_split(x, y, test_fraction, seed), kind="vector", n_classes=spec.n_clusters)


def read_cifar_file(path: str, expected_records: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"missing CIFAR-10 batch file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise ValueError(f"{path}: size {raw.size} is not a multiple of the {CIFAR_RECORD}-byte record")
    records = raw.reshape(-1, CIFAR_RECORD)
    if expected_records is not None and len(records) != expected_records:
        raise ValueError(f"{path}: expected {expected_records} records, found {len(records)}")
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise ValueError(f"{path}: label {labels.max()} out of range 0..9")
    images = records[:, 1:].reshape(-1, 3, 32, 32).copy()
    return images, labels


def load_cifar10(directory: str, records_per_file: int | None = CIFAR_RECORDS_PER_FILE):
    """Returns ``((train_images, train_labels), (test_images, test_labels))``.

    Images are ``n x 3 x 32 x 32`` uint8, channel-major as stored on disk.
    ``records_per_file=None`` accepts batch files of any whole-record length.
    """
    parts = [read_cifar_file(os.path.join(directory, f), records_per_file) for f in CIFAR_TRAIN_FILES]
    train_x = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    test = read_cifar_file(os.path.join(directory, CIFAR_TEST_FILE), records_per_file)
    return (train_x, train_y), test


def cifar_dataset(directory: str, records_per_file: int | None = CIFAR_RECORDS_PER_FILE) -> Dataset:
    (xtr, ytr), (xte, yte) = load_cifar10(directory, records_per_file)
    return Dataset(xtr, ytr, xte, yte, kind="image", n_classes=10)


def write_cifar_file(path: str, images: np.ndarray, labels: np.ndarray) -> None:
    """Write records in the binary layout (used to build test fixtures)."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    rec.tofile(path)
