"""Synthetic classification data and the CIFAR-10 binary reader."""

import os
from dataclasses import dataclass

import numpy as np

from .numerics import SeededRng

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 32*32*3 pixel bytes


class CifarFormatError(ValueError):
    pass


class CorruptRecordError(ValueError):
    pass


@dataclass
class SyntheticSpec:
    num_classes: int = 10
    input_dim: int = 64
    radius: float = 4.0      # class-mean distance from the origin
    noise: float = 1.0       # isotropic within-class stddev
    per_class: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.radius <= 0 or self.noise < 0:
            raise ValueError("need num_classes >= 2, radius > 0, noise >= 0")


@dataclass
class Dataset:
    inputs: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels disagree on sample count")

    def __len__(self):
        return self.inputs.shape[0]

    def standardized(self):
        """Per-feature zero mean / unit variance copy (constant features -> 0)."""
        mean = self.inputs.mean(axis=0)
        std = self.inputs.std(axis=0)
        safe = np.where(std > 0, std, 1.0)
        return Dataset((self.inputs - mean) / safe, self.labels.copy())


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Gaussian blobs around class means drawn uniformly on a sphere."""
    rng = SeededRng(spec.seed)
    means = rng.normal((spec.num_classes, spec.input_dim))
    means *= spec.radius / np.linalg.norm(means, axis=1, keepdims=True)
    labels = np.repeat(np.arange(spec.num_classes), spec.per_class)
    noise = rng.normal((len(labels), spec.input_dim)) * spec.noise
    return Dataset(means[labels] + noise, labels)


def load_cifar10_binary(paths, standardize=True) -> Dataset:
    """Read CIFAR-10 binary batches; scale pixels to [0,1], then standardize.

    Each record is 1 label byte followed by 3072 pixel bytes
    (1024 R, 1024 G, 1024 B, row-major 32x32).  With standardize=False the
    [0,1]-scaled pixels are returned untouched (multiplying by 255 recovers
    the raw bytes exactly).
    """
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    records = []
    for path in paths:
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES != 0:
            raise CifarFormatError(
                f"{path}: size {raw.size} is not a positive multiple of {CIFAR_RECORD_BYTES}")
        records.append(raw.reshape(-1, CIFAR_RECORD_BYTES))
    recs = np.concatenate(records, axis=0)
    labels = recs[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        bad = int(np.argmax(labels > 9))
        raise CorruptRecordError(f"record {bad}: label byte {labels[bad]} > 9")
    pixels = recs[:, 1:].astype(np.float64) / 255.0
    ds = Dataset(pixels, labels)
    return ds.standardized() if standardize else ds


def write_csv(ds: Dataset, path):
    """Dump as CSV with header label,f0,...,f{d-1}."""
    d = ds.inputs.shape[1]
    with open(path, "w") as fh:
        fh.write("label," + ",".join(f"f{i}" for i in range(d)) + "\n")
        for label, row in zip(ds.labels, ds.inputs):
            fh.write(str(int(label)) + "," + ",".join(repr(float(v)) for v in row) + "\n")


def read_csv(path) -> Dataset:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if not header or header[0] != "label":
            raise ValueError(f"{path}: expected 'label,f0,...' header")
        labels, rows = [], []
        for line in fh:
            parts = line.rstrip("\n").split(",")
            labels.append(int(parts[0]))
            rows.append([float(v) for v in parts[1:]])
    return Dataset(np.array(rows), np.array(labels))


def batch_iterator(ds: Dataset, batch_size, rng: SeededRng):
    """Endless stream of (inputs, labels) minibatches.

    Each pass is a fresh shuffle without replacement; a final short batch
    is dropped so every batch has the full size (batch statistics assume
    a fixed batch size).
    """
    if batch_size > len(ds):
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {len(ds)}")
    while True:
        order = rng.permutation(len(ds))
        for start in range(0, len(ds) - batch_size + 1, batch_size):
            idx = order[start:start + batch_size]
            yield ds.inputs[idx], ds.labels[idx]
