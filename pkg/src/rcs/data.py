"""Synthetic Gaussian-mixture datasets and the binary dataset file format.

File layout: magic "RCSD", version u32, n u64, d u32, C u32 (0 means
unlabeled), then n*d little-endian float32 features, then n u32 labels when
C > 0.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .rng import philox_rng

DATASET_MAGIC = b"RCSD"
DATASET_VERSION = 1


class DataError(ValueError):
    """Invalid dataset specification or file."""


@dataclass(frozen=True)
class DatasetSpec:
    n: int
    dim: int
    classes: int = 0
    mean_scale: float = 3.0
    cov_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.dim < 1 or self.classes < 0:
            raise DataError("DatasetSpec: need n >= 1, dim >= 1, classes >= 0")
        if self.cov_scale <= 0:
            raise DataError("DatasetSpec: cov_scale must be positive")


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise DataError(f"dataset features must be (n, d), got {self.x.shape}")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.intp).ravel()
            if self.y.shape[0] != self.x.shape[0]:
                raise DataError("dataset labels must match feature count")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]


def class_counts(n: int, classes: int) -> list[int]:
    """Balanced when classes divides n; earlier classes absorb the remainder."""
    base, rem = divmod(n, classes)
    return [base + (1 if c < rem else 0) for c in range(classes)]


def generate(spec: DatasetSpec) -> Dataset:
    """Gaussian mixture: per-class means drawn once, shared isotropic scale."""
    rng = philox_rng(spec.seed, "dataset")
    if spec.classes == 0:
        x = spec.cov_scale * rng.standard_normal((spec.n, spec.dim))
        return Dataset(x=x, y=None)
    means = spec.mean_scale * rng.standard_normal((spec.classes, spec.dim))
    counts = class_counts(spec.n, spec.classes)
    xs, ys = [], []
    for c, count in enumerate(counts):
        xs.append(means[c] + spec.cov_scale * rng.standard_normal((count, spec.dim)))
        ys.append(np.full(count, c, dtype=np.intp))
    return Dataset(x=np.concatenate(xs), y=np.concatenate(ys))


def save_dataset(path, ds: Dataset) -> None:
    classes = 0 if ds.y is None else int(ds.y.max()) + 1
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IQII", DATASET_VERSION, ds.n, ds.dim, classes))
        fh.write(ds.x.astype("<f4").tobytes())
        if classes > 0:
            fh.write(ds.y.astype("<u4").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DATASET_MAGIC:
            raise DataError(f"{path}: not a dataset file (magic {magic!r})")
        version, n, d, classes = struct.unpack("<IQII", fh.read(20))
        if version != DATASET_VERSION:
            raise DataError(f"{path}: unsupported dataset version {version}")
        feat = np.frombuffer(fh.read(n * d * 4), dtype="<f4").astype(np.float64)
        if feat.size != n * d:
            raise DataError(f"{path}: truncated feature block")
        x = feat.reshape(n, d)
        y = None
        if classes > 0:
            lab = np.frombuffer(fh.read(n * 4), dtype="<u4").astype(np.intp)
            if lab.size != n:
                raise DataError(f"{path}: truncated label block")
            y = lab
    return Dataset(x=x, y=y)


def split_validation(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded disjoint (train, validation) index split; validation is the
    held-out fraction, at least one point."""
    if not 0 < fraction < 1:
        raise DataError("validation fraction must lie in (0, 1)")
    perm = philox_rng(seed, "val-split").permutation(n)
    m = max(1, int(round(fraction * n)))
    if m >= n:
        raise DataError("validation split leaves no training data")
    return np.sort(perm[m:]), np.sort(perm[:m])
