"""Datasets: synthetic Gaussian blobs, tabular CSV, MNIST IDX, Dirichlet label skew."""
from __future__ import annotations

import csv
import gzip
import logging
import math
import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..linalg import RngStream
from ..model import Batch

log = logging.getLogger(__name__)

SOURCES = ("synthetic_blobs", "csv_tabular", "mnist_idx")
NORMALIZATIONS = ("none", "zscore")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SkewSpec:
    alpha: float
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("Dirichlet alpha must be positive")


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic_blobs"
    path: Optional[str] = None
    n_train: int = 8000
    n_test: int = 2000
    n_classes: int = 10
    feature_dim: int = 20
    separation: float = 3.0
    normalization: str = "none"
    skew: Optional[SkewSpec] = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown dataset source {self.source!r}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.source != "synthetic_blobs" and not self.path:
            raise ValueError(f"source {self.source!r} needs a path")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be positive")
        if self.source == "synthetic_blobs" and self.n_classes < 2:
            raise ValueError("need at least two classes")


def _stratified_counts(total: int, n_classes: int) -> np.ndarray:
    base = np.full(n_classes, total // n_classes)
    base[: total % n_classes] += 1
    return base


def blob_means(n_classes: int, feature_dim: int, separation: float, rng: RngStream) -> np.ndarray:
    """Class means at pairwise distance ``separation`` when ``feature_dim >= n_classes``.

    Means are ``separation / sqrt(2)`` times orthonormal directions; with fewer
    dimensions than classes, random unit directions are used instead.
    """
    g = rng.standard_normal(feature_dim * n_classes).reshape(feature_dim, n_classes)
    if feature_dim >= n_classes:
        q, r = np.linalg.qr(g)
        dirs = (q * np.sign(np.diag(r))).T
    else:
        dirs = g.T / np.linalg.norm(g.T, axis=1, keepdims=True)
    return separation / math.sqrt(2.0) * dirs


def _sample_blobs(means, counts, rng: RngStream):
    xs, ys = [], []
    dim = means.shape[1]
    for c, m in enumerate(counts):
        xs.append(means[c] + rng.standard_normal(int(m) * dim).reshape(int(m), dim))
        ys.append(np.full(int(m), c))
    x, y = np.vstack(xs), np.concatenate(ys)
    perm = rng.generator.permutation(len(y))
    return Batch(x[perm], y[perm])


def make_synthetic_blobs(spec: DatasetSpec, rng: RngStream, pool_factor: int = 1) -> tuple[Batch, Batch]:
    """Class-conditional unit-covariance Gaussians with a stratified train/test split.

    ``pool_factor`` multiplies the training pool (used to give Dirichlet skew
    enough examples of every class to keep the training size fixed).
    """
    means = blob_means(spec.n_classes, spec.feature_dim, spec.separation, rng)
    train = _sample_blobs(means, _stratified_counts(spec.n_train * pool_factor, spec.n_classes), rng)
    test = _sample_blobs(means, _stratified_counts(spec.n_test, spec.n_classes), rng)
    return train, test


def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer counts proportional to ``weights`` summing exactly to ``total``."""
    w = np.asarray(weights, dtype=np.float64)
    raw = w / w.sum() * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_skew(labels, alpha: float, rng: RngStream, total: int | None = None) -> np.ndarray:
    """Indices of a label-skewed subset with class proportions ``pi ~ Dirichlet(alpha 1)``.

    The kept size is ``total`` (default: ``len(labels)``) whenever every class
    has enough examples; otherwise the largest size consistent with ``pi`` and
    the class availability is used and a warning is logged.  Indices are
    returned in ascending order.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1
    available = np.bincount(labels, minlength=n_classes)
    if np.any(available == 0):
        raise ValueError("every class needs at least one example")
    total = len(labels) if total is None else int(total)
    pi = rng.generator.dirichlet(np.full(n_classes, float(alpha)))
    counts = largest_remainder(pi, total)
    if np.any(counts > available):
        feasible = int(np.floor(np.min(np.where(pi > 0, available / np.maximum(pi, 1e-300), np.inf))))
        feasible = min(feasible, total)
        while feasible > 0 and np.any(largest_remainder(pi, feasible) > available):
            feasible -= 1
        log.warning("Dirichlet skew: only %d of %d examples can match the sampled proportions", feasible, total)
        counts = largest_remainder(pi, feasible) if feasible > 0 else np.zeros(n_classes, dtype=np.int64)
    picked = []
    for c in range(n_classes):
        members = np.flatnonzero(labels == c)
        if counts[c]:
            picked.append(rng.generator.choice(members, size=int(counts[c]), replace=False))
    if not picked:
        return np.zeros(0, dtype=np.intp)
    return np.sort(np.concatenate(picked))


def _open(path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) into a uint8 array."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header at byte offset {len(raw)}")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise IdxFormatError(
            f"{path}: bad magic 0x{magic:08x} at byte offset 0 (expected 0x{expected_magic:08x})"
        )
    if (magic >> 8) != 0x08:
        raise IdxFormatError(f"{path}: unsupported element type at byte offset 2")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated dimension header at byte offset {len(raw)}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise IdxFormatError(
            f"{path}: truncated data at byte offset {len(raw)} (expected {header + size} bytes)"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def _find(directory, stem):
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        p = os.path.join(directory, name)
        if os.path.exists(p):
            return p
    raise FileNotFoundError(f"no {stem}[.gz] under {directory}")


def load_idx_pair(images_path, labels_path, limit: int | None = None) -> Batch:
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{images_path}: {images.shape[0]} images but {labels.shape[0]} labels in {labels_path}"
        )
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Batch(x, labels.astype(np.int64))


def load_mnist_idx(path, n_train: int | None = None, n_test: int | None = None) -> tuple[Batch, Batch]:
    """Load MNIST train/test from a directory of IDX files; pixels scaled to [0, 1], 784 features."""
    train = load_idx_pair(
        _find(path, "train-images-idx3-ubyte"), _find(path, "train-labels-idx1-ubyte"), n_train
    )
    test = load_idx_pair(
        _find(path, "t10k-images-idx3-ubyte"), _find(path, "t10k-labels-idx1-ubyte"), n_test
    )
    return train, test


def load_csv_tabular(path, n_test: int, rng: RngStream, label_column: str = "label") -> tuple[Batch, Batch]:
    """Numeric CSV with a header; ``label_column`` holds integer class ids.

    Rows are shuffled with ``rng`` and the last ``n_test`` become the test set.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or label_column not in reader.fieldnames:
            raise ValueError(f"{path}: missing label column {label_column!r}")
        features = [f for f in reader.fieldnames if f != label_column]
        rows = list(reader)
    x = np.array([[float(r[f]) for f in features] for r in rows])
    y = np.array([int(r[label_column]) for r in rows])
    if n_test >= len(y):
        raise ValueError(f"{path}: n_test={n_test} leaves no training rows")
    perm = rng.generator.permutation(len(y))
    x, y = x[perm], y[perm]
    return Batch(x[:-n_test], y[:-n_test]), Batch(x[-n_test:], y[-n_test:])


def zscore(train: Batch, test: Batch) -> tuple[Batch, Batch]:
    mu = train.inputs.mean(axis=0)
    sd = train.inputs.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return Batch((train.inputs - mu) / sd, train.labels), Batch((test.inputs - mu) / sd, test.labels)


def build_dataset(spec: DatasetSpec, seed: int) -> tuple[Batch, Batch]:
    """Materialise a dataset spec (skew and normalisation applied) deterministically from ``seed``."""
    rng = RngStream(seed, "data")
    if spec.source == "synthetic_blobs":
        pool = spec.n_classes if spec.skew is not None else 1
        train, test = make_synthetic_blobs(spec, rng, pool_factor=pool)
    elif spec.source == "mnist_idx":
        train, test = load_mnist_idx(spec.path, spec.n_train, spec.n_test)
    else:
        train, test = load_csv_tabular(spec.path, spec.n_test, rng)
        if len(train) > spec.n_train:
            train = train.subset(np.arange(spec.n_train))
    if spec.skew is not None:
        idx = dirichlet_skew(
            train.labels, spec.skew.alpha, RngStream(spec.skew.seed, "dirichlet"),
            total=min(spec.n_train, len(train)),
        )
        train = train.subset(idx)
    if spec.normalization == "zscore":
        train, test = zscore(train, test)
    return train, test
