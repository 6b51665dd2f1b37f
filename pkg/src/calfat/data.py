"""Dataset generation, file formats, and Dirichlet label-skew partitioning."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .losses import ClassPrior

DATASET_MAGIC = b"FDS1"


class DataFormatError(ValueError):
    """Malformed dataset file; message carries the offending row or offset."""


class EmptyClientError(ValueError):
    """Raised for operations that need at least one sample on the client."""


@dataclass
class Dataset:
    """Feature matrix with integer labels in [0, num_classes)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if self.features.shape[0] < 1:
            raise ValueError("dataset needs at least one sample")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must be one integer per feature row")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.features[indices], self.labels[indices], self.num_classes)


@dataclass
class ClientDataset:
    """One client's shard plus its per-class counts; may be empty."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    class_counts: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValueError("client features must be 2-D with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        counts = np.bincount(self.labels, minlength=self.num_classes).astype(np.int64)
        if self.class_counts is not None and not np.array_equal(
            np.asarray(self.class_counts, dtype=np.int64), counts
        ):
            raise ValueError("class_counts inconsistent with labels")
        self.class_counts = counts

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @classmethod
    def from_dataset(cls, data: Dataset) -> "ClientDataset":
        return cls(data.features, data.labels, data.num_classes)


@dataclass(frozen=True)
class PartitionConfig:
    """Dirichlet label-skew partition: smaller beta means stronger skew."""

    num_clients: int
    beta: float
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_clients < 1:
            raise ValueError(f"num_clients must be >= 1, got {self.num_clients}")
        if not np.isfinite(self.beta) or self.beta <= 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")


def gen_synthetic(
    num_classes: int,
    dim: int,
    n_per_class: int,
    class_means: np.ndarray,
    sigma: float,
    seed: int,
) -> Dataset:
    """Isotropic Gaussian blobs, n_per_class samples around each class mean.

    The class conditionals are the same for every consumer of the dataset by
    construction, which is exactly the label-skew regime: partitioning later
    skews only the label marginals.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if not np.isfinite(sigma) or sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    means = np.asarray(class_means, dtype=np.float64)
    if means.shape != (num_classes, dim):
        raise ValueError(f"class_means must have shape ({num_classes}, {dim}), got {means.shape}")
    if len(np.unique(means, axis=0)) < num_classes:
        warnings.warn("duplicate class means: classes are indistinguishable", stacklevel=2)

    rng = np.random.default_rng(seed)
    features = np.empty((num_classes * n_per_class, dim))
    labels = np.empty(num_classes * n_per_class, dtype=np.int64)
    for c in range(num_classes):
        block = slice(c * n_per_class, (c + 1) * n_per_class)
        features[block] = means[c] + rng.normal(0.0, sigma, size=(n_per_class, dim))
        labels[block] = c
    order = rng.permutation(len(labels))
    return Dataset(features[order], labels[order], num_classes)


def save_csv(data: Dataset, path) -> None:
    """Write `label,f0,f1,...` rows with round-trippable float reprs."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("label," + ",".join(f"f{j}" for j in range(data.dim)) + "\n")
        for y, row in zip(data.labels, data.features):
            fh.write(f"{int(y)}," + ",".join(repr(float(v)) for v in row) + "\n")


def load_csv(path, num_classes: int) -> Dataset:
    """Parse a dataset CSV, validating labels against the declared class count."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        cols = header.split(",")
        if not cols or cols[0] != "label" or len(cols) < 2:
            raise DataFormatError(f"{path}:1: expected header 'label,f0,...', got {header!r}")
        dim = len(cols) - 1
        features, labels = [], []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != dim + 1:
                raise DataFormatError(
                    f"{path}:{lineno}: expected {dim + 1} fields, got {len(parts)}"
                )
            try:
                y = int(parts[0])
                row = [float(v) for v in parts[1:]]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
            if not 0 <= y < num_classes:
                raise DataFormatError(
                    f"{path}:{lineno}: label {y} outside [0, {num_classes})"
                )
            labels.append(y)
            features.append(row)
    if not labels:
        raise DataFormatError(f"{path}: no data rows")
    return Dataset(np.array(features), np.array(labels), num_classes)


def save_binary(data: Dataset, path) -> None:
    """Write the FDS1 raw-binary format (bit-exact round trip)."""
    if data.num_classes > 0xFFFF:
        raise ValueError("binary format stores labels as u16; too many classes")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<III", len(data), data.dim, data.num_classes))
        fh.write(data.features.astype("<f8").tobytes())
        fh.write(data.labels.astype("<u2").tobytes())


def load_binary(path) -> Dataset:
    """Read a dataset written by :func:`save_binary`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != DATASET_MAGIC:
        raise DataFormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 16:
        raise DataFormatError(f"{path}: truncated header ({len(blob)} bytes)")
    n, dim, num_classes = struct.unpack_from("<III", blob, 4)
    need = 16 + n * dim * 8 + n * 2
    if len(blob) != need:
        raise DataFormatError(f"{path}: expected {need} bytes, found {len(blob)}")
    features = np.frombuffer(blob, dtype="<f8", count=n * dim, offset=16).reshape(n, dim)
    labels = np.frombuffer(blob, dtype="<u2", count=n, offset=16 + n * dim * 8).astype(np.int64)
    bad = np.nonzero(labels >= num_classes)[0]
    if bad.size:
        raise DataFormatError(f"{path}: row {bad[0]}: label {labels[bad[0]]} >= {num_classes}")
    return Dataset(features.copy(), labels, num_classes)


def load_dataset(path, fmt: str, num_classes: int | None = None) -> Dataset:
    """Dispatch on format: "csv" (needs num_classes) or "binary"."""
    if fmt == "csv":
        if num_classes is None:
            raise ValueError("csv loading needs an explicit num_classes")
        return load_csv(path, num_classes)
    if fmt == "binary":
        data = load_binary(path)
        if num_classes is not None and num_classes != data.num_classes:
            raise DataFormatError(
                f"{path}: file declares {data.num_classes} classes, expected {num_classes}"
            )
        return data
    raise ValueError(f"unknown dataset format {fmt!r}")


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    # Integer allocation preserving the total exactly.
    raw = proportions * total
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    if short:
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    return base


def dirichlet_partition(data: Dataset, cfg: PartitionConfig) -> list[ClientDataset]:
    """Split per label by proportions drawn from Dir(beta * 1_m).

    Each label's indices are shuffled once and split contiguously with
    largest-remainder rounding, so the union of the clients is exactly the
    input dataset. Clients may come out empty; callers skip them per round.
    """
    rng = np.random.default_rng(cfg.seed)
    m = cfg.num_clients
    per_client: list[list[np.ndarray]] = [[] for _ in range(m)]
    for label in range(data.num_classes):
        idx = np.nonzero(data.labels == label)[0]
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        props = rng.dirichlet(np.full(m, cfg.beta))
        counts = _largest_remainder(props, idx.size)
        start = 0
        for i in range(m):
            per_client[i].append(idx[start : start + counts[i]])
            start += counts[i]
    clients = []
    for chunks in per_client:
        take = np.sort(np.concatenate(chunks)) if chunks else np.empty(0, dtype=np.int64)
        clients.append(ClientDataset(data.features[take], data.labels[take], data.num_classes))
    return clients


def class_prior(client: ClientDataset, delta: float) -> ClassPrior:
    """Smoothed class frequencies pi[y] = count[y]/n + delta for one client."""
    if not np.isfinite(delta) or delta <= 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    if client.n == 0:
        raise EmptyClientError("cannot compute a class prior for an empty client")
    return ClassPrior.from_counts(client.class_counts, delta)


def partition_counts(clients: list[ClientDataset]) -> np.ndarray:
    """Per-client per-class count matrix (m, C), the partition report payload."""
    if not clients:
        raise ValueError("no clients")
    return np.stack([c.class_counts for c in clients])
