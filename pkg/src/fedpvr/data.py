"""Synthetic datasets, CSV ingestion, Dirichlet label partitioning and splits."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAX_PARTITION_RETRIES = 100


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    provenance: str = "in-memory"
    class_names: list[str] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise DataError("features must be n x m with one label per row")
        if self.features.shape[0] < 1:
            raise DataError("dataset is empty")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features must be finite")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise DataError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes,
                       self.provenance, self.class_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


def generate_synthetic(n_classes: int, clusters_per_class: int, dim: int, n: int,
                       noise: float, seed: int, separation: float = 3.0) -> Dataset:
    """Gaussian-mixture classification data.

    Each class owns ``clusters_per_class`` centres drawn uniformly on a sphere of
    radius ``separation``; samples are a centre plus ``noise * N(0, I)``. Class
    sizes are ``n // n_classes`` with the remainder given to the lowest ids.
    """
    if n_classes < 2 or n < n_classes or dim < 1 or clusters_per_class < 1 or noise < 0:
        raise DataError("invalid synthetic dataset parameters")
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((n_classes, clusters_per_class, dim))
    centres *= separation / np.linalg.norm(centres, axis=2, keepdims=True)

    counts = np.full(n_classes, n // n_classes)
    counts[: n % n_classes] += 1
    labels = np.repeat(np.arange(n_classes), counts)
    cluster = rng.integers(0, clusters_per_class, size=n)
    features = centres[labels, cluster] + noise * rng.standard_normal((n, dim))
    order = rng.permutation(n)
    return Dataset(features[order], labels[order], n_classes,
                   provenance=f"synthetic(seed={seed})")


def _largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort keeps ties in ascending client order
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


@dataclass
class PartitionPlan:
    alpha: float
    seed: int
    client_shards: list[np.ndarray]
    attempts: int = 1

    @property
    def n_clients(self) -> int:
        return len(self.client_shards)

    def class_matrix(self, labels: np.ndarray, n_classes: int) -> np.ndarray:
        """Clients x classes sample counts."""
        return np.stack([np.bincount(labels[s], minlength=n_classes) for s in self.client_shards])

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "seed": self.seed,
            "attempts": self.attempts,
            "client_shards": [s.tolist() for s in self.client_shards],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PartitionPlan":
        return cls(float(d["alpha"]), int(d["seed"]),
                   [np.asarray(s, dtype=np.int64) for s in d["client_shards"]],
                   int(d.get("attempts", 1)))


def dirichlet_partition(ds: Dataset, n_clients: int, alpha: float, seed: int) -> PartitionPlan:
    """Split sample indices among clients with per-class Dirichlet(alpha) proportions."""
    if alpha <= 0:
        raise DataError("alpha must be positive")
    if n_clients < 1:
        raise DataError("need at least one client")
    rng = np.random.default_rng(seed)
    by_class = [np.flatnonzero(ds.labels == c) for c in range(ds.n_classes)]
    for attempt in range(1, MAX_PARTITION_RETRIES + 1):
        shards: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
        for idx in by_class:
            if idx.size == 0:
                continue
            idx = rng.permutation(idx)
            props = rng.dirichlet(np.full(n_clients, alpha))
            if not np.all(np.isfinite(props)) or props.sum() <= 0:
                # tiny alpha can underflow every component; treat as a point mass
                props = np.zeros(n_clients)
                props[rng.integers(n_clients)] = 1.0
            counts = _largest_remainder(idx.size, props / props.sum())
            bounds = np.concatenate([[0], np.cumsum(counts)])
            for i in range(n_clients):
                shards[i].append(idx[bounds[i]:bounds[i + 1]])
        result = [np.sort(np.concatenate(parts)) for parts in shards]
        if all(s.size for s in result):
            return PartitionPlan(float(alpha), int(seed), result, attempt)
    raise DataError(
        f"could not give every client data after {MAX_PARTITION_RETRIES} draws; "
        "use a larger alpha or fewer clients"
    )


@dataclass
class SplitSpec:
    validation_fraction: float = 0.01
    calibration_count: int = 0
    test_fraction: float = 0.2

    def __post_init__(self):
        for name in ("validation_fraction", "test_fraction"):
            value = getattr(self, name)
            if not 0 <= value < 1:
                raise DataError(f"{name} must be in [0, 1), got {value}")
        if self.calibration_count < 0:
            raise DataError("calibration_count must be nonnegative")


@dataclass
class Splits:
    train: Dataset | None
    validation: Dataset | None
    calibration: Dataset | None
    test: Dataset | None
    indices: dict[str, np.ndarray] = field(default_factory=dict)


def split(ds: Dataset, spec: SplitSpec, seed: int) -> Splits:
    """Shuffled disjoint split; sizes are floored and the remainder goes to train.

    Empty parts are returned as ``None``.
    """
    n = len(ds)
    n_test = math.floor(spec.test_fraction * n)
    n_val = math.floor(spec.validation_fraction * n)
    n_cal = spec.calibration_count
    if n_test + n_val + n_cal >= n:
        raise DataError("split leaves no training data")
    order = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum([0, n_test, n_val, n_cal])
    parts = {
        "test": order[bounds[0]:bounds[1]],
        "validation": order[bounds[1]:bounds[2]],
        "calibration": order[bounds[2]:bounds[3]],
        "train": order[bounds[3]:],
    }
    parts = {k: np.sort(v) for k, v in parts.items()}
    sets = {k: (ds.subset(v) if v.size else None) for k, v in parts.items()}
    return Splits(sets["train"], sets["validation"], sets["calibration"], sets["test"], parts)


def holdout_indices(shard: np.ndarray, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Leave ``floor(fraction * len(shard))`` indices of a client shard out for validation."""
    n_out = math.floor(fraction * shard.size)
    perm = rng.permutation(shard.size)
    return np.sort(shard[perm[n_out:]]), np.sort(shard[perm[:n_out]])


def load_csv(path, label_column: str, feature_columns: Sequence[str] | None = None,
             classes: Sequence[str] | None = None) -> Dataset:
    """Read a headered, comma-separated file.

    Labels are categorical strings. If ``classes`` is given, it fixes the id of
    each label and any other label is an error; otherwise ids follow the sorted
    distinct labels.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if label_column not in header:
            raise DataError(f"{path}: no column named {label_column!r}")
        if feature_columns is None:
            feature_columns = [h for h in header if h != label_column]
        missing = [c for c in feature_columns if c not in header]
        if missing:
            raise DataError(f"{path}: missing feature columns {missing}")
        label_pos = header.index(label_column)
        feat_pos = [header.index(c) for c in feature_columns]
        rows, raw_labels = [], []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(row[p]) for p in feat_pos])
            except ValueError as exc:
                raise DataError(f"{path}:{line}: {exc}") from None
            raw_labels.append((row[label_pos], line))
    if not rows:
        raise DataError(f"{path}: no data rows")
    if classes is None:
        classes = sorted({lab for lab, _ in raw_labels})
    lookup = {name: k for k, name in enumerate(classes)}
    labels = []
    for lab, line in raw_labels:
        if lab not in lookup:
            raise DataError(f"{path}:{line}: unknown label {lab!r}")
        labels.append(lookup[lab])
    return Dataset(np.array(rows), np.array(labels), len(classes),
                   provenance=str(path), class_names=list(classes))


def write_csv(ds: Dataset, path, label_column: str = "label") -> None:
    names = ds.class_names or [str(k) for k in range(ds.n_classes)]
    header = [f"x{j}" for j in range(ds.n_features)] + [label_column]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row, lab in zip(ds.features, ds.labels):
            writer.writerow([repr(float(v)) for v in row] + [names[lab]])


def write_manifest(path, **payload) -> None:
    """Deterministic JSON manifest (sorted keys, fixed separators)."""
    text = json.dumps(payload, sort_keys=True, indent=1, separators=(",", ": "))
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
