"""Synthetic Gaussian-cluster data and class-wise Dirichlet client partitioning."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class PartitionError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("features must be [N, d] with one label per row")
        if len(self.labels) == 0:
            raise ValueError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class ClientPartition:
    client_id: int
    train: Dataset
    test: Dataset
    p: float
    indices: np.ndarray  # rows of the source dataset, train first then test


def generate_synthetic(num_classes: int, dim: int, per_class: int, class_sep: float, seed: int) -> Dataset:
    if num_classes <= 0 or dim <= 0 or per_class <= 0 or class_sep < 0:
        raise ValueError("generate_synthetic needs positive sizes and non-negative class_sep")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    means *= class_sep
    labels = np.repeat(np.arange(num_classes), per_class)
    features = means[labels] + rng.standard_normal((len(labels), dim))
    order = rng.permutation(len(labels))
    return Dataset(features[order], labels[order], num_classes)


def load_csv(path: str | Path, num_classes: int | None = None) -> Dataset:
    """Read a CSV with float feature columns and a final integer ``label`` column."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1].strip() != "label":
            raise ValueError(f"{path}: last column must be named 'label'")
        rows = [r for r in reader if r]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    feats = np.array([[float(v) for v in r[:-1]] for r in rows])
    labels = np.array([int(r[-1]) for r in rows])
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return Dataset(feats, labels, num_classes)


def _split_local(idx: np.ndarray, labels: np.ndarray, test_frac: float, rng) -> tuple[np.ndarray, np.ndarray]:
    train, test = [], []
    for c in np.unique(labels[idx]):
        members = idx[labels[idx] == c]
        members = members[rng.permutation(len(members))]
        n_test = int(np.floor(test_frac * len(members) + 0.5)) if len(members) >= 2 else 0
        test.extend(members[:n_test])
        train.extend(members[n_test:])
    if not test and len(train) >= 2:
        test.append(train.pop())
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64))


def dirichlet_partition(
    ds: Dataset,
    n: int,
    alpha: float,
    min_per_client: int = 8,
    seed: int = 0,
    test_frac: float = 0.2,
    max_tries: int = 1000,
) -> list[ClientPartition]:
    if n < 1:
        raise ValueError("need at least one client")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if len(ds) < n * min_per_client:
        raise PartitionError(f"{len(ds)} samples cannot give {n} clients {min_per_client} each")
    rng = np.random.default_rng(seed)
    by_class = [np.flatnonzero(ds.labels == c) for c in range(ds.num_classes)]

    for _ in range(max_tries):
        shards: list[list[np.ndarray]] = [[] for _ in range(n)]
        for members in by_class:
            if len(members) == 0:
                continue
            members = members[rng.permutation(len(members))]
            share = rng.dirichlet(np.full(n, alpha))
            cuts = (np.cumsum(share)[:-1] * len(members)).astype(np.int64)
            for i, part in enumerate(np.split(members, cuts)):
                shards[i].append(part)
        sizes = [sum(len(s) for s in shard) for shard in shards]
        if min(sizes) >= min_per_client:
            break
    else:
        raise PartitionError(f"no Dirichlet draw gave every client {min_per_client} samples "
                             f"after {max_tries} tries")

    total_train = 0
    parts = []
    for i, shard in enumerate(shards):
        idx = np.concatenate(shard)
        tr, te = _split_local(idx, ds.labels, test_frac, rng)
        if len(te) == 0:
            raise PartitionError(f"client {i} has too few samples for a local test split")
        total_train += len(tr)
        parts.append((i, tr, te))
    out = []
    for i, tr, te in parts:
        out.append(ClientPartition(
            client_id=i,
            train=ds.take(tr),
            test=ds.take(te),
            p=len(tr) / total_train,
            indices=np.concatenate([tr, te]),
        ))
    return out


def client_weights(partitions) -> np.ndarray:
    if not partitions:
        raise ValueError("no partitions")
    sizes = np.array([len(p.train) for p in partitions], dtype=np.float64)
    return sizes / sizes.sum()


def label_distribution(ds: Dataset) -> np.ndarray:
    h = ds.histogram().astype(np.float64)
    return h / h.sum()


def label_entropy(ds: Dataset) -> float:
    p = label_distribution(ds)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def mean_pairwise_tv(partitions) -> float:
    dists = [label_distribution(_whole(p)) for p in partitions]
    if len(dists) < 2:
        return 0.0
    tv = [0.5 * np.abs(a - b).sum() for i, a in enumerate(dists) for b in dists[i + 1:]]
    return float(np.mean(tv))


def _whole(part: ClientPartition) -> Dataset:
    return Dataset(np.concatenate([part.train.features, part.test.features]),
                   np.concatenate([part.train.labels, part.test.labels]),
                   part.train.num_classes)
