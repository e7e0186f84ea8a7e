"""Synthetic Gaussian-blob datasets and federated partitioning."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import DomainError, PartitionError
from .nn import LabeledDataset


@dataclass(frozen=True)
class PartitionPlan:
    shards: tuple[tuple[int, ...], ...]
    alpha: float | None
    seed: int

    def __len__(self) -> int:
        return len(self.shards)

    def is_exact_cover(self, n: int) -> bool:
        flat = sorted(i for s in self.shards for i in s)
        return flat == list(range(n)) and all(self.shards)


def gen_synthetic(classes: int, dim: int, per_class: int, spread: float, seed: int) -> LabeledDataset:
    """One isotropic Gaussian blob per class, centred on a random point of
    the radius-2 sphere."""
    if classes < 2 or dim < 2 or per_class < 1 or spread <= 0:
        raise DomainError("need classes >= 2, dim >= 2, per_class >= 1, spread > 0")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((classes, dim))
    means *= 2.0 / np.linalg.norm(means, axis=1, keepdims=True)
    labels = np.repeat(np.arange(classes), per_class)
    x = means[labels] + spread * rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return LabeledDataset(x[order], labels[order], classes)


def class_means(data: LabeledDataset) -> np.ndarray:
    classes = np.unique(data.labels)
    return np.stack([data.features[data.labels == c].mean(axis=0) for c in classes])


def lda_partition(
    data: LabeledDataset,
    num_clients: int,
    alpha: float,
    seed: int,
    min_shard: int = 1,
    max_retries: int = 1000,
) -> PartitionPlan:
    """Label-skewed split: each class is divided among clients according
    to a Dirichlet(alpha) draw; redrawn until every shard has ``min_shard``
    samples."""
    if num_clients < 2:
        raise PartitionError("num_clients must be >= 2")
    if alpha <= 0:
        raise PartitionError("alpha must be positive")
    if len(data) < num_clients * max(min_shard, 1):
        raise PartitionError(
            f"{len(data)} samples cannot fill {num_clients} shards of {min_shard}"
        )
    rng = np.random.default_rng(seed)
    by_class = [np.flatnonzero(data.labels == c) for c in np.unique(data.labels)]
    for _ in range(max_retries):
        shards: list[list[int]] = [[] for _ in range(num_clients)]
        for idx in by_class:
            idx = rng.permutation(idx)
            props = rng.dirichlet(np.full(num_clients, alpha))
            cuts = (np.cumsum(props)[:-1] * idx.size).astype(int)
            for client, part in enumerate(np.split(idx, cuts)):
                shards[client].extend(part.tolist())
        if min(len(s) for s in shards) >= max(min_shard, 1):
            return PartitionPlan(tuple(tuple(sorted(s)) for s in shards), float(alpha), seed)
    raise PartitionError(
        f"no partition with shards >= {min_shard} after {max_retries} draws; "
        "use a larger dataset or a larger alpha"
    )


def iid_partition(data: LabeledDataset, num_clients: int, seed: int) -> PartitionPlan:
    if num_clients < 1 or len(data) < num_clients:
        raise PartitionError(f"{len(data)} samples for {num_clients} clients")
    order = np.random.default_rng(seed).permutation(len(data))
    shards = [tuple(sorted(order[c::num_clients].tolist())) for c in range(num_clients)]
    return PartitionPlan(tuple(shards), None, seed)


def write_csv(data: LabeledDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(data.dim)] + ["label"])
        for row, label in zip(data.features, data.labels):
            w.writerow([format(v, ".17g") for v in row] + [int(label)])


def read_csv(path) -> LabeledDataset:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not header or header[-1] != "label":
        raise DomainError("CSV header must end with 'label'")
    x = np.array([[float(v) for v in r[:-1]] for r in body], dtype=np.float64).reshape(len(body), len(header) - 1)
    y = np.array([int(r[-1]) for r in body], dtype=np.int64)
    return LabeledDataset(x, y)
