"""Datasets, federated partitions and the server's auxiliary sample."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .schedule import ConfigError

CIFAR_RECORD = 3073


class FormatError(ValueError):
    pass


class PartitionError(RuntimeError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray | None = None
    provenance: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 2 or len(self.features) < 1:
            raise ValueError(f"features must be a non-empty [n, D] array, got shape {self.features.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.features),):
                raise ValueError("labels length must equal number of rows")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx, provenance: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.features[idx], labels, provenance or self.provenance)

    def unlabeled(self) -> "Dataset":
        return Dataset(self.features, None, self.provenance)


def gen_synthetic(
    n: int, classes: int, dim: int, cluster_sep: float, seed: int, center_seed: int | None = None
) -> Dataset:
    """Gaussian blobs with unit noise around class centers on a sphere of radius ``cluster_sep``.

    Labels are balanced (round-robin, then shuffled). ``center_seed`` lets two
    datasets share centers while drawing independent samples.
    """
    if not n >= classes >= 1:
        raise ConfigError(f"need n >= classes >= 1, got n={n}, classes={classes}")
    crng = np.random.default_rng([center_seed if center_seed is not None else seed, 1])
    centers = crng.standard_normal((classes, dim))
    centers *= cluster_sep / np.linalg.norm(centers, axis=1, keepdims=True)
    rng = np.random.default_rng([seed, 2])
    labels = rng.permutation(np.arange(n) % classes)
    features = centers[labels] + rng.standard_normal((n, dim))
    return Dataset(features, labels, f"synthetic(n={n},C={classes},D={dim},sep={cluster_sep},seed={seed})")


def load_cifar10_bin(path) -> Dataset:
    """Standard CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes."""
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{path}: label byte {labels.max()} > 9")
    return Dataset(rec[:, 1:].astype(np.float32) / 255.0, labels, f"cifar10:{path}")


# ---------------------------------------------------------------------------
# partitions


@dataclass
class Partition:
    clients: list[np.ndarray]
    seed: int
    beta: float | None = None
    meta: dict = field(default_factory=dict)

    def sizes(self) -> list[int]:
        return [len(c) for c in self.clients]

    def validate(self, n: int | None = None) -> None:
        seen = np.concatenate(self.clients) if self.clients else np.empty(0, dtype=np.int64)
        if any(len(c) == 0 for c in self.clients):
            raise PartitionError("empty client index list")
        if len(np.unique(seen)) != len(seen):
            raise PartitionError("client index lists overlap")
        if n is not None and len(seen) and (seen.min() < 0 or seen.max() >= n):
            raise PartitionError("index outside parent dataset")

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "beta": self.beta,
            "clients": {str(i): [int(j) for j in c] for i, c in enumerate(self.clients)},
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Partition":
        doc = json.loads(text)
        clients = [np.asarray(doc["clients"][k], dtype=np.int64) for k in sorted(doc["clients"], key=int)]
        return cls(clients, doc["seed"], doc.get("beta"))


def partition_uniform(ds: Dataset | int, n_clients: int, seed: int) -> Partition:
    n = ds if isinstance(ds, int) else len(ds)
    if n < n_clients:
        raise ConfigError(f"cannot split {n} samples over {n_clients} clients")
    order = np.random.default_rng([seed, 3]).permutation(n)
    return Partition([np.sort(c) for c in np.array_split(order, n_clients)], seed)


def _dirichlet(rng: np.random.Generator, beta: float, k: int) -> np.ndarray:
    while True:
        g = rng.gamma(beta, 1.0, size=k)
        total = g.sum()
        if total > 0 and np.isfinite(total):
            return g / total


def _apportion(raw: np.ndarray, count: int) -> np.ndarray:
    """Integer counts summing to ``count`` by largest remainder of ``raw``."""
    base = np.floor(raw).astype(np.int64)
    left = count - int(base.sum())
    order = np.lexsort((np.arange(len(raw)), -(raw - base)))
    base[order[:left]] += 1
    return base


def partition_dirichlet(
    ds: Dataset, n_clients: int, beta: float, seed: int, min_per_client: int = 2, max_retries: int = 100
) -> Partition:
    """Label-skewed split: per class, client shares ~ Dirichlet(beta)."""
    if ds.labels is None:
        raise ConfigError("Dirichlet partitioning needs labels")
    if beta <= 0:
        raise ConfigError("beta must be > 0")
    if n_clients < 1:
        raise ConfigError("need at least one client")
    classes = np.unique(ds.labels)
    for attempt in range(max_retries):
        rng = np.random.default_rng([seed, 4, attempt])
        buckets: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
        for c in classes:
            idx = rng.permutation(np.flatnonzero(ds.labels == c))
            counts = _apportion(_dirichlet(rng, beta, n_clients) * len(idx), len(idx))
            for i, part in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
                buckets[i].append(part)
        clients = [np.sort(np.concatenate(b)) for b in buckets]
        if min(len(c) for c in clients) >= min_per_client:
            return Partition(clients, seed, beta, {"attempts": attempt + 1})
    raise PartitionError(
        f"no Dirichlet draw gave every client >= {min_per_client} samples after {max_retries} tries; "
        "use a larger beta or fewer clients"
    )


def sample_auxiliary(ds: Dataset, ratio: float, seed: int) -> Dataset:
    """Class-stratified ceil(ratio * n) rows with labels stripped."""
    if not 0 < ratio <= 1:
        raise ConfigError("aux ratio must be in (0, 1]")
    n = len(ds)
    target = math.ceil(ratio * n - 1e-9)
    if target < 1:
        raise ConfigError("auxiliary sample is empty")
    rng = np.random.default_rng([seed, 5])
    if ds.labels is None:
        idx = np.sort(rng.choice(n, size=target, replace=False))
    else:
        classes, counts = np.unique(ds.labels, return_counts=True)
        take = _apportion(ratio * counts, target)
        picks = []
        for c, k in zip(classes, take):
            members = np.flatnonzero(ds.labels == c)
            picks.append(rng.choice(members, size=min(k, len(members)), replace=False))
        idx = np.sort(np.concatenate(picks))
    return Dataset(ds.features[idx], None, f"aux({ds.provenance},ratio={ratio})")


def stratified_split(labels: np.ndarray, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, 6])
    train, test = [], []
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        k = int(round(test_fraction * len(members)))
        test.append(members[:k])
        train.append(members[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))
