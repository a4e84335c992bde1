"""Synthetic classification data and non-IID client partitioning.

Two heterogeneity regimes are supported: label skew, which allocates each
class across clients by a Dirichlet draw, and feature skew, which assigns
each client one fixed domain transform (orthogonal rotation plus bias shift)
of an otherwise IID split.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import ConfigError
from .rng import child_rng


class PartitionError(RuntimeError):
    """Could not produce a valid partition under the given constraints."""


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2 or labels.shape != (inputs.shape[0],):
            raise ConfigError("dataset needs inputs (n, dim) and labels (n,)")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class Shard:
    """One client's private slice of the data."""

    client_id: int
    inputs: np.ndarray
    labels: np.ndarray

    @property
    def d(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class PartitionPlan:
    """How the training data is split across clients."""

    regime: str  # "label_skew" | "feature_skew"
    concentration: float = 0.1
    num_domains: int = 1
    shift_scale: float = 10.0

    def __post_init__(self):
        if self.regime not in ("label_skew", "feature_skew"):
            raise ConfigError(f"unknown partition regime {self.regime!r}")
        if self.concentration <= 0:
            raise ConfigError("concentration must be positive")
        if self.num_domains < 1:
            raise ConfigError("num_domains must be >= 1")


def generate_dataset(num_classes: int, dim: int, per_class: int, seed: int,
                     separation: float = 4.0) -> Dataset:
    """Balanced Gaussian class clusters with unit within-class std.

    Class means are scaled so the minimum pairwise distance between means
    equals `separation` (in units of the within-class std). Deterministic
    under seed.
    """
    if num_classes < 1 or dim < 1 or per_class < 1:
        raise ConfigError("num_classes, dim, and per_class must be positive")
    rng = child_rng(seed, "dataset")
    means = rng.normal(size=(num_classes, dim))
    if num_classes > 1:
        dists = [
            float(np.linalg.norm(means[i] - means[j]))
            for i in range(num_classes)
            for j in range(i + 1, num_classes)
        ]
        means *= separation / min(dists)
    labels = np.repeat(np.arange(num_classes), per_class)
    inputs = means[labels] + rng.normal(size=(labels.size, dim))
    return Dataset(inputs=inputs, labels=labels, num_classes=num_classes)


def split_train_test(dataset: Dataset, test_fraction: float, seed: int):
    """IID train/test split by a seeded permutation."""
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigError("test_fraction must be in [0, 1)")
    n = len(dataset)
    n_test = int(round(n * test_fraction))
    perm = child_rng(seed, "split").permutation(n)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    train = Dataset(dataset.inputs[train_idx], dataset.labels[train_idx], dataset.num_classes)
    test = Dataset(dataset.inputs[test_idx], dataset.labels[test_idx], dataset.num_classes)
    return train, test


def dirichlet_partition(dataset: Dataset, num_clients: int, concentration: float,
                        seed: int, min_shard_size: int = 1, max_retries: int = 100) -> list:
    """Label-skew split: each class is spread over clients by a Dirichlet draw.

    Every sample lands in exactly one shard. If a draw leaves any client
    below min_shard_size the whole allocation is redrawn (up to max_retries);
    should every redraw fail (tiny concentration over many clients makes a
    clean draw vanishingly rare), the last draw is repaired by moving single
    samples from the largest shards to the deficient clients.
    """
    if num_clients < 1:
        raise ConfigError("num_clients must be >= 1")
    if concentration <= 0:
        raise ConfigError("concentration must be positive")
    if num_clients * min_shard_size > len(dataset):
        raise PartitionError(
            f"cannot give {num_clients} clients >= {min_shard_size} samples from {len(dataset)} total"
        )
    rng = child_rng(seed, "dirichlet")
    classes = np.unique(dataset.labels)
    assigned = None
    for _ in range(max_retries):
        assigned = [[] for _ in range(num_clients)]
        for c in classes:
            idx = np.flatnonzero(dataset.labels == c)
            rng.shuffle(idx)
            proportions = rng.dirichlet(np.full(num_clients, concentration))
            cuts = (np.cumsum(proportions) * idx.size).astype(int)[:-1]
            for client_id, part in enumerate(np.split(idx, cuts)):
                assigned[client_id].extend(part.tolist())
        if all(len(a) >= min_shard_size for a in assigned):
            return _shards_from_indices(dataset, assigned)
    while True:
        sizes = [len(a) for a in assigned]
        needy = min(range(num_clients), key=lambda i: sizes[i])
        if sizes[needy] >= min_shard_size:
            break
        donor = max(range(num_clients), key=lambda i: sizes[i])
        if sizes[donor] <= min_shard_size:
            raise PartitionError(f"cannot repair allocation to shards >= {min_shard_size}")
        assigned[needy].append(assigned[donor].pop())
    return _shards_from_indices(dataset, assigned)


def domain_transform(dim: int, domain_id: int, seed: int, shift_scale: float = 10.0):
    """Fixed (rotation, shift) for one domain, deterministic per (seed, domain)."""
    rng = child_rng(seed, "domain", domain_id)
    raw = rng.normal(size=(dim, dim))
    q, r = np.linalg.qr(raw)
    q = q * np.sign(np.diag(r))  # fix column signs so the factorization is unique
    shift = shift_scale * rng.normal(size=dim)
    return q, shift


def feature_skew_partition(dataset: Dataset, num_clients: int, num_domains: int,
                           seed: int, shift_scale: float = 10.0) -> list:
    """Feature-skew split: IID shards, each pushed through one domain transform.

    Client i gets domain i mod num_domains; labels are untouched.
    """
    if num_clients < 1 or num_domains < 1:
        raise ConfigError("num_clients and num_domains must be >= 1")
    if num_clients > len(dataset):
        raise PartitionError(f"cannot give {num_clients} clients >= 1 sample from {len(dataset)} total")
    rng = child_rng(seed, "feature-skew")
    perm = rng.permutation(len(dataset))
    transforms = [domain_transform(dataset.dim, d, seed, shift_scale) for d in range(num_domains)]
    shards = []
    for client_id, part in enumerate(np.array_split(perm, num_clients)):
        idx = np.sort(part)
        rotation, shift = transforms[client_id % num_domains]
        shards.append(
            Shard(
                client_id=client_id,
                inputs=dataset.inputs[idx] @ rotation.T + shift,
                labels=dataset.labels[idx].copy(),
            )
        )
    return shards


def _shards_from_indices(dataset: Dataset, assigned) -> list:
    shards = []
    for client_id, idx in enumerate(assigned):
        idx = np.sort(np.asarray(idx, dtype=np.int64))
        shards.append(
            Shard(client_id=client_id, inputs=dataset.inputs[idx].copy(), labels=dataset.labels[idx].copy())
        )
    return shards


def export_shards_csv(shards, path) -> None:
    """One row per sample: client_id, label, then the feature values."""
    if not shards:
        raise ConfigError("nothing to export")
    dim = shards[0].inputs.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client_id", "label"] + [f"f{j}" for j in range(dim)])
        for shard in shards:
            for row in range(shard.d):
                writer.writerow(
                    [shard.client_id, int(shard.labels[row])] + [repr(v) for v in shard.inputs[row]]
                )
