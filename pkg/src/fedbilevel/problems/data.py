"""Datasets, CSV I/O and client partitioning."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ..rng import PROBLEM, stream
from .base import InvalidArgument


@dataclass
class Dataset:
    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,)
    # positions in the pool the samples came from; lets partitions be audited
    index: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        self.labels = np.asarray(self.labels, dtype=float).reshape(-1)
        if self.features.shape[0] != self.labels.shape[0]:
            raise InvalidArgument("features and labels disagree on the number of samples")
        if self.index is None:
            self.index = np.arange(len(self.labels))
        self.index = np.asarray(self.index, dtype=int)

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.features[idx], self.labels[idx], self.index[idx])


def write_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"feature_{j}" for j in range(ds.dim)] + ["label"])
        for a, b in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in a] + [repr(float(b))])


def read_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InvalidArgument(f"{path}: empty file")
    header = rows[0]
    d = len(header) - 1
    if d < 1 or header[-1] != "label" or header[:-1] != [f"feature_{j}" for j in range(d)]:
        raise InvalidArgument(f"{path}: header must be feature_0,...,feature_{{d-1}},label")
    data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float).reshape(-1, d + 1)
    return Dataset(data[:, :d], data[:, d])


def make_logistic_data(n: int, dim: int, seed: int = 0, margin: float = 4.0) -> tuple[Dataset, np.ndarray]:
    """Binary labels in {0, 1} drawn from a logistic model with a random unit direction."""
    rng = stream(seed, PROBLEM, 1)
    w = rng.standard_normal(dim)
    w *= margin / np.linalg.norm(w)
    A = rng.standard_normal((n, dim))
    prob = 1.0 / (1.0 + np.exp(-A @ w))
    b = (rng.random(n) < prob).astype(float)
    return Dataset(A, b), w


def flip_labels(ds: Dataset, rate: float, seed: int = 0) -> tuple[Dataset, np.ndarray]:
    """Flip a ``rate`` fraction of binary labels; returns the new dataset and a corruption mask."""
    if not 0 <= rate <= 1:
        raise InvalidArgument("corruption rate must be in [0, 1]")
    rng = stream(seed, PROBLEM, 2)
    n = len(ds)
    k = int(round(rate * n))
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[:k]] = True
    labels = ds.labels.copy()
    labels[mask] = 1.0 - labels[mask]
    return Dataset(ds.features.copy(), labels, ds.index.copy()), mask


def partition_dataset(pool: Dataset, M: int, mode: str = "iid", seed: int = 0,
                      alpha: float = 1.0) -> list[Dataset]:
    """Split ``pool`` into ``M`` disjoint client datasets.

    ``mode`` is ``"iid"`` (shuffled equal split), ``"sorted_label"`` (stable sort
    by label, contiguous equal split) or ``"dirichlet"`` (per-label proportions
    drawn from ``Dir(alpha)``; every client keeps at least one sample).
    """
    n = len(pool)
    if M < 1:
        raise InvalidArgument("M must be >= 1")
    if M > n:
        raise InvalidArgument(f"cannot split {n} samples across {M} clients")
    rng = stream(seed, PROBLEM, 3)
    if mode == "iid":
        parts = np.array_split(rng.permutation(n), M)
    elif mode == "sorted_label":
        parts = np.array_split(np.argsort(pool.labels, kind="stable"), M)
    elif mode == "dirichlet":
        if alpha <= 0:
            raise InvalidArgument("dirichlet alpha must be positive")
        buckets = [[] for _ in range(M)]
        for lab in np.unique(pool.labels):
            idx = rng.permutation(np.flatnonzero(pool.labels == lab))
            props = rng.dirichlet(np.full(M, float(alpha)))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
            for m, chunk in enumerate(np.split(idx, cuts)):
                buckets[m].extend(chunk.tolist())
        # keep every client non-empty by moving samples from the largest
        for m in range(M):
            while not buckets[m]:
                big = max(range(M), key=lambda j: len(buckets[j]))
                buckets[m].append(buckets[big].pop())
        parts = [np.sort(np.array(b, dtype=int)) for b in buckets]
    else:
        raise InvalidArgument(f"unknown partition mode {mode!r}")
    return [pool.subset(np.asarray(p, dtype=int)) for p in parts]
