"""Reproducible i.i.d. and Dirichlet label-skew splits of a dataset across clients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problems.data import Dataset, DatasetShard

MAX_REDRAWS = 100


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "iid"  # "iid" | "dirichlet"
    n_clients: int = 1
    eta: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("iid", "dirichlet"):
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if self.mode == "dirichlet" and not (self.eta is not None and self.eta > 0):
            raise ValueError("dirichlet partitioning requires eta > 0")

    @classmethod
    def from_dict(cls, spec: dict, default_seed: int = 0) -> "PartitionSpec":
        spec = dict(spec)
        unknown = set(spec) - {"mode", "eta", "n_clients", "seed"}
        if unknown:
            raise ValueError(f"unknown partition fields: {sorted(unknown)}")
        eta = spec.get("eta")
        return cls(spec.get("mode", "iid"), int(spec.get("n_clients", 1)),
                   None if eta is None else float(eta), int(spec.get("seed", default_seed)))


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` that track ``total * proportions``.

    Ties in the fractional parts go to the lower client index.
    """
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def partition(dataset: Dataset, spec: PartitionSpec) -> list[DatasetShard]:
    """Split ``dataset`` into ``spec.n_clients`` disjoint, exhaustive shards.

    Dirichlet mode draws, per class, client proportions ``p ~ Dir(eta * 1_N)``
    and assigns that class's (shuffled) rows by largest-remainder counts.  The
    whole draw is repeated until every client owns at least one row.
    """
    return [DatasetShard.from_dataset(dataset, i, idx) for i, idx in enumerate(partition_indices(dataset, spec))]


def partition_indices(dataset: Dataset, spec: PartitionSpec) -> list[np.ndarray]:
    """Sorted row indices per client; see :func:`partition`."""
    n, N = len(dataset), spec.n_clients
    if n < N:
        raise PartitionError(f"{n} samples cannot cover {N} clients")
    rng = np.random.default_rng(spec.seed)
    if N == 1:
        return [np.arange(n)]
    if spec.mode == "iid":
        return [np.sort(part) for part in np.array_split(rng.permutation(n), N)]

    by_class = [np.flatnonzero(dataset.labels == c) for c in range(dataset.num_classes)]
    by_class = [rng.permutation(rows) for rows in by_class if len(rows)]
    for _ in range(MAX_REDRAWS):
        buckets = [[] for _ in range(N)]
        for rows in by_class:
            counts = largest_remainder(rng.dirichlet(np.full(N, spec.eta)), len(rows))
            for client, chunk in enumerate(np.split(rows, np.cumsum(counts)[:-1])):
                buckets[client].append(chunk)
        shards = [np.sort(np.concatenate(b)) for b in buckets]
        if all(len(s) for s in shards):
            return shards
    raise PartitionError(f"could not give every one of {N} clients a sample after {MAX_REDRAWS} Dirichlet draws")


@dataclass(frozen=True)
class HeterogeneityReport:
    histograms: np.ndarray  # (N, num_classes) label counts
    tv_distance: np.ndarray  # per-client TV distance to the global label distribution

    @property
    def mean_tv(self) -> float:
        return float(self.tv_distance.mean())

    @property
    def mean_max_class_fraction(self) -> float:
        frac = self.histograms / self.histograms.sum(axis=1, keepdims=True)
        return float(frac.max(axis=1).mean())


def heterogeneity_report(shards, dataset: Dataset) -> HeterogeneityReport:
    rows = [s.indices if isinstance(s, DatasetShard) else np.asarray(s) for s in shards]
    hist = np.stack([np.bincount(dataset.labels[r], minlength=dataset.num_classes) for r in rows])
    glob = dataset.class_counts() / len(dataset)
    local = hist / hist.sum(axis=1, keepdims=True)
    tv = 0.5 * np.abs(local - glob).sum(axis=1)
    return HeterogeneityReport(hist, tv)
