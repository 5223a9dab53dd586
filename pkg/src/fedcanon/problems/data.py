"""Sparse labelled datasets and LIBSVM text I/O."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np


class ParseError(ValueError):
    """Malformed LIBSVM input; ``line`` is 1-based (0 when not line-specific)."""

    def __init__(self, message: str, line: int = 0):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Row-compressed sparse design matrix with integer class labels.

    ``indices`` are 0-based and strictly increasing within each row.
    """

    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    labels: np.ndarray
    dim: int
    num_classes: int

    def __post_init__(self):
        n = len(self.labels)
        if n < 1:
            raise ValueError("dataset must contain at least one row")
        if len(self.indptr) != n + 1:
            raise ValueError("indptr length must be rows + 1")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= self.dim):
            raise ValueError(f"feature index out of range for dim={self.dim}")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    @classmethod
    def from_dense(cls, X, labels, num_classes: int | None = None) -> "Dataset":
        X = np.asarray(X, dtype=float)
        labels = np.asarray(labels, dtype=np.int64)
        rows, cols = np.nonzero(X)
        indptr = np.zeros(X.shape[0] + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=X.shape[0]), out=indptr[1:])
        k = num_classes if num_classes is not None else int(labels.max()) + 1
        return cls(indptr, cols.astype(np.int64), X[rows, cols], labels, X.shape[1], k)

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.num_classes == other.num_classes
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.labels, other.labels)
        )

    def row(self, i: int) -> dict[int, float]:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return dict(zip(self.indices[lo:hi].tolist(), self.values[lo:hi].tolist()))

    @cached_property
    def X(self) -> np.ndarray:
        out = np.zeros((len(self), self.dim))
        rows = np.repeat(np.arange(len(self)), np.diff(self.indptr))
        out[rows, self.indices] = self.values
        out.flags.writeable = False
        return out

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        starts, stops = self.indptr[rows], self.indptr[rows + 1]
        pos = np.concatenate([np.arange(a, b) for a, b in zip(starts, stops)]) if len(rows) else np.zeros(0, np.int64)
        indptr = np.zeros(len(rows) + 1, dtype=np.int64)
        np.cumsum(stops - starts, out=indptr[1:])
        return Dataset(indptr, self.indices[pos], self.values[pos], self.labels[rows], self.dim, self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def _remap_labels(raw: list[float], first_line: list[int]) -> tuple[np.ndarray, int]:
    labels = np.asarray(raw)
    if np.any(labels != np.round(labels)):
        bad = int(np.flatnonzero(labels != np.round(labels))[0])
        raise ParseError(f"non-integer label {raw[bad]!r}", first_line[bad])
    labels = labels.astype(np.int64)
    if set(np.unique(labels).tolist()) <= {-1, 1}:
        return (labels + 1) // 2, 2
    if labels.min() < 0:
        bad = int(np.flatnonzero(labels < 0)[0])
        raise ParseError(f"negative label {labels[bad]} outside the {{-1,+1}} convention", first_line[bad])
    return labels, max(int(labels.max()) + 1, 2)


def parse_libsvm(text: bytes | str, dim: int | None = None) -> Dataset:
    """Parse ``<label> <idx>:<val> ...`` lines with 1-based, strictly increasing indices.

    Labels in ``{-1, +1}`` become ``{0, 1}``; other nonnegative integer labels
    are kept.  ``dim`` overrides the inferred dimension (the largest index
    seen) so that train and test files can share a feature space.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    labels, line_nos, indices, values = [], [], [], []
    indptr = [0]
    for line_no, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        try:
            labels.append(float(tokens[0]))
        except ValueError:
            raise ParseError(f"malformed label {tokens[0]!r}", line_no) from None
        line_nos.append(line_no)
        prev = 0
        for tok in tokens[1:]:
            idx_s, sep, val_s = tok.partition(":")
            try:
                if not sep:
                    raise ValueError
                idx, val = int(idx_s), float(val_s)
            except ValueError:
                raise ParseError(f"malformed feature token {tok!r}", line_no) from None
            if idx < 1:
                raise ParseError(f"feature index {idx} is not 1-based", line_no)
            if idx <= prev:
                raise ParseError(f"feature indices not strictly increasing ({prev} then {idx})", line_no)
            prev = idx
            indices.append(idx - 1)
            values.append(val)
        indptr.append(len(indices))
    if not labels:
        raise ParseError("empty dataset")

    seen = max(indices) + 1 if indices else 0
    if dim is None:
        dim = max(seen, 1)
    elif dim < seen:
        raise ParseError(f"feature index {seen} exceeds dim override {dim}")
    y, k = _remap_labels(labels, line_nos)
    return Dataset(
        np.asarray(indptr, dtype=np.int64),
        np.asarray(indices, dtype=np.int64),
        np.asarray(values, dtype=float),
        y,
        int(dim),
        k,
    )


def dump_libsvm(ds: Dataset) -> str:
    """Serialize so that ``parse_libsvm(dump_libsvm(ds), ds.dim) == ds``."""
    lines = []
    for i in range(len(ds)):
        label = ds.labels[i]
        head = ("+1" if label == 1 else "-1") if ds.num_classes == 2 else str(label)
        lo, hi = ds.indptr[i], ds.indptr[i + 1]
        feats = " ".join(f"{j + 1}:{v!r}" for j, v in zip(ds.indices[lo:hi].tolist(), ds.values[lo:hi].tolist()))
        lines.append(f"{head} {feats}".rstrip())
    return "\n".join(lines) + "\n"


def load_libsvm(path, dim: int | None = None) -> Dataset:
    return parse_libsvm(Path(path).read_bytes(), dim=dim)


@dataclass(frozen=True, eq=False)
class DatasetShard:
    """Local data of client ``owner``: dense features and targets."""

    owner: int
    indices: np.ndarray
    X: np.ndarray
    y: np.ndarray

    @property
    def m(self) -> int:
        return len(self.y)

    @classmethod
    def from_dataset(cls, ds: Dataset, owner: int, indices) -> "DatasetShard":
        indices = np.asarray(indices, dtype=np.int64)
        return cls(owner, indices, ds.X[indices], ds.labels[indices])


def synth_classification(n_samples: int, n_features: int, n_classes: int, seed: int,
                         separation: float = 1.0, noise: float = 1.0) -> Dataset:
    """Gaussian class clusters plus a constant bias feature (last column)."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=separation, size=(n_classes, n_features))
    labels = np.tile(np.arange(n_classes), n_samples // n_classes + 1)[:n_samples]
    rng.shuffle(labels)
    X = centers[labels] + noise * rng.normal(size=(n_samples, n_features))
    X = np.hstack([X, np.ones((n_samples, 1))])
    return Dataset.from_dense(X, labels, n_classes)
