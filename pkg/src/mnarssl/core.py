"""Shared domain types and numeric conventions.

Class indices are 0-based everywhere inside the package. The file formats
handled by :mod:`mnarssl.io` use 1-based labels; conversion happens only
there. A missing label is stored internally as ``MISSING`` (-1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray

MISSING = -1

# floor applied to every probability before a logarithm
EPS_PROB = 1e-12

# default clamp for estimated mechanisms, (EPS_PHI, 1 - EPS_PHI)
EPS_PHI = 1e-3


class ValidationError(ValueError):
    """Raised when an input violates a documented invariant."""


class DivergenceError(RuntimeError):
    """Raised by iterative solvers when the objective blows up.

    The partial trace is attached so callers can report it.
    """

    def __init__(self, message: str, trace: Optional[list] = None) -> None:
        super().__init__(message)
        self.trace = trace or []


def _frozen(a: NDArray) -> NDArray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Features with optional labels and the missing-data indicator.

    ``labels[i] == MISSING`` exactly when ``indicator[i] == 0``.
    Arrays are copied and made read-only on construction.
    """

    features: NDArray[np.float64]
    labels: NDArray[np.int64]
    indicator: NDArray[np.int8]
    n_classes: int

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        object.__setattr__(self, "features", _frozen(x))
        object.__setattr__(self, "labels", _frozen(np.asarray(self.labels, dtype=np.int64)))
        object.__setattr__(self, "indicator", _frozen(np.asarray(self.indicator, dtype=np.int8)))
        object.__setattr__(self, "n_classes", int(self.n_classes))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_labeled(self) -> int:
        return int(self.indicator.sum())

    @property
    def n_unlabeled(self) -> int:
        return self.n - self.n_labeled

    @property
    def labeled_mask(self) -> NDArray[np.bool_]:
        return self.indicator == 1

    def labeled_counts(self) -> NDArray[np.int64]:
        """Number of observed labels per class."""
        lab = self.labels[self.labeled_mask]
        return np.bincount(lab, minlength=self.n_classes).astype(np.int64)

    def take(self, idx: Sequence[int] | NDArray) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.labels[idx], self.indicator[idx], self.n_classes)

    @classmethod
    def fully_labeled(cls, features, labels, n_classes: int) -> "Dataset":
        labels = np.asarray(labels, dtype=np.int64)
        return cls(features, labels, np.ones(labels.shape[0], dtype=np.int8), n_classes)


@dataclass(frozen=True)
class SealedLabels:
    """Ground truth for masked samples, kept apart from :class:`Dataset`.

    Estimators never receive this object. Only evaluation code calls
    :meth:`reveal`.
    """

    _labels: NDArray[np.int64] = field(repr=False)
    phi_star: Optional[NDArray[np.float64]] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "_labels", _frozen(np.asarray(self._labels, dtype=np.int64)))
        if self.phi_star is not None:
            object.__setattr__(self, "phi_star", _frozen(np.asarray(self.phi_star, dtype=np.float64)))

    def reveal(self) -> NDArray[np.int64]:
        return self._labels

    def __len__(self) -> int:
        return self._labels.shape[0]


@dataclass(frozen=True)
class Mechanism:
    """Per-class observation probabilities P(r=1 | y=k).

    ``phi`` is the clamped vector used for training; ``raw`` keeps the
    unclamped estimate (if one exists) for diagnostics.
    """

    phi: NDArray[np.float64]
    raw: Optional[NDArray[np.float64]] = None

    def __post_init__(self) -> None:
        phi = np.asarray(self.phi, dtype=np.float64)
        if phi.ndim != 1:
            raise ValidationError("phi must be a vector")
        if not np.all((phi > 0) & (phi < 1)):
            raise ValidationError(f"phi components must lie in (0, 1), got {phi.tolist()}")
        object.__setattr__(self, "phi", _frozen(phi))
        if self.raw is not None:
            object.__setattr__(self, "raw", _frozen(np.asarray(self.raw, dtype=np.float64)))

    @property
    def n_classes(self) -> int:
        return self.phi.shape[0]

    @classmethod
    def clamped(cls, raw, eps: float = EPS_PHI) -> "Mechanism":
        raw = np.asarray(raw, dtype=np.float64)
        return cls(np.clip(raw, eps, 1.0 - eps), raw)


def validate(dataset: Dataset) -> None:
    """Check every :class:`Dataset` invariant; raise on the first violation."""
    x, y, r, K = dataset.features, dataset.labels, dataset.indicator, dataset.n_classes
    if K < 2:
        raise ValidationError(f"need at least 2 classes, got K={K}")
    n = x.shape[0]
    if y.shape != (n,) or r.shape != (n,):
        raise ValidationError(f"labels/indicator must have length n={n}")
    if not np.all(np.isfinite(x)):
        i = int(np.argwhere(~np.isfinite(x))[0, 0])
        raise ValidationError(f"non-finite feature at index {i}")
    bad = np.flatnonzero((r != 0) & (r != 1))
    if bad.size:
        raise ValidationError(f"indicator not in {{0,1}} at index {bad[0]}")
    bad = np.flatnonzero((r == 1) & (y == MISSING))
    if bad.size:
        raise ValidationError(f"indicator is 1 but label is absent at index {bad[0]}")
    bad = np.flatnonzero((r == 0) & (y != MISSING))
    if bad.size:
        raise ValidationError(f"indicator is 0 but label is present at index {bad[0]}")
    bad = np.flatnonzero((r == 1) & ((y < 0) | (y >= K)))
    if bad.size:
        raise ValidationError(f"label out of range at index {bad[0]}")
    if int(r.sum()) == 0:
        raise ValidationError("no labeled samples")


class MinibatchStream:
    """Endless minibatches from a fixed index set.

    Each pass draws without replacement and the order is reshuffled when a
    pass is exhausted. A batch size at least the set size yields the whole
    set every time, in its original order.
    """

    def __init__(self, idx: NDArray, batch_size: int, rng: np.random.Generator) -> None:
        self.idx, self.batch_size, self.rng = np.asarray(idx), batch_size, rng
        self.full = self.batch_size >= self.idx.size
        self.order = self.idx if self.full else rng.permutation(self.idx)
        self.pos = 0

    def next(self) -> NDArray:
        if self.full:
            return self.idx
        if self.pos + self.batch_size > self.order.size:
            self.order = self.rng.permutation(self.idx)
            self.pos = 0
        out = self.order[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return out


def make_rng(seed: int | np.random.SeedSequence | None) -> np.random.Generator:
    return np.random.default_rng(seed)


def spawn_seeds(seed: int, count: int) -> list[np.random.SeedSequence]:
    """Independent child seeds for replicates; stable for a given base seed."""
    return np.random.SeedSequence(seed).spawn(count)


def check_simplex(p: NDArray, tol: float = 1e-9, what: str = "vector") -> NDArray[np.float64]:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or np.any(p < -tol) or abs(p.sum() - 1.0) > tol:
        raise ValidationError(f"{what} is not a probability simplex: {p.tolist()}")
    return p
