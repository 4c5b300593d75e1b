"""Synthetic class-structured data, non-IID client splits and OOD test sets."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .gmm import CovarianceType, GmmParams, InvalidInputError

CLASS_VARIANCE = 0.01


@dataclass(frozen=True)
class LabeledDataset:
    rows: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        rows = np.atleast_2d(np.asarray(self.rows, dtype=float))
        labels = np.asarray(self.labels, dtype=int)
        if labels.shape != (rows.shape[0],):
            raise InvalidInputError("one label per row required")
        if labels.size and labels.min() < 0:
            raise InvalidInputError("labels must be non-negative")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "labels", labels)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.rows[idx], self.labels[idx])


@dataclass(frozen=True)
class Partition:
    assignments: tuple  # one sorted index array per client

    @property
    def n_clients(self) -> int:
        return len(self.assignments)

    def client_rows(self, data: LabeledDataset) -> list[np.ndarray]:
        return [data.rows[idx] for idx in self.assignments]

    def to_records(self, labels: np.ndarray) -> list[tuple[int, int, int]]:
        """``(row_index, client_id, label)`` sorted by row index."""
        recs = [(int(i), c, int(labels[i])) for c, idx in enumerate(self.assignments) for i in idx]
        return sorted(recs)


class PartitionScheme(str, Enum):
    DIRICHLET = "dirichlet"
    QUANTITY = "quantity"


@dataclass(frozen=True)
class PartitionSpec:
    scheme: PartitionScheme
    alpha: float
    n_clients: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scheme", PartitionScheme(self.scheme))
        if self.n_clients < 1:
            raise InvalidInputError("n_clients must be >= 1")
        if self.alpha <= 0:
            raise InvalidInputError("alpha must be positive")
        if self.scheme is PartitionScheme.QUANTITY and int(self.alpha) != self.alpha:
            raise InvalidInputError("Quantity alpha must be an integer")

    def apply(self, data: LabeledDataset) -> Partition:
        if self.scheme is PartitionScheme.DIRICHLET:
            return partition_dirichlet(data, self.n_clients, self.alpha, self.seed)
        return partition_quantity(data, self.n_clients, int(self.alpha), self.seed)


class OodKind(str, Enum):
    ADDITIVE_GAUSSIAN = "gaussian"
    MIXTURE_SHIFT = "shift"


@dataclass(frozen=True)
class OodSpec:
    kind: OodKind = OodKind.ADDITIVE_GAUSSIAN
    variance: float = 0.005
    delta: Optional[tuple] = None
    anomaly_ratio: float = 0.10

    def __post_init__(self):
        object.__setattr__(self, "kind", OodKind(self.kind))
        if not 0 < self.anomaly_ratio < 1:
            raise InvalidInputError("anomaly_ratio must lie in (0, 1)")
        if self.kind is OodKind.ADDITIVE_GAUSSIAN and not self.variance > 0:
            raise InvalidInputError("noise variance must be positive")
        if self.kind is OodKind.MIXTURE_SHIFT:
            if self.delta is None:
                raise InvalidInputError("MixtureShift needs a delta vector")
            object.__setattr__(self, "delta", tuple(float(v) for v in self.delta))

    def perturb(self, rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.kind is OodKind.ADDITIVE_GAUSSIAN:
            out = rows + rng.normal(0.0, np.sqrt(self.variance), size=rows.shape)
        else:
            delta = np.asarray(self.delta)
            if delta.shape != (rows.shape[1],):
                raise InvalidInputError(f"delta has {delta.size} entries, rows have {rows.shape[1]} features")
            out = rows + delta
        return np.clip(out, 0.0, 1.0)


def minmax_normalize(rows: np.ndarray):
    """Scale each column to [0, 1]; constant columns become 0. Returns ``(scaled, lo, span)``."""
    x = np.asarray(rows, dtype=float)
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    safe = np.where(span > 0, span, 1.0)
    scaled = np.where(span > 0, (x - lo) / safe, 0.0)
    return scaled, lo, span


def _balanced_counts(total: int, parts: int) -> np.ndarray:
    counts = np.full(parts, total // parts)
    counts[: total % parts] += 1
    return counts


def gen_mixture_dataset(
    m_classes: int, d: int, n: int, separation: float = 1.0, seed: int = 0
) -> tuple[LabeledDataset, GmmParams]:
    """Classes centered at ``(m - 1) * separation`` along the all-ones direction.

    Each class adds N(0, 0.01 I) noise to its center; rows are then min-max
    normalised. The generating mixture is returned in the normalised
    coordinates, with weights equal to the class proportions.
    """
    if min(m_classes, d, n) < 1:
        raise InvalidInputError("m_classes, d and n must be >= 1")
    rng = np.random.default_rng(seed)
    counts = _balanced_counts(n, m_classes)
    labels = np.repeat(np.arange(m_classes), counts)
    rng.shuffle(labels)
    centers = np.arange(m_classes)[:, None] * separation * np.ones((1, d))
    raw = centers[labels] + rng.normal(0.0, np.sqrt(CLASS_VARIANCE), size=(n, d))
    rows, lo, span = minmax_normalize(raw)
    safe = np.where(span > 0, span, 1.0)
    truth = GmmParams(
        counts / n,
        (centers - lo) / safe,
        np.tile(CLASS_VARIANCE / safe**2, (m_classes, 1)),
        CovarianceType.DIAGONAL,
    )
    return LabeledDataset(rows, labels), truth


def largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    """Integer split of ``total`` following ``proportions`` (Hamilton's method)."""
    p = np.asarray(proportions, dtype=float)
    raw = total * p / p.sum()
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    if short:
        # stable sort keeps the lower client index first on equal remainders
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _ensure_nonempty(buckets: list[list[int]]) -> None:
    for c, bucket in enumerate(buckets):
        if not bucket:
            donor = max(range(len(buckets)), key=lambda j: (len(buckets[j]), -j))
            bucket.append(buckets[donor].pop())


def _finalize(buckets: list[list[int]]) -> Partition:
    return Partition(tuple(np.sort(np.asarray(b, dtype=int)) for b in buckets))


def partition_dirichlet(data: LabeledDataset, n_clients: int, alpha: float, seed: int = 0) -> Partition:
    """Per class, split its rows over clients by a Dir(alpha) draw.

    Small alpha concentrates each class on a few clients and makes client
    sizes uneven. Empty clients take one row from the largest client.
    """
    n = data.labels.size
    if n_clients < 1 or alpha <= 0:
        raise InvalidInputError("n_clients must be >= 1 and alpha > 0")
    if n_clients > n:
        raise InvalidInputError(f"{n_clients} clients but only {n} rows")
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for m in range(data.n_classes):
        idx = np.flatnonzero(data.labels == m)
        if idx.size == 0:
            continue
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(n_clients, alpha))
        counts = largest_remainder(idx.size, props)
        for c, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            buckets[c].extend(chunk.tolist())
    _ensure_nonempty(buckets)
    return _finalize(buckets)


def partition_quantity(
    data: LabeledDataset, n_clients: int, alpha: int, seed: int = 0, max_draws: int = 10_000
) -> Partition:
    """Each client holds ``alpha`` random classes; a class is split evenly over its holders.

    Class choices are redrawn until every class has at least one holder.
    """
    n_classes = data.n_classes
    if n_clients < 1 or not 1 <= alpha <= n_classes:
        raise InvalidInputError(f"alpha must lie in [1, {n_classes}], got {alpha}")
    if n_clients * alpha < n_classes:
        raise InvalidInputError("too few client slots to cover every class")
    if n_clients > data.labels.size:
        raise InvalidInputError(f"{n_clients} clients but only {data.labels.size} rows")
    rng = np.random.default_rng(seed)
    for _ in range(max_draws):
        held = [rng.choice(n_classes, size=alpha, replace=False) for _ in range(n_clients)]
        if np.unique(np.concatenate(held)).size == n_classes:
            break
    else:
        raise InvalidInputError("could not cover every class; raise alpha or n_clients")

    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for m in range(n_classes):
        holders = [c for c in range(n_clients) if m in held[c]]
        idx = np.flatnonzero(data.labels == m)
        rng.shuffle(idx)
        counts = largest_remainder(idx.size, np.ones(len(holders)))
        for c, chunk in zip(holders, np.split(idx, np.cumsum(counts)[:-1])):
            buckets[c].extend(chunk.tolist())
    _ensure_nonempty(buckets)
    return _finalize(buckets)


def build_anomaly_testset(
    inliers: LabeledDataset,
    ood_spec: OodSpec,
    n_test: int,
    seed: int = 0,
    ood_source: Optional[LabeledDataset] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Mix clean inlier rows with ``round(ratio * n_test)`` perturbed rows.

    Perturbed rows come from ``ood_source`` when given, otherwise from inlier
    rows not used as clean inliers. Label 1 marks an anomaly. Row order is
    shuffled.
    """
    rng = np.random.default_rng(seed)
    n_ood = int(round(ood_spec.anomaly_ratio * n_test))
    n_in = n_test - n_ood
    pool = inliers.rows
    if ood_source is None:
        if n_test > pool.shape[0]:
            raise InvalidInputError(f"need {n_test} rows, inlier pool has {pool.shape[0]}")
        pick = rng.permutation(pool.shape[0])[:n_test]
        clean, base = pool[pick[:n_in]], pool[pick[n_in:]]
    else:
        if n_in > pool.shape[0] or n_ood > ood_source.rows.shape[0]:
            raise InvalidInputError("not enough rows for the requested test set")
        clean = pool[rng.permutation(pool.shape[0])[:n_in]]
        base = ood_source.rows[rng.permutation(ood_source.rows.shape[0])[:n_ood]]
    rows = np.concatenate([clean, ood_spec.perturb(base, rng)])
    labels = np.r_[np.zeros(n_in, dtype=int), np.ones(n_ood, dtype=int)]
    order = rng.permutation(n_test)
    return rows[order], labels[order]


def split_indices(n: int, fractions: Sequence[float], seed: int) -> list[np.ndarray]:
    """Disjoint random index sets with the given fractions (the last takes the remainder)."""
    perm = np.random.default_rng(seed).permutation(n)
    cuts = np.round(np.cumsum(fractions)[:-1] * n).astype(int)
    return [np.sort(part) for part in np.split(perm, cuts)]
