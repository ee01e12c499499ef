"""Inter-/intra-category diversity and per-category EMA prototypes."""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .errors import InvalidInputError

MISSING_PROTOTYPE_SCORE = 0.5


def as_feature(values) -> np.ndarray:
    f = np.asarray(values, dtype=float)
    if f.ndim != 1 or f.size < 1 or not np.all(np.isfinite(f)):
        raise InvalidInputError("feature must be a finite non-empty vector")
    return f


def inter_class_diversity(n: int, gamma: float = 0.01) -> float:
    """Rarity bonus ``1 / (1 + exp(gamma * n - 1))`` for a category with ``n`` labels."""
    if n < 0:
        raise InvalidInputError(f"labeled count must be >= 0, got {n}")
    if not gamma > 0:
        raise InvalidInputError(f"gamma must be > 0, got {gamma}")
    z = gamma * n - 1.0
    if z > 700:
        return 0.0
    return 1.0 / (1.0 + math.exp(z))


def intra_class_diversity(f, prototype) -> float:
    """Cosine distance ``1 - cos(f, prototype)`` in ``[0, 2]``."""
    f = as_feature(f)
    p = as_feature(prototype)
    if f.shape != p.shape:
        raise InvalidInputError(f"dimension mismatch: {f.shape} vs {p.shape}")
    nf, np_ = np.linalg.norm(f), np.linalg.norm(p)
    if nf == 0 or np_ == 0:
        raise InvalidInputError("cosine similarity undefined for a zero vector")
    cos = float(np.dot(f, p)) / (nf * np_)
    return min(max(1.0 - cos, 0.0), 2.0)


def normalized_intra_diversity(f, prototype) -> float:
    if prototype is None:
        as_feature(f)
        return MISSING_PROTOTYPE_SCORE
    return intra_class_diversity(f, prototype) / 2.0


class PrototypeStore:
    """Per-category prototype feature and labeled count.

    Mutated by a single writer; take a :meth:`copy` for a snapshot.
    """

    def __init__(self, num_categories: int, alpha: float = 0.9, gamma: float = 0.01):
        if num_categories < 2:
            raise InvalidInputError("need at least 2 categories")
        if not 0 <= alpha < 1:
            raise InvalidInputError(f"alpha must be in [0, 1), got {alpha}")
        if not gamma > 0:
            raise InvalidInputError(f"gamma must be > 0, got {gamma}")
        self.num_categories = num_categories
        self.alpha = alpha
        self.gamma = gamma
        self.prototypes: dict[int, np.ndarray] = {}
        self.counts: dict[int, int] = {c: 0 for c in range(num_categories)}

    def _check_category(self, category: int) -> int:
        c = int(category)
        if c != category or not 0 <= c < self.num_categories:
            raise InvalidInputError(f"invalid category {category!r}")
        return c

    def prototype(self, category: int) -> np.ndarray | None:
        return self.prototypes.get(self._check_category(category))

    def count(self, category: int) -> int:
        return self.counts[self._check_category(category)]

    def update(self, category: int, f) -> None:
        """EMA step ``P <- alpha * P + (1 - alpha) * f`` and one more labeled instance."""
        c = self._check_category(category)
        f = as_feature(f)
        old = self.prototypes.get(c)
        if old is None:
            self.prototypes[c] = f.copy()
        else:
            if old.shape != f.shape:
                raise InvalidInputError(f"dimension mismatch: {old.shape} vs {f.shape}")
            self.prototypes[c] = self.alpha * old + (1.0 - self.alpha) * f
        self.counts[c] += 1

    def adjust_count(self, category: int, delta: int) -> None:
        c = self._check_category(category)
        if self.counts[c] + delta < 0:
            raise InvalidInputError(f"count for category {c} would go negative")
        self.counts[c] += delta

    def copy(self) -> PrototypeStore:
        out = PrototypeStore(self.num_categories, self.alpha, self.gamma)
        out.prototypes = {c: p.copy() for c, p in self.prototypes.items()}
        out.counts = dict(self.counts)
        return out

    def to_json(self) -> dict:
        return {
            str(c): {
                "prototype": self.prototypes[c].tolist() if c in self.prototypes else None,
                "count": self.counts[c],
            }
            for c in range(self.num_categories)
        }

    @classmethod
    def from_json(cls, data: dict, num_categories: int, alpha: float = 0.9, gamma: float = 0.01) -> PrototypeStore:
        store = cls(num_categories, alpha, gamma)
        for key, entry in data.items():
            c = store._check_category(int(key))
            count = int(entry.get("count", 0))
            if count < 0:
                raise InvalidInputError(f"negative count for category {c}")
            store.counts[c] = count
            if entry.get("prototype") is not None:
                store.prototypes[c] = as_feature(entry["prototype"])
        return store

    def __eq__(self, other) -> bool:
        if not isinstance(other, PrototypeStore):
            return NotImplemented
        return (
            self.counts == other.counts
            and self.prototypes.keys() == other.prototypes.keys()
            and all(np.array_equal(p, other.prototypes[c]) for c, p in self.prototypes.items())
        )


def init_prototypes(
    labeled: Iterable[tuple[int, object]],
    num_categories: int,
    alpha: float = 0.9,
    gamma: float = 0.01,
) -> PrototypeStore:
    """Mean feature and count per category over the initial labeled set."""
    store = PrototypeStore(num_categories, alpha, gamma)
    sums: dict[int, np.ndarray] = {}
    seen = False
    for category, feature in labeled:
        seen = True
        c = store._check_category(category)
        f = as_feature(feature)
        if c in sums:
            if sums[c].shape != f.shape:
                raise InvalidInputError("inconsistent feature dimensions")
            sums[c] = sums[c] + f
        else:
            sums[c] = f.copy()
        store.counts[c] += 1
    if not seen:
        raise InvalidInputError("cannot initialize prototypes from an empty labeled set")
    for c, total in sums.items():
        store.prototypes[c] = total / store.counts[c]
    return store
