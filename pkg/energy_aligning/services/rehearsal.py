"""Fixed-budget exemplar memory for class-incremental training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from energy_aligning.data import LabeledDataset
from energy_aligning.errors import ContractViolation

logger = logging.getLogger(__name__)


def rehearsal_quotas(capacity: int, classes: Iterable[int]) -> dict[int, int]:
    """Split ``capacity`` evenly over ``classes``.

    Every class gets ``capacity // n``; the remainder goes one exemplar at a time
    to the lowest class indices.
    """
    ordered = sorted(int(c) for c in classes)
    if not ordered:
        return {}
    base, remainder = divmod(capacity, len(ordered))
    return {c: base + (1 if i < remainder else 0) for i, c in enumerate(ordered)}


@dataclass
class RehearsalBuffer:
    """Randomly selected exemplars of the classes seen so far.

    Attributes:
        capacity: Total exemplar budget ``K``.
        exemplars: Feature rows per class.
    """

    capacity: int
    exemplars: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.capacity < 0:
            raise ContractViolation("rehearsal capacity must be non-negative")

    @property
    def classes(self) -> list[int]:
        return sorted(self.exemplars)

    def __len__(self) -> int:
        return sum(int(rows.shape[0]) for rows in self.exemplars.values())

    def count(self, class_index: int) -> int:
        rows = self.exemplars.get(class_index)
        return 0 if rows is None else int(rows.shape[0])

    def as_dataset(self, dim: int, class_count: int) -> LabeledDataset:
        """All stored exemplars as one training set, classes in ascending order."""
        classes = self.classes
        if not classes:
            return LabeledDataset(np.empty((0, dim)), np.empty(0, dtype=np.int64), class_count)
        features = np.vstack([self.exemplars[c] for c in classes])
        labels = np.concatenate([np.full(self.count(c), c, dtype=np.int64) for c in classes])
        return LabeledDataset(features, labels, class_count)


def rehearsal_update(buffer: RehearsalBuffer, batch: LabeledDataset, seed: int) -> RehearsalBuffer:
    """Re-partition the budget over old plus new classes.

    Old exemplars are down-sampled uniformly to their new quota; exemplars of the
    new classes are drawn uniformly from ``batch``. The result is a new buffer.

    Raises:
        ContractViolation: If ``batch`` holds a class already in the buffer.
    """
    new_classes = [int(c) for c in np.unique(batch.labels)]
    clash = set(new_classes) & set(buffer.exemplars)
    if clash:
        raise ContractViolation(f"classes {sorted(clash)} are already stored")
    quotas = rehearsal_quotas(buffer.capacity, list(buffer.exemplars) + new_classes)
    rng = np.random.default_rng(seed)

    updated: dict[int, np.ndarray] = {}
    for c in sorted(quotas):
        pool = buffer.exemplars[c] if c in buffer.exemplars else batch.features[batch.labels == c]
        take = min(quotas[c], pool.shape[0])
        if take == 0:
            continue
        rows = np.sort(rng.choice(pool.shape[0], size=take, replace=False))
        updated[c] = pool[rows].copy()

    result = RehearsalBuffer(buffer.capacity, updated)
    logger.info("Rehearsal buffer: %d exemplars over %d classes (capacity %d)",
                len(result), len(result.classes), buffer.capacity)
    return result
