"""Balanced sampling sets for estimating shift scalars.

Rows are drawn uniformly per class and replicated with Gaussian feature jitter,
the label-preserving perturbation that stands in for image augmentations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from energy_aligning.config import DEFAULT_JITTER_SCALE, DEFAULT_REPLICATION, DEFAULT_SAMPLES_PER_CLASS
from energy_aligning.data import LabeledDataset
from energy_aligning.errors import ConfigurationError, ContractViolation
from energy_aligning.numerics import LogitMatrix

logger = logging.getLogger(__name__)

SOURCE_TRAIN = "train"
SOURCE_VALIDATION = "validation"


@dataclass(frozen=True)
class EaConfig:
    """Sampling-set construction.

    ``jitter_scale`` multiplies the per-dimension standard deviation of the
    training features to give the jitter sigma. ``source`` selects re-sampled
    training data or a held-out balanced validation split.
    """

    samples_per_class: int = DEFAULT_SAMPLES_PER_CLASS
    jitter_scale: float = DEFAULT_JITTER_SCALE
    replication: int = DEFAULT_REPLICATION
    source: str = SOURCE_TRAIN
    seed: int = 0

    def __post_init__(self) -> None:
        if self.samples_per_class < 1:
            raise ConfigurationError("samples_per_class must be at least 1")
        if self.jitter_scale < 0:
            raise ConfigurationError("jitter_scale must be non-negative")
        if self.replication < 1:
            raise ConfigurationError("replication must be at least 1")
        if self.source not in (SOURCE_TRAIN, SOURCE_VALIDATION):
            raise ConfigurationError(f"unknown sampling source {self.source!r}")


@dataclass(frozen=True, eq=False)
class EaSampleSet:
    """Balanced feature rows: ``per_class`` draws times ``replication`` per class."""

    features: np.ndarray
    labels: np.ndarray
    classes: np.ndarray
    per_class: int
    replication: int

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def logits(self, model: Any) -> LogitMatrix:
        """Evaluate ``model`` on every row."""
        return LogitMatrix(model.forward(self.features))


def jitter_sigma(features: np.ndarray, scale: float = DEFAULT_JITTER_SCALE) -> np.ndarray:
    """Per-dimension jitter sigma: ``scale`` times the feature standard deviation."""
    return scale * np.asarray(features, dtype=np.float64).std(axis=0)


def build_ea_sampleset(
    dataset: LabeledDataset,
    classes: Sequence[int] | np.ndarray,
    samples_per_class: int,
    sigma: float | np.ndarray,
    replication: int,
    seed: int,
) -> EaSampleSet:
    """Draw ``min(samples_per_class, smallest class)`` rows per class and jitter ``replication`` copies.

    Args:
        dataset: Available data (new plus rehearsal rows in incremental runs).
        classes: Classes of interest; each must have at least one row.
        samples_per_class: Requested draws per class ``S'``.
        sigma: Jitter standard deviation, scalar or one per feature dimension.
        replication: Jittered copies per drawn row ``R``.
        seed: Generator seed; equal seeds give identical sets.

    Raises:
        ContractViolation: On an empty class, negative sigma or non-positive counts.
    """
    classes = np.asarray(classes, dtype=np.int64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if classes.size == 0:
        raise ContractViolation("a sampling set needs at least one class")
    if samples_per_class < 1 or replication < 1:
        raise ContractViolation("samples_per_class and replication must be positive")
    if (sigma < 0).any():
        raise ContractViolation("jitter sigma must be non-negative")
    available = dataset.counts[classes]
    if (available == 0).any():
        missing = classes[available == 0].tolist()
        raise ContractViolation(f"no data available for classes {missing}")

    per_class = int(min(samples_per_class, available.min()))
    rng = np.random.default_rng(seed)
    blocks, labels = [], []
    for c in classes:
        rows = np.flatnonzero(dataset.labels == c)
        picked = dataset.features[np.sort(rng.choice(rows, size=per_class, replace=False))]
        copies = np.repeat(picked, replication, axis=0)
        blocks.append(copies + sigma * rng.standard_normal(copies.shape))
        labels.append(np.full(copies.shape[0], c, dtype=np.int64))

    logger.debug("Sampling set: %d classes x %d draws x %d copies", classes.size, per_class, replication)
    return EaSampleSet(np.vstack(blocks), np.concatenate(labels), classes, per_class, replication)
