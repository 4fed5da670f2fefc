"""Dataset construction and file ingestion.

Synthetic Gaussian class mixtures, exponential long-tail subsampling and
incremental class splits, plus the CSV feature format and the EALG logit binary
used to correct externally trained models.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from energy_aligning.config import LOGIT_FLAG_LABELS, LOGIT_MAGIC, LOGIT_VERSION
from energy_aligning.errors import ConfigurationError, ContractViolation, ParseError
from energy_aligning.numerics import LogitMatrix

logger = logging.getLogger(__name__)

SPLITS = ("train", "test", "validation")
# Independent sample streams per split; class means are shared
_SPLIT_STREAMS = {"train": 0, "test": 1, "validation": 2}
_LOGIT_HEADER = struct.Struct("<4sIQQB")


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """N x D features with integer labels in ``[0, class_count)``."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).ravel()
        if x.ndim != 2:
            raise ContractViolation("features must be an N x D matrix")
        if x.shape[0] != y.shape[0]:
            raise ContractViolation("one label per feature row is required")
        if self.class_count < 1:
            raise ContractViolation("class_count must be positive")
        if y.size and (y.min() < 0 or y.max() >= self.class_count):
            raise ContractViolation(f"labels outside [0, {self.class_count})")
        if not np.isfinite(x).all():
            raise ContractViolation("features must be finite")
        if self.split not in SPLITS:
            raise ContractViolation(f"unknown split {self.split!r}")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def counts(self) -> np.ndarray:
        """Samples per class, zeros included."""
        return np.bincount(self.labels, minlength=self.class_count)

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.features[indices], self.labels[indices], self.class_count, self.split)

    def relabeled(self, mapping: np.ndarray, class_count: int) -> "LabeledDataset":
        """Dataset with every label ``y`` replaced by ``mapping[y]``."""
        return LabeledDataset(self.features, np.asarray(mapping)[self.labels], class_count, self.split)

    def concat(self, other: "LabeledDataset") -> "LabeledDataset":
        if other.dim != self.dim and len(other):
            raise ContractViolation("cannot concatenate datasets of different dimension")
        return LabeledDataset(
            np.vstack([self.features, other.features.reshape(-1, self.dim)]),
            np.concatenate([self.labels, other.labels]),
            max(self.class_count, other.class_count),
            self.split,
        )


def class_means(class_count: int, dim: int, spread: float, seed: int) -> np.ndarray:
    """Seeded class centres at random directions, ``spread`` away from the origin."""
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((class_count, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return spread * directions


def synth_gaussians(
    class_count: int,
    dim: int,
    spread: float,
    sigma: float,
    n_per_class: int | Sequence[int],
    seed: int,
    split: str = "train",
) -> LabeledDataset:
    """Sample an isotropic Gaussian mixture, one component per class.

    The class means depend on ``seed`` only, so the train, test and validation
    splits of one seed share them while drawing independent samples.

    Raises:
        ContractViolation: If a class is asked for fewer than one sample.
    """
    if class_count < 1 or dim < 1:
        raise ContractViolation("class_count and dim must be positive")
    if sigma < 0:
        raise ContractViolation("sigma must be non-negative")
    sizes = np.broadcast_to(np.asarray(n_per_class, dtype=np.int64), (class_count,))
    if (sizes < 1).any():
        raise ContractViolation("every class needs at least one sample")
    if split not in _SPLIT_STREAMS:
        raise ContractViolation(f"unknown split {split!r}")

    means = class_means(class_count, dim, spread, seed)
    rng = np.random.default_rng([seed, _SPLIT_STREAMS[split]])
    blocks = [means[c] + sigma * rng.standard_normal((int(n), dim)) for c, n in enumerate(sizes)]
    labels = np.repeat(np.arange(class_count), sizes)
    logger.debug("Sampled %d %s rows over %d classes (seed %d)", labels.size, split, class_count, seed)
    return LabeledDataset(np.vstack(blocks), labels, class_count, split)


def long_tail_counts(n_max: int, class_count: int, rho: float) -> np.ndarray:
    """Exponential profile ``n_max * rho ** (-c / (C - 1))``, rounded half up, floor 1."""
    if rho < 1:
        raise ContractViolation("imbalance ratio must be at least 1")
    if class_count == 1:
        return np.array([n_max], dtype=np.int64)
    return np.array(
        [max(1, math.floor(n_max * rho ** (-c / (class_count - 1)) + 0.5)) for c in range(class_count)],
        dtype=np.int64,
    )


def make_long_tailed(dataset: LabeledDataset, rho: float, seed: int) -> LabeledDataset:
    """Uniformly subsample each class down to the exponential long-tail profile.

    Class 0 is the head and keeps ``n_max`` (the largest class count) samples;
    original row order is preserved.
    """
    counts = dataset.counts
    targets = np.minimum(long_tail_counts(int(counts.max()), dataset.class_count, rho), counts)
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(dataset.class_count):
        rows = np.flatnonzero(dataset.labels == c)
        keep.append(rng.choice(rows, size=int(targets[c]), replace=False))
    indices = np.sort(np.concatenate(keep))
    logger.info("Long-tailed subsample (rho=%g): %d -> %d rows", rho, len(dataset), indices.size)
    return dataset.subset(indices)


def make_incremental_splits(
    dataset: LabeledDataset,
    steps: int,
    classes_per_step: int | None = None,
    seed: int = 0,
) -> list[np.ndarray]:
    """Random class order cut into ``steps`` disjoint groups of equal size."""
    c = dataset.class_count
    if steps < 1:
        raise ContractViolation("steps must be at least 1")
    if c % steps:
        raise ContractViolation(f"{c} classes do not split into {steps} equal steps")
    per_step = c // steps
    if classes_per_step is not None and classes_per_step != per_step:
        raise ContractViolation(f"{steps} steps of {classes_per_step} classes do not cover {c} classes")
    order = np.random.default_rng(seed).permutation(c)
    return [order[i * per_step:(i + 1) * per_step] for i in range(steps)]


def subset_by_classes(dataset: LabeledDataset, classes: Sequence[int] | np.ndarray) -> LabeledDataset:
    """Rows whose label is in ``classes``; labels are left unchanged."""
    return dataset.subset(np.flatnonzero(np.isin(dataset.labels, np.asarray(classes))))


def load_csv_dataset(path: str, class_count: int | None = None, split: str = "train") -> LabeledDataset:
    """Read a ``f0,...,f{D-1},label`` CSV file.

    Raises:
        ParseError: On an unreadable or empty file, an unexpected header,
            non-numeric or NaN entries, or labels outside the class range.
    """
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except pd.errors.EmptyDataError as e:
        raise ParseError(f"{path}: file is empty") from e
    except (pd.errors.ParserError, OSError, UnicodeDecodeError) as e:
        logger.error("Error reading dataset %s: %s", path, e)
        raise ParseError(f"{path}: {e}") from e

    columns = list(frame.columns)
    expected = [f"f{i}" for i in range(len(columns) - 1)] + ["label"]
    if len(columns) < 2 or columns != expected:
        raise ParseError(f"{path}: header must be f0,...,f{{D-1}},label, got {','.join(map(str, columns))}")
    if frame.empty:
        raise ParseError(f"{path}: no data rows")
    try:
        features = frame[expected[:-1]].to_numpy(dtype=np.float64)
        raw_labels = frame["label"].to_numpy(dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise ParseError(f"{path}: non-numeric entry ({e})") from e
    if np.isnan(features).any() or np.isnan(raw_labels).any():
        row = int(np.flatnonzero(np.isnan(features).any(axis=1) | np.isnan(raw_labels))[0])
        raise ParseError(f"{path}: missing or NaN value in data row {row + 1}")
    if not np.isfinite(features).all():
        raise ParseError(f"{path}: infinite feature value")
    if (raw_labels != np.round(raw_labels)).any() or raw_labels.min() < 0:
        raise ParseError(f"{path}: labels must be non-negative integers")
    labels = raw_labels.astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1
    elif labels.max() >= class_count:
        raise ParseError(f"{path}: label {int(labels.max())} outside [0, {class_count})")
    return LabeledDataset(features, labels, class_count, split)


def write_csv_dataset(dataset: LabeledDataset, path: str) -> None:
    frame = pd.DataFrame(dataset.features, columns=[f"f{i}" for i in range(dataset.dim)])
    frame["label"] = dataset.labels
    frame.to_csv(path, index=False)


def load_counts(path: str) -> np.ndarray:
    """Read per-class training counts from a CSV file with a ``count`` column."""
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError as e:
        raise ParseError(f"{path}: file is empty") from e
    except (pd.errors.ParserError, OSError, UnicodeDecodeError) as e:
        logger.error("Error reading counts %s: %s", path, e)
        raise ParseError(f"{path}: {e}") from e
    if "count" not in frame.columns or frame.empty:
        raise ParseError(f"{path}: expected a non-empty 'count' column")
    values = pd.to_numeric(frame["count"], errors="coerce").to_numpy(dtype=np.float64)
    if np.isnan(values).any() or (values != np.round(values)).any() or (values < 0).any():
        raise ParseError(f"{path}: counts must be non-negative integers")
    return values.astype(np.int64)


def write_counts(counts: Sequence[int] | np.ndarray, path: str) -> None:
    counts = np.asarray(counts, dtype=np.int64)
    pd.DataFrame({"class": np.arange(counts.size), "count": counts}).to_csv(path, index=False)


def load_labels(path: str) -> np.ndarray:
    """Read evaluation labels from a CSV file with a ``label`` column."""
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError as e:
        raise ParseError(f"{path}: file is empty") from e
    except (pd.errors.ParserError, OSError, UnicodeDecodeError) as e:
        logger.error("Error reading labels %s: %s", path, e)
        raise ParseError(f"{path}: {e}") from e
    if "label" not in frame.columns or frame.empty:
        raise ParseError(f"{path}: expected a non-empty 'label' column")
    values = pd.to_numeric(frame["label"], errors="coerce").to_numpy(dtype=np.float64)
    if np.isnan(values).any() or (values != np.round(values)).any() or (values < 0).any():
        raise ParseError(f"{path}: labels must be non-negative integers")
    return values.astype(np.int64)


def write_logit_file(path: str, logits: LogitMatrix | np.ndarray, labels: np.ndarray | None = None) -> None:
    """Write logits (and optional labels) in the EALG binary layout.

    Header: magic, u32 version, u64 S, u64 C, u8 flags; then S*C little-endian
    float32 values row-major; then S little-endian int32 labels when flag bit 0 is set.
    """
    values = logits.values if isinstance(logits, LogitMatrix) else np.asarray(logits, dtype=np.float64)
    if values.ndim != 2:
        raise ContractViolation("logits must be an S x C matrix")
    s, c = values.shape
    flags = 0
    if labels is not None:
        labels = np.asarray(labels).ravel()
        if labels.shape[0] != s:
            raise ContractViolation("one label per logit row is required")
        flags |= LOGIT_FLAG_LABELS
    with open(path, "wb") as f:
        f.write(_LOGIT_HEADER.pack(LOGIT_MAGIC, LOGIT_VERSION, s, c, flags))
        f.write(values.astype("<f4").tobytes(order="C"))
        if labels is not None:
            f.write(labels.astype("<i4").tobytes())


def load_logit_file(path: str) -> tuple[LogitMatrix, np.ndarray | None]:
    """Read an EALG logit file.

    Returns:
        The logits as a double-precision LogitMatrix, and the label vector when
        the file carries one (otherwise ``None``).

    Raises:
        ParseError: On a malformed header, a size mismatch, non-finite values or
            labels outside ``[0, C)``.
    """
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        logger.error("Error reading logits %s: %s", path, e)
        raise ParseError(f"{path}: {e}") from e
    if len(blob) < _LOGIT_HEADER.size:
        raise ParseError(f"{path}: file too short for an EALG header")
    magic, version, s, c, flags = _LOGIT_HEADER.unpack_from(blob)
    if magic != LOGIT_MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}")
    if version != LOGIT_VERSION:
        raise ParseError(f"{path}: unsupported version {version}")
    if s < 1 or c < 2:
        raise ParseError(f"{path}: need at least one sample and two classes, got S={s}, C={c}")
    has_labels = bool(flags & LOGIT_FLAG_LABELS)
    expected = _LOGIT_HEADER.size + 4 * s * c + (4 * s if has_labels else 0)
    if len(blob) != expected:
        raise ParseError(f"{path}: expected {expected} bytes, found {len(blob)}")

    offset = _LOGIT_HEADER.size
    values = np.frombuffer(blob, dtype="<f4", count=s * c, offset=offset).astype(np.float64).reshape(s, c)
    if not np.isfinite(values).all():
        raise ParseError(f"{path}: non-finite logit values")
    labels = None
    if has_labels:
        labels = np.frombuffer(blob, dtype="<i4", count=s, offset=offset + 4 * s * c).astype(np.int64)
        if labels.min() < 0 or labels.max() >= c:
            raise ParseError(f"{path}: labels outside [0, {c})")
    return LogitMatrix(values), labels


@dataclass(frozen=True)
class DataConfig:
    """Synthetic benchmark parameters.

    ``n_train`` is the per-class count before long-tail subsampling (the head
    class keeps it); ``imbalance_ratio`` of 1 keeps the training split balanced.
    """

    class_count: int = 10
    dim: int = 8
    spread: float = 2.5
    sigma: float = 1.0
    n_train: int = 500
    n_test: int = 100
    n_validation: int = 20
    imbalance_ratio: float = 100.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.class_count < 2 or self.dim < 1:
            raise ConfigurationError("need at least two classes and one feature")
        if min(self.n_train, self.n_test) < 1 or self.n_validation < 0:
            raise ConfigurationError("per-class sample counts must be positive")
        if self.imbalance_ratio < 1:
            raise ConfigurationError("imbalance_ratio must be at least 1")
        if self.sigma < 0:
            raise ConfigurationError("sigma must be non-negative")


@dataclass(frozen=True, eq=False)
class BenchmarkSplits:
    train: LabeledDataset
    test: LabeledDataset
    validation: LabeledDataset | None = None


def make_benchmark(config: DataConfig) -> BenchmarkSplits:
    """Train (long-tailed when ``imbalance_ratio > 1``), balanced test and validation splits."""
    def split(name: str, n: int) -> LabeledDataset:
        return synth_gaussians(config.class_count, config.dim, config.spread, config.sigma, n,
                               config.seed, split=name)

    train = split("train", config.n_train)
    if config.imbalance_ratio > 1:
        train = make_long_tailed(train, config.imbalance_ratio, config.seed)
    validation = split("validation", config.n_validation) if config.n_validation else None
    return BenchmarkSplits(train, split("test", config.n_test), validation)


def load_benchmark(train_path: str, test_path: str, validation_path: str | None = None) -> BenchmarkSplits:
    """Train, test and optional validation splits from ``f0,...,f{D-1},label`` CSV files.

    The class count is one more than the largest label in any file, so a split
    may miss classes.
    """
    paths = {"train": train_path, "test": test_path, "validation": validation_path}
    loaded = {split: load_csv_dataset(path, split=split) for split, path in paths.items() if path}
    dims = {name: ds.dim for name, ds in loaded.items()}
    if len(set(dims.values())) != 1:
        raise ConfigurationError(f"CSV splits disagree on feature dimension: {dims}")
    class_count = max(ds.class_count for ds in loaded.values())
    splits = {
        name: LabeledDataset(ds.features, ds.labels, class_count, name) for name, ds in loaded.items()
    }
    logger.info("Loaded CSV benchmark: %d classes, %d features, %s rows",
                class_count, dims["train"], {name: len(ds) for name, ds in splits.items()})
    return BenchmarkSplits(splits["train"], splits["test"], splits.get("validation"))
