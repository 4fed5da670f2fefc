"""Evaluation: top-k accuracy, confusion matrices, frequency splits, incremental average,
and the energy-bias diagnostic."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from energy_aligning.config import FEW_SHOT_THRESHOLD, FLAT_TOLERANCE, MANY_SHOT_THRESHOLD
from energy_aligning.errors import ContractViolation

logger = logging.getLogger(__name__)


def _check_batch(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if logits.ndim != 2:
        raise ContractViolation("logits must be an N x C batch")
    if logits.shape[0] == 0:
        raise ContractViolation("cannot score an empty batch")
    if labels.shape[0] != logits.shape[0]:
        raise ContractViolation("one label per logit row is required")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ContractViolation("labels outside the class range")
    return logits, labels


def predict(logits: np.ndarray) -> np.ndarray:
    """Top-1 class per row; equal logits resolve to the lower class index."""
    return np.argmax(np.asarray(logits), axis=-1)


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int = 1) -> float:
    """Percentage of rows whose true label ranks among the ``k`` largest logits.

    Ranking is stable: among equal logits the lower class index ranks first.
    """
    logits, labels = _check_batch(logits, labels)
    if k < 1:
        raise ContractViolation("k must be at least 1")
    ranked = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    hits = (ranked == labels[:, None]).any(axis=1)
    return 100.0 * float(hits.mean())


def confusion_matrix(predictions: np.ndarray, labels: np.ndarray, class_count: int) -> np.ndarray:
    """C x C counts; row = true class, column = predicted class."""
    predictions = np.asarray(predictions, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if predictions.shape != labels.shape:
        raise ContractViolation("predictions and labels differ in length")
    flat = np.bincount(labels * class_count + predictions, minlength=class_count * class_count)
    return flat.reshape(class_count, class_count)


def confusion_log1p(matrix: np.ndarray) -> np.ndarray:
    """Logarithmic view of a confusion matrix for plotting."""
    return np.log1p(np.asarray(matrix, dtype=np.float64))


def confusion_frame(matrix: np.ndarray) -> pd.DataFrame:
    """Confusion matrix as a labelled table (index = actual, columns = predicted)."""
    n = matrix.shape[0]
    frame = pd.DataFrame(matrix, index=range(n), columns=range(n))
    frame.index.name = "actual"
    frame.columns.name = "predicted"
    return frame


def per_class_accuracy(matrix: np.ndarray) -> np.ndarray:
    """Recall per class in percent; NaN for classes without samples."""
    matrix = np.asarray(matrix, dtype=np.float64)
    support = matrix.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(support > 0, 100.0 * np.diag(matrix) / support, np.nan)


@dataclass(frozen=True)
class SplitAccuracies:
    """Macro accuracies of the Many/Medium/Few frequency buckets.

    An empty bucket is ``None`` rather than 0.
    """

    many: float | None
    medium: float | None
    few: float | None
    overall: float
    sizes: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "many": self.many,
            "medium": self.medium,
            "few": self.few,
            "overall": self.overall,
            "sizes": dict(self.sizes),
        }


def split_accuracies(
    class_accuracies: Sequence[float] | np.ndarray,
    counts: Sequence[int] | np.ndarray,
    many_threshold: int = MANY_SHOT_THRESHOLD,
    few_threshold: int = FEW_SHOT_THRESHOLD,
) -> SplitAccuracies:
    """Bucket classes by training count and average accuracy within each bucket.

    Many: ``count > many_threshold``; Few: ``count < few_threshold``; Medium
    otherwise. ``overall`` is the per-class (macro) mean.
    """
    acc = np.asarray(class_accuracies, dtype=np.float64)
    counts = np.asarray(counts)
    if acc.shape != counts.shape:
        raise ContractViolation("one accuracy per class count is required")
    buckets = {
        "many": counts > many_threshold,
        "few": counts < few_threshold,
    }
    buckets["medium"] = ~(buckets["many"] | buckets["few"])

    def bucket_mean(mask: np.ndarray) -> float | None:
        return float(acc[mask].mean()) if mask.any() else None

    return SplitAccuracies(
        many=bucket_mean(buckets["many"]),
        medium=bucket_mean(buckets["medium"]),
        few=bucket_mean(buckets["few"]),
        overall=float(acc.mean()),
        sizes={name: int(mask.sum()) for name, mask in buckets.items()},
    )


def avg_incremental(step_accuracies: Sequence[float]) -> float | None:
    """Mean accuracy over incremental steps 2..B; ``None`` for a single step."""
    if len(step_accuracies) < 2:
        return None
    return float(np.mean(np.asarray(step_accuracies[1:], dtype=np.float64)))


def _is_flat(values: np.ndarray) -> bool:
    spread = float(values.max() - values.min())
    return spread <= FLAT_TOLERANCE * (1.0 + float(np.abs(values).max()))


def spearman_rho(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    """Spearman rank correlation with average ranks for ties.

    A vector without spread carries no rank information and yields 0.0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise ContractViolation("rank correlation needs two equal-length vectors of size >= 2")
    if _is_flat(a) or _is_flat(b):
        return 0.0
    return float(stats.spearmanr(a, b).correlation)


@dataclass(frozen=True, eq=False)
class EnergyDiagnostic:
    """Per-class training counts against estimated negative free energies."""

    counts: np.ndarray
    before: np.ndarray
    after: np.ndarray | None
    rho_before: float
    rho_after: float | None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "class": np.arange(self.counts.size),
            "count": self.counts,
            "neg_free_energy_before": self.before,
            "neg_free_energy_after": self.after if self.after is not None else np.nan,
        })

    def to_dict(self) -> dict[str, Any]:
        return {
            "spearman_before": self.rho_before,
            "spearman_after": self.rho_after,
            "counts": [int(c) for c in self.counts],
            "neg_free_energy_before": [float(v) for v in self.before],
            "neg_free_energy_after": None if self.after is None else [float(v) for v in self.after],
        }


def energy_bias_diagnostic(
    counts: Sequence[int] | np.ndarray,
    energies_before: Sequence[float] | np.ndarray,
    energies_after: Sequence[float] | np.ndarray | None = None,
) -> EnergyDiagnostic:
    """Rank correlation between class frequency and negative free energy.

    A biased model gives frequent classes higher negative free energies (lower
    energies), i.e. a strongly positive correlation.
    """
    counts = np.asarray(counts)
    before = np.asarray(energies_before, dtype=np.float64)
    after = None if energies_after is None else np.asarray(energies_after, dtype=np.float64)
    rho_before = spearman_rho(counts, before)
    rho_after = None if after is None else spearman_rho(counts, after)
    logger.info("Energy bias: spearman before %.3f, after %s", rho_before, rho_after)
    return EnergyDiagnostic(counts, before, after, rho_before, rho_after)


@dataclass(frozen=True, eq=False)
class AccuracyReport:
    """Accuracies of one set of logits over a labelled evaluation split."""

    top1: float
    topk: float
    k: int
    macro: float
    per_class: np.ndarray
    confusion: np.ndarray
    splits: SplitAccuracies | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "top1": self.top1,
            f"top{self.k}": self.topk,
            "macro": self.macro,
            "per_class": [None if np.isnan(a) else float(a) for a in self.per_class],
            "splits": None if self.splits is None else self.splits.to_dict(),
            "confusion": self.confusion.tolist(),
        }


def evaluate_logits(
    logits: np.ndarray,
    labels: np.ndarray,
    k: int = 5,
    train_counts: Sequence[int] | np.ndarray | None = None,
    many_threshold: int = MANY_SHOT_THRESHOLD,
    few_threshold: int = FEW_SHOT_THRESHOLD,
) -> AccuracyReport:
    """Score a batch of logits: micro top-1/top-k, macro accuracy, confusion, splits."""
    logits, labels = _check_batch(logits, labels)
    class_count = logits.shape[1]
    k = min(k, class_count)
    matrix = confusion_matrix(predict(logits), labels, class_count)
    recalls = per_class_accuracy(matrix)
    present = ~np.isnan(recalls)
    splits = None
    if train_counts is not None:
        splits = split_accuracies(
            recalls[present], np.asarray(train_counts)[present], many_threshold, few_threshold,
        )
    return AccuracyReport(
        top1=topk_accuracy(logits, labels, 1),
        topk=topk_accuracy(logits, labels, k),
        k=k,
        macro=float(recalls[present].mean()),
        per_class=recalls,
        confusion=matrix,
        splits=splits,
    )


@dataclass
class MetricsReport:
    """Everything a run reports: uncorrected and corrected accuracies, energy
    diagnostic, and the per-step sequence of an incremental run."""

    uncorrected: AccuracyReport
    corrected: AccuracyReport | None = None
    energy: EnergyDiagnostic | None = None
    steps: list[dict[str, Any]] = field(default_factory=list)
    extra: dict[str, Any] = field(default_factory=dict)

    def step_accuracies(self, corrected: bool = True) -> list[float]:
        key = "top1_corrected" if corrected else "top1_uncorrected"
        return [float(step[key]) for step in self.steps]

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "uncorrected": self.uncorrected.to_dict(),
            "corrected": None if self.corrected is None else self.corrected.to_dict(),
            "energy": None if self.energy is None else self.energy.to_dict(),
        }
        if self.steps:
            data["steps"] = self.steps
            data["avg_incremental_uncorrected"] = avg_incremental(self.step_accuracies(False))
            data["avg_incremental_corrected"] = avg_incremental(self.step_accuracies(True))
        data.update(self.extra)
        return data
