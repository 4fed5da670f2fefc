"""Class-incremental learning with rehearsal, corrected-teacher distillation and
post-step energy aligning.

Classes are relabelled into arrival order, so the classes seen before step ``b``
always occupy the first ``C_old`` logits and the new ones follow.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from energy_aligning.aligning import ClusterAssignment, CorrectedClassifier, ShiftVector, cluster_shifts
from energy_aligning.data import LabeledDataset, make_incremental_splits, subset_by_classes
from energy_aligning.errors import ConfigurationError
from energy_aligning.metrics import AccuracyReport, MetricsReport, evaluate_logits, predict
from energy_aligning.model import MlpClassifier, ModelConfig
from energy_aligning.services.rehearsal import RehearsalBuffer, rehearsal_update
from energy_aligning.services.sampling import EaConfig, build_ea_sampleset, jitter_sigma
from energy_aligning.training import (
    CilConfig,
    LossTrace,
    SgdConfig,
    compound_lambda,
    step_weight_decay,
    train,
)

logger = logging.getLogger(__name__)

OLD_CLUSTER = 0
NEW_CLUSTER = 1


@dataclass
class StepResult:
    """State after one incremental step."""

    step: int
    model: MlpClassifier
    shifts: ShiftVector
    uncorrected: AccuracyReport
    corrected: AccuracyReport
    record: dict[str, Any]


@dataclass
class CilResult:
    report: MetricsReport
    model: MlpClassifier
    corrected: CorrectedClassifier
    steps: list[StepResult]
    trace: LossTrace
    class_order: np.ndarray
    extra: dict = field(default_factory=dict)


def _validated_batches(batches: Sequence[Sequence[int]], class_count: int) -> list[np.ndarray]:
    seen: set[int] = set()
    result = []
    for b, batch in enumerate(batches, start=1):
        arr = np.asarray(batch, dtype=np.int64).ravel()
        if arr.size == 0:
            raise ConfigurationError(f"step {b} introduces no classes")
        if arr.min() < 0 or arr.max() >= class_count:
            raise ConfigurationError(f"step {b} names classes outside [0, {class_count})")
        clash = seen & set(arr.tolist())
        if clash or np.unique(arr).size != arr.size:
            raise ConfigurationError(f"step {b} repeats classes {sorted(clash) or arr.tolist()}")
        seen.update(arr.tolist())
        result.append(arr)
    return result


def old_to_new_mass(logits: np.ndarray, labels: np.ndarray, old_classes: int) -> float | None:
    """Fraction of old-class samples predicted into a new class (arrival-ordered labels)."""
    old = labels < old_classes
    if old_classes == 0 or not old.any():
        return None
    return float((predict(logits[old]) >= old_classes).mean())


def run_cil(
    train_set: LabeledDataset,
    test_set: LabeledDataset,
    cil: CilConfig,
    sgd: SgdConfig,
    ea: EaConfig,
    model_config: ModelConfig | None = None,
    class_batches: Sequence[Sequence[int]] | None = None,
) -> CilResult:
    """Learn the class stream step by step and evaluate on all seen classes after each step.

    Step 1 trains with cross-entropy only. Every later step trains on new data plus
    rehearsal exemplars with the compound loss against the frozen, corrected
    previous model, then estimates one shift for the new classes relative to the
    old ones (the anchor) on a balanced sampling set.

    Args:
        train_set: Training data in original class ids.
        test_set: Evaluation data in original class ids.
        cil: Stream, loss-balance, weight-decay and rehearsal settings.
        sgd: Optimizer settings; the shuffle seed advances by one per step.
        ea: Sampling-set construction.
        model_config: Architecture.
        class_batches: Explicit class stream; drawn from ``cil.class_order_seed`` when omitted.

    Raises:
        ConfigurationError: If the stream repeats a class or names unknown ones.
    """
    model_config = model_config or ModelConfig()
    if class_batches is None:
        batches = make_incremental_splits(train_set, cil.steps, cil.classes_per_step, cil.class_order_seed)
    else:
        batches = _validated_batches(class_batches, train_set.class_count)
    order = np.concatenate(batches)
    mapping = np.full(train_set.class_count, -1, dtype=np.int64)
    mapping[order] = np.arange(order.size)
    total = int(order.size)

    train_all = subset_by_classes(train_set, order)
    train_all = train_all.relabeled(mapping, total)
    test_all = subset_by_classes(test_set, order).relabeled(mapping, total)

    buffer = RehearsalBuffer(cil.memory)
    model: MlpClassifier | None = None
    teacher: MlpClassifier | None = None
    teacher_shifts: ShiftVector | None = None
    trace = LossTrace()
    steps: list[StepResult] = []
    seen = 0

    for b, batch in enumerate(batches, start=1):
        c_old, c_new = seen, int(batch.size)
        seen += c_new
        new_data = subset_by_classes(train_all, np.arange(c_old, seen))
        if len(new_data) == 0:
            raise ConfigurationError(f"step {b} has no training data")
        new_data = LabeledDataset(new_data.features, new_data.labels, seen)
        if model is None:
            model = model_config.build(train_all.dim, c_new, sgd.seed)
        else:
            model = model.expand_classes(c_new, seed=sgd.seed + b)

        step_data = new_data.concat(buffer.as_dataset(train_all.dim, seen))
        lam = compound_lambda(cil.lambda_base, c_old, c_new) if teacher is not None else 0.0
        decay = step_weight_decay(cil.weight_decay_base, cil.weight_decay_factor, b)
        logger.info("Step %d/%d: %d old + %d new classes, %d rows, lambda %.3f, weight decay %.3g",
                    b, len(batches), c_old, c_new, len(step_data), lam, decay)
        result = train(model, step_data, replace(sgd, seed=sgd.seed + b - 1), teacher=teacher,
                       teacher_shifts=teacher_shifts, lam=lam, weight_decay=decay, split=f"step_{b}")
        trace.extend(result.trace)

        covered = (step_data.counts[:seen] > 0).all()
        if b > 1 and cil.energy_aligning and not covered:
            logger.warning("Step %d: some old classes have no exemplars; skipping energy aligning", b)
        if b > 1 and cil.energy_aligning and covered:
            # Only classes seen so far contribute to the jitter scale
            sigma = jitter_sigma(step_data.features, ea.jitter_scale)
            sampleset = build_ea_sampleset(step_data, np.arange(seen), ea.samples_per_class, sigma,
                                           ea.replication, ea.seed + b)
            groups = [range(c_old), range(c_old, seen)]
            clusters = ClusterAssignment.from_groups(groups, seen, anchor_cluster=OLD_CLUSTER)
            shifts = cluster_shifts(sampleset.logits(model), clusters)
        else:
            shifts = ShiftVector.zeros(seen)

        teacher = model.frozen_copy()
        teacher_shifts = shifts if cil.energy_aligning else None
        buffer = rehearsal_update(buffer, new_data, seed=cil.class_order_seed + b)

        test_step = subset_by_classes(test_all, np.arange(seen))
        test_step = LabeledDataset(test_step.features, test_step.labels, seen, "test")
        logits = model.forward(test_step.features)
        corrected_logits = CorrectedClassifier(model, shifts).forward(test_step.features)
        k = min(5, seen)
        uncorrected = evaluate_logits(logits, test_step.labels, k)
        corrected = evaluate_logits(corrected_logits, test_step.labels, k)
        record = {
            "step": b,
            "classes_seen": seen,
            "old_classes": c_old,
            "new_classes": c_new,
            "lambda": lam,
            "weight_decay": decay,
            "buffer_size": len(buffer),
            "alpha_new": float(shifts.alphas[-1]),
            "top1_uncorrected": uncorrected.top1,
            "top1_corrected": corrected.top1,
            f"top{k}_uncorrected": uncorrected.topk,
            f"top{k}_corrected": corrected.topk,
            "old_to_new_uncorrected": old_to_new_mass(logits, test_step.labels, c_old),
            "old_to_new_corrected": old_to_new_mass(corrected_logits, test_step.labels, c_old),
        }
        logger.info("Step %d: top-1 %.2f%% uncorrected, %.2f%% corrected",
                    b, uncorrected.top1, corrected.top1)
        steps.append(StepResult(b, model.copy(), shifts, uncorrected, corrected, record))

    final = steps[-1]
    extra = {"class_order": order.tolist(), "energy_aligning": cil.energy_aligning}
    report = MetricsReport(final.uncorrected, final.corrected, steps=[s.record for s in steps], extra=extra)
    return CilResult(report, model, CorrectedClassifier(model, final.shifts), steps, trace, order, extra)
