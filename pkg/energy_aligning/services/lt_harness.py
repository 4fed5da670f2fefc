"""Long-tailed recognition: train with cross-entropy, then align energies post hoc."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from energy_aligning.aligning import (
    MODE_PER_CLASS,
    MODE_PER_CLUSTER,
    ClusterAssignment,
    CorrectedClassifier,
    ShiftVector,
    cluster_by_counts,
    cluster_means,
    cluster_shifts,
    fewest_shot_class,
    per_class_shifts,
    select_num_clusters,
)
from energy_aligning.config import DEFAULT_CANDIDATE_CLUSTERS, FEW_SHOT_THRESHOLD, MANY_SHOT_THRESHOLD
from energy_aligning.data import LabeledDataset
from energy_aligning.errors import ConfigurationError
from energy_aligning.metrics import MetricsReport, energy_bias_diagnostic, evaluate_logits
from energy_aligning.model import MlpClassifier, ModelConfig
from energy_aligning.numerics import neg_free_energies
from energy_aligning.services.sampling import (
    SOURCE_VALIDATION,
    EaConfig,
    EaSampleSet,
    build_ea_sampleset,
    jitter_sigma,
)
from energy_aligning.training import LossTrace, SgdConfig, train

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LtConfig:
    """Long-tailed recipe.

    ``num_clusters`` fixes ``M``; when ``None`` it is chosen from
    ``candidate_clusters`` by sampling-set accuracy.
    """

    candidate_clusters: tuple[int, ...] = DEFAULT_CANDIDATE_CLUSTERS
    num_clusters: int | None = None
    shift_mode: str = MODE_PER_CLUSTER
    many_threshold: int = MANY_SHOT_THRESHOLD
    few_threshold: int = FEW_SHOT_THRESHOLD
    energy_aligning: bool = True
    topk: int = 5

    def __post_init__(self) -> None:
        if self.shift_mode not in (MODE_PER_CLASS, MODE_PER_CLUSTER):
            raise ConfigurationError(f"unknown shift mode {self.shift_mode!r}")
        if not self.candidate_clusters and self.num_clusters is None:
            raise ConfigurationError("either num_clusters or candidate_clusters is required")
        if self.num_clusters is not None and self.num_clusters < 1:
            raise ConfigurationError("num_clusters must be at least 1")
        if self.few_threshold > self.many_threshold:
            raise ConfigurationError("few_threshold must not exceed many_threshold")
        object.__setattr__(self, "candidate_clusters", tuple(int(m) for m in self.candidate_clusters))


@dataclass
class LtResult:
    report: MetricsReport
    model: MlpClassifier
    corrected: CorrectedClassifier
    shifts: ShiftVector
    clusters: ClusterAssignment | None
    trace: LossTrace
    sampleset: EaSampleSet
    extra: dict = field(default_factory=dict)


def _sampling_source(train_set: LabeledDataset, validation: LabeledDataset | None, ea: EaConfig) -> LabeledDataset:
    if ea.source != SOURCE_VALIDATION:
        return train_set
    if validation is None or len(validation) == 0:
        raise ConfigurationError("sampling source 'validation' needs a validation split")
    return validation


def run_lt(
    train_set: LabeledDataset,
    test_set: LabeledDataset,
    lt: LtConfig,
    sgd: SgdConfig,
    ea: EaConfig,
    model_config: ModelConfig | None = None,
    validation: LabeledDataset | None = None,
) -> LtResult:
    """Train on long-tailed data, estimate shift scalars, evaluate on the balanced test split.

    Args:
        train_set: Long-tailed training data; every class needs at least one row.
        test_set: Balanced evaluation data.
        lt: Clustering, split thresholds and the aligning switch.
        sgd: Optimizer settings; ``sgd.seed`` also seeds the initialization.
        ea: Sampling-set construction.
        model_config: Architecture (linear head, no hidden layer by default).
        validation: Held-out split used when ``ea.source`` is ``"validation"``.

    Returns:
        Uncorrected and corrected reports, the trained model and its shift scalars.

    Raises:
        ConfigurationError: If a class has no training samples.
    """
    model_config = model_config or ModelConfig()
    counts = train_set.counts
    if (counts == 0).any():
        empty = np.flatnonzero(counts == 0).tolist()
        raise ConfigurationError(f"classes {empty} have no training samples")
    if test_set.class_count != train_set.class_count:
        raise ConfigurationError("train and test splits disagree on the class count")
    class_count = train_set.class_count

    model = model_config.build(train_set.dim, class_count, sgd.seed)
    trace = train(model, train_set, sgd).trace

    source = _sampling_source(train_set, validation, ea)
    sampleset = build_ea_sampleset(
        source,
        np.arange(class_count),
        ea.samples_per_class,
        jitter_sigma(train_set.features, ea.jitter_scale),
        ea.replication,
        ea.seed,
    )
    sample_logits = sampleset.logits(model)

    clusters: ClusterAssignment | None = None
    extra: dict = {"shift_mode": lt.shift_mode, "energy_aligning": lt.energy_aligning}
    if not lt.energy_aligning:
        shifts = ShiftVector.zeros(class_count, mode=lt.shift_mode)
    elif lt.shift_mode == MODE_PER_CLASS:
        shifts = per_class_shifts(sample_logits, fewest_shot_class(counts))
    else:
        m = lt.num_clusters
        if m is None:
            m = select_num_clusters(lt.candidate_clusters, sample_logits, sampleset.labels, counts)
        clusters = cluster_by_counts(counts, m)
        shifts = cluster_shifts(sample_logits, clusters)
        extra["num_clusters"] = m
        extra["cluster_of"] = clusters.cluster_of.tolist()
        extra["anchor_cluster"] = clusters.anchor_cluster

    before = neg_free_energies(sample_logits)
    after = neg_free_energies(sample_logits.shifted(shifts.alphas))
    if clusters is not None:
        means = cluster_means(after, clusters)
        extra["cluster_energy_gap"] = float(np.max(np.abs(means - means[clusters.anchor_cluster])))
    diagnostic = energy_bias_diagnostic(counts, before, after if lt.energy_aligning else None)

    corrected = CorrectedClassifier(model, shifts)
    test_logits = model.forward(test_set.features)
    thresholds = (lt.many_threshold, lt.few_threshold)
    uncorrected_report = evaluate_logits(test_logits, test_set.labels, lt.topk, counts, *thresholds)
    corrected_report = evaluate_logits(corrected.forward(test_set.features), test_set.labels, lt.topk,
                                       counts, *thresholds)
    extra["alphas"] = shifts.alphas.tolist()
    extra["train_counts"] = counts.tolist()
    logger.info("Long-tailed run: top-1 %.2f%% -> %.2f%% after aligning",
                uncorrected_report.top1, corrected_report.top1)

    report = MetricsReport(uncorrected_report, corrected_report, diagnostic, extra=extra)
    return LtResult(report, model, corrected, shifts, clusters, trace, sampleset, extra)
