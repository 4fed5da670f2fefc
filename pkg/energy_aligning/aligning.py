"""Shift scalars: per class, per cluster, and the clustering that groups classes.

A corrected model adds ``alphas[j]`` to logit ``j`` for every input. Shifts are
chosen so that the estimated negative free energy of every class (or the mean over
every cluster) matches the anchor's; the anchor itself is left untouched.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Sequence

import numpy as np

from energy_aligning.errors import ContractViolation, DegenerateClusteringError, ParseError
from energy_aligning.metrics import topk_accuracy
from energy_aligning.numerics import LogitMatrix, neg_free_energies

logger = logging.getLogger(__name__)

MODE_PER_CLASS = "per-class"
MODE_PER_CLUSTER = "per-cluster"
_MODES = (MODE_PER_CLASS, MODE_PER_CLUSTER)


@dataclass(frozen=True, eq=False)
class ShiftVector:
    """Additive logit corrections.

    Attributes:
        alphas: One shift per class.
        mode: ``"per-class"`` (anchor is a class index) or ``"per-cluster"``
            (anchor is a cluster index).
        anchor: Index of the anchor class or cluster; its classes shift by 0.
    """

    alphas: np.ndarray
    mode: str = MODE_PER_CLASS
    anchor: int = 0

    def __post_init__(self) -> None:
        arr = np.array(self.alphas, dtype=np.float64, copy=True).ravel()
        if not np.isfinite(arr).all():
            raise ContractViolation("shift scalars must be finite")
        if self.mode not in _MODES:
            raise ContractViolation(f"unknown shift mode {self.mode!r}")
        if self.mode == MODE_PER_CLASS:
            if not 0 <= self.anchor < arr.size:
                raise ContractViolation(f"anchor class {self.anchor} outside [0, {arr.size})")
            if arr[self.anchor] != 0.0:
                raise ContractViolation("the anchor class must have a zero shift")
        arr.setflags(write=False)
        object.__setattr__(self, "alphas", arr)
        object.__setattr__(self, "anchor", int(self.anchor))

    @property
    def class_count(self) -> int:
        return int(self.alphas.size)

    @classmethod
    def zeros(cls, class_count: int, mode: str = MODE_PER_CLUSTER) -> "ShiftVector":
        """Identity correction over ``class_count`` classes."""
        return cls(np.zeros(class_count), mode=mode, anchor=0)

    def is_identity(self) -> bool:
        return bool(np.all(self.alphas == 0.0))

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "anchor": self.anchor,
            "alphas": [float(a) for a in self.alphas],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ShiftVector":
        try:
            return cls(
                np.asarray(data["alphas"], dtype=np.float64),
                mode=str(data["mode"]),
                anchor=int(data["anchor"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"malformed shift document: {e}") from e

    def save(self, path: str) -> None:
        """Write the JSON document ``{"mode", "anchor", "alphas"}`` to ``path``."""
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=4)
            f.write("\n")
        logger.info("Saved %s shifts for %d classes to %s", self.mode, self.class_count, path)

    @classmethod
    def load(cls, path: str) -> "ShiftVector":
        try:
            with open(path, "r") as f:
                data = json.load(f)
        except (json.JSONDecodeError, OSError) as e:
            logger.error("Error loading shifts from %s: %s", path, e)
            raise ParseError(f"cannot read shifts from {path}: {e}") from e
        return cls.from_dict(data)


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    """Class-to-cluster map.

    Attributes:
        cluster_of: Cluster index in ``[0, M)`` for every class.
        num_clusters: ``M``.
        anchor_cluster: Anchor cluster, or ``None`` until one is chosen.
    """

    cluster_of: np.ndarray
    num_clusters: int
    anchor_cluster: int | None = None
    sizes: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        arr = np.array(self.cluster_of, dtype=np.int64, copy=True).ravel()
        m = int(self.num_clusters)
        if m < 1:
            raise ContractViolation("a clustering needs at least one cluster")
        if arr.size == 0 or arr.min() < 0 or arr.max() >= m:
            raise ContractViolation(f"cluster ids must lie in [0, {m})")
        sizes = np.bincount(arr, minlength=m)
        if (sizes == 0).any():
            raise ContractViolation("every cluster must be non-empty")
        if self.anchor_cluster is not None and not 0 <= self.anchor_cluster < m:
            raise ContractViolation(f"anchor cluster {self.anchor_cluster} outside [0, {m})")
        arr.setflags(write=False)
        sizes.setflags(write=False)
        object.__setattr__(self, "cluster_of", arr)
        object.__setattr__(self, "num_clusters", m)
        object.__setattr__(self, "sizes", sizes)

    @property
    def class_count(self) -> int:
        return int(self.cluster_of.size)

    @classmethod
    def from_groups(
        cls,
        groups: Sequence[Iterable[int]],
        class_count: int,
        anchor_cluster: int | None = None,
    ) -> "ClusterAssignment":
        """Build an assignment from explicit class groups (group ``k`` becomes cluster ``k``)."""
        cluster_of = np.full(class_count, -1, dtype=np.int64)
        for k, group in enumerate(groups):
            for c in group:
                if cluster_of[c] != -1:
                    raise ContractViolation(f"class {c} appears in more than one cluster")
                cluster_of[c] = k
        if (cluster_of == -1).any():
            raise ContractViolation("every class must belong to a cluster")
        return cls(cluster_of, len(groups), anchor_cluster)

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.cluster_of == k)

    def with_anchor(self, anchor_cluster: int) -> "ClusterAssignment":
        return replace(self, anchor_cluster=anchor_cluster)


def per_class_shifts(logits: LogitMatrix, anchor: int) -> ShiftVector:
    """Shift every class so its negative free energy matches class ``anchor``.

    ``alphas[j] = LSE(column anchor) - LSE(column j)``.

    Raises:
        ContractViolation: If ``anchor`` is outside ``[0, C)``.
    """
    if not 0 <= anchor < logits.class_count:
        raise ContractViolation(f"anchor class {anchor} outside [0, {logits.class_count})")
    energies = neg_free_energies(logits)
    alphas = energies[anchor] - energies
    alphas[anchor] = 0.0
    return ShiftVector(alphas, mode=MODE_PER_CLASS, anchor=anchor)


def cluster_means(values: np.ndarray, clusters: ClusterAssignment) -> np.ndarray:
    """Mean of ``values`` over the classes of each cluster."""
    sums = np.bincount(clusters.cluster_of, weights=values, minlength=clusters.num_clusters)
    return sums / clusters.sizes


def cluster_shifts(logits: LogitMatrix, clusters: ClusterAssignment) -> ShiftVector:
    """Shared shift per cluster equalizing mean negative free energies with the anchor cluster.

    Every class of cluster ``k`` receives
    ``mean(LSE over anchor classes) - mean(LSE over classes of k)``; the anchor
    cluster receives exactly 0.

    Raises:
        ContractViolation: If the assignment does not cover the logit classes or has
            no anchor.
    """
    if clusters.class_count != logits.class_count:
        raise ContractViolation(
            f"clustering covers {clusters.class_count} classes, logits have {logits.class_count}"
        )
    if clusters.anchor_cluster is None:
        raise ContractViolation("cluster shifts need an anchor cluster")
    anchor = clusters.anchor_cluster
    means = cluster_means(neg_free_energies(logits), clusters)
    per_cluster = means[anchor] - means
    per_cluster[anchor] = 0.0
    return ShiftVector(per_cluster[clusters.cluster_of], mode=MODE_PER_CLUSTER, anchor=anchor)


def apply_shifts(logits: np.ndarray, shifts: ShiftVector) -> np.ndarray:
    """Add the shift scalars to one logit row or to every row of a batch.

    Raises:
        ContractViolation: If the class dimension does not match.
    """
    arr = np.asarray(logits, dtype=np.float64)
    if arr.shape[-1] != shifts.class_count:
        raise ContractViolation(
            f"logit length {arr.shape[-1]} does not match {shifts.class_count} shifts"
        )
    return arr + shifts.alphas


def _validated_counts(counts: Sequence[int] | np.ndarray) -> np.ndarray:
    arr = np.asarray(counts)
    if arr.ndim != 1 or arr.size == 0:
        raise ContractViolation("counts must be a non-empty vector")
    if not np.all(np.isfinite(arr)) or (arr <= 0).any():
        raise ContractViolation("counts must be positive")
    return arr.astype(np.float64)


def jenks_breaks(counts: Sequence[int] | np.ndarray, num_clusters: int) -> ClusterAssignment:
    """Partition classes by training count with exact 1-D natural breaks.

    Classes sorted by count are split into ``num_clusters`` contiguous groups that
    minimize the total within-group sum of squared deviations (Fisher-Jenks dynamic
    program over the distinct count values, so equal counts always share a group).
    Cluster 0 holds the most frequent classes. No anchor is set.

    Raises:
        DegenerateClusteringError: If ``num_clusters`` exceeds the number of distinct
            counts.
        ContractViolation: If ``num_clusters < 1`` or counts are not positive.
    """
    values = _validated_counts(counts)
    if num_clusters < 1:
        raise ContractViolation("num_clusters must be at least 1")
    distinct, inverse, multiplicity = np.unique(values, return_inverse=True, return_counts=True)
    k = distinct.size
    if num_clusters > k:
        raise DegenerateClusteringError(
            f"cannot form {num_clusters} clusters from {k} distinct counts"
        )

    w = multiplicity.astype(np.float64)
    p0 = np.concatenate(([0.0], np.cumsum(w)))
    p1 = np.concatenate(([0.0], np.cumsum(w * distinct)))
    p2 = np.concatenate(([0.0], np.cumsum(w * distinct * distinct)))

    def ssd(i: np.ndarray | int, j: int) -> np.ndarray:
        weight = p0[j] - p0[i]
        total = p1[j] - p1[i]
        return (p2[j] - p2[i]) - total * total / weight

    # best[m, j]: minimal cost of splitting the first j distinct values into m groups
    best = np.full((num_clusters + 1, k + 1), np.inf)
    split = np.zeros((num_clusters + 1, k + 1), dtype=np.int64)
    for j in range(1, k + 1):
        best[1, j] = ssd(0, j)
    for m in range(2, num_clusters + 1):
        for j in range(m, k + 1):
            starts = np.arange(m - 1, j)
            candidates = best[m - 1, starts] + ssd(starts, j)
            pick = int(np.argmin(candidates))
            best[m, j] = candidates[pick]
            split[m, j] = starts[pick]

    group_of_distinct = np.empty(k, dtype=np.int64)
    end = k
    for m in range(num_clusters, 0, -1):
        start = split[m, end] if m > 1 else 0
        group_of_distinct[start:end] = m - 1
        end = start

    # groups ascend with count; renumber so the most frequent group is cluster 0
    cluster_of = (num_clusters - 1) - group_of_distinct[inverse]
    logger.debug(
        "Natural breaks: %d clusters over %d classes, within-group SSD %.6g",
        num_clusters, values.size, best[num_clusters, k],
    )
    return ClusterAssignment(cluster_of, num_clusters)


def within_cluster_ssd(counts: Sequence[int] | np.ndarray, clusters: ClusterAssignment) -> float:
    """Total within-cluster sum of squared deviations of the counts."""
    values = np.asarray(counts, dtype=np.float64)
    means = cluster_means(values, clusters)
    return float(np.sum((values - means[clusters.cluster_of]) ** 2))


def goodness_of_variance_fit(counts: Sequence[int] | np.ndarray, clusters: ClusterAssignment) -> float:
    """``(SDAM - SDCM) / SDAM``; 1.0 when the counts have no spread."""
    values = np.asarray(counts, dtype=np.float64)
    sdam = float(np.sum((values - values.mean()) ** 2))
    if sdam == 0.0:
        return 1.0
    return (sdam - within_cluster_ssd(values, clusters)) / sdam


def select_anchor(counts: Sequence[int] | np.ndarray, clusters: ClusterAssignment) -> int:
    """Return the cluster with the smallest mean training count (lowest index on ties)."""
    values = np.asarray(counts, dtype=np.float64)
    if values.size != clusters.class_count:
        raise ContractViolation("counts and clustering cover different class counts")
    return int(np.argmin(cluster_means(values, clusters)))


def fewest_shot_class(counts: Sequence[int] | np.ndarray) -> int:
    """Class with the smallest training count (lowest index on ties)."""
    return int(np.argmin(np.asarray(counts)))


def cluster_by_counts(counts: Sequence[int] | np.ndarray, num_clusters: int) -> ClusterAssignment:
    """Natural-breaks clustering with the fewest-shot cluster as anchor."""
    clusters = jenks_breaks(counts, num_clusters)
    return clusters.with_anchor(select_anchor(counts, clusters))


def select_num_clusters(
    candidates: Sequence[int],
    logits: LogitMatrix,
    labels: np.ndarray,
    counts: Sequence[int] | np.ndarray,
) -> int:
    """Pick the cluster count whose correction scores best on the sampling set.

    For each candidate the classes are clustered by ``counts``, anchored at the
    fewest-shot cluster, shifted, and scored by top-1 accuracy on the corrected
    sampling logits. Candidates exceeding the number of distinct counts are skipped.
    Ties go to the smaller cluster count.

    Raises:
        ContractViolation: If no candidate is given or none is feasible.
    """
    if len(candidates) == 0:
        raise ContractViolation("select_num_clusters needs at least one candidate")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.sample_count,):
        raise ContractViolation("one label per sampling-set row is required")
    distinct = np.unique(np.asarray(counts)).size

    best_m: int | None = None
    best_acc = -np.inf
    for m in sorted(set(int(c) for c in candidates)):
        if m < 1 or m > distinct:
            logger.warning("Skipping infeasible cluster count %d (%d distinct counts)", m, distinct)
            continue
        clusters = cluster_by_counts(counts, m)
        shifts = cluster_shifts(logits, clusters)
        acc = topk_accuracy(apply_shifts(logits.values, shifts), labels, k=1)
        logger.info("Cluster count %d: sampling-set accuracy %.3f%%, variance fit %.3f",
                    m, acc, goodness_of_variance_fit(counts, clusters))
        if acc > best_acc:
            best_m, best_acc = m, acc
    if best_m is None:
        raise ContractViolation(f"no feasible cluster count among {list(candidates)}")
    return best_m


class CorrectedClassifier:
    """A classifier whose logits are offset by shift scalars at inference time.

    Wraps any object with a ``forward(x)`` method; parameters are not touched.
    """

    def __init__(self, model: Any, shifts: ShiftVector) -> None:
        if model.class_count != shifts.class_count:
            raise ContractViolation(
                f"model has {model.class_count} classes, shifts cover {shifts.class_count}"
            )
        self.model = model
        self.shifts = shifts

    @property
    def class_count(self) -> int:
        return self.shifts.class_count

    def forward(self, x: np.ndarray) -> np.ndarray:
        return apply_shifts(self.model.forward(x), self.shifts)
