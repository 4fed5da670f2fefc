import itertools
import logging
import math

import numpy as np
import pytest

from energy_aligning.aligning import (
    MODE_PER_CLASS,
    MODE_PER_CLUSTER,
    ClusterAssignment,
    CorrectedClassifier,
    ShiftVector,
    apply_shifts,
    cluster_by_counts,
    cluster_means,
    cluster_shifts,
    fewest_shot_class,
    goodness_of_variance_fit,
    jenks_breaks,
    per_class_shifts,
    select_anchor,
    select_num_clusters,
    within_cluster_ssd,
)
from energy_aligning.errors import ContractViolation, DegenerateClusteringError, ParseError
from energy_aligning.model import init_params
from energy_aligning.numerics import LogitMatrix, neg_free_energies


def naive_lse(column):
    return math.log(float(np.sum(np.exp(np.asarray(column, dtype=np.float64)))))


def random_instance(rng):
    s = int(rng.integers(1, 101))
    c = int(rng.integers(2, 11))
    return LogitMatrix(rng.uniform(-20, 20, size=(s, c)))


def random_clusters(rng, class_count):
    m = int(rng.integers(1, class_count + 1))
    cluster_of = rng.permutation(np.arange(class_count) % m)
    return ClusterAssignment(cluster_of, m, anchor_cluster=int(rng.integers(0, m)))


def brute_force_ssd(counts, num_clusters):
    """Minimum within-group SSD over contiguous partitions of the sorted counts.

    Cuts are only placed between different values so that equal counts stay together.
    """
    values = np.sort(np.asarray(counts, dtype=np.float64))
    cut_points = [i for i in range(1, values.size) if values[i] != values[i - 1]]
    best = math.inf
    for cuts in itertools.combinations(cut_points, num_clusters - 1):
        bounds = (0, *cuts, values.size)
        cost = sum(
            float(np.sum((values[a:b] - values[a:b].mean()) ** 2)) for a, b in zip(bounds[:-1], bounds[1:])
        )
        best = min(best, cost)
    return best


class TestShiftVector:
    def test_per_class_anchor_must_be_zero(self):
        with pytest.raises(ContractViolation):
            ShiftVector(np.array([0.5, 0.0]), mode=MODE_PER_CLASS, anchor=0)

    def test_rejects_non_finite(self):
        with pytest.raises(ContractViolation):
            ShiftVector(np.array([0.0, np.inf]))

    def test_rejects_unknown_mode(self):
        with pytest.raises(ContractViolation):
            ShiftVector(np.zeros(2), mode="per-sample")

    def test_zeros_is_identity(self):
        assert ShiftVector.zeros(4).is_identity()

    def test_save_and_load(self, tmp_path):
        shifts = ShiftVector(np.array([0.0, -1.25, 0.5]), mode=MODE_PER_CLASS, anchor=0)
        path = str(tmp_path / "shifts.json")
        shifts.save(path)
        loaded = ShiftVector.load(path)
        assert loaded.mode == MODE_PER_CLASS
        assert loaded.anchor == 0
        np.testing.assert_array_equal(loaded.alphas, shifts.alphas)

    def test_load_malformed(self, tmp_path):
        path = tmp_path / "shifts.json"
        path.write_text('{"alphas": [0.0]}')
        with pytest.raises(ParseError):
            ShiftVector.load(str(path))

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(ParseError):
            ShiftVector.load(str(tmp_path / "absent.json"))


class TestPerClassShifts:
    def test_matches_naive_oracle(self, rng):
        for _ in range(200):
            logits = random_instance(rng)
            anchor = int(rng.integers(0, logits.class_count))
            shifts = per_class_shifts(logits, anchor)
            anchor_lse = naive_lse(logits.column(anchor))
            expected = [anchor_lse - naive_lse(logits.column(j)) for j in range(logits.class_count)]
            np.testing.assert_allclose(shifts.alphas, expected, rtol=1e-10, atol=1e-10)
            assert shifts.alphas[anchor] == 0.0

    def test_identical_column_gets_zero(self, rng):
        base = rng.normal(size=(8, 1))
        logits = LogitMatrix(np.hstack([base, base, base - 1.0]))
        shifts = per_class_shifts(logits, 0)
        assert shifts.alphas[1] == pytest.approx(0.0, abs=1e-12)
        assert shifts.alphas[2] == pytest.approx(1.0, rel=1e-12)

    def test_hand_case(self):
        shifts = per_class_shifts(LogitMatrix([[2.0, 1.0], [0.0, 1.0]]), 0)
        assert shifts.alphas[1] == pytest.approx(0.433781, abs=1e-6)

    def test_equalizes_all_classes(self, rng):
        logits = random_instance(rng)
        shifts = per_class_shifts(logits, 1)
        energies = neg_free_energies(logits.shifted(shifts.alphas))
        np.testing.assert_allclose(energies, energies[1], rtol=1e-9, atol=1e-9)

    def test_anchor_out_of_range(self):
        with pytest.raises(ContractViolation):
            per_class_shifts(LogitMatrix(np.zeros((2, 2))), 2)


class TestClusterShifts:
    def test_matches_naive_oracle(self, rng):
        for _ in range(200):
            logits = random_instance(rng)
            clusters = random_clusters(rng, logits.class_count)
            shifts = cluster_shifts(logits, clusters)
            lse = np.array([naive_lse(logits.column(j)) for j in range(logits.class_count)])
            means = np.array([lse[clusters.cluster_of == k].mean() for k in range(clusters.num_clusters)])
            expected = (means[clusters.anchor_cluster] - means)[clusters.cluster_of]
            np.testing.assert_allclose(shifts.alphas, expected, rtol=1e-10, atol=1e-10)

    def test_equalizes_cluster_means(self, rng):
        for _ in range(50):
            logits = random_instance(rng)
            clusters = random_clusters(rng, logits.class_count)
            shifts = cluster_shifts(logits, clusters)
            means = cluster_means(neg_free_energies(logits.shifted(shifts.alphas)), clusters)
            np.testing.assert_allclose(means, means[clusters.anchor_cluster], rtol=1e-9, atol=1e-9)
            anchor_members = clusters.members(clusters.anchor_cluster)
            assert np.all(shifts.alphas[anchor_members] == 0.0)

    def test_singletons_reduce_to_per_class(self, rng):
        logits = random_instance(rng)
        c = logits.class_count
        clusters = ClusterAssignment(np.arange(c), c, anchor_cluster=0)
        np.testing.assert_allclose(cluster_shifts(logits, clusters).alphas,
                                   per_class_shifts(logits, 0).alphas, atol=1e-12)

    def test_single_cluster_is_identity(self, rng):
        logits = random_instance(rng)
        clusters = ClusterAssignment(np.zeros(logits.class_count), 1, anchor_cluster=0)
        assert cluster_shifts(logits, clusters).is_identity()

    def test_hand_case(self):
        logits = LogitMatrix([[4.0, 2.0, 1.0, 1.0]])
        clusters = ClusterAssignment.from_groups([[0, 1], [2, 3]], 4, anchor_cluster=1)
        np.testing.assert_allclose(cluster_shifts(logits, clusters).alphas, [-2.0, -2.0, 0.0, 0.0])

    def test_requires_anchor(self):
        clusters = ClusterAssignment(np.array([0, 1]), 2)
        with pytest.raises(ContractViolation):
            cluster_shifts(LogitMatrix(np.zeros((2, 2))), clusters)

    def test_class_count_mismatch(self):
        clusters = ClusterAssignment(np.array([0, 0, 0]), 1, anchor_cluster=0)
        with pytest.raises(ContractViolation):
            cluster_shifts(LogitMatrix(np.zeros((2, 2))), clusters)

    def test_shift_invariant_to_global_offset(self, rng):
        logits = random_instance(rng)
        clusters = random_clusters(rng, logits.class_count)
        shifted = LogitMatrix(logits.values + 7.5)
        np.testing.assert_allclose(cluster_shifts(shifted, clusters).alphas,
                                   cluster_shifts(logits, clusters).alphas, atol=1e-9)


class TestApplyShifts:
    def test_zero_shift_is_identity(self):
        row = np.array([1.0, -2.0, 3.5])
        np.testing.assert_array_equal(apply_shifts(row, ShiftVector.zeros(3)), row)

    def test_flips_prediction(self):
        shifts = ShiftVector(np.array([0.0, 0.5]), mode=MODE_PER_CLASS, anchor=0)
        corrected = apply_shifts(np.array([2.0, 1.8]), shifts)
        np.testing.assert_allclose(corrected, [2.0, 2.3])
        assert int(np.argmax(corrected)) == 1

    def test_batch(self):
        shifts = ShiftVector(np.array([0.0, 1.0]), mode=MODE_PER_CLUSTER)
        np.testing.assert_array_equal(apply_shifts(np.zeros((3, 2)), shifts), [[0.0, 1.0]] * 3)

    def test_length_mismatch(self):
        with pytest.raises(ContractViolation):
            apply_shifts(np.zeros(3), ShiftVector.zeros(2))


class TestClusterAssignment:
    def test_rejects_empty_cluster(self):
        with pytest.raises(ContractViolation):
            ClusterAssignment(np.array([0, 0, 2]), 3)

    def test_from_groups_rejects_overlap(self):
        with pytest.raises(ContractViolation):
            ClusterAssignment.from_groups([[0, 1], [1, 2]], 3)

    def test_from_groups_requires_cover(self):
        with pytest.raises(ContractViolation):
            ClusterAssignment.from_groups([[0], [1]], 3)

    def test_sizes(self):
        clusters = ClusterAssignment(np.array([1, 0, 1, 1]), 2)
        np.testing.assert_array_equal(clusters.sizes, [1, 3])


class TestJenksBreaks:
    def test_single_cluster(self):
        clusters = jenks_breaks([5, 1, 9], 1)
        np.testing.assert_array_equal(clusters.cluster_of, [0, 0, 0])

    def test_singletons(self):
        clusters = jenks_breaks([5, 1, 9], 3)
        assert sorted(clusters.cluster_of.tolist()) == [0, 1, 2]
        assert clusters.cluster_of[2] == 0
        assert clusters.cluster_of[1] == 2

    def test_hand_case(self):
        clusters = jenks_breaks([100, 90, 10, 8], 2)
        np.testing.assert_array_equal(clusters.cluster_of, [0, 0, 1, 1])

    def test_equal_counts_share_a_cluster(self):
        clusters = jenks_breaks([50, 50, 10, 49], 2)
        assert clusters.cluster_of[0] == clusters.cluster_of[1]

    def test_too_many_clusters(self):
        with pytest.raises(DegenerateClusteringError):
            jenks_breaks([10, 10, 5], 3)

    def test_rejects_non_positive_counts(self):
        with pytest.raises(ContractViolation):
            jenks_breaks([10, 0, 5], 2)

    def test_matches_exhaustive_search(self, rng):
        for _ in range(500):
            c = int(rng.integers(1, 13))
            m = int(rng.integers(1, 5))
            counts = rng.integers(1, 1000, size=c)
            if m > np.unique(counts).size:
                with pytest.raises(DegenerateClusteringError):
                    jenks_breaks(counts, m)
                continue
            clusters = jenks_breaks(counts, m)
            assert within_cluster_ssd(counts, clusters) == pytest.approx(
                brute_force_ssd(counts, m), rel=1e-9, abs=1e-9
            )
            order = np.argsort(-counts, kind="stable")
            assert np.all(np.diff(clusters.cluster_of[order]) >= 0)

    def test_goodness_of_fit_improves_with_clusters(self):
        counts = np.array([500, 300, 180, 108, 65, 39, 23, 14, 8, 5])
        fits = [goodness_of_variance_fit(counts, jenks_breaks(counts, m)) for m in range(1, 6)]
        assert fits[0] == pytest.approx(0.0, abs=1e-12)
        assert all(b >= a - 1e-12 for a, b in zip(fits, fits[1:]))


class TestAnchors:
    def test_single_cluster_anchor(self):
        assert select_anchor([3, 4], ClusterAssignment(np.zeros(2), 1)) == 0

    def test_fewest_shot_cluster(self):
        clusters = ClusterAssignment.from_groups([[0, 1], [2, 3]], 4)
        assert select_anchor([100, 90, 10, 8], clusters) == 1

    def test_tie_goes_to_lower_index(self):
        clusters = ClusterAssignment.from_groups([[0, 1], [2, 3]], 4)
        assert select_anchor([10, 20, 20, 10], clusters) == 0

    def test_fewest_shot_class(self):
        assert fewest_shot_class([30, 5, 9, 5]) == 1

    def test_cluster_by_counts_sets_anchor(self):
        clusters = cluster_by_counts([100, 90, 10, 8], 2)
        assert clusters.anchor_cluster == 1


class TestSelectNumClusters:
    def test_empty_candidates(self):
        logits = LogitMatrix(np.zeros((2, 2)))
        with pytest.raises(ContractViolation):
            select_num_clusters([], logits, np.array([0, 1]), [10, 5])

    def test_single_candidate_returned(self, rng):
        logits = LogitMatrix(rng.normal(size=(6, 3)))
        labels = np.array([0, 1, 2, 0, 1, 2])
        assert select_num_clusters([2], logits, labels, [30, 20, 10]) == 2

    def test_balanced_counts_pick_smallest(self, rng):
        logits = LogitMatrix(rng.normal(size=(6, 3)))
        labels = np.array([0, 1, 2, 0, 1, 2])
        assert select_num_clusters([3, 1, 2], logits, labels, [10, 10, 10]) == 1

    def test_logs_variance_fit_per_candidate(self, rng, caplog):
        caplog.set_level(logging.INFO, logger="energy_aligning.aligning")
        logits = LogitMatrix(rng.normal(size=(6, 3)))
        select_num_clusters([1, 3], logits, np.array([0, 1, 2, 0, 1, 2]), [30, 20, 10])
        messages = [r.getMessage() for r in caplog.records]
        assert any(m.startswith("Cluster count 1:") and m.endswith("variance fit 0.000") for m in messages)
        assert any(m.startswith("Cluster count 3:") and m.endswith("variance fit 1.000") for m in messages)

    def test_none_feasible(self, rng):
        logits = LogitMatrix(rng.normal(size=(4, 2)))
        with pytest.raises(ContractViolation):
            select_num_clusters([3, 4], logits, np.array([0, 1, 0, 1]), [5, 6])

    def test_prefers_correction_that_fixes_bias(self):
        # class 2 is rare and suppressed; equalizing it against the rest repairs the sampling set
        logits = LogitMatrix([
            [3.0, 0.0, 1.0],
            [0.0, 3.0, 1.0],
            [1.5, 1.5, 1.0],
            [1.5, 1.5, 1.2],
        ])
        labels = np.array([0, 1, 2, 2])
        assert select_num_clusters([1, 2], logits, labels, [100, 100, 5]) == 2


class TestCorrectedClassifier:
    def test_offsets_model_logits(self, rng):
        model = init_params([3, 2], seed=1)
        shifts = ShiftVector(np.array([0.0, -0.75]), mode=MODE_PER_CLASS, anchor=0)
        x = rng.normal(size=(4, 3))
        np.testing.assert_allclose(CorrectedClassifier(model, shifts).forward(x),
                                   model.forward(x) + np.array([0.0, -0.75]))

    def test_class_count_mismatch(self):
        with pytest.raises(ContractViolation):
            CorrectedClassifier(init_params([3, 2], seed=1), ShiftVector.zeros(3))
