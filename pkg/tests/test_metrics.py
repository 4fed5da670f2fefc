import numpy as np
import pytest

from energy_aligning.errors import ContractViolation
from energy_aligning.metrics import (
    AccuracyReport,
    MetricsReport,
    avg_incremental,
    confusion_frame,
    confusion_log1p,
    confusion_matrix,
    energy_bias_diagnostic,
    evaluate_logits,
    per_class_accuracy,
    predict,
    spearman_rho,
    split_accuracies,
    topk_accuracy,
)


def average_ranks(values):
    ranks = np.empty(len(values))
    for i, v in enumerate(values):
        below = sum(1 for w in values if w < v)
        ties = sum(1 for w in values if w == v)
        ranks[i] = below + (ties + 1) / 2
    return ranks


def naive_spearman(a, b):
    ra, rb = average_ranks(a), average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    return float((ra * rb).sum() / np.sqrt((ra * ra).sum() * (rb * rb).sum()))


class TestTopK:
    def test_k_equal_to_classes_is_perfect(self, rng):
        logits = rng.normal(size=(20, 4))
        assert topk_accuracy(logits, rng.integers(0, 4, 20), 4) == 100.0

    def test_half_correct(self):
        logits = np.array([[2.0, 1.0], [2.0, 1.0], [1.0, 2.0], [1.0, 2.0]])
        assert topk_accuracy(logits, np.array([0, 1, 1, 0]), 1) == 50.0

    def test_monotone_in_k(self, rng):
        logits = rng.normal(size=(50, 6))
        labels = rng.integers(0, 6, 50)
        accs = [topk_accuracy(logits, labels, k) for k in range(1, 7)]
        assert accs == sorted(accs)

    def test_ties_go_to_lower_index(self):
        assert predict(np.array([[1.0, 1.0, 0.0]]))[0] == 0
        assert topk_accuracy(np.array([[1.0, 1.0, 1.0]]), np.array([1]), 1) == 0.0

    def test_empty_batch(self):
        with pytest.raises(ContractViolation):
            topk_accuracy(np.zeros((0, 3)), np.zeros(0, dtype=int))

    def test_label_out_of_range(self):
        with pytest.raises(ContractViolation):
            topk_accuracy(np.zeros((1, 3)), np.array([3]))


class TestConfusion:
    def test_perfect_predictions_are_diagonal(self):
        labels = np.array([0, 1, 2, 2, 1])
        matrix = confusion_matrix(labels, labels, 3)
        np.testing.assert_array_equal(matrix, np.diag([1, 2, 2]))

    def test_total_equals_samples(self, rng):
        labels = rng.integers(0, 5, 40)
        assert confusion_matrix(rng.integers(0, 5, 40), labels, 5).sum() == 40

    def test_constant_prediction_fills_one_column(self):
        labels = np.array([0, 1, 2, 1])
        matrix = confusion_matrix(np.full(4, 2), labels, 3)
        assert matrix[:, 2].sum() == 4
        assert matrix[:, :2].sum() == 0

    def test_log_view_and_frame(self):
        matrix = np.array([[3, 0], [1, 2]])
        np.testing.assert_allclose(confusion_log1p(matrix), np.log1p(matrix))
        frame = confusion_frame(matrix)
        assert frame.index.name == "actual"
        assert frame.loc[1, 0] == 1

    @pytest.mark.parametrize("quantized", [False, True])
    def test_diagonal_share_equals_top1(self, rng, quantized):
        logits = rng.normal(size=(57, 4))
        if quantized:
            logits = np.round(logits)
        labels = rng.integers(0, 4, 57)
        matrix = confusion_matrix(predict(logits), labels, 4)
        assert 100.0 * float(np.trace(matrix) / matrix.sum()) == topk_accuracy(logits, labels, 1)

    def test_per_class_accuracy_marks_missing_classes(self):
        acc = per_class_accuracy(np.array([[2, 2], [0, 0]]))
        assert acc[0] == 50.0
        assert np.isnan(acc[1])


class TestSplits:
    def test_buckets(self):
        splits = split_accuracies([90.0, 60.0, 30.0], [200, 50, 5])
        assert (splits.many, splits.medium, splits.few) == (90.0, 60.0, 30.0)
        assert splits.overall == pytest.approx(60.0)

    def test_threshold_boundaries_are_medium(self):
        splits = split_accuracies([10.0, 20.0], [100, 20])
        assert splits.many is None
        assert splits.few is None
        assert splits.medium == 15.0

    def test_size_weighted_buckets_recover_macro(self, rng):
        acc = rng.uniform(0, 100, size=9)
        splits = split_accuracies(acc, [500, 300, 150, 100, 60, 20, 19, 7, 1])
        weighted = sum(
            getattr(splits, name) * size for name, size in splits.sizes.items() if size
        ) / sum(splits.sizes.values())
        assert weighted == pytest.approx(splits.overall, rel=1e-12)
        assert weighted == pytest.approx(acc.mean(), rel=1e-12)

    def test_avg_incremental_skips_first_step(self):
        assert avg_incremental([100.0, 90.0, 80.0, 70.0]) == 80.0
        assert avg_incremental([90.0, 80.0, 70.0]) == 75.0
        assert avg_incremental([42.0]) is None


class TestSpearman:
    def test_perfect_agreement(self):
        assert spearman_rho([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
        assert spearman_rho([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)

    def test_matches_rank_formula(self, rng):
        for _ in range(50):
            n = int(rng.integers(3, 12))
            a = rng.integers(0, 5, n).astype(float)
            b = rng.normal(size=n)
            if np.ptp(a) == 0:
                continue
            assert spearman_rho(a, b) == pytest.approx(naive_spearman(a, b), abs=1e-12)

    def test_flat_vector_gives_zero(self):
        assert spearman_rho([5, 5, 5], [1.0, 2.0, 3.0]) == 0.0
        assert spearman_rho([1, 2, 3], [0.7, 0.7, 0.7]) == 0.0

    def test_needs_two_values(self):
        with pytest.raises(ContractViolation):
            spearman_rho([1], [2])

    def test_energy_diagnostic(self):
        diag = energy_bias_diagnostic([100, 10, 1], [3.0, 2.0, 1.0], [1.0, 1.0, 1.0])
        assert diag.rho_before == pytest.approx(1.0)
        assert diag.rho_after == 0.0
        assert list(diag.to_frame().columns) == [
            "class", "count", "neg_free_energy_before", "neg_free_energy_after",
        ]


class TestEvaluate:
    def test_report(self):
        logits = np.array([[3.0, 1.0, 0.0], [0.0, 2.0, 1.0], [0.0, 2.0, 1.0], [1.0, 0.0, 0.5]])
        labels = np.array([0, 1, 2, 2])
        report = evaluate_logits(logits, labels, k=2, train_counts=[200, 50, 5])
        assert report.top1 == 50.0
        assert report.topk == 100.0
        assert report.macro == pytest.approx(200.0 / 3)
        assert report.splits.few == 0.0
        data = report.to_dict()
        assert data["top2"] == 100.0
        assert data["confusion"][2] == [1, 1, 0]

    def test_k_capped_at_classes(self):
        report = evaluate_logits(np.array([[1.0, 0.0]]), np.array([1]), k=5)
        assert report.k == 2
        assert report.topk == 100.0

    def test_metrics_report_adds_incremental_average(self):
        base = evaluate_logits(np.eye(2), np.array([0, 1]))
        report = MetricsReport(uncorrected=base, steps=[
            {"top1_uncorrected": 100.0, "top1_corrected": 100.0},
            {"top1_uncorrected": 60.0, "top1_corrected": 70.0},
            {"top1_uncorrected": 40.0, "top1_corrected": 50.0},
        ])
        data = report.to_dict()
        assert data["avg_incremental_uncorrected"] == 50.0
        assert data["avg_incremental_corrected"] == 60.0
        assert isinstance(report.uncorrected, AccuracyReport)
