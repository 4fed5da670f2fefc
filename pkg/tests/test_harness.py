from unittest.mock import patch

import numpy as np
import pytest

from energy_aligning.aligning import MODE_PER_CLASS, MODE_PER_CLUSTER
from energy_aligning.data import DataConfig, make_benchmark
from energy_aligning.errors import ConfigurationError
from energy_aligning.metrics import avg_incremental
from energy_aligning.numerics import neg_free_energies
from energy_aligning.services import EaConfig, LtConfig, jitter_sigma, run_cil, run_lt
from energy_aligning.training import CilConfig, SgdConfig

pytestmark = pytest.mark.slow

CIL_SGD = SgdConfig(schedule="step", milestones=(20,), epochs=30)


@pytest.fixture(scope="module")
def lt_splits():
    return make_benchmark(DataConfig())


@pytest.fixture(scope="module")
def lt_per_class(lt_splits):
    return run_lt(lt_splits.train, lt_splits.test, LtConfig(shift_mode=MODE_PER_CLASS), SgdConfig(), EaConfig())


@pytest.fixture(scope="module")
def lt_default(lt_splits):
    return run_lt(lt_splits.train, lt_splits.test, LtConfig(), SgdConfig(), EaConfig())


@pytest.fixture(scope="module")
def cil_splits():
    return make_benchmark(DataConfig(n_train=100, n_test=50, imbalance_ratio=1.0))


@pytest.fixture(scope="module")
def cil_runs(cil_splits):
    def run(energy_aligning):
        return run_cil(cil_splits.train, cil_splits.test, CilConfig(memory=50, energy_aligning=energy_aligning),
                       CIL_SGD, EaConfig())

    return run(True), run(False)


class TestLongTailed:
    def test_bias_emerges_and_vanishes(self, lt_per_class):
        energy = lt_per_class.report.energy
        assert energy.rho_before >= 0.7
        assert abs(energy.rho_after) <= 0.3

    def test_energies_equalized(self, lt_per_class):
        after = neg_free_energies(lt_per_class.sampleset.logits(lt_per_class.corrected))
        assert np.max(np.abs(after - after[lt_per_class.shifts.anchor])) < 1e-9

    def test_uncorrected_model_favours_head_classes(self, lt_per_class):
        splits = lt_per_class.report.uncorrected.splits
        assert splits.many - splits.few >= 10.0

    def test_aligning_helps_tail_and_balanced_accuracy(self, lt_per_class):
        before = lt_per_class.report.uncorrected
        after = lt_per_class.report.corrected
        assert after.splits.few > before.splits.few
        assert after.macro > before.macro

    def test_head_classes_shift_down(self, lt_per_class):
        alphas = lt_per_class.shifts.alphas
        assert alphas[-1] == 0.0
        assert alphas[0] < 0.0

    def test_default_cluster_run(self, lt_default):
        assert lt_default.shifts.mode == MODE_PER_CLUSTER
        assert lt_default.extra["num_clusters"] in LtConfig().candidate_clusters
        assert lt_default.extra["cluster_energy_gap"] < 1e-9
        data = lt_default.report.to_dict()
        assert data["corrected"]["splits"]["sizes"] == {"many": 4, "medium": 3, "few": 3}

    def test_default_run_bias_and_improvement(self, lt_default):
        energy = lt_default.report.energy
        assert energy.rho_before >= 0.7
        # Cluster shifts keep the order inside a cluster, so only a reduction is expected
        assert energy.rho_after < energy.rho_before
        before = lt_default.report.uncorrected
        after = lt_default.report.corrected
        assert before.splits.many - before.splits.few >= 10.0
        assert after.splits.few > before.splits.few
        assert after.macro > before.macro

    def test_single_cluster_is_identity(self, lt_splits):
        result = run_lt(lt_splits.train, lt_splits.test, LtConfig(num_clusters=1), SgdConfig(epochs=3), EaConfig())
        assert result.shifts.is_identity()
        np.testing.assert_array_equal(result.report.corrected.confusion, result.report.uncorrected.confusion)

    def test_no_aligning(self, lt_splits):
        result = run_lt(lt_splits.train, lt_splits.test, LtConfig(energy_aligning=False), SgdConfig(epochs=3),
                        EaConfig())
        assert result.shifts.is_identity()
        assert result.report.energy.rho_after is None

    def test_balanced_counts_give_identity(self, cil_splits):
        result = run_lt(cil_splits.train, cil_splits.test, LtConfig(), SgdConfig(epochs=5), EaConfig())
        assert result.extra["num_clusters"] == 1
        assert result.report.corrected.top1 == result.report.uncorrected.top1

    def test_validation_source(self, lt_splits):
        result = run_lt(lt_splits.train, lt_splits.test, LtConfig(num_clusters=3), SgdConfig(epochs=3),
                        EaConfig(source="validation"), validation=lt_splits.validation)
        assert result.sampleset.per_class == 20

    def test_validation_source_needs_split(self, lt_splits):
        with pytest.raises(ConfigurationError):
            run_lt(lt_splits.train, lt_splits.test, LtConfig(), SgdConfig(epochs=1), EaConfig(source="validation"))

    def test_empty_class_rejected(self, lt_splits):
        train = lt_splits.train.subset(np.flatnonzero(lt_splits.train.labels != 9))
        with pytest.raises(ConfigurationError):
            run_lt(train, lt_splits.test, LtConfig(), SgdConfig(epochs=1), EaConfig())


class TestClassIncremental:
    def test_records(self, cil_runs):
        with_ea, _ = cil_runs
        records = with_ea.report.steps
        assert [r["classes_seen"] for r in records] == [2, 4, 6, 8, 10]
        assert records[0]["lambda"] == 0.0
        assert records[2]["lambda"] == pytest.approx(4 / 6)
        assert records[2]["weight_decay"] == pytest.approx(5e-4 * 0.25)
        assert all(r["buffer_size"] <= 50 for r in records)
        assert sorted(with_ea.class_order.tolist()) == list(range(10))

    def test_first_step_has_no_shift(self, cil_runs):
        with_ea, _ = cil_runs
        assert with_ea.steps[0].shifts.is_identity()
        assert with_ea.report.steps[0]["old_to_new_uncorrected"] is None

    def test_new_classes_shift_down(self, cil_runs):
        with_ea, _ = cil_runs
        assert all(r["alpha_new"] < 0 for r in with_ea.report.steps[1:])

    def test_aligning_reduces_old_to_new_confusion(self, cil_runs):
        with_ea, _ = cil_runs
        records = with_ea.report.steps[1:]
        for r in records:
            assert r["old_to_new_corrected"] < r["old_to_new_uncorrected"], f"step {r['step']}"

    def test_aligning_does_not_lower_average(self, cil_runs):
        with_ea, without = cil_runs
        ea_avg = avg_incremental(with_ea.report.step_accuracies(corrected=True))
        plain_avg = avg_incremental(without.report.step_accuracies(corrected=False))
        assert ea_avg >= plain_avg

    def test_jitter_scale_uses_only_seen_classes(self):
        splits = make_benchmark(DataConfig(class_count=4, n_train=30, n_test=10, n_validation=0,
                                           imbalance_ratio=1.0))
        with patch("energy_aligning.services.cil_harness.jitter_sigma", wraps=jitter_sigma) as sigma:
            run_cil(splits.train, splits.test, CilConfig(steps=2, memory=8), SgdConfig(epochs=1), EaConfig())
        assert sigma.call_count == 1
        # two new classes of 30 rows plus 8 exemplars; the other 60 rows are not seen yet
        assert sigma.call_args.args[0].shape[0] == 68

    def test_without_aligning_shifts_stay_zero(self, cil_runs):
        _, without = cil_runs
        assert all(s.shifts.is_identity() for s in without.steps)

    def test_single_step_is_plain_training(self, cil_splits):
        result = run_cil(cil_splits.train, cil_splits.test, CilConfig(steps=1), SgdConfig(epochs=3), EaConfig())
        assert result.steps[0].shifts.is_identity()
        assert result.report.to_dict()["avg_incremental_corrected"] is None

    def test_full_memory_keeps_shift_small(self, cil_splits):
        result = run_cil(cil_splits.train, cil_splits.test, CilConfig(memory=10_000), CIL_SGD, EaConfig())
        assert all(abs(r["alpha_new"]) < 0.5 for r in result.report.steps)

    def test_repeated_class_rejected(self, cil_splits):
        with pytest.raises(ConfigurationError):
            run_cil(cil_splits.train, cil_splits.test, CilConfig(), SgdConfig(epochs=1), EaConfig(),
                    class_batches=[[0, 1], [1, 2]])

    def test_explicit_stream(self, cil_splits):
        batches = [[9, 8, 7, 6, 5], [0, 1, 2, 3, 4]]
        result = run_cil(cil_splits.train, cil_splits.test, CilConfig(steps=2), SgdConfig(epochs=2), EaConfig(),
                         class_batches=batches)
        assert result.class_order.tolist() == [9, 8, 7, 6, 5, 0, 1, 2, 3, 4]
        assert result.report.steps[1]["old_classes"] == 5
