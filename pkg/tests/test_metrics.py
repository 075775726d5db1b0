import numpy as np
import pytest

from pcnet.metrics import (
    EvalReport, roc_auc, roc_points, threshold_metrics,
    remove_small_components, evaluate_region,
)
from oracles import pairwise_auc, flood_fill_components


class TestRocAuc:
    def test_perfect_separation(self):
        assert roc_auc(np.array([0.9, 0.8, 0.1, 0.2]),
                       np.array([1, 1, 0, 0])) == 1.0

    def test_all_equal_scores(self):
        assert roc_auc(np.full(10, 0.5),
                       np.array([1, 0] * 5)) == 0.5

    def test_worked_example(self):
        got = roc_auc(np.array([0.1, 0.4, 0.35, 0.8]), np.array([0, 0, 1, 1]))
        assert got == pytest.approx(0.75)
        assert got == pytest.approx(
            pairwise_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]))

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_pairwise_oracle_with_ties(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(5, 60))
        # quantized scores force ties
        scores = rng.integers(0, 8, n) / 8.0
        labels = rng.integers(0, 2, n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        assert roc_auc(scores, labels) == pytest.approx(
            pairwise_auc(scores, labels), abs=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="single-class"):
            roc_auc(np.array([0.5, 0.6]), np.array([1, 1]))

    @pytest.mark.parametrize("seed", range(6))
    def test_complement_symmetry_tie_free(self, seed):
        rng = np.random.default_rng(seed + 50)
        scores = rng.permutation(30) / 30.0
        labels = (rng.random(30) > 0.5).astype(int)
        if labels.sum() in (0, 30):
            labels[0] = 1 - labels[0]
        a = roc_auc(scores, labels)
        b = roc_auc(1.0 - scores, labels)
        assert a + b == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(6))
    def test_invariant_under_monotone_transform(self, seed):
        rng = np.random.default_rng(seed + 80)
        scores = rng.random(40)
        labels = (rng.random(40) > 0.4).astype(int)
        if labels.sum() in (0, 40):
            labels[0] = 1 - labels[0]
        assert roc_auc(scores, labels) == pytest.approx(
            roc_auc(np.exp(3 * scores), labels), abs=1e-12)

    def test_roc_points_trapezoid_equals_rank_auc(self):
        rng = np.random.default_rng(7)
        scores = rng.integers(0, 10, 50) / 10.0
        labels = (rng.random(50) > 0.5).astype(int)
        fpr, tpr = roc_points(scores, labels)
        assert np.trapezoid(tpr, fpr) == pytest.approx(
            roc_auc(scores, labels), abs=1e-12)


class TestThresholdMetrics:
    def test_perfect_prediction(self):
        t = np.array([1, 0, 1, 0, 1])
        rep = evaluate_region(t.astype(float), t)
        assert rep.sp == rep.se == rep.acc == rep.dice == 1.0

    def test_inverted_prediction(self):
        t = np.array([1, 0, 1, 0])
        rep = evaluate_region(1.0 - t, t)
        assert rep.se == 0.0 and rep.sp == 0.0

    def test_worked_counts(self):
        tp, fp, tn, fn = threshold_metrics(
            np.array([1.0, 1.0, 0.0, 0.0]), np.array([1, 0, 0, 0]))
        assert (tp, fp, tn, fn) == (1, 1, 2, 0)
        rep = EvalReport(tp, fp, tn, fn, auc=None)
        assert rep.dice == pytest.approx(2 / 3)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            threshold_metrics(np.zeros(3), np.zeros(4))

    @pytest.mark.parametrize("seed", range(8))
    def test_report_ratios_recompute_from_counts(self, seed):
        rng = np.random.default_rng(seed)
        pred = rng.random(200)
        truth = (rng.random(200) > 0.6).astype(int)
        rep = evaluate_region(pred, truth)
        n = rep.tp + rep.fp + rep.tn + rep.fn
        assert n == 200
        assert rep.acc == pytest.approx((rep.tp + rep.tn) / n)
        assert rep.sp == pytest.approx(rep.tn / (rep.tn + rep.fp))
        assert rep.se == pytest.approx(rep.tp / (rep.tp + rep.fn))
        assert rep.dice == pytest.approx(2 * rep.tp / (2 * rep.tp + rep.fp + rep.fn))

    @pytest.mark.parametrize("seed", range(5))
    def test_dice_precision_sensitivity_identity(self, seed):
        rng = np.random.default_rng(seed + 30)
        pred = rng.random(300)
        truth = (rng.random(300) > 0.5).astype(int)
        rep = evaluate_region(pred, truth)
        if rep.tp + rep.fp == 0 or rep.se is None:
            pytest.skip("degenerate draw")
        precision = rep.tp / (rep.tp + rep.fp)
        if rep.se + precision > 0:
            assert rep.dice == pytest.approx(
                2 * rep.se * precision / (rep.se + precision))


class TestRemoveSmallComponents:
    def _blob(self, n, shape=(20, 20, 20)):
        # serpentine raster in one slice: every prefix is one connected blob
        m = np.zeros(shape, np.uint8)
        for i in range(n):
            y, x = divmod(i, 8)
            if y % 2:
                x = 7 - x
            m[3, 3 + y, 3 + x] = 1
        assert m.sum() == n
        return m

    def test_39_voxel_blob_removed(self):
        m = self._blob(39)
        assert remove_small_components(m, 40).sum() == 0

    def test_40_voxel_blob_kept(self):
        m = self._blob(40)
        np.testing.assert_array_equal(remove_small_components(m, 40), m)

    def test_tube_survives_speck_dies(self):
        m = np.zeros((30, 30, 30), np.uint8)
        m[5, 5, 2:22] = 1          # 20-voxel line
        m[5, 6, 2:22] = 1
        m[5, 7, 2:22] = 1
        m[6, 6, 2:22] = 1
        m[4, 6, 2:22] = 1          # 100-voxel tube
        m[25, 25, 25:27] = 1       # 2-voxel speck, disconnected
        tube = m.copy()
        tube[25, 25, 25:27] = 0
        out = remove_small_components(m, 40)
        np.testing.assert_array_equal(out, tube)

    @pytest.mark.parametrize("seed", range(6))
    def test_idempotent_and_subset(self, seed):
        rng = np.random.default_rng(seed)
        m = (rng.random((24, 24)) > 0.75).astype(np.uint8)
        once = remove_small_components(m, 12)
        twice = remove_small_components(once, 12)
        np.testing.assert_array_equal(once, twice)
        assert np.all(once <= m)

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_flood_fill_oracle(self, seed):
        rng = np.random.default_rng(seed + 10)
        m = (rng.random((16, 16, 16)) > 0.9).astype(np.uint8)
        out = remove_small_components(m, 5)
        labels, sizes = flood_fill_components(m)
        expect = np.zeros_like(m)
        for lab, size in enumerate(sizes, start=1):
            if size >= 5:
                expect[labels == lab] = m[labels == lab]
        np.testing.assert_array_equal(out, expect)

    def test_2d_uses_8_connectivity(self):
        m = np.zeros((6, 6), np.uint8)
        m[0, 0] = m[1, 1] = m[2, 2] = 1  # diagonal chain = one component
        assert remove_small_components(m, 3).sum() == 3
        assert remove_small_components(m, 4).sum() == 0


class TestEvaluateRegion:
    def test_all_ones_region_equals_whole(self):
        rng = np.random.default_rng(1)
        pred = rng.random((10, 10))
        truth = (rng.random((10, 10)) > 0.5).astype(np.uint8)
        whole = evaluate_region(pred, truth)
        masked = evaluate_region(pred, truth, np.ones((10, 10), np.uint8))
        assert whole.csv_row() == masked.csv_row()

    def test_single_class_region_marks_auc_undefined(self):
        pred = np.random.default_rng(2).random((8, 8))
        truth = np.zeros((8, 8), np.uint8)
        truth[:4] = 1
        region = np.zeros((8, 8), np.uint8)
        region[5:] = 1  # slab without foreground
        rep = evaluate_region(pred, truth, region)
        assert rep.auc is None
        assert "single-class" in rep.note
        assert "undefined" in rep.to_text()

    def test_slab_region_matches_direct_recount(self):
        rng = np.random.default_rng(3)
        pred = rng.random((12, 9, 9))
        truth = (rng.random((12, 9, 9)) > 0.7).astype(np.uint8)
        region = np.zeros_like(truth)
        region[:4] = 1  # top-third slab
        rep = evaluate_region(pred, truth, region, region="subregion")
        tp, fp, tn, fn = threshold_metrics(pred[:4], truth[:4])
        assert (rep.tp, rep.fp, rep.tn, rep.fn) == (tp, fp, tn, fn)
        assert rep.auc == pytest.approx(roc_auc(pred[:4], truth[:4]))
        assert rep.region == "subregion"

    def test_empty_region_rejected(self):
        with pytest.raises(ValueError, match="empty region"):
            evaluate_region(np.zeros((4, 4)), np.zeros((4, 4)),
                            np.zeros((4, 4), np.uint8))

    def test_csv_field_order(self):
        rep = EvalReport(1, 2, 3, 4, auc=0.5, region="all")
        row = rep.csv_row("case0").split(",")
        assert row[:2] == ["case0", "all"]
        assert row[2] == "0.500000"   # auc first, Table-2 column order
        assert row[7:] == ["1", "2", "3", "4"]
