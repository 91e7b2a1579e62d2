import numpy as np
import pytest

from marginnce.metrics import (
    ConsensusMap,
    EvalConfig,
    PredictionMap,
    bilinear_upsample,
    binarization_threshold,
    ciou,
    ciou_at_half,
    consensus_from_boxes,
    eval_curve,
    evaluate_batch,
    evaluate_prediction,
    load_annotations,
    load_predictions,
    read_metrics_report,
    save_annotations,
    save_predictions,
    write_metrics_report,
)
from marginnce.numerics import ConfigError, DataError, DimensionError, RngStream


class TestConsensusFromBoxes:
    def test_full_frame_box(self):
        cm = consensus_from_boxes([(0.0, 0.0, 1.0, 1.0)], (3, 5))
        assert np.all(cm.weights == 1.0)

    def test_identical_boxes_agree(self):
        one = consensus_from_boxes([(0.0, 0.0, 0.5, 0.5)], (4, 4))
        two = consensus_from_boxes([(0.0, 0.0, 0.5, 0.5)] * 2, (4, 4))
        assert np.array_equal(one.weights, two.weights)

    def test_half_overlapping_boxes_counting_oracle(self):
        # on a 4x4 grid: box A covers columns 0-1, box B covers columns 1-2
        boxes = [(0.0, 0.0, 0.5, 1.0), (0.25, 0.0, 0.75, 1.0)]
        cm = consensus_from_boxes(boxes, (4, 4))
        counts = np.zeros((4, 4))
        for x0, y0, x1, y1 in boxes:
            for r in range(4):
                for c in range(4):
                    cx, cy = (c + 0.5) / 4, (r + 0.5) / 4
                    if x0 <= cx < x1 and y0 <= cy < y1:
                        counts[r, c] += 1
        assert np.array_equal(cm.weights, counts / 2)
        assert np.all(cm.weights[:, 1] == 1.0)       # overlap column
        assert np.all(cm.weights[:, 0] == 0.5)       # exclusive columns
        assert np.all(cm.weights[:, 2] == 0.5)

    def test_empty_list_rejected(self):
        with pytest.raises(DataError):
            consensus_from_boxes([], (4, 4))

    def test_degenerate_box_rejected(self):
        with pytest.raises(DataError):
            consensus_from_boxes([(0.5, 0.0, 0.5, 1.0)], (4, 4))
        with pytest.raises(DataError):
            consensus_from_boxes([(0.0, 0.0, 1.2, 1.0)], (4, 4))

    def test_box_missing_all_centers_rejected(self):
        with pytest.raises(DataError):
            consensus_from_boxes([(0.30, 0.30, 0.45, 0.45)], (2, 2))


class TestBilinearUpsample:
    def test_identity_when_same_shape(self):
        m = np.arange(6.0).reshape(2, 3)
        out = bilinear_upsample(m, (2, 3))
        assert np.array_equal(out, m)
        assert out is not m

    def test_corner_alignment_2x2_to_3x3(self):
        src = np.array([[0.0, 1.0], [2.0, 3.0]])
        out = bilinear_upsample(src, (3, 3))
        expect = np.array([[0.0, 0.5, 1.0],
                           [1.0, 1.5, 2.0],
                           [2.0, 2.5, 3.0]])
        assert np.abs(out - expect).max() <= 1e-12

    def test_matches_loop_oracle(self):
        g = RngStream(0).generator()
        src = g.normal(size=(3, 5))
        H, W = 7, 11
        out = bilinear_upsample(src, (H, W))
        for i in range(H):
            for j in range(W):
                y = i * (3 - 1) / (H - 1)
                x = j * (5 - 1) / (W - 1)
                y0, x0 = int(np.floor(y)), int(np.floor(x))
                y1, x1 = min(y0 + 1, 2), min(x0 + 1, 4)
                fy, fx = y - y0, x - x0
                val = (src[y0, x0] * (1 - fy) * (1 - fx) + src[y0, x1] * (1 - fy) * fx
                       + src[y1, x0] * fy * (1 - fx) + src[y1, x1] * fy * fx)
                assert abs(out[i, j] - val) <= 1e-12

    def test_single_row_source(self):
        out = bilinear_upsample(np.array([[1.0, 3.0]]), (2, 3))
        assert np.abs(out - np.array([[1.0, 2.0, 3.0]] * 2)).max() <= 1e-12


class TestCiou:
    def test_perfect_prediction(self):
        gt = consensus_from_boxes([(0.0, 0.0, 0.5, 0.5)], (4, 4))
        pred = PredictionMap(scores=gt.weights.copy(), target_shape=(4, 4))
        assert ciou(pred, gt, 0.5) == 1.0

    def test_all_below_threshold(self):
        gt = consensus_from_boxes([(0.0, 0.0, 0.5, 0.5)], (4, 4))
        pred = PredictionMap(scores=np.zeros((4, 4)), target_shape=(4, 4))
        assert ciou(pred, gt, 0.5) == 0.0

    def test_worked_third_example(self):
        # pred activates the top-left 2x2 block; GT is the top row (weight 1)
        # -> intersection mass 2, GT mass 4, two false positives: 2/(4+2)
        scores = np.zeros((4, 4))
        scores[:2, :2] = 1.0
        gt = ConsensusMap(weights=np.zeros((4, 4)))
        gt.weights[0, :] = 1.0
        pred = PredictionMap(scores=scores, target_shape=(4, 4))
        assert abs(ciou(pred, gt, 0.5) - 2.0 / 6.0) <= 1e-9

    def test_matches_bruteforce_counting(self):
        g = RngStream(1).generator()
        for _ in range(30):
            scores = g.uniform(0, 1, size=(8, 8))
            weights = np.where(g.uniform(size=(8, 8)) < 0.4,
                               g.choice([0.5, 1.0], size=(8, 8)), 0.0)
            if weights.sum() == 0:
                weights[0, 0] = 1.0
            thr = float(g.uniform(0.2, 0.8))
            got = ciou(PredictionMap(scores, (8, 8)), ConsensusMap(weights), thr)
            inter = 0.0
            fp = 0
            for r in range(8):
                for c in range(8):
                    if scores[r, c] >= thr:
                        if weights[r, c] > 0:
                            inter += weights[r, c]
                        else:
                            fp += 1
            assert abs(got - inter / (weights.sum() + fp)) <= 1e-9

    def test_adding_pixels_moves_score_the_right_way(self):
        weights = np.zeros((4, 4))
        weights[:2, :2] = 1.0
        scores = np.zeros((4, 4))
        scores[0, 0] = 1.0
        base = ciou(PredictionMap(scores, (4, 4)), ConsensusMap(weights), 0.5)
        with_gt_pixel = scores.copy()
        with_gt_pixel[0, 1] = 1.0  # covered pixel: strictly increases
        hi = ciou(PredictionMap(with_gt_pixel, (4, 4)), ConsensusMap(weights), 0.5)
        with_bg_pixel = scores.copy()
        with_bg_pixel[3, 3] = 1.0  # uncovered pixel: strictly decreases
        lo = ciou(PredictionMap(with_bg_pixel, (4, 4)), ConsensusMap(weights), 0.5)
        assert lo < base < hi

    def test_scale_invariance(self):
        g = RngStream(2).generator()
        scores = g.uniform(0, 1, size=(6, 6))
        weights = np.zeros((6, 6))
        weights[2:4, 2:4] = 1.0
        a = ciou(PredictionMap(scores, (6, 6)), ConsensusMap(weights), 0.3)
        b = ciou(PredictionMap(7.0 * scores, (6, 6)), ConsensusMap(weights), 7.0 * 0.3)
        assert a == b

    def test_shape_mismatch_rejected(self):
        gt = ConsensusMap(weights=np.ones((4, 4)))
        with pytest.raises(DimensionError):
            ciou(PredictionMap(np.ones((2, 2)), (8, 8)), gt, 0.5)

    def test_range(self):
        g = RngStream(3).generator()
        for _ in range(20):
            scores = g.normal(size=(5, 5))
            weights = np.zeros((5, 5))
            weights[1:3, 1:3] = g.uniform(0.1, 1.0, size=(2, 2))
            v = ciou(PredictionMap(scores, (5, 5)), ConsensusMap(weights),
                     float(g.normal()))
            assert 0.0 <= v <= 1.0


class TestEvalCurve:
    def test_all_perfect(self):
        curve = eval_curve([1.0, 1.0, 1.0], step=0.05)
        assert np.all(curve.success_rates == 1.0)
        assert abs(curve.auc - 1.0) <= 1e-12

    def test_all_zero_gives_half_step(self):
        curve = eval_curve([0.0, 0.0], step=0.05)
        assert curve.success_rates[0] == 1.0
        assert np.all(curve.success_rates[1:] == 0.0)
        assert abs(curve.auc - 0.05 / 2) <= 1e-12

    def test_two_sample_enumeration_oracle(self):
        vals = [0.4, 0.8]
        curve = eval_curve(vals, step=0.05)
        thresholds = np.arange(21) / 20
        success = np.array([np.mean([v >= t for v in vals]) for t in thresholds])
        assert np.array_equal(curve.success_rates, success)
        auc = sum((success[i] + success[i + 1]) / 2 * (thresholds[i + 1] - thresholds[i])
                  for i in range(20))
        assert abs(curve.auc - auc) <= 1e-12

    def test_success_rates_non_increasing(self):
        g = RngStream(4).generator()
        curve = eval_curve(g.uniform(0, 1, size=50), step=0.05)
        assert np.all(np.diff(curve.success_rates) <= 0.0)

    def test_point_mass_auc_converges(self):
        for c in (0.3, 0.55, 0.9):
            auc_coarse = eval_curve([c] * 10, step=0.05).auc
            auc_fine = eval_curve([c] * 10, step=0.01).auc
            assert abs(auc_coarse - auc_fine) < 0.03
            assert abs(auc_fine - c) < 0.02

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            eval_curve([], step=0.05)

    def test_bad_step_rejected(self):
        with pytest.raises(ConfigError):
            eval_curve([0.5], step=0.03)

    def test_out_of_range_rejected(self):
        with pytest.raises(DataError):
            eval_curve([1.0001], step=0.05)


class TestCiouAtHalf:
    def test_trivial_values(self):
        assert ciou_at_half([1.0, 1.0]) == 100.0
        assert ciou_at_half([0.0]) == 0.0

    def test_tie_counts_as_success(self):
        assert abs(ciou_at_half([0.4, 0.6, 0.5]) - 66.667) <= 1e-3

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            ciou_at_half([])


class TestThresholdRules:
    def test_median_rule(self):
        scores = np.array([[0.0, 1.0], [2.0, 3.0]])
        assert binarization_threshold(scores, EvalConfig()) == 1.5

    def test_absolute_rule(self):
        cfg = EvalConfig(threshold_rule="absolute", absolute_threshold=0.25)
        assert binarization_threshold(np.zeros((2, 2)), cfg) == 0.25

    def test_absolute_requires_value(self):
        with pytest.raises(ConfigError):
            EvalConfig(threshold_rule="absolute").validate()

    def test_evaluate_prediction_median_rule(self):
        # half the map is source at 1.0, half background at 0.0: the median
        # threshold recovers the region exactly
        scores = np.zeros((4, 4))
        scores[:, :2] = 1.0
        v = evaluate_prediction(scores, [(0.0, 0.0, 0.5, 1.0)], (4, 4), EvalConfig())
        assert v == 1.0


class TestFilesAndReports:
    def test_annotation_roundtrip(self, tmp_path):
        path = str(tmp_path / "annos.json")
        boxes = {"a": [(0.0, 0.0, 0.5, 0.5)], "b": [(0.25, 0.25, 1.0, 1.0)]}
        save_annotations(path, (8, 8), boxes)
        shape, loaded = load_annotations(path)
        assert shape == (8, 8)
        assert loaded == {k: [tuple(b) for b in v] for k, v in boxes.items()}

    def test_prediction_roundtrip(self, tmp_path):
        path = str(tmp_path / "preds.json")
        g = RngStream(5).generator()
        preds = {"a": g.normal(size=(3, 4)), "b": g.normal(size=(2, 2))}
        save_predictions(path, preds)
        loaded = load_predictions(path)
        assert set(loaded) == {"a", "b"}
        for k in preds:
            assert np.array_equal(loaded[k], preds[k])

    def test_id_mismatch_lists_ids(self):
        preds = {"a": np.ones((2, 2))}
        annos = {"a": [(0.0, 0.0, 1.0, 1.0)], "zz": [(0.0, 0.0, 1.0, 1.0)]}
        with pytest.raises(DataError, match="zz"):
            evaluate_batch(preds, annos, (2, 2), EvalConfig())

    def test_metrics_report_roundtrip(self, tmp_path):
        path = str(tmp_path / "report.csv")
        rows = [("a", 0.5), ("b", 0.25)]
        summary = {"ciou_at_0.5_percent": 50.0, "auc_percent": 40.625}
        write_metrics_report(path, rows, summary, "deadbeef")
        got_rows, got_summary = read_metrics_report(path)
        assert got_rows == rows
        assert got_summary == summary
        text = open(path).read()
        assert "# config_sha256: deadbeef" in text

    def test_load_annotations_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{\"format\": \"other\"}")
        with pytest.raises(DataError):
            load_annotations(str(path))
