from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cogdet.detector import BoundingBox
from cogdet.errors import ValidationError
from cogdet.metrics import (
    ConfusionCounts, average_precision, classification_metrics, confusion_counts, roc_auc,
)
from oracles import confusion_bruteforce, mann_whitney_auc, sweep_ap

GT = BoundingBox(0, 0, 10, 10)


def _det(conf, hit=True):
    return BoundingBox(0, 0, 10, 10, conf) if hit else BoundingBox(50, 50, 10, 10, conf)


class TestConfusion:
    def test_perfect_pair(self):
        assert confusion_counts([1, 0], [1, 0]) == ConfusionCounts(tp=1, fp=0, fn=0, tn=1)

    def test_constant_gun(self):
        c = confusion_counts([1, 1, 1], [1, 1, 0])
        assert (c.tp, c.fp) == (2, 1)

    def test_random_against_bruteforce(self):
        rng = np.random.default_rng(0)
        p, y = rng.integers(0, 2, 100), rng.integers(0, 2, 100)
        assert confusion_counts(p, y).to_dict() == confusion_bruteforce(p.tolist(), y.tolist())

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            confusion_counts([1, 0], [1])

    def test_non_binary(self):
        with pytest.raises(ValidationError):
            confusion_counts([2], [1])


class TestClassificationMetrics:
    def test_vgg_lstm_row(self):
        m = classification_metrics(ConfusionCounts(48, 1, 6, 49))
        assert m["accuracy"] == pytest.approx(0.9327, abs=5e-5)
        assert m["precision"] == pytest.approx(0.9796, abs=5e-5)
        assert m["recall"] == pytest.approx(0.8889, abs=5e-5)
        assert m["f1"] == pytest.approx(0.9320, abs=5e-5)
        assert [round(100 * m[k]) for k in ("accuracy", "precision", "recall", "f1")] == [93, 98, 89, 93]

    def test_perfect_row(self):
        assert classification_metrics(ConfusionCounts(54, 0, 0, 50)) == {
            "accuracy": 1.0, "precision": 1.0, "recall": 1.0, "f1": 1.0}

    def test_undefined_precision(self):
        m = classification_metrics(ConfusionCounts(0, 0, 0, 10))
        assert m["accuracy"] == 1.0 and m["precision"] is None and m["f1"] is None

    def test_all_zero(self):
        with pytest.raises(ValidationError):
            classification_metrics(ConfusionCounts())

    @given(*[st.integers(0, 50)] * 4)
    def test_identities(self, tp, fp, fn, tn):
        if tp + fp + fn + tn == 0:
            return
        m = classification_metrics(ConfusionCounts(tp, fp, fn, tn))
        assert m["accuracy"] == (tp + tn) / (tp + fp + fn + tn)
        if m["precision"] and m["recall"]:
            assert m["f1"] == pytest.approx(2 / (1 / m["precision"] + 1 / m["recall"]))


class TestRoc:
    def test_separated(self):
        assert roc_auc([0.9, 0.8, 0.1], [1, 1, 0]).auc == 1.0

    def test_inverted(self):
        assert roc_auc([0.1, 0.2, 0.9], [1, 1, 0]).auc == 0.0

    def test_tied_scores(self):
        curve = roc_auc([0.9, 0.6, 0.6, 0.2], [1, 1, 0, 0])
        assert mann_whitney_auc([0.9, 0.6, 0.6, 0.2], [1, 1, 0, 0]) == Fraction(7, 8)
        assert curve.auc == pytest.approx(0.875)
        assert list(zip(curve.fpr, curve.tpr)) == [(0, 0), (0, 0.5), (0.5, 1), (1, 1)]

    def test_single_class(self):
        with pytest.raises(ValidationError):
            roc_auc([0.1, 0.2], [1, 1])

    @settings(max_examples=200)
    @given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1)), min_size=2, max_size=12))
    def test_matches_mann_whitney(self, pairs):
        scores, labels = [p[0] / 5 for p in pairs], [p[1] for p in pairs]
        if len(set(labels)) < 2:
            return
        curve = roc_auc(scores, labels)
        assert curve.auc == pytest.approx(float(mann_whitney_auc(scores, labels)), abs=1e-12)
        assert (curve.fpr[0], curve.tpr[0]) == (0, 0) and (curve.fpr[-1], curve.tpr[-1]) == (1, 1)
        assert all(a <= b for a, b in zip(curve.fpr, curve.fpr[1:]))
        assert all(a <= b for a, b in zip(curve.tpr, curve.tpr[1:]))

    def test_csv(self, tmp_path):
        roc_auc([0.9, 0.1], [1, 0]).write_csv(tmp_path / "r.csv", "note")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "# note" and lines[1] == "threshold,fpr,tpr"


class TestAveragePrecision:
    def test_single_hit(self):
        dets = {"v": {0: [BoundingBox(0, 0, 10, 9, 0.8)]}}
        assert average_precision(dets, {"v": {0: [GT]}}).ap == 1.0

    def test_below_iou(self):
        dets = {"v": {0: [BoundingBox(6, 0, 10, 10, 0.8)]}}  # IoU 4/16
        assert average_precision(dets, {"v": {0: [GT]}}).ap == 0.0

    def test_staircase(self):
        gts = {"v": {0: [GT], 1: [GT]}}
        dets = {"v": {0: [_det(0.9)], 1: [_det(0.8, hit=False), _det(0.7)]}}
        oracle = sweep_ap([("v0", (0, 0, 10, 10), 0.9), ("v1", (50, 50, 10, 10), 0.8),
                           ("v1", (0, 0, 10, 10), 0.7)],
                          {"v0": [(0, 0, 10, 10)], "v1": [(0, 0, 10, 10)]}, 0.5)
        assert oracle == Fraction(5, 6)
        result = average_precision(dets, gts)
        assert result.ap == pytest.approx(0.8333, abs=5e-5)
        assert result.recall == [0.5, 0.5, 1.0]

    def test_no_cross_video_matching(self):
        res = average_precision({"a": {0: [_det(0.9)]}, "b": {}}, {"a": {}, "b": {0: [GT]}})
        assert res.ap == 0.0

    def test_no_cross_frame_matching(self):
        res = average_precision({"a": {1: [_det(0.9)]}}, {"a": {0: [GT]}})
        assert res.ap == 0.0

    def test_excluded_video_keeps_ground_truth(self):
        dets = {"a": {0: [_det(0.9)]}, "b": {0: [_det(0.8)]}}
        gts = {"a": {0: [GT]}, "b": {0: [GT]}}
        assert average_precision(dets, gts).ap == 1.0
        res = average_precision(dets, gts, excluded_videos=["b"])
        assert res.ap == 0.5 and res.num_ground_truth == 2

    def test_errors(self):
        with pytest.raises(ValidationError):
            average_precision({}, {"a": {0: [GT]}}, iou_threshold=-0.1)
        with pytest.raises(ValidationError):
            average_precision({}, {"a": {0: [GT]}}, excluded_videos=["zzz"])
        with pytest.raises(ValidationError):
            average_precision({"a": {0: [_det(0.5)]}}, {"a": {}})

    def test_eleven_point(self):
        gts = {"v": {0: [GT], 1: [GT]}}
        dets = {"v": {0: [_det(0.9)], 1: [_det(0.8, hit=False), _det(0.7)]}}
        res = average_precision(dets, gts, interpolation="11-point")
        assert res.ap == pytest.approx((6 * 1 + 5 * 2 / 3) / 11)

    @staticmethod
    def _random_case(draw_specs):
        dets, gts, flat_d, flat_g = {}, {}, [], {}
        for vid, (gt_boxes, det_boxes) in enumerate(draw_specs):
            key = f"v{vid}"
            gts[key] = {0: [BoundingBox(x, y, 8, 8) for x, y in gt_boxes]}
            flat_g[key] = [(x, y, 8, 8) for x, y in gt_boxes]
            dets[key] = {0: [BoundingBox(x, y, 8, 8, c) for x, y, c in det_boxes]}
            flat_d += [(key, (x, y, 8, 8), c) for x, y, c in det_boxes]
        return dets, gts, flat_d, flat_g

    video = st.tuples(
        st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20)), min_size=1, max_size=3),
        st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20), st.floats(0.01, 1)), max_size=4),
    )

    @settings(max_examples=150, deadline=None)
    @given(st.lists(video, min_size=1, max_size=4))
    def test_matches_threshold_sweep_with_distinct_confidences(self, specs):
        dets, gts, flat_d, flat_g = self._random_case(specs)
        confs = [c for _, _, c in flat_d]
        if len(set(confs)) != len(confs):
            return
        expected = float(sweep_ap(flat_d, flat_g, 0.5))
        assert average_precision(dets, gts).ap == pytest.approx(expected, abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(video, min_size=1, max_size=4), st.floats(0.1, 10))
    def test_invariant_to_monotone_rescaling(self, specs, power):
        dets, gts, _, _ = self._random_case(specs)
        warped = {v: {f: [BoundingBox(b.x, b.y, b.w, b.h, b.confidence ** power) for b in boxes]
                      for f, boxes in frames.items()} for v, frames in dets.items()}
        assert average_precision(warped, gts).ap == pytest.approx(average_precision(dets, gts).ap, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(video, min_size=2, max_size=4), st.data())
    def test_excluding_a_missed_gun_video_never_raises_ap(self, specs, data):
        # the newly excluded video is a Gun video whose detections are exact hits
        dets, gts, _, _ = self._random_case(specs)
        ids = sorted(gts)
        k = data.draw(st.integers(0, len(ids) - 1))
        target = ids[k]
        dets[target] = {0: [BoundingBox(b.x, b.y, b.w, b.h, data.draw(st.floats(0.01, 1)))
                            for b in gts[target][0]]}
        a = average_precision(dets, gts, excluded_videos=ids[:k]).ap
        b = average_precision(dets, gts, excluded_videos=ids[:k + 1]).ap
        assert b <= a + 1e-12

    def test_excluding_a_video_with_false_positives_can_raise_ap(self):
        # dropping its detections removes a false positive as well as the hit it lacked
        dets = {"a": {0: [BoundingBox(0, 3, 8, 8, 1.0)]}, "b": {0: [BoundingBox(0, 0, 8, 8, 1.0)]}}
        gts = {"a": {0: [BoundingBox(0, 0, 8, 8)]}, "b": {0: [BoundingBox(0, 0, 8, 8)]}}
        assert average_precision(dets, gts).ap == 0.25
        assert average_precision(dets, gts, excluded_videos=["a"]).ap == 0.5
