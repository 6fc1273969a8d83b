import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cogdet.dataset import GroundTruthBox
from cogdet.detector import (
    BoundingBox, DetectorConfig, FrameDetections, build_detector, clamp_box, decode_predictions,
    detect_frames, encode_box, finetune_detector, iou, letterbox, load_detector, nms, save_detector,
)
from cogdet.errors import ValidationError
from cogdet.synthetic import make_images
from cogdet.training import TrainConfig
from oracles import box_iou, nms_bruteforce, raster_iou

SMALL = DetectorConfig(input_size=64)


def _empty_raw(cfg):
    return [np.zeros((g, g, 5)) for g in cfg.grids]


class TestIoU:
    def test_half_overlap_is_one_third(self):
        got = iou(BoundingBox(0, 0, 2, 2), BoundingBox(1, 0, 2, 2))
        assert got == pytest.approx(float(raster_iou((0, 0, 2, 2), (1, 0, 2, 2))))
        assert got == pytest.approx(1 / 3)

    def test_identical_and_disjoint(self):
        b = BoundingBox(3, 4, 5, 6)
        assert iou(b, b) == 1.0
        assert iou(b, BoundingBox(8, 4, 1, 1)) == 0.0  # touching edge

    @given(*[st.tuples(st.integers(0, 8), st.integers(0, 8), st.integers(1, 6), st.integers(1, 6))] * 2)
    def test_matches_raster_oracle(self, a, b):
        assert iou(BoundingBox(*a), BoundingBox(*b)) == pytest.approx(float(raster_iou(a, b)))

    @given(st.tuples(*[st.floats(0, 50)] * 2, *[st.floats(0.1, 50)] * 2),
           st.tuples(*[st.floats(0, 50)] * 2, *[st.floats(0.1, 50)] * 2))
    def test_symmetric_and_bounded(self, a, b):
        x, y = BoundingBox(*a), BoundingBox(*b)
        assert iou(x, y) == pytest.approx(iou(y, x))
        assert 0.0 <= iou(x, y) <= 1.0 + 1e-12

    def test_nonpositive_size_rejected(self):
        with pytest.raises(ValidationError):
            BoundingBox(0, 0, 0, 1)


class TestDecode:
    def test_single_cell_stride_32(self):
        cfg = DetectorConfig()
        raw = _empty_raw(cfg)
        raw[2][0, 0] = [0.5, 0.5, 0.05, 0.05, 0.9]
        (box,) = decode_predictions(raw, cfg)
        assert (box.x + box.w / 2, box.y + box.h / 2) == pytest.approx((16, 16))
        assert (box.w, box.h) == pytest.approx((32, 32))
        assert box.confidence == pytest.approx(0.9)

    def test_hand_worked_three_cells(self):
        raw = _empty_raw(SMALL)
        raw[0][1, 2] = [0.25, 0.75, 0.125, 0.25, 0.6]   # stride 8
        raw[1][3, 0] = [0.5, 0.0, 0.5, 0.25, 0.3]       # stride 16
        raw[2][1, 1] = [0.0, 0.5, 0.25, 0.25, 0.2]      # below threshold
        boxes = decode_predictions(raw, SMALL)
        got = sorted((b.x, b.y, b.w, b.h, b.confidence) for b in boxes)
        # (2.25*8 - 4, 1.75*8 - 8, 8, 16) and (0.5*16 - 16, 3*16 - 8, 32, 16)
        assert got == pytest.approx(sorted([(14, 6, 8, 16, 0.6), (-8, 40, 32, 16, 0.3)]))

    def test_all_below_threshold(self):
        raw = _empty_raw(SMALL)
        for r in raw:
            r[..., 4] = 0.2499
            r[..., 2:4] = 0.1
        assert decode_predictions(raw, SMALL) == []

    def test_threshold_inclusive(self):
        raw = _empty_raw(SMALL)
        raw[0][0, 0] = [0.5, 0.5, 0.1, 0.1, 0.25]
        assert len(decode_predictions(raw, SMALL)) == 1

    def test_all_scales_contribute(self):
        raw = _empty_raw(SMALL)
        for k, r in enumerate(raw):
            r[0, 0] = [0.5, 0.5, 0.1 * (k + 1), 0.1, 0.9]
        assert len(decode_predictions(raw, SMALL)) == 3

    def test_wrong_shape(self):
        raw = _empty_raw(SMALL)
        raw[1] = np.zeros((5, 5, 5))
        with pytest.raises(ValidationError):
            decode_predictions(raw, SMALL)
        with pytest.raises(ValidationError):
            decode_predictions(raw[:2], SMALL)

    @settings(max_examples=100)
    @given(st.floats(2, 60), st.floats(2, 60), st.floats(4, 60), st.floats(4, 60))
    def test_encode_decode_round_trip(self, cx, cy, w, h):
        box = BoundingBox(cx - w / 2, cy - h / 2, w, h)
        stride, i, j, vec = encode_box(box, SMALL)
        raw = _empty_raw(SMALL)
        raw[SMALL.strides.index(stride)][i, j] = vec
        (out,) = decode_predictions(raw, SMALL)
        for a, b in zip((out.x, out.y, out.w, out.h), (box.x, box.y, box.w, box.h)):
            assert abs(a - b) <= 0.5

    def test_bad_config(self):
        with pytest.raises(ValidationError):
            DetectorConfig(input_size=100)
        with pytest.raises(ValidationError):
            DetectorConfig(confidence_threshold=1.5)


class TestNMS:
    def test_overlapping_pair_keeps_higher(self):
        a, b = BoundingBox(0, 0, 10, 10, 0.9), BoundingBox(1, 1, 10, 10, 0.8)
        assert nms([b, a], 0.45) == [a]

    def test_disjoint_both_kept(self):
        a, b = BoundingBox(0, 0, 10, 10, 0.9), BoundingBox(50, 50, 10, 10, 0.8)
        assert nms([b, a], 0.45) == [a, b]

    def test_iou_equal_threshold_not_suppressed(self):
        a, b = BoundingBox(0, 0, 2, 2, 0.9), BoundingBox(1, 0, 2, 2, 0.8)
        assert nms([a, b], 1 / 3) == [a, b]

    def test_chain_suppression_is_greedy(self):
        a = BoundingBox(0, 0, 10, 10, 0.9)
        b = BoundingBox(4, 0, 10, 10, 0.8)
        c = BoundingBox(8, 0, 10, 10, 0.7)
        assert nms([c, b, a], 0.3) == [a, c]

    def test_tie_break_by_position(self):
        a, b = BoundingBox(2, 0, 10, 10, 0.5), BoundingBox(1, 0, 10, 10, 0.5)
        assert nms([a, b], 0.45) == [b]

    def test_other_class_not_suppressed(self):
        a, b = BoundingBox(0, 0, 10, 10, 0.9, cls=1), BoundingBox(0, 0, 10, 10, 0.8, cls=2)
        assert nms([a, b], 0.45) == [a, b]

    def test_empty(self):
        assert nms([], 0.45) == []

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(1, 12), st.integers(1, 12),
                              st.integers(1, 20), st.integers(1, 2)), max_size=8),
           st.sampled_from([0.0, 0.3, 0.45, 0.7]))
    def test_matches_bruteforce(self, specs, thr):
        boxes = [BoundingBox(x, y, w, h, c / 20, k) for x, y, w, h, c, k in specs]
        kept = nms(boxes, thr)
        assert kept == nms_bruteforce(boxes, thr)
        assert nms(kept, thr) == kept
        for m, p in enumerate(kept):
            for q in kept[m + 1:]:
                assert p.cls != q.cls or box_iou((p.x, p.y, p.w, p.h), (q.x, q.y, q.w, q.h)) <= thr


class TestLetterbox:
    def test_square_unchanged_geometry(self):
        canvas, scale, px, py = letterbox(np.zeros((32, 32, 3), np.float32), 64)
        assert canvas.shape == (64, 64, 3) and scale == 2 and (px, py) == (0, 0)

    def test_wide_frame_padded_vertically(self):
        canvas, scale, px, py = letterbox(np.ones((16, 32, 3), np.float32), 64)
        assert scale == 2 and (px, py) == (0, 16)
        assert canvas[0, 0, 0] == 0.5 and canvas[16, 0, 0] == 1.0

    def test_clamp(self):
        assert clamp_box(BoundingBox(-5, -5, 10, 10), 20, 20) == BoundingBox(0, 0, 5, 5)
        assert clamp_box(BoundingBox(30, 30, 5, 5), 20, 20) is None


class TestModel:
    def test_untrained_detector_is_quiet(self, rng):
        state = build_detector(SMALL, seed=0, width=8)
        dets = detect_frames(state, list(rng.random((3, 32, 32, 3)).astype(np.float32)), indices=[4, 5, 6])
        assert [d.index for d in dets] == [4, 5, 6]
        assert all(d.boxes == [] for d in dets)

    def test_output_shapes(self):
        from cogdet.detector import raw_predictions

        (pred,) = raw_predictions(build_detector(SMALL, width=8), [np.zeros((20, 30, 3), np.float32)])
        assert [p.shape for p in pred] == [(8, 8, 5), (4, 4, 5), (2, 2, 5)]

    def test_label_count_mismatch(self, rng):
        with pytest.raises(ValidationError):
            finetune_detector(build_detector(SMALL, width=8), list(rng.random((2, 16, 16, 3))), [[]],
                              TrainConfig(epochs=1))

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValidationError):
            detect_frames(build_detector(SMALL, width=8), [rng.random((16, 16, 1))])

    def test_empty_labels_give_no_detections(self):
        frames, _, _ = make_images(8, 3)
        state = finetune_detector(build_detector(SMALL, width=8), list(frames), [[] for _ in frames],
                                  TrainConfig(epochs=5, batch_size=4, learning_rate=3e-3))
        assert all(d.boxes == [] for d in detect_frames(state, list(frames)))

    def test_overfits_single_image(self):
        frames, labels, boxes = make_images(2, 11)
        frame, truth = frames[0], boxes[0]
        assert labels[0] == 1 and len(truth) == 1
        cfg = TrainConfig(epochs=300, early_stop_patience=300, batch_size=1, learning_rate=3e-3)
        state = finetune_detector(build_detector(SMALL, width=16), [frame], [truth], cfg)
        (fd,) = detect_frames(state, [frame])
        gt = BoundingBox.from_ground_truth(truth[0], 32, 32)
        assert fd.boxes and iou(fd.boxes[0], gt) >= 0.9

    def test_checkpoint_round_trip(self, tmp_path, rng):
        state = build_detector(SMALL, seed=5, width=8)
        save_detector(state, tmp_path / "det")
        loaded = load_detector(tmp_path / "det")
        from cogdet.detector import raw_predictions

        frames = [rng.random((32, 32, 3)).astype(np.float32)]
        for a, b in zip(raw_predictions(state, frames)[0], raw_predictions(loaded, frames)[0]):
            np.testing.assert_array_equal(a, b)

    def test_pixel_and_normalized_labels_agree(self):
        gt = GroundTruthBox(0, 0.5, 0.25, 0.5, 0.25)
        assert BoundingBox.from_ground_truth(gt, 32, 32) == BoundingBox(8, 4, 16, 8)

    def test_frame_detections_serialise(self):
        fd = FrameDetections(3, [BoundingBox(1, 2, 3, 4, 0.5)])
        assert FrameDetections.from_dict(fd.to_dict()) == fd
