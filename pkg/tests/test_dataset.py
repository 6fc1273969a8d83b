import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cogdet.dataset import (
    GroundTruthBox, ImageDatasetIndex, class_label, discover_dataset, load_detection_labels,
    sample_frames, sample_indices, split_dataset, write_detection_labels, write_image, write_manifest,
)
from cogdet.errors import (
    ConfigError, EmptyDatasetError, IngestError, LayoutError, ParseError, ValidationError,
)
from oracles import floor_split_sizes


def _touch(path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"")


def _index(n_gun, n_nogun):
    entries = [(f"g{i}", 1) for i in range(n_gun)] + [(f"n{i}", 0) for i in range(n_nogun)]
    return ImageDatasetIndex(entries)


class TestDiscover:
    def test_two_class_folders(self, tmp_path):
        for i in range(3):
            _touch(tmp_path / "Gun" / f"a{i}.png")
        for i in range(2):
            _touch(tmp_path / "NoGun" / f"b{i}.jpg")
        _touch(tmp_path / "NoGun" / "notes.txt")
        index = discover_dataset(tmp_path, "image")
        assert len(index) == 5
        assert index.class_counts == {1: 3, 0: 2}
        assert [p.name for p, _ in index.entries] == ["a0.png", "a1.png", "a2.png", "b0.jpg", "b1.jpg"]

    def test_only_one_class_folder_is_layout_error(self, tmp_path):
        _touch(tmp_path / "Gun" / "a.png")
        with pytest.raises(LayoutError):
            discover_dataset(tmp_path, "image")

    def test_missing_root(self, tmp_path):
        with pytest.raises(ConfigError):
            discover_dataset(tmp_path / "nope", "image")

    def test_no_media(self, tmp_path):
        (tmp_path / "Gun").mkdir()
        (tmp_path / "NoGun").mkdir()
        with pytest.raises(EmptyDatasetError):
            discover_dataset(tmp_path, "image")

    def test_firearm_video_corpus_counts(self, tmp_path):
        # firearm corpus sizes: 303 Gun / 95 NoGun videos
        for i in range(303):
            _touch(tmp_path / "Gun" / f"v{i:03d}.mp4")
        for i in range(95):
            _touch(tmp_path / "No-Gun" / f"v{i:03d}.avi")
        index = discover_dataset(tmp_path, "video")
        assert index.class_counts == {1: 303, 0: 95}

    def test_frame_directories_count_as_videos(self, tmp_path):
        write_image(tmp_path / "Gun" / "clip1" / "frame_000.png", np.zeros((4, 4, 3)))
        write_image(tmp_path / "NoGun" / "clip2" / "frame_000.png", np.zeros((4, 4, 3)))
        (tmp_path / "NoGun" / "empty_dir").mkdir()
        index = discover_dataset(tmp_path, "video")
        assert index.class_counts == {1: 1, 0: 1}

    @pytest.mark.parametrize("name,label", [("Gun", 1), ("no_gun", 0), ("No-Gun", 0), ("NoGun", 0)])
    def test_class_names(self, name, label):
        assert class_label(name) == label

    def test_unknown_class_name(self):
        with pytest.raises(LayoutError):
            class_label("cats")

    def test_index_invariants(self):
        with pytest.raises(ValidationError):
            ImageDatasetIndex([("a", 1), ("a", 0)])
        with pytest.raises(ValidationError):
            ImageDatasetIndex([("a", 2)])


class TestSplit:
    def test_degenerate_ratio(self):
        s = split_dataset(_index(7, 4), (1, 0, 0), seed=99)
        assert s.train == list(range(11)) and s.val == [] and s.test == []

    def test_firearm_corpus_sizes(self):
        # frozen from the floor-cut oracle: Gun 212/45/46, NoGun 66/14/15
        expected = floor_split_sizes({1: 303, 0: 95}, (0.7, 0.15, 0.15))
        assert expected == {1: (212, 45, 46), 0: (66, 14, 15)}
        s = split_dataset(_index(303, 95), (0.7, 0.15, 0.15), seed=0)
        assert (len(s.train), len(s.val), len(s.test)) == (278, 59, 61)

    def test_small_real_world_corpus_sizes(self):
        expected = floor_split_sizes({1: 50, 0: 50}, (0.5, 0.25, 0.25))
        assert expected == {1: (25, 12, 13), 0: (25, 12, 13)}
        s = split_dataset(_index(50, 50), (0.5, 0.25, 0.25), seed=5)
        assert (len(s.train), len(s.val), len(s.test)) == (50, 24, 26)

    def test_bad_ratios(self):
        with pytest.raises(ValidationError):
            split_dataset(_index(3, 3), (0.5, 0.5, 0.5))
        with pytest.raises(ValidationError):
            split_dataset(_index(3, 3), (1.2, -0.2, 0.0))

    def test_empty_index(self):
        with pytest.raises(ValidationError):
            split_dataset([], (1, 0, 0))

    def test_deterministic(self):
        a = split_dataset(_index(20, 9), (0.6, 0.2, 0.2), seed=4)
        b = split_dataset(_index(20, 9), (0.6, 0.2, 0.2), seed=4)
        assert a == b

    @settings(max_examples=150, deadline=None)
    @given(
        n_gun=st.integers(0, 60), n_nogun=st.integers(0, 60),
        cuts=st.tuples(st.integers(0, 100), st.integers(0, 100)).map(sorted),
        seed=st.integers(0, 2**31),
    )
    def test_partition_and_stratification(self, n_gun, n_nogun, cuts, seed):
        if n_gun + n_nogun == 0:
            return
        ratios = (cuts[0] / 100, (cuts[1] - cuts[0]) / 100, (100 - cuts[1]) / 100)
        index = _index(n_gun, n_nogun)
        s = split_dataset(index, ratios, seed)
        parts = [set(s.train), set(s.val), set(s.test)]
        assert sum(map(len, parts)) == len(index)
        assert set().union(*parts) == set(range(len(index)))
        labels = index.labels
        for label, n in ((1, n_gun), (0, n_nogun)):
            n_train = sum(labels[i] == label for i in s.train)
            assert abs(n_train - ratios[0] * n) <= 1

    def test_manifest_export(self, tmp_path):
        index = _index(4, 4)
        s = split_dataset(index, (0.5, 0.25, 0.25), seed=1)
        write_manifest(tmp_path / "m.json", s, index)
        m = json.loads((tmp_path / "m.json").read_text())
        assert set(m) == {"seed", "ratios", "train", "val", "test"}
        assert sorted(m["train"] + m["val"] + m["test"]) == sorted(str(p) for p, _ in index.entries)


class TestSampleFrames:
    def test_identity_sampling(self):
        assert sample_indices(10, 10) == list(range(10))

    def test_uniform_indices(self):
        assert sample_indices(9, 3) == [0, 4, 8]

    def test_single_frame_repeated(self):
        frames = np.random.default_rng(0).random((1, 6, 6, 3)).astype(np.float32)
        v = sample_frames(frames, 4, (6, 6), label=1)
        assert v.indices == [0, 0, 0, 0]
        assert all(np.array_equal(f, frames[0]) for f in v.frames)

    def test_t_equals_one(self):
        assert sample_indices(7, 1) == [0]

    @given(st.integers(1, 200), st.integers(1, 50))
    def test_indices_monotone_and_in_range(self, f, t):
        idx = sample_indices(f, t)
        assert len(idx) == t
        assert all(0 <= i < f for i in idx)
        assert all(a <= b for a, b in zip(idx, idx[1:]))
        assert idx[0] == 0 and (t == 1 or idx[-1] == f - 1)

    def test_frame_directory_resized_and_normalized(self, tmp_path):
        rng = np.random.default_rng(1)
        for k in range(5):
            write_image(tmp_path / f"frame_{k}.png", rng.random((10, 12, 3)))
        v = sample_frames(tmp_path, 3, (8, 8), label=0)
        assert v.frames.shape == (3, 8, 8, 3)
        assert v.indices == [0, 2, 4]
        assert v.frames.min() >= 0 and v.frames.max() <= 1

    def test_numeric_frame_order(self, tmp_path):
        for k in (10, 2, 1):
            write_image(tmp_path / f"f{k}.png", np.full((2, 2, 3), k / 10))
        v = sample_frames(tmp_path, 3, (2, 2))
        np.testing.assert_allclose(v.frames[:, 0, 0, 0], [0.1, 0.2, 1.0], atol=1 / 255)

    def test_undecodable(self, tmp_path):
        bad = tmp_path / "broken.mp4"
        bad.write_bytes(b"not a video")
        with pytest.raises(IngestError):
            sample_frames(bad, 4, (8, 8))

    def test_encoded_video(self, tmp_path):
        import cv2

        path = tmp_path / "clip.avi"
        writer = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"MJPG"), 5, (16, 16))
        if not writer.isOpened():
            pytest.skip("no video encoder available")
        for k in range(6):
            writer.write(np.full((16, 16, 3), k * 40, dtype=np.uint8))
        writer.release()
        v = sample_frames(path, 3, (8, 8))
        assert v.frames.shape == (3, 8, 8, 3)
        assert v.indices == [0, 3, 5]  # 2.5 rounds half up


class TestLabels:
    def test_single_line(self, tmp_path):
        p = tmp_path / "a.txt"
        p.write_text("0 0.5 0.5 0.2 0.1\n")
        assert load_detection_labels(p) == [GroundTruthBox(0, 0.5, 0.5, 0.2, 0.1)]
        x, y, w, h = load_detection_labels(p)[0].to_pixels(100, 100)
        assert (x, y, w, h) == pytest.approx((40, 45, 20, 10))

    def test_empty_file(self, tmp_path):
        p = tmp_path / "a.txt"
        p.write_text("")
        assert load_detection_labels(p) == []

    def test_round_trip(self, tmp_path, rng):
        boxes = []
        for _ in range(50):
            w, h = rng.uniform(0.01, 1, 2)
            boxes.append(GroundTruthBox(0, *rng.uniform(0, 1, 2), w, h))
        write_detection_labels(tmp_path / "b.txt", boxes)
        assert load_detection_labels(tmp_path / "b.txt") == boxes

    def test_malformed_line_reports_line_number(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("0 0.5 0.5 0.2 0.1\n\n0 0.5 0.5 0.2\n")
        with pytest.raises(ParseError) as err:
            load_detection_labels(p)
        assert err.value.line == 3

    def test_out_of_range(self, tmp_path):
        p = tmp_path / "d.txt"
        p.write_text("0 1.5 0.5 0.2 0.1\n")
        with pytest.raises(ValidationError):
            load_detection_labels(p)

    def test_zero_width(self):
        with pytest.raises(ValidationError):
            GroundTruthBox(0, 0.5, 0.5, 0.0, 0.1)
