import logging

import numpy as np
import pytest
from PIL import Image

from stereosc.data import (BBox2D, DetectionSet, DifficultyRegime, SceneSpec, StereoPair,
                           classify_difficulty, format_kitti_label_line, load_kitti_stereo,
                           parse_kitti_label_line, read_kitti_labels, read_png, synth_dataset,
                           synth_stereo, write_png)
from stereosc.errors import ConfigError, DataError

LINE = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59"


def test_bbox_validation():
    with pytest.raises(DataError):
        BBox2D(5, 0, 5, 10)
    with pytest.raises(DataError):
        BBox2D(0, 0, 1, 1, c=1.5)
    b = BBox2D(1, 2, 4, 8)
    assert (b.width, b.height, b.area) == (3, 6, 18)


def test_bbox_clamp_and_span():
    b = BBox2D(-3.5, 2.2, 10.4, 30.0)
    c = b.clamp(8, 20)
    assert c.as_list()[:4] == [0.0, 2.2, 8, 20]
    assert BBox2D(10, 10, 12, 12).clamp(8, 8) is None
    assert BBox2D(1.5, 2.2, 3.1, 4.0).pixel_span() == (2, 4, 1, 4)


def test_detection_set_bounds():
    with pytest.raises(DataError):
        DetectionSet((BBox2D(0, 0, 11, 5),), (10, 10))
    assert len(DetectionSet.empty(4, 4)) == 0


def test_stereo_pair_checks():
    img = np.zeros((4, 5, 3), np.float32)
    with pytest.raises(DataError):
        StereoPair(img, np.zeros((4, 6, 3), np.float32), "x")
    with pytest.raises(DataError):
        StereoPair(img + 2, img, "x")
    p = StereoPair(img, img, "x")
    assert (p.width, p.height) == (5, 4)


@pytest.mark.parametrize("height,occ,trunc,expected", [
    (40, 0, 0.15, DifficultyRegime.EASY),
    (39.9, 0, 0.0, DifficultyRegime.MODERATE),
    (30, 1, 0.3, DifficultyRegime.MODERATE),
    (30, 2, 0.3, DifficultyRegime.HARD),
    (25, 2, 0.5, DifficultyRegime.HARD),
    (24.9, 0, 0.0, DifficultyRegime.IGNORED),
    (50, 3, 0.0, DifficultyRegime.IGNORED),
    (50, 0, 0.51, DifficultyRegime.IGNORED),
])
def test_difficulty_thresholds(height, occ, trunc, expected):
    assert classify_difficulty(BBox2D(0, 0, 10, height, occlusion=occ, truncation=trunc)) == expected


def test_difficulty_missing_metadata_is_ignored():
    assert classify_difficulty(BBox2D(0, 0, 10, 100)) == DifficultyRegime.IGNORED


def test_parse_label_line():
    b = parse_kitti_label_line(LINE)
    assert (b.u1, b.v1, b.u2, b.v2, b.c) == (587.01, 173.33, 614.12, 200.12, 1.0)
    assert b.occlusion == 0 and b.truncation == 0.0 and b.label == "Car"
    scored = parse_kitti_label_line(LINE + " 0.75")
    assert scored.c == 0.75
    with pytest.raises(DataError):
        parse_kitti_label_line("Car 0 0")
    with pytest.raises(DataError, match="zero-area"):
        parse_kitti_label_line(LINE.replace("614.12", "587.01"))
    with pytest.raises(DataError, match="negative"):
        parse_kitti_label_line(LINE.replace("614.12", "500.00"))


def test_format_parse_roundtrip():
    b = BBox2D(1.25, 2.5, 30.75, 40.0, c=0.5, occlusion=1, truncation=0.2)
    again = parse_kitti_label_line(format_kitti_label_line(b))
    assert again == b


def test_read_labels_skips_and_drops(tmp_path):
    path = tmp_path / "000000.txt"
    path.write_text("\n".join([
        LINE,
        "DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10",
        "Pedestrian 0.00 0 -1 10 10 20 40 1 1 1 1 1 1 1",
        LINE.replace("614.12", "587.01"),  # zero-area
        "Car 0.00 0 -1 1300 10 1400 40 1 1 1 1 1 1 1",  # outside the frame
    ]))
    ds, dropped = read_kitti_labels(path, 1242, 375)
    assert len(ds) == 1 and dropped == 2
    everything, _ = read_kitti_labels(path, 1242, 375, classes=None)
    assert {b.label for b in everything} == {"Car", "Pedestrian"}


def _kitti_tree(root, ids, right_ids=None):
    for sub in ("image_2", "image_3", "label_2"):
        (root / "training" / sub).mkdir(parents=True)
    img = (np.arange(8 * 10 * 3).reshape(8, 10, 3) % 255).astype(np.uint8)
    for fid in ids:
        Image.fromarray(img).save(root / "training" / "image_2" / f"{fid}.png")
        (root / "training" / "label_2" / f"{fid}.txt").write_text(
            "Car 0.00 0 -1 1 1 6 7 1 1 1 1 1 1 1\nCar 0.00 0 -1 3 3 3 5 1 1 1 1 1 1 1\n")
    for fid in (right_ids if right_ids is not None else ids):
        Image.fromarray(img[::-1].copy()).save(root / "training" / "image_3" / f"{fid}.png")


def test_load_kitti_stereo(tmp_path, caplog):
    _kitti_tree(tmp_path, ["000001", "000000"])
    with caplog.at_level(logging.WARNING):
        pairs = load_kitti_stereo(tmp_path)
    assert [p.frame_id for p in pairs] == ["000000", "000001"]
    assert pairs[0].left.shape == (8, 10, 3)
    assert len(pairs[0].gt_left) == 1 and pairs[0].gt_right is None
    assert "dropped 2" in caplog.text
    assert len(load_kitti_stereo(tmp_path, frame_ids=["000001"])) == 1


def test_load_kitti_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_kitti_stereo(tmp_path / "nope")
    _kitti_tree(tmp_path, ["000000", "000001"], right_ids=["000000"])
    with pytest.raises(DataError):
        load_kitti_stereo(tmp_path)


def test_png_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (6, 7, 3)).astype(np.float32) / 255
    write_png(tmp_path / "a.png", img)
    np.testing.assert_allclose(read_png(tmp_path / "a.png"), img, atol=1e-7)


def test_scene_spec_validation():
    with pytest.raises(ConfigError):
        SceneSpec(width=8, disparity=(1, 8))
    with pytest.raises(ConfigError):
        SceneSpec(disparity=(3, 2))


def test_synth_stereo_disparity_and_boxes():
    p = synth_stereo(7, SceneSpec(n_objects=1))
    (bl,), (br,) = p.gt_left.boxes, p.gt_right.boxes
    d = int(bl.u1 - br.u1)
    assert 1 <= d <= 6 and bl.v1 == br.v1 and bl.width == br.width
    r0, r1, c0, c1 = bl.pixel_span()
    np.testing.assert_array_equal(p.left[r0:r1, c0:c1], p.right[r0:r1, c0 - d:c1 - d])
    assert classify_difficulty(bl) != DifficultyRegime.IGNORED or bl.height < 25


def test_synth_grid_snapping():
    spec = SceneSpec(width=96, height=96, grid=8, box_size=(16, 40), disparity=(0, 16))
    for p in synth_dataset(3, 10, spec):
        for b in (*p.gt_left.boxes, *p.gt_right.boxes):
            assert all(float(v) % 8 == 0 for v in (b.u1, b.v1, b.u2, b.v2))


def test_synth_determinism():
    a = synth_dataset(5, 3)
    b = synth_dataset(5, 3)
    assert [p.frame_id for p in a] == ["000000", "000001", "000002"]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.left, y.left)
        assert x.gt_left == y.gt_left
    assert not np.array_equal(a[0].left, a[1].left)


def test_synth_fixed_disparity():
    p = synth_stereo(0, SceneSpec(n_objects=1, disparity=(4, 4)))
    assert p.gt_right.boxes[0].u1 == p.gt_left.boxes[0].u1 - 4
    assert p.gt_right.boxes[0].u2 == p.gt_left.boxes[0].u2 - 4


def test_synth_zero_objects():
    p = synth_stereo(2, SceneSpec(n_objects=0))
    assert len(p.gt_left) == 0 and len(p.gt_right) == 0
    assert p.left.std() > 0.01
    np.testing.assert_array_equal(p.left, p.right)


def test_synth_disparity_recoverable_by_correlation():
    spec = SceneSpec(n_objects=1, disparity=(1, 6))
    for seed in range(5):
        p = synth_stereo(seed, spec)
        b = p.gt_left.boxes[0]
        r0, r1, c0, c1 = b.pixel_span()
        patch = p.left[r0:r1, c0:c1]
        errors = {}
        for d in range(0, c0 + 1):
            errors[d] = float(np.abs(p.right[r0:r1, c0 - d:c1 - d] - patch).mean())
        assert min(errors, key=errors.get) == int(b.u1 - p.gt_right.boxes[0].u1)


def test_load_kitti_negative_height(tmp_path):
    _kitti_tree(tmp_path, ["000000"])
    (tmp_path / "training" / "label_2" / "000000.txt").write_text(
        "Car 0.00 0 -1 1 7 6 2 1 1 1 1 1 1 1\n")
    with pytest.raises(DataError, match="000000.txt:1"):
        load_kitti_stereo(tmp_path)


def test_load_is_idempotent(tmp_path):
    _kitti_tree(tmp_path, ["000000", "000001", "000002"])
    a, b = load_kitti_stereo(tmp_path), load_kitti_stereo(tmp_path)
    assert [p.frame_id for p in a] == [p.frame_id for p in b] == ["000000", "000001", "000002"]
    assert all(x.gt_left == y.gt_left and np.array_equal(x.left, y.left) for x, y in zip(a, b))
