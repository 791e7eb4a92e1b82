import math

import numpy as np
import pytest

from oracles import brute_force_ap
from stereosc.data import BBox2D, DifficultyRegime
from stereosc.errors import ShapeError
from stereosc.metrics import (MetricReport, ap_2d, ap_report, closed_form_ratio,
                              effective_compression_ratio, interpolated_ap, iou, psnr,
                              psnr_masked, ssim)

# (min height, max occlusion, max truncation)
THRESHOLDS = {DifficultyRegime.EASY: (40, 0, 0.15), DifficultyRegime.MODERATE: (25, 1, 0.30),
              DifficultyRegime.HARD: (25, 2, 0.50)}


def _gt(u1, v1, u2, v2, occ=0, trunc=0.0):
    return BBox2D(u1, v1, u2, v2, 1.0, occlusion=occ, truncation=trunc)


def _counts(box, regime):
    h, occ, trunc = THRESHOLDS[regime]
    return box.height >= h and box.occlusion <= occ and box.truncation <= trunc


def random_instance(rng):
    frames = []
    total = int(rng.integers(1, 21))
    n_frames = int(rng.integers(1, 4))
    for _ in range(n_frames):
        frames.append(([], []))
    for k in range(total):
        dets, gts = frames[int(rng.integers(n_frames))]
        if gts and rng.random() < 0.5:
            g = gts[int(rng.integers(len(gts)))]
            j = rng.integers(-8, 9, 4)
            u1, v1 = g.u1 + j[0], g.v1 + j[1]
            dets.append(BBox2D(u1, v1, max(u1 + 1, g.u2 + j[2]), max(v1 + 1, g.v2 + j[3]),
                               float(rng.integers(1, 10)) / 10))
        elif k == 0 or rng.random() < 0.5:
            u1, v1 = rng.integers(0, 100, 2)
            w, h = rng.integers(15, 80, 2)
            gts.append(_gt(u1, v1, u1 + w, v1 + h, int(rng.choice([0, 0, 1, 2, 3])),
                           float(rng.choice([0.0, 0.1, 0.2, 0.4, 0.6]))))
        else:
            u1, v1 = rng.integers(0, 100, 2)
            w, h = rng.integers(10, 60, 2)
            dets.append(BBox2D(u1, v1, u1 + w, v1 + h, float(rng.integers(1, 10)) / 10))
    return frames


def ap_matches_oracle(frames, regime):
    got, _ = ap_2d([d for d, _ in frames], [g for _, g in frames], 0.5, regime)
    oracle_frames = [([((d.u1, d.v1, d.u2, d.v2), d.c) for d in dets],
                      [((g.u1, g.v1, g.u2, g.v2), _counts(g, regime)) for g in gts])
                     for dets, gts in frames]
    want = brute_force_ap(oracle_frames)
    return (math.isnan(got) and math.isnan(want)) or got == want


def test_ap_equals_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        frames = random_instance(rng)
        for regime in THRESHOLDS:
            assert ap_matches_oracle(frames, regime)


def test_ap_hand_cases():
    g = _gt(0, 0, 50, 50)
    perfect = [BBox2D(0, 0, 50, 50, 1.0)]
    assert ap_2d([perfect], [[g]])[0] == 100.0
    ap, curve = ap_2d([[BBox2D(0, 0, 50, 50, 0.9), BBox2D(60, 60, 90, 90, 0.8)]], [[g]])
    assert curve.precision == [1.0, 0.5] and curve.recall == [1.0, 1.0]
    assert ap == 100.0
    # IoU 0.4 < 0.5: a false positive
    weak = BBox2D(0, 0, 20, 50, 1.0)
    assert iou(weak, g) == pytest.approx(0.4)
    assert ap_2d([[weak]], [[g]])[0] == 0.0


def test_ap_regimes_and_undefined():
    hard = _gt(0, 0, 50, 30, occ=2, trunc=0.4)
    det = [BBox2D(0, 0, 50, 30, 0.9)]
    assert math.isnan(ap_2d([det], [[hard]], regime=DifficultyRegime.EASY)[0])
    assert ap_2d([det], [[hard]], regime=DifficultyRegime.HARD)[0] == 100.0
    report = ap_report({"left": [det]}, {"left": [[hard]]})
    assert math.isnan(report.ap[("left", "easy")]) and report.ap[("left", "hard")] == 100.0


def test_interpolation_variants():
    assert interpolated_ap([1.0, 0.5], [0.5, 1.0], 40) == pytest.approx(75.0)
    assert interpolated_ap([1.0], [0.5], 11) == pytest.approx(100 * 6 / 11)


def test_iou_cases():
    a = BBox2D(0, 0, 1, 1)
    assert iou(a, a) == 1.0
    assert iou(a, BBox2D(2, 2, 3, 3)) == 0.0
    assert iou(a, BBox2D(0.5, 0, 1.5, 1)) == pytest.approx(1 / 3, abs=1e-15)
    b = BBox2D(0.3, 0.2, 2.0, 0.9)
    assert iou(a, b) == iou(b, a)


def test_psnr_cases(rng):
    x = rng.random((8, 8, 3))
    assert psnr(x, x) == math.inf
    assert abs(psnr(x, x + 0.1) - 20.0) < 1e-9
    assert psnr(x, x + 0.1) - psnr(x, x + 0.2) == pytest.approx(20 * math.log10(2), abs=1e-9)
    assert psnr(x, x + 0.1, printed_form=True) == pytest.approx(40.0)
    with pytest.raises(ShapeError):
        psnr(x, x[:4])


def test_psnr_masked_cases(rng):
    x, y = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    full = np.ones((8, 8), bool)
    assert psnr_masked(x, y, full) == pytest.approx(psnr(x, y), abs=1e-12)
    mask = np.zeros((8, 8), bool)
    mask[2:5, 1:6] = True
    y2 = y.copy()
    y2[~mask] += 0.3
    assert psnr_masked(x, y2, mask) == psnr_masked(x, y, mask)
    assert math.isnan(psnr_masked(x, y, np.zeros((8, 8), bool)))


def test_ssim_cases(rng):
    x = rng.random((16, 16, 3))
    assert ssim(x, x) == 1.0
    checker = (np.indices((8, 8)).sum(0) % 2).astype(float)[..., None].repeat(3, 2)
    assert ssim(checker, 1 - checker) == 0.0
    a, b = np.full((8, 8, 3), 0.2), np.full((8, 8, 3), 0.6)
    c1 = 0.01 ** 2
    assert ssim(a, b) == pytest.approx((2 * 0.12 + c1) / (0.04 + 0.36 + c1), rel=1e-12)
    with pytest.raises(ShapeError):
        ssim(x, x, block=32)


def test_ssim_masked_tiles(rng):
    x = rng.random((16, 16, 3))
    y = x.copy()
    y[8:, 8:] = rng.random((8, 8, 3))
    mask = np.zeros((16, 16), bool)
    mask[0:3, 0:3] = True
    assert ssim(x, y, mask=mask) == 1.0
    assert ssim(x, y, mask=np.ones((16, 16), bool)) == ssim(x, y)
    assert math.isnan(ssim(x, y, mask=np.zeros((16, 16), bool)))


def test_metric_report_excludes_sentinels():
    r = MetricReport()
    r.add("a", "left", "psnr", "global", math.inf)
    r.add("b", "left", "psnr", "global", 20.0)
    r.add("b", "left", "psnr", "key", math.nan)
    agg = r.aggregate()
    assert agg["psnr_global"] == {"mean": 20.0, "count": 1, "infinite": 1, "undefined": 0}
    assert agg["psnr_key"]["undefined"] == 1 and math.isnan(agg["psnr_key"]["mean"])


def test_closed_form_ratio_examples():
    assert closed_form_ratio(0.0, 1, 6) == pytest.approx(36.0)
    assert closed_form_ratio(1.0, 1, 1) == pytest.approx(0.5)
    rho = 4 * (1 / 30 - 1 / 36)
    assert rho == pytest.approx(0.0222, abs=1e-4)
    assert closed_form_ratio(rho, 2, 6) == pytest.approx(30.0)


def test_effective_ratio_count_forms():
    class P:
        width, height, total_elements = 60, 60, 600

    assert effective_compression_ratio(P()) == pytest.approx(36.0)
    assert effective_compression_ratio(P(), 21600) == pytest.approx(36.0)
