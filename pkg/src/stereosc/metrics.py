"""Reconstruction and detection metrics, plus compression-ratio accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from stereosc.data import BBox2D, DetectionSet, DifficultyRegime, StereoPair, classify_difficulty
from stereosc.errors import ShapeError

SSIM_K1, SSIM_K2 = 0.01, 0.03
DEFAULT_SSIM_BLOCK = 8


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")


def psnr(i: np.ndarray, i_hat: np.ndarray, max_val: float = 1.0, *, printed_form: bool = False) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs.

    ``printed_form`` evaluates ``20 log10(max / MSE)`` instead of the standard
    ``10 log10(max^2 / MSE)``.
    """
    _check_same(i, i_hat)
    mse = float(np.mean((np.asarray(i, np.float64) - np.asarray(i_hat, np.float64)) ** 2))
    return _psnr_from_mse(mse, max_val, printed_form)


def _psnr_from_mse(mse: float, max_val: float, printed_form: bool) -> float:
    if mse == 0.0:
        return math.inf
    if printed_form:
        return 20.0 * math.log10(max_val / mse)
    return 10.0 * math.log10(max_val * max_val / mse)


def psnr_masked(i: np.ndarray, i_hat: np.ndarray, mask: np.ndarray, max_val: float = 1.0) -> float:
    """PSNR over the pixels where ``mask`` (``H x W``) is set; NaN for an empty mask."""
    _check_same(i, i_hat)
    mask = np.asarray(mask, bool)
    if mask.shape != i.shape[:2]:
        raise ShapeError(f"mask {mask.shape} vs image {i.shape[:2]}")
    if not mask.any():
        return math.nan
    d = np.asarray(i, np.float64)[mask] - np.asarray(i_hat, np.float64)[mask]
    return _psnr_from_mse(float(np.mean(d * d)), max_val, False)


def _block_scores(x: np.ndarray, y: np.ndarray, block: int, max_val: float):
    """Per-block SSIM products, shape ``(by, bx, C)``."""
    h, w, c = x.shape
    by, bx = h // block, w // block
    xb = x[:by * block, :bx * block].reshape(by, block, bx, block, c).transpose(0, 2, 4, 1, 3)
    yb = y[:by * block, :bx * block].reshape(by, block, bx, block, c).transpose(0, 2, 4, 1, 3)
    xb = xb.reshape(by, bx, c, -1)
    yb = yb.reshape(by, bx, c, -1)
    c1 = (SSIM_K1 * max_val) ** 2
    c2 = (SSIM_K2 * max_val) ** 2
    c3 = c2 / 2
    mx, my = xb.mean(-1), yb.mean(-1)
    vx, vy = xb.var(-1), yb.var(-1)
    sx, sy = np.sqrt(vx), np.sqrt(vy)
    cov = ((xb - mx[..., None]) * (yb - my[..., None])).mean(-1)
    lum = (2 * mx * my + c1) / (mx ** 2 + my ** 2 + c1)
    con = (2 * sx * sy + c2) / (vx + vy + c2)
    struct = (cov + c3) / (sx * sy + c3)
    return lum * con * struct


def ssim(i: np.ndarray, i_hat: np.ndarray, block: int = DEFAULT_SSIM_BLOCK, max_val: float = 1.0,
         mask: Optional[np.ndarray] = None) -> float:
    """Mean over non-overlapping ``block x block`` tiles of luminance x contrast x structure.

    Scores are averaged over channels and tiles, then clipped to ``[0, 1]``.
    With ``mask``, only tiles containing at least one masked pixel count;
    an empty selection gives NaN.
    """
    _check_same(i, i_hat)
    x = np.asarray(i, np.float64)
    y = np.asarray(i_hat, np.float64)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    if block > min(x.shape[:2]) or block < 1:
        raise ShapeError(f"block {block} does not fit image {x.shape[:2]}")
    scores = _block_scores(x, y, block, max_val).mean(-1)
    if mask is not None:
        by, bx = scores.shape
        m = np.asarray(mask, bool)[:by * block, :bx * block]
        sel = m.reshape(by, block, bx, block).any(axis=(1, 3))
        if not sel.any():
            return math.nan
        scores = scores[sel]
    return float(np.clip(scores.mean(), 0.0, 1.0))


def iou(a: BBox2D, b: BBox2D) -> float:
    iw = min(a.u2, b.u2) - max(a.u1, b.u1)
    ih = min(a.v2, b.v2) - max(a.v1, b.v1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass
class PRCurve:
    precision: list
    recall: list


@dataclass
class APReport:
    ap: dict = field(default_factory=dict)  # (view, regime name) -> AP in [0, 100] or NaN
    curves: dict = field(default_factory=dict)


def _regime_ok(box: BBox2D, regime: DifficultyRegime) -> bool:
    got = classify_difficulty(box)
    return got is not DifficultyRegime.IGNORED and got <= regime


def match_frame(dets: Sequence[BBox2D], gts: Sequence[BBox2D], regime: DifficultyRegime,
                iou_threshold: float):
    """Greedy matching by descending confidence (stable for ties).

    Returns ``(scored, n_valid)``: ``scored`` lists ``(confidence, is_tp)`` for
    every detection that is not ignored, in processing order.
    """
    valid = [_regime_ok(g, regime) for g in gts]
    used = [False] * len(gts)
    order = sorted(range(len(dets)), key=lambda k: -dets[k].c)
    scored = []
    for k in order:
        d = dets[k]
        best, best_iou = -1, iou_threshold
        ign, ign_iou = -1, iou_threshold
        for j, g in enumerate(gts):
            if used[j]:
                continue
            o = iou(d, g)
            if valid[j] and o > best_iou:
                best, best_iou = j, o
            elif not valid[j] and o > ign_iou:
                ign, ign_iou = j, o
        if best >= 0:
            used[best] = True
            scored.append((d.c, True))
        elif ign >= 0:
            used[ign] = True  # matched an ignored ground truth: neither TP nor FP
        else:
            scored.append((d.c, False))
    return scored, sum(valid)


def interpolated_ap(precision: Sequence[float], recall: Sequence[float], points: int = 40) -> float:
    """Area under the precision envelope sampled at ``points`` recall positions (x100).

    40 points sample ``1/40 .. 1``; 11 points sample ``0, 0.1, .., 1``.
    """
    p = np.asarray(precision, np.float64)
    r = np.asarray(recall, np.float64)
    if points == 11:
        samples = np.linspace(0.0, 1.0, 11)
    else:
        samples = np.arange(1, points + 1) / points
    total = 0.0
    for s in samples:
        sel = p[r >= s - 1e-12]
        total += sel.max() if sel.size else 0.0
    return float(100.0 * total / len(samples))


def pr_curve(scored: Sequence[tuple], n_valid: int) -> PRCurve:
    """Precision/recall at each distinct confidence threshold (ties form one step)."""
    order = sorted(scored, key=lambda t: -t[0])
    prec, rec = [], []
    tp = fp = 0
    for idx, (c, hit) in enumerate(order):
        tp += hit
        fp += not hit
        if idx + 1 < len(order) and order[idx + 1][0] == c:
            continue
        prec.append(tp / (tp + fp))
        rec.append(tp / n_valid if n_valid else 0.0)
    return PRCurve(prec, rec)


def ap_2d(detections: Sequence[Sequence[BBox2D]], ground_truth: Sequence[Sequence[BBox2D]],
          iou_threshold: float = 0.5, regime: DifficultyRegime = DifficultyRegime.MODERATE,
          points: int = 40) -> tuple[float, PRCurve]:
    """Average precision over frames; NaN when the regime has no ground truth."""
    if len(detections) != len(ground_truth):
        raise ShapeError("detections and ground truth must cover the same frames")
    scored, n_valid = [], 0
    for dets, gts in zip(detections, ground_truth):
        s, v = match_frame(list(dets), list(gts), regime, iou_threshold)
        scored.extend(s)
        n_valid += v
    if n_valid == 0:
        return math.nan, PRCurve([], [])
    curve = pr_curve(scored, n_valid)
    return interpolated_ap(curve.precision, curve.recall, points), curve


def ap_report(detections: dict, ground_truth: dict, iou_threshold: float = 0.5,
              points: int = 40) -> APReport:
    """Per-view, per-regime AP.  Both dicts map ``view -> list of per-frame boxes``."""
    report = APReport()
    for view in ground_truth:
        for regime in (DifficultyRegime.EASY, DifficultyRegime.MODERATE, DifficultyRegime.HARD):
            ap, curve = ap_2d(detections[view], ground_truth[view], iou_threshold, regime, points)
            report.ap[(view, regime.name.lower())] = ap
            report.curves[(view, regime.name.lower())] = curve
    return report


@dataclass
class MetricReport:
    frame_ids: list = field(default_factory=list)
    rows: list = field(default_factory=list)  # dicts: frame_id, view, metric, region, value

    def add(self, frame_id: str, view: str, metric: str, region: str, value: float):
        self.rows.append({"frame_id": frame_id, "view": view, "metric": metric,
                          "region": region, "value": value})

    def aggregate(self) -> dict:
        """Mean per ``(metric, region)``; infinite and NaN values are excluded and counted."""
        groups: dict = {}
        for row in self.rows:
            groups.setdefault((row["metric"], row["region"]), []).append(row["value"])
        out = {}
        for (metric, region), vals in sorted(groups.items()):
            finite = [v for v in vals if math.isfinite(v)]
            out[f"{metric}_{region}"] = {
                "mean": float(np.mean(finite)) if finite else math.nan,
                "count": len(finite),
                "infinite": sum(1 for v in vals if math.isinf(v)),
                "undefined": sum(1 for v in vals if math.isnan(v)),
            }
        return out


def frame_metrics(report: MetricReport, frame_id: str, view: str, original: np.ndarray,
                  recovered: np.ndarray, key_mask: np.ndarray, block: int = DEFAULT_SSIM_BLOCK):
    report.add(frame_id, view, "psnr", "global", psnr(original, recovered))
    report.add(frame_id, view, "psnr", "key", psnr_masked(original, recovered, key_mask))
    report.add(frame_id, view, "ssim", "global", ssim(original, recovered, block))
    report.add(frame_id, view, "ssim", "key", ssim(original, recovered, block, mask=key_mask))


def effective_compression_ratio(payload, original=None) -> float:
    """Original stereo element count over transmitted element count (side-band excluded).

    ``original`` may be the source ``StereoPair``, an element count, or
    ``None`` to use the payload's own frame dimensions.
    """
    if original is None:
        elements = 2 * 3 * payload.width * payload.height
    elif isinstance(original, StereoPair):
        elements = original.left.size + original.right.size
    else:
        elements = int(original)
    return elements / payload.total_elements


def closed_form_ratio(coverage: float, n: int, m: int) -> float:
    """Ratio for box coverage fraction ``coverage`` with key factor ``n`` and global ``m``."""
    return 1.0 / (coverage / (n * n) + 1.0 / (m * m))
