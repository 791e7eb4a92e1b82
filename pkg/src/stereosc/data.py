"""Image/box domain types, KITTI stereo ingestion and synthetic stereo scenes.

Images are numpy arrays of shape ``(H, W, 3)`` with float32 values in
``[0, 1]``.  Box coordinates are pixels, ``(u1, v1)`` upper-left and
``(u2, v2)`` lower-right, with ``u`` along the width axis.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from stereosc.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

LEFT_DIR = "image_2"
RIGHT_DIR = "image_3"
LABEL_DIR = "label_2"


class DifficultyRegime(enum.IntEnum):
    """KITTI difficulty regimes, ordered from easiest to hardest."""

    EASY = 0
    MODERATE = 1
    HARD = 2
    IGNORED = 3


# (min height px, max occlusion level, max truncation) per regime.
DIFFICULTY_THRESHOLDS = {
    DifficultyRegime.EASY: (40.0, 0, 0.15),
    DifficultyRegime.MODERATE: (25.0, 1, 0.30),
    DifficultyRegime.HARD: (25.0, 2, 0.50),
}


@dataclass(frozen=True)
class BBox2D:
    u1: float
    v1: float
    u2: float
    v2: float
    c: float = 1.0
    occlusion: Optional[int] = None
    truncation: Optional[float] = None
    label: str = "Car"

    def __post_init__(self):
        if not (self.u1 < self.u2 and self.v1 < self.v2):
            raise DataError(f"degenerate box {self.as_list()}")
        if not 0.0 <= self.c <= 1.0:
            raise DataError(f"confidence {self.c} outside [0, 1]")

    @property
    def width(self) -> float:
        return self.u2 - self.u1

    @property
    def height(self) -> float:
        return self.v2 - self.v1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list[float]:
        return [self.u1, self.v1, self.u2, self.v2, self.c]

    def clamp(self, width: int, height: int) -> Optional["BBox2D"]:
        """Clip to the image rectangle; ``None`` if nothing is left."""
        u1, u2 = min(max(self.u1, 0.0), width), min(max(self.u2, 0.0), width)
        v1, v2 = min(max(self.v1, 0.0), height), min(max(self.v2, 0.0), height)
        if u2 <= u1 or v2 <= v1:
            return None
        return replace(self, u1=u1, v1=v1, u2=u2, v2=v2)

    def pixel_span(self) -> tuple[int, int, int, int]:
        """Half-open pixel index ranges ``(row0, row1, col0, col1)`` touched by the box."""
        return (int(math.floor(self.v1)), int(math.ceil(self.v2)),
                int(math.floor(self.u1)), int(math.ceil(self.u2)))


@dataclass(frozen=True)
class DetectionSet:
    boxes: tuple[BBox2D, ...]
    image_dims: tuple[int, int]  # (w, h)

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        w, h = self.image_dims
        for b in self.boxes:
            if b.u1 < 0 or b.v1 < 0 or b.u2 > w or b.v2 > h:
                raise DataError(f"box {b.as_list()} outside image {w}x{h}")

    def __len__(self) -> int:
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)

    @classmethod
    def empty(cls, width: int, height: int) -> "DetectionSet":
        return cls((), (width, height))


@dataclass(frozen=True)
class StereoPair:
    left: np.ndarray
    right: np.ndarray
    frame_id: str
    gt_left: Optional[DetectionSet] = None
    gt_right: Optional[DetectionSet] = None

    def __post_init__(self):
        check_image(self.left)
        check_image(self.right)
        if self.left.shape != self.right.shape:
            raise DataError(
                f"frame {self.frame_id}: left {self.left.shape} != right {self.right.shape}")

    @property
    def width(self) -> int:
        return self.left.shape[1]

    @property
    def height(self) -> int:
        return self.left.shape[0]


def check_image(img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise DataError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise DataError("image values must be finite and within [0, 1]")


def read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def write_png(path: Path, img: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def classify_difficulty(box: BBox2D) -> DifficultyRegime:
    """Map a ground-truth box to the easiest KITTI regime it satisfies."""
    if box.occlusion is None or box.truncation is None:
        return DifficultyRegime.IGNORED
    for regime, (min_h, max_occ, max_trunc) in DIFFICULTY_THRESHOLDS.items():
        if box.height >= min_h and box.occlusion <= max_occ and box.truncation <= max_trunc:
            return regime
    return DifficultyRegime.IGNORED


def parse_kitti_label_line(line: str, *, source: str = "<string>", lineno: int = 0) -> BBox2D:
    """Parse one KITTI object line; a 16th column, when present, is the score."""
    parts = line.split()
    if len(parts) not in (15, 16):
        raise DataError(f"{source}:{lineno}: expected 15 or 16 fields, got {len(parts)}")
    try:
        trunc = float(parts[1])
        occ = int(float(parts[2]))
        u1, v1, u2, v2 = (float(x) for x in parts[4:8])
        score = float(parts[15]) if len(parts) == 16 else 1.0
    except ValueError as exc:
        raise DataError(f"{source}:{lineno}: {exc}") from None
    if v2 - v1 < 0 or u2 - u1 < 0:
        raise DataError(f"{source}:{lineno}: negative box extent")
    if v2 == v1 or u2 == u1:
        raise DataError(f"{source}:{lineno}: zero-area box")
    return BBox2D(u1, v1, u2, v2, c=min(max(score, 0.0), 1.0),
                  occlusion=occ, truncation=trunc, label=parts[0])


def read_kitti_labels(path: Path, width: int, height: int,
                      classes: Optional[Sequence[str]] = ("Car",)) -> tuple[DetectionSet, int]:
    """Read a label file; returns the clamped boxes and the number dropped as degenerate."""
    boxes, dropped = [], 0
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        label = line.split()[0]
        if label == "DontCare" or (classes is not None and label not in classes):
            continue
        try:
            box = parse_kitti_label_line(line, source=str(path), lineno=lineno)
        except DataError as exc:
            if "zero-area" in str(exc):
                dropped += 1
                continue
            raise
        clamped = box.clamp(width, height)
        if clamped is None:
            dropped += 1
            continue
        boxes.append(clamped)
    return DetectionSet(tuple(boxes), (width, height)), dropped


def format_kitti_label_line(box: BBox2D, *, with_score: bool = True) -> str:
    occ = box.occlusion if box.occlusion is not None else 0
    trunc = box.truncation if box.truncation is not None else 0.0
    fields = [box.label, f"{trunc:.2f}", str(occ), "-10",
              f"{box.u1:.2f}", f"{box.v1:.2f}", f"{box.u2:.2f}", f"{box.v2:.2f}",
              "-1", "-1", "-1", "-1000", "-1000", "-1000", "-10"]
    if with_score:
        fields.append(f"{box.c:.4f}")
    return " ".join(fields)


def load_kitti_stereo(root, split: str = "training", *,
                      frame_ids: Optional[Iterable[str]] = None,
                      classes: Optional[Sequence[str]] = ("Car",)) -> list[StereoPair]:
    """Load stereo pairs from ``root/<split>/{image_2,image_3,label_2}``.

    Args:
        root: KITTI object dataset root.
        split: Sub-directory name, usually ``training``.
        frame_ids: Optional subset to load; defaults to every left image.
        classes: Object types kept as ground truth (``None`` keeps all but DontCare).

    Returns:
        Pairs ordered by frame id, with ground-truth boxes on the left view.
    """
    base = Path(root) / split
    dirs = {name: base / name for name in (LEFT_DIR, RIGHT_DIR, LABEL_DIR)}
    for name, d in dirs.items():
        if not d.is_dir():
            raise ConfigError(f"missing KITTI directory {d}")
    left_ids = sorted(p.stem for p in dirs[LEFT_DIR].glob("*.png"))
    right_ids = sorted(p.stem for p in dirs[RIGHT_DIR].glob("*.png"))
    if left_ids != right_ids:
        raise DataError(f"left/right image sets differ ({len(left_ids)} vs {len(right_ids)})")
    if frame_ids is not None:
        wanted = set(frame_ids)
        left_ids = [f for f in left_ids if f in wanted]

    pairs, total_dropped = [], 0
    for fid in left_ids:
        left = read_png(dirs[LEFT_DIR] / f"{fid}.png")
        right = read_png(dirs[RIGHT_DIR] / f"{fid}.png")
        h, w = left.shape[:2]
        label_path = dirs[LABEL_DIR] / f"{fid}.txt"
        if not label_path.exists():
            raise DataError(f"missing label file {label_path}")
        gt, dropped = read_kitti_labels(label_path, w, h, classes)
        total_dropped += dropped
        # KITTI annotates the left camera only.
        pairs.append(StereoPair(left, right, fid, gt_left=gt, gt_right=None))
    if total_dropped:
        logger.warning("dropped %d zero-area boxes while loading %s", total_dropped, base)
    return pairs


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of a synthetic stereo scene."""

    width: int = 64
    height: int = 64
    n_objects: int = 2
    disparity: tuple[int, int] = (1, 6)
    box_size: tuple[int, int] = (12, 28)
    grid: int = 1  # snap box corners and disparities to this pixel grid

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigError("scene dims must be positive")
        lo, hi = self.disparity
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad disparity range {self.disparity}")
        if hi >= self.width:
            raise ConfigError(f"disparity {hi} exceeds image width {self.width}")
        if self.box_size[0] < 1 or self.box_size[1] < self.box_size[0]:
            raise ConfigError(f"bad box size range {self.box_size}")


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    coarse = rng.random((h // cell + 2, w // cell + 2, 3))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None, None], (xs - x0)[None, :, None]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11)


def textured_background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = 0.35 + 0.3 * _smooth_noise(rng, h, w, max(4, min(h, w) // 4))
    detail = 0.15 * (_smooth_noise(rng, h, w, 2) - 0.5)
    return np.clip(base + detail, 0.0, 1.0)


def _object_texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    color = rng.uniform(0.1, 0.9, size=3)
    period = rng.integers(3, 7)
    yy, xx = np.mgrid[0:h, 0:w]
    stripes = ((xx + yy * rng.integers(0, 2)) // period) % 2
    tex = color[None, None, :] * (0.75 + 0.25 * stripes[..., None])
    tex = tex + 0.12 * (rng.random((h, w, 3)) - 0.5)
    return np.clip(tex, 0.0, 1.0)


def synth_stereo(seed: int, spec: SceneSpec = SceneSpec(), frame_id: Optional[str] = None) -> StereoPair:
    """Generate a stereo pair of textured rectangles over a smooth background.

    Each rectangle appears in the right view shifted left by its integer
    disparity; the background has zero disparity.
    """
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    background = textured_background(rng, h, w)
    left = background.copy()
    right = background.copy()
    boxes_l, boxes_r = [], []
    g = spec.grid
    for _ in range(spec.n_objects):
        d = int(rng.integers(spec.disparity[0], spec.disparity[1] + 1))
        bw = int(rng.integers(spec.box_size[0], spec.box_size[1] + 1))
        bh = int(rng.integers(spec.box_size[0], spec.box_size[1] + 1))
        if g > 1:
            d, bw, bh = d // g * g, max(g, bw // g * g), max(g, bh // g * g)
        bw, bh = min(bw, w - d), min(bh, h)
        if bw < 1:
            raise ConfigError(f"disparity {d} leaves no room for an object in width {w}")
        # the right-view copy must stay in frame
        u1 = int(rng.integers(d // g, (w - bw) // g + 1)) * g
        v1 = int(rng.integers(0, (h - bh) // g + 1)) * g
        tex = _object_texture(rng, bh, bw)
        left[v1:v1 + bh, u1:u1 + bw] = tex
        right[v1:v1 + bh, u1 - d:u1 - d + bw] = tex
        boxes_l.append(BBox2D(u1, v1, u1 + bw, v1 + bh, 1.0, occlusion=0, truncation=0.0))
        boxes_r.append(BBox2D(u1 - d, v1, u1 - d + bw, v1 + bh, 1.0, occlusion=0, truncation=0.0))
    fid = frame_id if frame_id is not None else f"synth{seed:06d}"
    return StereoPair(left.astype(np.float32), right.astype(np.float32), fid,
                      gt_left=DetectionSet(tuple(boxes_l), (w, h)),
                      gt_right=DetectionSet(tuple(boxes_r), (w, h)))


def synth_dataset(seed: int, count: int, spec: SceneSpec = SceneSpec()) -> list[StereoPair]:
    """``count`` synthetic pairs with per-frame seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [synth_stereo(int(s), spec, frame_id=f"{i:06d}") for i, s in enumerate(seeds)]
