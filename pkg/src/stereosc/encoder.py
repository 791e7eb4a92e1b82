"""Transmitter side: 2D detection, key-area masking and the two compression paths."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
import torch
from torch import nn

from stereosc.data import BBox2D, DetectionSet, check_image, parse_kitti_label_line
from stereosc.errors import (DataError, DetectorError, FramingError, PreconditionError,
                             ShapeError, StateError)
from stereosc.layers import (bilinear_resize, conv, lcm, lrelu, pixel_unshuffle,
                             residual_trunk)

DEFAULT_CONFIDENCE_FLOOR = 0.3


# -- detection -------------------------------------------------------------


class Detector(Protocol):
    def detect(self, image: np.ndarray, *, frame_id: str,
               ground_truth: Optional[DetectionSet]) -> Sequence[BBox2D]: ...


class OracleDetector:
    """Passes ground-truth boxes through with confidence 1."""

    def detect(self, image, *, frame_id, ground_truth):
        if ground_truth is None:
            raise PreconditionError(f"oracle detector needs ground truth for frame {frame_id!r}")
        return [BBox2D(b.u1, b.v1, b.u2, b.v2, 1.0, b.occlusion, b.truncation, b.label)
                for b in ground_truth]


class KittiFileDetector:
    """Reads detections from ``<directory>/<frame_id>[_suffix].txt`` in KITTI label format."""

    def __init__(self, directory, suffix: str = ""):
        self.directory = Path(directory)
        self.suffix = suffix

    def detect(self, image, *, frame_id, ground_truth):
        path = self.directory / f"{frame_id}{self.suffix}.txt"
        try:
            lines = path.read_text().splitlines()
            return [parse_kitti_label_line(line, source=str(path), lineno=i)
                    for i, line in enumerate(lines, start=1)
                    if line.strip() and not line.startswith("DontCare")]
        except (OSError, DataError) as exc:
            raise DetectorError(f"detection file adapter failed: {exc}") from exc


def detect_2d(image: np.ndarray, detector: Detector, *, frame_id: str = "",
              ground_truth: Optional[DetectionSet] = None,
              confidence_floor: float = DEFAULT_CONFIDENCE_FLOOR) -> DetectionSet:
    """Run ``detector`` and return boxes clamped to the image, above the confidence floor."""
    h, w = image.shape[:2]
    try:
        raw = detector.detect(image, frame_id=frame_id, ground_truth=ground_truth)
    except (PreconditionError, DetectorError):
        raise
    except Exception as exc:
        raise DetectorError(f"detector failed on frame {frame_id!r}: {exc}") from exc
    kept = []
    for box in raw:
        if box.c < confidence_floor:
            continue
        clamped = box.clamp(w, h)
        if clamped is not None:
            kept.append(clamped)
    return DetectionSet(tuple(kept), (w, h))


# -- masks and grid alignment ------------------------------------------------


def box_mask(boxes: Sequence[BBox2D], height: int, width: int) -> np.ndarray:
    """Boolean ``(height, width)`` union of the pixels each box touches."""
    mask = np.zeros((height, width), dtype=bool)
    for b in boxes:
        r0, r1, c0, c1 = b.pixel_span()
        mask[max(r0, 0):min(r1, height), max(c0, 0):min(c1, width)] = True
    return mask


def grid_mask(boxes: Sequence[BBox2D], n: int, height: int, width: int) -> np.ndarray:
    """Union of boxes expanded outward to the ``n``-grid, at ``1/n`` resolution.

    ``height`` and ``width`` are full-resolution (padded) dims divisible by ``n``.
    Coordinates go through float32 so the receiver, which sees float32 box
    records, derives the identical support.
    """
    if height % n or width % n:
        raise ShapeError(f"{height}x{width} not divisible by {n}")
    gh, gw = height // n, width // n
    mask = np.zeros((gh, gw), dtype=bool)
    for b in boxes:
        u1, v1, u2, v2 = (float(np.float32(x)) for x in (b.u1, b.v1, b.u2, b.v2))
        r0, r1 = int(math.floor(v1 / n)), int(math.ceil(v2 / n))
        c0, c1 = int(math.floor(u1 / n)), int(math.ceil(u2 / n))
        mask[max(r0, 0):min(r1, gh), max(c0, 0):min(c1, gw)] = True
    return mask


def align_box(box: BBox2D, n: int, width: int, height: int) -> BBox2D:
    """Expand ``box`` outward to the ``n``-pixel grid, clipped to ``width x height``."""
    u1 = math.floor(box.u1 / n) * n
    v1 = math.floor(box.v1 / n) * n
    u2 = min(math.ceil(box.u2 / n) * n, width)
    v2 = min(math.ceil(box.v2 / n) * n, height)
    return BBox2D(float(u1), float(v1), float(u2), float(v2), box.c,
                  box.occlusion, box.truncation, box.label)


def padded_dims(width: int, height: int, n: int, m: int) -> tuple[int, int]:
    """Smallest dims ``>=`` the originals divisible by both ``n`` and ``m``."""
    q = lcm(n, m)
    return -(-width // q) * q, -(-height // q) * q


@dataclass
class KeyAreaFeatures:
    data: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W) bool
    source_boxes: DetectionSet


def mask_key_area(image: np.ndarray, boxes: DetectionSet) -> KeyAreaFeatures:
    """Keep pixels inside the box union, zero everything else."""
    check_image(image)
    mask = box_mask(boxes.boxes, image.shape[0], image.shape[1])
    data = np.where(mask[..., None], image, np.zeros_like(image))
    return KeyAreaFeatures(data, mask, boxes)


# -- networks --------------------------------------------------------------


class KeyAreaCompressor(nn.Module):
    """Sub-pixel ``n``x downsampler with a bilinear residual branch."""

    def __init__(self, n: int, mid: int = 6):
        super().__init__()
        self.n = n
        self.head = conv(3, mid, 5)
        self.act = lrelu()
        self.tail = conv(mid * n * n, 3, 3)

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        h, w = s.shape[-2:]
        if h % self.n or w % self.n:
            raise ShapeError(f"{h}x{w} not divisible by n={self.n}")
        y = self.tail(pixel_unshuffle(self.act(self.head(s)), self.n))
        return y + bilinear_resize(s, (h // self.n, w // self.n))


class JointExtractor(nn.Module):
    """Shared per-view residual stem, concatenation fusion and two view-specific heads."""

    def __init__(self, features: int = 64, depth: int = 3):
        super().__init__()
        self.stem = nn.Sequential(conv(3, features, 3), lrelu(), residual_trunk(features, depth))
        self.merge = nn.Sequential(conv(2 * features, features, 1), lrelu())
        self.head_left = nn.Sequential(conv(features, features, 3), lrelu())
        self.head_right = nn.Sequential(conv(features, features, 3), lrelu())

    def forward(self, left, right):
        if left.shape != right.shape:
            raise ShapeError(f"left {tuple(left.shape)} != right {tuple(right.shape)}")
        b = left.shape[0]
        feats = self.stem(torch.cat([left, right], 0))
        fused = self.merge(torch.cat([feats[:b], feats[b:]], 1))
        return self.head_left(fused), self.head_right(fused)


class GlobalCompressor(nn.Module):
    """Sub-pixel ``m``x downsampler of global features plus the downsampled source image."""

    def __init__(self, m: int, features: int = 64, mid: int = 4):
        super().__init__()
        self.m = m
        self.body = nn.Sequential(conv(features, features, 5), lrelu(),
                                  conv(features, mid, 5), lrelu())
        self.tail = conv(mid * m * m, 3, 3)

    def forward(self, feats, image):
        h, w = image.shape[-2:]
        if h % self.m or w % self.m:
            raise ShapeError(f"{h}x{w} not divisible by m={self.m}")
        y = self.tail(pixel_unshuffle(self.body(feats), self.m))
        return y + bilinear_resize(image, (h // self.m, w // self.m))


# -- functional single-frame API ---------------------------------------------


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """``(H, W, 3)`` array to a ``(1, 3, H, W)`` float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)[None]


def to_image(t: torch.Tensor) -> np.ndarray:
    return t.detach()[0].permute(1, 2, 0).cpu().numpy()


@dataclass
class KeyAreaInfo:
    data: torch.Tensor  # (3, H/n, W/n), zero outside the grid-aligned boxes
    n: int
    boxes: DetectionSet  # original-resolution boxes, image_dims = unpadded frame

    @property
    def support(self) -> np.ndarray:
        _, gh, gw = self.data.shape
        return grid_mask(self.boxes.boxes, self.n, gh * self.n, gw * self.n)


@dataclass
class GlobalInfo:
    data: torch.Tensor  # (3, H/m, W/m)
    m: int


def compress_key_area(features: KeyAreaFeatures, net: Optional[KeyAreaCompressor]) -> KeyAreaInfo:
    """Downsample masked key-area features and zero the cells outside the aligned boxes."""
    if net is None:
        raise StateError("key-area compressor is not initialised")
    h, w = features.data.shape[:2]
    with torch.no_grad():
        k = net(to_tensor(features.data))[0]
    support = torch.from_numpy(grid_mask(features.source_boxes.boxes, net.n, h, w))
    return KeyAreaInfo(k * support, net.n, features.source_boxes)


def extract_global(left: np.ndarray, right: np.ndarray, net: JointExtractor):
    """Joint feature extraction; returns ``(F_l, F_r)`` as ``(f, H, W)`` tensors."""
    if left.shape != right.shape:
        raise ShapeError(f"left {left.shape} != right {right.shape}")
    with torch.no_grad():
        fl, fr = net(to_tensor(left), to_tensor(right))
    return fl[0], fr[0]


def compress_global(feats: torch.Tensor, source_image: np.ndarray,
                    net: Optional[GlobalCompressor]) -> GlobalInfo:
    if net is None:
        raise StateError("global compressor is not initialised")
    with torch.no_grad():
        g = net(feats[None], to_tensor(source_image))[0]
    return GlobalInfo(g, net.m)


# -- payload ---------------------------------------------------------------

PAYLOAD_MAGIC = b"SSCP"
PAYLOAD_VERSION = 1
_HEADER = struct.Struct("<4sHIIHHII")


@dataclass
class SemanticPayload:
    """Everything the transmitter sends for one stereo frame.

    Key streams hold only grid-aligned box cells, channel-major then raster
    order.  Boxes travel side-band as five float32 values each.
    """

    width: int
    height: int
    n: int
    m: int
    boxes_left: DetectionSet
    boxes_right: DetectionSet
    key_left: np.ndarray
    key_right: np.ndarray
    global_left: np.ndarray
    global_right: np.ndarray

    @property
    def padded_dims(self) -> tuple[int, int]:
        return padded_dims(self.width, self.height, self.n, self.m)

    @property
    def key_elements(self) -> int:
        return self.key_left.size + self.key_right.size

    @property
    def global_elements(self) -> int:
        return self.global_left.size + self.global_right.size

    @property
    def total_elements(self) -> int:
        return self.key_elements + self.global_elements

    @property
    def side_band_floats(self) -> int:
        return 5 * (len(self.boxes_left) + len(self.boxes_right))

    def support(self, view: str) -> np.ndarray:
        wp, hp = self.padded_dims
        boxes = self.boxes_left if view == "left" else self.boxes_right
        return grid_mask(boxes.boxes, self.n, hp, wp)

    def to_bytes(self) -> bytes:
        parts = [_HEADER.pack(PAYLOAD_MAGIC, PAYLOAD_VERSION, self.width, self.height,
                              self.n, self.m, len(self.boxes_left), len(self.boxes_right))]
        for boxes in (self.boxes_left, self.boxes_right):
            for b in boxes:
                parts.append(np.asarray(b.as_list(), dtype="<f4").tobytes())
        for stream in (self.key_left, self.key_right, self.global_left, self.global_right):
            parts.append(np.asarray(stream, dtype="<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "SemanticPayload":
        if len(buf) < _HEADER.size:
            raise FramingError("payload shorter than header")
        magic, version, w, h, n, m, nl, nr = _HEADER.unpack_from(buf, 0)
        if magic != PAYLOAD_MAGIC or version != PAYLOAD_VERSION:
            raise FramingError(f"bad payload header {magic!r} v{version}")
        off = _HEADER.size
        box_sets = []
        for count in (nl, nr):
            recs = np.frombuffer(buf, dtype="<f4", count=5 * count, offset=off).reshape(count, 5)
            off += 20 * count
            box_sets.append(DetectionSet(tuple(BBox2D(*map(float, r[:4]), c=float(r[4]))
                                               for r in recs), (w, h)))
        wp, hp = padded_dims(w, h, n, m)
        lengths = [3 * int(grid_mask(bs.boxes, n, hp, wp).sum()) for bs in box_sets]
        lengths += [3 * (hp // m) * (wp // m)] * 2
        if len(buf) != off + 4 * sum(lengths):
            raise FramingError(f"payload length {len(buf)} != expected {off + 4 * sum(lengths)}")
        streams = []
        for length in lengths:
            streams.append(np.frombuffer(buf, dtype="<f4", count=length, offset=off).copy())
            off += 4 * length
        return cls(w, h, n, m, box_sets[0], box_sets[1], *streams)


def pack_payload(k_l: KeyAreaInfo, k_r: KeyAreaInfo, g_l: GlobalInfo, g_r: GlobalInfo) -> SemanticPayload:
    """Crop key-area planes to their grid-aligned support and bundle all four streams."""
    if k_l.n != k_r.n or g_l.m != g_r.m:
        raise ShapeError("left/right factors differ")
    streams = []
    for k in (k_l, k_r):
        data = k.data.detach().cpu().numpy()
        support = k.support
        if np.any(data[:, ~support] != 0):
            raise DataError("key-area data outside grid-aligned boxes; align before packing")
        streams.append(data[:, support].reshape(-1).astype(np.float32))
    for g in (g_l, g_r):
        streams.append(g.data.detach().cpu().numpy().reshape(-1).astype(np.float32))
    w, h = k_l.boxes.image_dims
    return SemanticPayload(w, h, k_l.n, g_l.m, k_l.boxes, k_r.boxes, *streams)


def unpack_payload(payload: SemanticPayload):
    """Zero-fill key planes from their streams; returns ``(k_l, k_r, g_l, g_r)``."""
    wp, hp = payload.padded_dims
    n, m = payload.n, payload.m
    out = []
    for view, stream, boxes in (("left", payload.key_left, payload.boxes_left),
                                ("right", payload.key_right, payload.boxes_right)):
        support = payload.support(view)
        plane = np.zeros((3, hp // n, wp // n), dtype=np.float32)
        if stream.size != 3 * support.sum():
            raise FramingError(f"{view} key stream has {stream.size} values, "
                               f"support needs {3 * support.sum()}")
        plane[:, support] = stream.reshape(3, -1)
        out.append(KeyAreaInfo(torch.from_numpy(plane), n, boxes))
    for stream in (payload.global_left, payload.global_right):
        out.append(GlobalInfo(torch.from_numpy(stream.reshape(3, hp // m, wp // m).copy()), m))
    return tuple(out)
