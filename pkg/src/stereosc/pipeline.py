"""End-to-end transmission: detect, encode, (quantise | channel), decode, fuse."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from stereosc.channel import (ChannelConfig, ChannelKind, QuantSpec, SymbolBlock, dequantize,
                              quantize, transmit_planes)
from stereosc.data import DetectionSet, StereoPair
from stereosc.encoder import (Detector, GlobalInfo, KeyAreaInfo, OracleDetector, SemanticPayload,
                              detect_2d, pack_payload, unpack_payload)
from stereosc.model import FrameBatch, SemanticSystem, make_batch
from stereosc.utils import derive_seed

ABLATIONS = ("none", "key_only", "global_only")


def stream_generators(seed: int, frame_ids, tag: str) -> list[torch.Generator]:
    return [torch.Generator().manual_seed(derive_seed(seed, fid, tag)) for fid in frame_ids]


def channel_transport(system: SemanticSystem, streams: dict, batch: FrameBatch,
                      cfg: ChannelConfig, seed: Optional[int] = None):
    """Send K and G through the channel codec; returns ``(k_l, k_r, g_l, g_r, blocks)``.

    A noiseless configuration is a perfect link that bypasses the codec.
    """
    k_l, k_r, g_l, g_r = streams["k_l"], streams["k_r"], streams["g_l"], streams["g_r"]
    if cfg.kind is ChannelKind.NOISELESS:
        return k_l, k_r, g_l, g_r, []
    seed = cfg.seed if seed is None else seed
    b = batch.size
    tag = cfg.label
    planes_k = torch.stack([k_l, k_r], 1).reshape(2 * b, *k_l.shape[1:])
    sup_k = torch.stack([batch.sup_l, batch.sup_r], 1).reshape(2 * b, *batch.sup_l.shape[1:])
    planes_g = torch.stack([g_l, g_r], 1).reshape(2 * b, *g_l.shape[1:])
    res_k = transmit_planes(system.channel, planes_k, sup_k, cfg,
                            stream_generators(seed, batch.frame_ids, tag + "/key"))
    res_g = transmit_planes(system.channel, planes_g, None, cfg,
                            stream_generators(seed, batch.frame_ids, tag + "/global"))
    rk = res_k.received.reshape(b, 2, *k_l.shape[1:])
    rg = res_g.received.reshape(b, 2, *g_l.shape[1:])
    return rk[:, 0], rk[:, 1], rg[:, 0], rg[:, 1], res_k.blocks + res_g.blocks


@dataclass
class FrameResult:
    frame_id: str
    left: np.ndarray
    right: np.ndarray
    boxes_left: DetectionSet
    boxes_right: DetectionSet
    payload: SemanticPayload
    blocks: list = field(default_factory=list)

    @property
    def erasures(self) -> int:
        return sum(b.erasures for b in self.blocks)


def _quantize_payload(payload: SemanticPayload, q: QuantSpec) -> SemanticPayload:
    streams = []
    for s in (payload.key_left, payload.key_right, payload.global_left, payload.global_right):
        codes, side = quantize(s, q)
        streams.append(dequantize(codes, side, q).astype(np.float32))
    return SemanticPayload(payload.width, payload.height, payload.n, payload.m,
                           payload.boxes_left, payload.boxes_right, *streams)


def transmit_frame(system: SemanticSystem, pair: StereoPair, channel: ChannelConfig = ChannelConfig(),
                   *, detector: Optional[Detector] = None, quant: Optional[QuantSpec] = None,
                   ablation: str = "none", confidence_floor: float = 0.3,
                   seed: Optional[int] = None) -> FrameResult:
    """Run one stereo frame through the whole system in inference mode.

    Args:
        system: Trained (or freshly initialised) transceiver.
        pair: Source frame.
        channel: Physical channel; noiseless means a perfect link.
        detector: 2D detector; the ground-truth oracle by default.
        quant: If given, payload streams are quantised and dequantised over a
            perfect digital link (the source-only comparison mode).
        ablation: ``key_only`` zeroes the recovered global stream,
            ``global_only`` the recovered key-area stream.
        seed: Channel seed; defaults to ``channel.seed``.
    """
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}")
    detector = detector or OracleDetector()
    cfg = system.cfg
    boxes_l = detect_2d(pair.left, detector, frame_id=pair.frame_id,
                        ground_truth=pair.gt_left, confidence_floor=confidence_floor)
    boxes_r = detect_2d(pair.right, detector, frame_id=pair.frame_id,
                        ground_truth=pair.gt_right, confidence_floor=confidence_floor)
    batch = make_batch([pair], [boxes_l], [boxes_r], cfg.n, cfg.m)
    was_training = system.training
    system.eval()
    try:
        with torch.no_grad():
            streams = system.encode(batch)
            payload = pack_payload(KeyAreaInfo(streams["k_l"][0], cfg.n, boxes_l),
                                   KeyAreaInfo(streams["k_r"][0], cfg.n, boxes_r),
                                   GlobalInfo(streams["g_l"][0], cfg.m),
                                   GlobalInfo(streams["g_r"][0], cfg.m))
            blocks: list[SymbolBlock] = []
            if quant is not None:
                k_l, k_r, g_l, g_r = (x.data[None] for x in
                                      unpack_payload(_quantize_payload(payload, quant)))
            else:
                k_l, k_r, g_l, g_r, blocks = channel_transport(system, streams, batch, channel, seed)
            out = system.decode(k_l, k_r, g_l, g_r, batch,
                                zero_key=ablation == "global_only",
                                zero_global=ablation == "key_only")
    finally:
        system.train(was_training)
    left = batch.crop(out["i_l"]).clamp(0, 1)[0].permute(1, 2, 0).numpy()
    right = batch.crop(out["i_r"]).clamp(0, 1)[0].permute(1, 2, 0).numpy()
    return FrameResult(pair.frame_id, left, right, boxes_l, boxes_r, payload, blocks)
