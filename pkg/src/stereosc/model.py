"""The complete semantic transceiver as one module with named parameter groups."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from stereosc.channel import ChannelCodec
from stereosc.data import StereoPair
from stereosc.decoder import FusionNet, GlobalRecovery, KeyAreaRecovery, PyramidFlow, ZeroFlow
from stereosc.encoder import (GlobalCompressor, JointExtractor, KeyAreaCompressor, box_mask,
                              grid_mask, padded_dims)
from stereosc.errors import ConfigError, ShapeError

PARAM_GROUPS = ("key_tx", "key_rx", "global_tx", "global_rx", "flow", "fusion", "channel")


@dataclass(frozen=True)
class CodecConfig:
    """Architecture hyperparameters.  Defaults are the desk-scale 30x scheme."""

    n: int = 2
    n1: int = 2
    n2: int = 1
    m: int = 6
    features: int = 32
    key_mid: int = 6
    global_mid: int = 4
    tx_depth: int = 3
    rx_depth: int = 4
    flow: str = "pyramid"
    flow_levels: int = 3
    flow_width: int = 16
    channel_rate: int = 9
    channel_hidden: int = 32
    channel_enc_blocks: int = 3
    channel_dec_blocks: int = 5
    seed: int = 0

    def __post_init__(self):
        if min(self.n, self.n1, self.n2, self.m) < 1:
            raise ConfigError("sampling factors must be >= 1")
        if self.n1 * self.n2 != self.n:
            raise ConfigError(f"n1 * n2 = {self.n1 * self.n2} != n = {self.n}")
        if self.flow not in ("pyramid", "zero"):
            raise ConfigError(f"unknown flow estimator {self.flow!r}")
        if self.features < 1 or self.channel_rate < 1:
            raise ConfigError("feature and rate channel counts must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# Reference layer widths for the 30x scheme at full scale.
REFERENCE_30X = CodecConfig(n=2, n1=2, n2=1, m=6, features=64, tx_depth=3, rx_depth=30,
                            channel_hidden=64)


class SemanticSystem(nn.Module):
    def __init__(self, cfg: CodecConfig = CodecConfig()):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.key_tx = nn.ModuleDict({v: KeyAreaCompressor(cfg.n, cfg.key_mid)
                                         for v in ("left", "right")})
            self.key_rx = nn.ModuleDict({v: KeyAreaRecovery(cfg.n1, cfg.n2, cfg.key_mid)
                                         for v in ("left", "right")})
            self.global_tx = nn.ModuleDict({
                "extractor": JointExtractor(cfg.features, cfg.tx_depth),
                "left": GlobalCompressor(cfg.m, cfg.features, cfg.global_mid),
                "right": GlobalCompressor(cfg.m, cfg.features, cfg.global_mid),
            })
            self.global_rx = GlobalRecovery(cfg.m, cfg.features, cfg.rx_depth)
            self.flow = (PyramidFlow(cfg.flow_levels, cfg.flow_width) if cfg.flow == "pyramid"
                         else ZeroFlow())
            self.fusion = nn.ModuleDict({v: FusionNet(cfg.features) for v in ("left", "right")})
            self.channel = ChannelCodec(cfg.channel_rate, cfg.channel_hidden,
                                        cfg.channel_enc_blocks, cfg.channel_dec_blocks)

    def group(self, name: str) -> nn.Module:
        if name not in PARAM_GROUPS:
            raise KeyError(name)
        return getattr(self, name)

    def encode(self, batch: "FrameBatch") -> dict:
        s_l, s_r = batch.left * batch.mask_l, batch.right * batch.mask_r
        k_l = self.key_tx["left"](s_l) * batch.sup_l[:, None]
        k_r = self.key_tx["right"](s_r) * batch.sup_r[:, None]
        f_l, f_r = self.global_tx["extractor"](batch.left, batch.right)
        g_l = self.global_tx["left"](f_l, batch.left)
        g_r = self.global_tx["right"](f_r, batch.right)
        return {"s_l": s_l, "s_r": s_r, "k_l": k_l, "k_r": k_r, "g_l": g_l, "g_r": g_r}

    def recover_key(self, k_l, k_r, batch: "FrameBatch"):
        return (self.key_rx["left"](k_l, batch.supfull_l),
                self.key_rx["right"](k_r, batch.supfull_r))

    def recover_global(self, g_l, g_r, return_intermediates: bool = False):
        flow_lr, flow_rl = self.flow(g_l, g_r)
        out = self.global_rx(g_l, g_r, flow_lr, flow_rl, return_intermediates)
        return out, (flow_lr, flow_rl)

    def decode(self, k_l, k_r, g_l, g_r, batch: "FrameBatch", *, zero_key: bool = False,
               zero_global: bool = False) -> dict:
        """Unclamped, padded reconstructions plus the recovered streams."""
        s_hat_l, s_hat_r = self.recover_key(k_l, k_r, batch)
        (f_hat_l, f_hat_r), flows = self.recover_global(g_l, g_r)
        if zero_key:
            s_hat_l, s_hat_r = torch.zeros_like(s_hat_l), torch.zeros_like(s_hat_r)
        if zero_global:
            f_hat_l, f_hat_r = torch.zeros_like(f_hat_l), torch.zeros_like(f_hat_r)
        i_l = self.fusion["left"](s_hat_l, f_hat_l)
        i_r = self.fusion["right"](s_hat_r, f_hat_r)
        return {"i_l": i_l, "i_r": i_r, "s_hat_l": s_hat_l, "s_hat_r": s_hat_r,
                "f_hat_l": f_hat_l, "f_hat_r": f_hat_r, "flows": flows}


@dataclass
class FrameBatch:
    """Padded image tensors and box-derived masks for a batch of equal-size frames."""

    left: torch.Tensor  # (B, 3, Hp, Wp)
    right: torch.Tensor
    mask_l: torch.Tensor  # (B, 1, Hp, Wp) float, detected-box union
    mask_r: torch.Tensor
    sup_l: torch.Tensor  # (B, Hp/n, Wp/n) bool, grid-aligned support
    sup_r: torch.Tensor
    supfull_l: torch.Tensor  # (B, 1, Hp, Wp) float, support at full resolution
    supfull_r: torch.Tensor
    height: int
    width: int
    frame_ids: tuple

    def crop(self, x: torch.Tensor) -> torch.Tensor:
        return x[..., :self.height, :self.width]

    @property
    def size(self) -> int:
        return self.left.shape[0]


def _pad_images(imgs: np.ndarray, wp: int, hp: int) -> torch.Tensor:
    t = torch.from_numpy(np.ascontiguousarray(imgs, dtype=np.float32)).permute(0, 3, 1, 2)
    h, w = t.shape[-2:]
    if (hp, wp) == (h, w):
        return t
    if hp - h >= h or wp - w >= w:
        raise ShapeError(f"frame {h}x{w} too small to reflect-pad to {hp}x{wp}")
    return F.pad(t, (0, wp - w, 0, hp - h), mode="reflect")


def make_batch(pairs: Sequence[StereoPair], boxes_left: Sequence, boxes_right: Sequence,
               n: int, m: int) -> FrameBatch:
    """Pad frames to the common ``n``/``m`` multiple and rasterise the box masks."""
    h, w = pairs[0].height, pairs[0].width
    if any((p.height, p.width) != (h, w) for p in pairs):
        raise ShapeError("all frames in a batch must share dims")
    wp, hp = padded_dims(w, h, n, m)
    left = _pad_images(np.stack([p.left for p in pairs]), wp, hp)
    right = _pad_images(np.stack([p.right for p in pairs]), wp, hp)

    def masks(box_sets):
        full = np.stack([box_mask(list(b), hp, wp) for b in box_sets])
        sup = np.stack([grid_mask(list(b), n, hp, wp) for b in box_sets])
        supfull = sup.repeat(n, axis=1).repeat(n, axis=2)
        return (torch.from_numpy(full[:, None].astype(np.float32)), torch.from_numpy(sup),
                torch.from_numpy(supfull[:, None].astype(np.float32)))

    mask_l, sup_l, supfull_l = masks(boxes_left)
    mask_r, sup_r, supfull_r = masks(boxes_right)
    return FrameBatch(left, right, mask_l, mask_r, sup_l, sup_r, supfull_l, supfull_r,
                      h, w, tuple(p.frame_id for p in pairs))


def gt_batch(pairs: Sequence[StereoPair], cfg: CodecConfig) -> FrameBatch:
    """Batch using ground-truth boxes (the oracle detector) on both views."""
    return make_batch(pairs, [p.gt_left for p in pairs], [p.gt_right for p in pairs],
                      cfg.n, cfg.m)
