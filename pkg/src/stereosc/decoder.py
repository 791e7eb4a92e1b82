"""Receiver side: key-area upsampling, flow-guided global recovery and fusion.

Flow fields are ``(B, 2, H, W)`` tensors, channel 0 the horizontal (column)
displacement and channel 1 the vertical one, in pixels of the grid they live
on.  ``warp(x, flow)`` samples ``x`` at ``p + flow(p)``; so a left-to-right
flow warps left-view features onto the right view.
"""

from __future__ import annotations

from typing import Callable, Optional

import torch
import torch.nn.functional as F
from torch import nn

from stereosc.errors import DecoderError, ShapeError
from stereosc.layers import (ShuffleUp, bilinear_resize, conv, factorize, lrelu,
                             residual_trunk)


def warp(features: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinear backward warp with zeros outside the grid.

    Differentiable in both ``features`` and ``flow``.  Integer flows reproduce
    an exact shift because the fractional weights are exactly zero.
    """
    if features.shape[-2:] != flow.shape[-2:] or flow.shape[1] != 2:
        raise ShapeError(f"flow {tuple(flow.shape)} does not match features {tuple(features.shape)}")
    b, c, h, w = features.shape
    padded = F.pad(features, (1, 1, 1, 1))
    hp, wp = h + 2, w + 2
    ys = torch.arange(h, dtype=flow.dtype, device=flow.device).view(1, h, 1)
    xs = torch.arange(w, dtype=flow.dtype, device=flow.device).view(1, 1, w)
    # +1 for the zero border
    px = xs + flow[:, 0] + 1
    py = ys + flow[:, 1] + 1
    x0f, y0f = torch.floor(px), torch.floor(py)
    wx, wy = (px - x0f).unsqueeze(1), (py - y0f).unsqueeze(1)
    x0 = x0f.long().clamp(0, wp - 1)
    x1 = (x0f.long() + 1).clamp(0, wp - 1)
    y0 = y0f.long().clamp(0, hp - 1)
    y1 = (y0f.long() + 1).clamp(0, hp - 1)
    flat = padded.reshape(b, c, hp * wp)

    def gather(yi, xi):
        idx = (yi * wp + xi).reshape(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).reshape(b, c, h, w)

    # indices clamped onto the border ring always land on zeros
    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top * (1 - wy) + bottom * wy


def resize_flow(flow: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    h, w = flow.shape[-2:]
    up = bilinear_resize(flow, size)
    scale = torch.tensor([size[1] / w, size[0] / h], dtype=flow.dtype).view(1, 2, 1, 1)
    return up * scale


class ZeroFlow(nn.Module):
    """Stub estimator that always returns zero displacement."""

    def compute_flow(self, ref, supp):
        b, _, h, w = ref.shape
        return ref.new_zeros(b, 2, h, w)

    def forward(self, g_left, g_right):
        z = self.compute_flow(g_left, g_right)
        return z, z.clone()


class FlowRefiner(nn.Module):
    def __init__(self, width: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            conv(8, width, 5), nn.ReLU(),
            conv(width, 2 * width, 5), nn.ReLU(),
            conv(2 * width, width, 5), nn.ReLU(),
            conv(width, 2, 5))

    def forward(self, x):
        return self.net(x)


class PyramidFlow(nn.Module):
    """Coarse-to-fine flow estimator: each level refines the upsampled coarser flow
    from the reference, the warped support image and the current flow."""

    def __init__(self, levels: int = 3, width: int = 16):
        super().__init__()
        self.levels = levels
        self.refiners = nn.ModuleList(FlowRefiner(width) for _ in range(levels))

    def compute_flow(self, ref: torch.Tensor, supp: torch.Tensor) -> torch.Tensor:
        """Flow such that ``warp(supp, flow)`` approximates ``ref``."""
        # joint per-sample contrast normalisation
        both = torch.cat([ref, supp], 1)
        mu = both.mean((1, 2, 3), keepdim=True)
        sd = both.std((1, 2, 3), keepdim=True) + 1e-3
        refs, supps = [(ref - mu) / sd], [(supp - mu) / sd]
        for _ in range(self.levels - 1):
            refs.append(F.avg_pool2d(refs[-1], 2, ceil_mode=True))
            supps.append(F.avg_pool2d(supps[-1], 2, ceil_mode=True))
        b = ref.shape[0]
        flow = None
        for level, refiner in enumerate(self.refiners):
            r, s = refs[-1 - level], supps[-1 - level]
            size = tuple(r.shape[-2:])
            flow = r.new_zeros(b, 2, *size) if flow is None else resize_flow(flow, size)
            flow = flow + refiner(torch.cat([r, warp(s, flow), flow], 1))
        return flow

    def forward(self, g_left, g_right):
        """Returns ``(left_to_right, right_to_left)``."""
        b = g_left.shape[0]
        both = self.compute_flow(torch.cat([g_right, g_left]), torch.cat([g_left, g_right]))
        return both[:b], both[b:]


class ExternalFlow(nn.Module):
    """Adapter for a pretrained estimator ``fn(ref, supp) -> flow``."""

    def __init__(self, fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor]):
        super().__init__()
        self.fn = fn

    def compute_flow(self, ref, supp):
        return self.fn(ref, supp)

    def forward(self, g_left, g_right):
        return self.fn(g_right, g_left), self.fn(g_left, g_right)


def estimate_flow(g_left: torch.Tensor, g_right: torch.Tensor, estimator: nn.Module):
    """``(left_to_right, right_to_left)`` flows on the compressed grid."""
    if g_left.shape != g_right.shape:
        raise ShapeError(f"{tuple(g_left.shape)} != {tuple(g_right.shape)}")
    try:
        lr, rl = estimator(g_left, g_right)
    except Exception as exc:
        raise DecoderError(f"flow estimator failed: {exc}") from exc
    expected = (g_left.shape[0], 2, *g_left.shape[-2:])
    if tuple(lr.shape) != expected or tuple(rl.shape) != expected:
        raise DecoderError(f"flow estimator returned {tuple(lr.shape)}, expected {expected}")
    return lr, rl


class KeyAreaRecovery(nn.Module):
    """Two cascaded sub-pixel upsamplers (``n1`` then ``n2``) plus a bilinear residual."""

    def __init__(self, n1: int, n2: int, mid: int = 6):
        super().__init__()
        self.n1, self.n2 = n1, n2
        stages, cin = [], 3
        for r in (n1, n2):
            if r > 1:
                stages.append(ShuffleUp(cin, mid, r))
                cin = mid
        if not stages:
            stages = [nn.Sequential(conv(3, mid, 3), lrelu())]
        self.stages = nn.Sequential(*stages)
        self.tail = conv(mid, 3, 3)

    @property
    def n(self) -> int:
        return self.n1 * self.n2

    def forward(self, k: torch.Tensor, support: Optional[torch.Tensor] = None) -> torch.Tensor:
        """``support`` is the full-resolution box mask known from the side-band."""
        h, w = k.shape[-2:]
        out = self.tail(self.stages(k)) + bilinear_resize(k, (h * self.n, w * self.n))
        if support is not None:
            if support.shape[-2:] != out.shape[-2:]:
                raise ShapeError(f"support {tuple(support.shape)} vs output {tuple(out.shape)}")
            out = out * support
        return out


class GlobalRecoveryBranch(nn.Module):
    def __init__(self, m: int, features: int, depth: int):
        super().__init__()
        self.m = m
        self.stem = nn.Sequential(conv(3, features, 3), lrelu(), residual_trunk(features, depth))
        self.merge = nn.Sequential(conv(features + 3, features, 3), lrelu(),
                                   residual_trunk(features, depth))
        self.fuse = nn.Sequential(conv(2 * features, features, 1), lrelu())
        self.up = nn.Sequential(*[ShuffleUp(features, features, r) for r in factorize(m)])
        self.tail = nn.Sequential(conv(features, features, 3), lrelu(), conv(features, 3, 3))

    def head(self, g):
        return self.stem(g)

    def finish(self, g, f1, f2):
        f3 = self.merge(torch.cat([f2, g], 1))
        h, w = g.shape[-2:]
        out = self.tail(self.up(self.fuse(torch.cat([f1, f3], 1))))
        return out + bilinear_resize(g, (h * self.m, w * self.m)), f3


class GlobalRecovery(nn.Module):
    """View-specific optical-flow-driven recovery of the global stream."""

    def __init__(self, m: int, features: int = 64, depth: int = 4):
        super().__init__()
        self.m = m
        self.left = GlobalRecoveryBranch(m, features, depth)
        self.right = GlobalRecoveryBranch(m, features, depth)

    def forward(self, g_left, g_right, flow_lr, flow_rl, return_intermediates: bool = False):
        if g_left.shape != g_right.shape:
            raise ShapeError(f"{tuple(g_left.shape)} != {tuple(g_right.shape)}")
        f1_l, f1_r = self.left.head(g_left), self.right.head(g_right)
        f2_l = warp(f1_r, flow_rl)
        f2_r = warp(f1_l, flow_lr)
        out_l, f3_l = self.left.finish(g_left, f1_l, f2_l)
        out_r, f3_r = self.right.finish(g_right, f1_r, f2_r)
        if return_intermediates:
            inter = {"f1": (f1_l, f1_r), "f2": (f2_l, f2_r), "f3": (f3_l, f3_r)}
            return out_l, out_r, inter
        return out_l, out_r


class FusionNet(nn.Module):
    """Residual fusion of the recovered key-area and global planes."""

    def __init__(self, features: int = 64):
        super().__init__()
        self.body = nn.Sequential(conv(6, features, 5), lrelu(),
                                  conv(features, features, 5), lrelu(),
                                  conv(features, 3, 3))

    def forward(self, s_hat, f_hat):
        if s_hat.shape != f_hat.shape:
            raise ShapeError(f"{tuple(s_hat.shape)} != {tuple(f_hat.shape)}")
        return self.body(torch.cat([s_hat, f_hat], 1)) + s_hat + f_hat


def fuse(s_hat: torch.Tensor, f_hat: torch.Tensor, net: FusionNet,
         crop: Optional[tuple[int, int]] = None) -> torch.Tensor:
    """Inference-time fusion: clamp to ``[0, 1]`` and crop to ``crop = (h, w)``."""
    with torch.no_grad():
        out = net(s_hat, f_hat).clamp(0.0, 1.0)
    if crop is not None:
        out = out[..., :crop[0], :crop[1]]
    return out


def recover_key_area(k_hat: torch.Tensor, net: KeyAreaRecovery,
                     support: Optional[torch.Tensor] = None) -> torch.Tensor:
    if net.n < 1:
        raise ShapeError("invalid factors")
    with torch.no_grad():
        return net(k_hat, support)


def recover_global(g_left, g_right, flows, net: GlobalRecovery):
    with torch.no_grad():
        return net(g_left, g_right, *flows)
