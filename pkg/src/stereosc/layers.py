"""Sub-pixel rearrangement, bilinear resampling and small conv building blocks.

All tensors are ``(B, C, H, W)``.  The sub-pixel index map is

    out[b, z, x, y] = in[b, z * n**2 + (x % n) * n + (y % n), x // n, y // n]

with ``x`` the row and ``y`` the column of the upsampled plane.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from stereosc.errors import ShapeError

LEAKY_SLOPE = 0.01


def pixel_shuffle(t: torch.Tensor, n: int) -> torch.Tensor:
    """Rearrange ``(B, C*n*n, H, W)`` into ``(B, C, H*n, W*n)``."""
    if n < 1:
        raise ShapeError(f"shuffle factor must be >= 1, got {n}")
    b, c, h, w = t.shape
    if c % (n * n):
        raise ShapeError(f"channel count {c} not divisible by n^2 = {n * n}")
    out_c = c // (n * n)
    t = t.reshape(b, out_c, n, n, h, w)
    # (b, z, i, j, X, Y) -> (b, z, X, i, Y, j)
    t = t.permute(0, 1, 4, 2, 5, 3)
    return t.reshape(b, out_c, h * n, w * n)


def pixel_unshuffle(t: torch.Tensor, n: int) -> torch.Tensor:
    """Inverse of :func:`pixel_shuffle`: ``(B, C, H, W)`` into ``(B, C*n*n, H/n, W/n)``."""
    if n < 1:
        raise ShapeError(f"shuffle factor must be >= 1, got {n}")
    b, c, h, w = t.shape
    if h % n or w % n:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by {n}")
    t = t.reshape(b, c, h // n, n, w // n, n)
    # (b, z, X, i, Y, j) -> (b, z, i, j, X, Y)
    t = t.permute(0, 1, 3, 5, 2, 4)
    return t.reshape(b, c * n * n, h // n, w // n)


def bilinear_resize(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Half-pixel-centred bilinear resampling without antialiasing."""
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def factorize(n: int) -> list[int]:
    """Prime factors of ``n`` in ascending order (empty for 1)."""
    out, p = [], 2
    while n > 1:
        while n % p == 0:
            out.append(p)
            n //= p
        p += 1
    return out


def conv(cin: int, cout: int, k: int = 3) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, k, padding=k // 2)


def lrelu() -> nn.LeakyReLU:
    return nn.LeakyReLU(LEAKY_SLOPE)


class ResidualBlock(nn.Module):
    """conv-ReLU-conv with identity skip."""

    def __init__(self, ch: int, k: int = 3):
        super().__init__()
        self.conv1 = conv(ch, ch, k)
        self.conv2 = conv(ch, ch, k)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


def residual_trunk(ch: int, depth: int) -> nn.Sequential:
    return nn.Sequential(*[ResidualBlock(ch) for _ in range(depth)])


class ShuffleUp(nn.Module):
    """conv to ``ch * r^2`` channels, pixel shuffle by ``r``, leaky ReLU."""

    def __init__(self, cin: int, ch: int, r: int):
        super().__init__()
        self.r = r
        self.conv = conv(cin, ch * r * r, 3)
        self.act = lrelu()

    def forward(self, x):
        return self.act(pixel_shuffle(self.conv(x), self.r))


def zero_parameters(module: nn.Module) -> nn.Module:
    """Set every learnable parameter of ``module`` to zero in place."""
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def lcm(a: int, b: int) -> int:
    return a * b // math.gcd(a, b)
