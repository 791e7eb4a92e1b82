"""Learned channel codec and physical channel simulation.

Real-valued codec outputs are paired into complex symbols ``(I, Q)`` and the
block is scaled to unit average power.  The scale travels side-band so the
receiver can undo it.  The noise variance per complex symbol is
``10 ** (-snr_db / 10)`` relative to that unit power.  Channel arithmetic runs
in complex128.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from stereosc.errors import DataError, FramingError, StateError
from stereosc.layers import conv

ERASURE_GAIN = 1e-12


class ChannelKind(str, enum.Enum):
    NOISELESS = "noiseless"
    AWGN = "awgn"
    RAYLEIGH = "rayleigh"


class Coherence(str, enum.Enum):
    PER_SYMBOL = "per_symbol"
    PER_BLOCK = "per_block"


@dataclass(frozen=True)
class ChannelConfig:
    kind: ChannelKind = ChannelKind.NOISELESS
    snr_db: float = math.inf
    coherence: Coherence = Coherence.PER_SYMBOL
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", ChannelKind(self.kind))
        object.__setattr__(self, "coherence", Coherence(self.coherence))
        if self.kind is not ChannelKind.NOISELESS and not math.isfinite(self.snr_db):
            raise ValueError(f"{self.kind.value} channel needs a finite snr_db")

    @property
    def noise_variance(self) -> float:
        if self.kind is ChannelKind.NOISELESS:
            return 0.0
        return 10.0 ** (-self.snr_db / 10.0)

    @property
    def label(self) -> str:
        if self.kind is ChannelKind.NOISELESS:
            return "noiseless"
        return f"{self.kind.value}@{self.snr_db:g}dB"


@dataclass
class SymbolBlock:
    symbols: torch.Tensor  # 1-D complex128
    scale: float = 1.0  # power-normalisation divisor, sent side-band
    zero_power: bool = False
    erasures: int = 0
    redraws: int = 0
    # differentiable copy of ``scale`` while training
    scale_tensor: Optional[torch.Tensor] = field(default=None, repr=False)

    @property
    def length(self) -> int:
        return int(self.symbols.numel())

    @property
    def avg_power(self) -> float:
        if self.length == 0:
            return 0.0
        return float((self.symbols.abs() ** 2).mean())


def reals_to_symbols(reals: torch.Tensor) -> SymbolBlock:
    """Pair consecutive reals into complex symbols and normalise to unit power."""
    x = reals.reshape(-1).to(torch.float64)
    if x.numel() % 2:
        x = torch.cat([x, x.new_zeros(1)])
    sym = torch.complex(x[0::2], x[1::2])
    if sym.numel() == 0:
        return SymbolBlock(sym, 1.0, zero_power=True)
    power = (sym.abs() ** 2).mean()
    if float(power.detach()) == 0.0:
        return SymbolBlock(sym, 1.0, zero_power=True)
    scale = torch.sqrt(power)
    return SymbolBlock(sym / scale, float(scale.detach()), scale_tensor=scale)


def symbols_to_reals(block: SymbolBlock, count: int) -> torch.Tensor:
    if block.length != math.ceil(count / 2):
        raise FramingError(f"block has {block.length} symbols, side-band expects {math.ceil(count / 2)}")
    scale = block.scale_tensor if block.scale_tensor is not None else block.scale
    y = block.symbols * scale
    return torch.stack([y.real, y.imag], 1).reshape(-1)[:count]


def _randn(n: int, gen: torch.Generator) -> torch.Tensor:
    return torch.randn(n, generator=gen, dtype=torch.float64)


def _complex_gaussian(n: int, var: float, gen: torch.Generator) -> torch.Tensor:
    s = math.sqrt(var / 2.0)
    return torch.complex(_randn(n, gen) * s, _randn(n, gen) * s)


def apply_channel(block: SymbolBlock, cfg: ChannelConfig,
                  generator: Optional[torch.Generator] = None) -> SymbolBlock:
    """Pass a block through the configured channel.

    Rayleigh fading assumes perfect CSI and zero-forcing equalisation.
    ``generator`` defaults to one seeded from ``cfg.seed``.
    """
    if cfg.kind is ChannelKind.NOISELESS:
        return SymbolBlock(block.symbols, block.scale, block.zero_power,
                           scale_tensor=block.scale_tensor)
    gen = generator
    if gen is None:
        gen = torch.Generator().manual_seed(cfg.seed)
    x = block.symbols
    n = x.numel()
    erasures = redraws = 0
    if cfg.kind is ChannelKind.AWGN:
        y = x + _complex_gaussian(n, cfg.noise_variance, gen)
    else:
        if cfg.coherence is Coherence.PER_BLOCK:
            h = _complex_gaussian(1, 1.0, gen)
            while float(h.abs()) < ERASURE_GAIN:
                h = _complex_gaussian(1, 1.0, gen)
                redraws += 1
            h = h.expand(n)
        else:
            h = _complex_gaussian(n, 1.0, gen)
        w = _complex_gaussian(n, cfg.noise_variance, gen)
        dead = h.abs() < ERASURE_GAIN
        safe_h = torch.where(dead, torch.ones_like(h), h)
        y = (h * x + w) / safe_h
        erasures = int(dead.sum())
        if erasures:
            y = torch.where(dead, torch.zeros_like(y), y)
    return SymbolBlock(y, block.scale, block.zero_power, erasures, redraws,
                       scale_tensor=block.scale_tensor)


# -- codec network ---------------------------------------------------------


def _conv_bn_relu(ch: int) -> nn.Sequential:
    return nn.Sequential(conv(ch, ch, 3), nn.BatchNorm2d(ch), nn.ReLU())


class _Coded(nn.Module):
    """Learned residual on top of a fixed repetition code."""

    def __init__(self, body: nn.Module, skip: torch.Tensor):
        super().__init__()
        self.body = body
        self.register_buffer("skip", skip)  # (out, in)

    def forward(self, x):
        return self.body(x) + torch.einsum("oi,bihw->bohw", self.skip, x)


class ChannelCodec(nn.Module):
    """Convolutional channel encoder ``3 -> rate`` and decoder ``rate -> 3``.

    Output channel ``j`` repeats input channel ``j % 3`` and the decoder
    averages the copies; the convolutional stacks learn a residual on top and
    start at zero, so an untrained codec is a plain repetition code.
    ``linear=True`` drops the hidden stacks, leaving one conv each way.
    """

    def __init__(self, rate: int = 9, hidden: int = 64, enc_blocks: int = 3,
                 dec_blocks: int = 5, linear: bool = False):
        super().__init__()
        if rate < 3:
            raise ValueError(f"rate must be >= 3, got {rate}")
        self.rate = rate
        rep = torch.zeros(rate, 3)
        rep[torch.arange(rate), torch.arange(rate) % 3] = 1.0
        avg = (rep / rep.sum(0)).t().contiguous()
        if linear:
            enc_body, dec_body = conv(3, rate, 3), conv(rate, 3, 3)
        else:
            enc_body = nn.Sequential(conv(3, hidden, 3), nn.ReLU(),
                                     *[_conv_bn_relu(hidden) for _ in range(enc_blocks)],
                                     conv(hidden, rate, 3))
            dec_body = nn.Sequential(conv(rate, hidden, 3), nn.ReLU(),
                                     *[_conv_bn_relu(hidden) for _ in range(dec_blocks)],
                                     conv(hidden, 3, 3))
        for body in (enc_body, dec_body):
            last = body if isinstance(body, nn.Conv2d) else body[-1]
            nn.init.zeros_(last.weight)
            nn.init.zeros_(last.bias)
        self.encoder = _Coded(enc_body, rep)
        self.decoder = _Coded(dec_body, avg)


def channel_uses(elements: int, rate: int) -> int:
    """Complex channel uses for ``elements`` 3-channel values coded at ``rate`` channels."""
    return math.ceil(elements * rate / 3 / 2)


@dataclass
class StreamResult:
    received: torch.Tensor  # (B, 3, h, w), zero outside support
    blocks: list[SymbolBlock]


def transmit_planes(codec: Optional[ChannelCodec], planes: torch.Tensor,
                    supports: Optional[torch.Tensor], cfg: ChannelConfig,
                    generators: Sequence[torch.Generator]) -> StreamResult:
    """Encode, transmit and decode a stream of planes, one symbol block per group.

    ``planes`` is ``(B * V, 3, h, w)`` holding ``V`` views per sample,
    sample-major (``V = planes.shape[0] // len(generators)``).  ``supports``
    is a ``(B * V, h, w)`` boolean tensor of transmitted cells (``None``:
    everything).  Each sample's ``V`` views travel in one block, the way both
    views of a stream share one block.
    """
    if codec is None:
        raise StateError("channel codec is not initialised")
    groups = len(generators)
    views = planes.shape[0] // groups
    z = codec.encoder(planes)
    r = z.shape[1]
    if supports is None:
        supports = torch.ones(planes.shape[0], *planes.shape[-2:], dtype=torch.bool)
    recv = []
    blocks = []
    for g in range(groups):
        sl = slice(g * views, (g + 1) * views)
        sup = supports[sl]
        sel = z[sl].permute(1, 0, 2, 3)[:, sup]  # (r, cells) channel-major
        count = sel.numel()
        block = reals_to_symbols(sel.reshape(-1))
        rx = apply_channel(block, cfg, generators[g])
        reals = symbols_to_reals(rx, count).to(z.dtype).reshape(r, -1)
        plane = z.new_zeros(r, views, *planes.shape[-2:])
        plane[:, sup] = reals
        recv.append(plane.permute(1, 0, 2, 3))
        blocks.append(rx)
    decoded = codec.decoder(torch.cat(recv, 0))
    return StreamResult(decoded * supports[:, None].to(decoded.dtype), blocks)


def channel_encode(k_l, k_r, g_l, g_r, codec: Optional[ChannelCodec]):
    """Encode one frame's streams into ``(X_K, X_G)`` symbol blocks (no channel applied)."""
    if codec is None:
        raise StateError("channel codec is not initialised")
    with torch.no_grad():
        blocks = []
        for planes, sups in (((k_l.data, k_r.data), (k_l.support, k_r.support)),
                             ((g_l.data, g_r.data), None)):
            z = codec.encoder(torch.stack(planes))
            if sups is not None:
                sup = torch.from_numpy(np.stack(sups))
                reals = z.permute(1, 0, 2, 3)[:, sup]
            else:
                reals = z.permute(1, 0, 2, 3)
            blocks.append(reals_to_symbols(reals.reshape(-1)))
    return blocks[0], blocks[1]


def channel_decode(y_k: SymbolBlock, y_g: SymbolBlock, codec: ChannelCodec,
                   shapes: dict):
    """Decode received blocks back to ``(K_l, K_r, G_l, G_r)`` planes.

    ``shapes`` carries ``key_shape``/``global_shape`` as ``(3, h, w)`` and the
    boolean ``supports`` (left, right) for the key stream.
    """
    r = codec.rate
    out = []
    with torch.no_grad():
        for block, shape, sups in ((y_k, shapes["key_shape"], shapes["supports"]),
                                   (y_g, shapes["global_shape"], None)):
            _, h, w = shape
            sup = (torch.from_numpy(np.stack(sups)) if sups is not None
                   else torch.ones(2, h, w, dtype=torch.bool))
            count = r * int(sup.sum())
            reals = symbols_to_reals(block, count).to(torch.float32).reshape(r, -1)
            plane = torch.zeros(r, 2, h, w)
            plane[:, sup] = reals
            dec = codec.decoder(plane.permute(1, 0, 2, 3)) * sup[:, None]
            out.extend([dec[0], dec[1]])
    return tuple(out)


# -- quantisation and budgets -------------------------------------------------


@dataclass(frozen=True)
class QuantSpec:
    bits: int = 6

    def __post_init__(self):
        if not 1 <= self.bits <= 16:
            raise ValueError(f"bits must be in [1, 16], got {self.bits}")

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1


def quantize(t: np.ndarray, q: QuantSpec) -> tuple[np.ndarray, tuple[float, float]]:
    """Uniform min-max quantisation; returns integer codes and the ``(min, max)`` side-band."""
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise DataError("cannot quantise non-finite values")
    if t.size == 0:
        return np.zeros(0, dtype=np.uint16), (0.0, 0.0)
    lo, hi = float(t.min()), float(t.max())
    if hi == lo:
        return np.zeros(t.shape, dtype=np.uint16), (lo, hi)
    codes = np.rint((t - lo) / (hi - lo) * q.levels)
    return codes.astype(np.uint16), (lo, hi)


def dequantize(codes: np.ndarray, side_band: tuple[float, float], q: QuantSpec) -> np.ndarray:
    lo, hi = side_band
    if hi == lo:
        return np.full(codes.shape, lo, dtype=np.float64)
    return lo + codes.astype(np.float64) * ((hi - lo) / q.levels)


# information bits per complex symbol: code rate x bits per QAM symbol
CLASSICAL_SCHEMES = {
    "ldpc2/3+64qam": (2 / 3) * 6,
    "ldpc1/2+256qam": (1 / 2) * 8,
}


@dataclass
class ChannelBudget:
    elements: int
    source_bits: int
    channel_uses: int
    key_channel_uses: int
    global_channel_uses: int
    side_band_floats: int
    classical_symbols: dict = field(default_factory=dict)


def classical_symbols(bits: int, bits_per_symbol: float) -> int:
    return math.ceil(round(bits / bits_per_symbol, 9))


def channel_use_budget(payload, q: QuantSpec, rate: int) -> ChannelBudget:
    """Source bits, learned-codec channel uses and classical-stack symbol counts."""
    elements = payload.total_elements
    bits = elements * q.bits
    key_uses = channel_uses(payload.key_elements, rate)
    global_uses = channel_uses(payload.global_elements, rate)
    return ChannelBudget(
        elements=elements,
        source_bits=bits,
        channel_uses=key_uses + global_uses,
        key_channel_uses=key_uses,
        global_channel_uses=global_uses,
        side_band_floats=payload.side_band_floats,
        classical_symbols={name: classical_symbols(bits, eff)
                           for name, eff in CLASSICAL_SCHEMES.items()},
    )
