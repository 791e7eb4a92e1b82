"""Reconstruction losses used by the staged training schedule."""

from __future__ import annotations

import torch

from stereosc.errors import ShapeError

DEFAULT_EPSILON = 1e-3
DEFAULT_LAMBDA = 0.5


def _check(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def charbonnier(i: torch.Tensor, i_hat: torch.Tensor, epsilon: float = DEFAULT_EPSILON,
                per_pixel: bool = False) -> torch.Tensor:
    """``sqrt(||i - i_hat||^2 + eps^2)`` over the whole tensor.

    ``per_pixel=True`` gives the elementwise-mean form ``mean(sqrt(d^2 + eps^2))``.
    """
    _check(i, i_hat)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    d = i - i_hat
    if per_pixel:
        return torch.sqrt(d * d + epsilon ** 2).mean()
    return torch.sqrt((d * d).sum() + epsilon ** 2)


def masked_charbonnier(s: torch.Tensor, s_hat: torch.Tensor, mask: torch.Tensor,
                       epsilon: float = DEFAULT_EPSILON, per_pixel: bool = False) -> torch.Tensor:
    """Charbonnier between ``mask * s`` and ``mask * s_hat``; ``mask`` broadcasts over channels."""
    _check(s, s_hat)
    try:
        torch.broadcast_shapes(mask.shape, s.shape)
    except RuntimeError:
        raise ShapeError(f"mask {tuple(mask.shape)} does not broadcast to {tuple(s.shape)}") from None
    return charbonnier(mask * s, mask * s_hat, epsilon, per_pixel)


def hybrid_masked_charbonnier(i: torch.Tensor, i_hat: torch.Tensor, mask: torch.Tensor,
                              epsilon: float = DEFAULT_EPSILON, lam: float = DEFAULT_LAMBDA,
                              per_pixel: bool = False) -> torch.Tensor:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return (masked_charbonnier(i, i_hat, mask, epsilon, per_pixel)
            + lam * charbonnier(i, i_hat, epsilon, per_pixel))


def mse_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    _check(x, x_hat)
    d = x - x_hat
    return (d * d).mean()
