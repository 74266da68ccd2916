"""Invertibility decomposition and RGB blending.

The mask m marks out-of-domain pixels: decomposition splits the input into
x_out = x * m and x_in = x * (1 - m); blending keeps the masked input pixels
and fills the rest from the generated image. All math happens in [-1, 1]
float space; 8-bit quantization only occurs at file I/O.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ShapeError, ValidationError


def _check(x: torch.Tensor, m: torch.Tensor):
    if x.shape[-2:] != m.shape[-2:]:
        raise ShapeError(
            f"image {tuple(x.shape[-2:])} and mask {tuple(m.shape[-2:])} sizes differ"
        )
    if m.min() < 0 or m.max() > 1:
        raise ValidationError("mask values must lie in [0, 1]")


@dataclass
class Decomposition:
    """The (x_out, x_in, m) split of an input image."""

    x_out: torch.Tensor
    x_in: torch.Tensor
    mask: torch.Tensor


def decompose(x: torch.Tensor, m: torch.Tensor) -> Decomposition:
    """Split an image into its masked (OOD) and unmasked (invertible) parts."""
    _check(x, m)
    mask = m.unsqueeze(-3) if m.dim() == x.dim() - 1 else m
    return Decomposition(x_out=x * mask, x_in=x * (1 - mask), mask=m)


def blend(x: torch.Tensor, x_in_hat: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Composite masked input pixels over the generated image.

    Returns x * m + x_in_hat * (1 - m), clamped to [-1, 1]. The endpoints are
    exact: m == 1 returns x bit-for-bit, m == 0 returns x_in_hat.
    """
    if x.shape != x_in_hat.shape:
        raise ShapeError(
            f"input {tuple(x.shape)} and generated {tuple(x_in_hat.shape)} shapes differ"
        )
    _check(x, m)
    mask = m.unsqueeze(-3) if m.dim() == x.dim() - 1 else m
    out = x * mask + x_in_hat * (1 - mask)
    return out.clamp(-1.0, 1.0)
