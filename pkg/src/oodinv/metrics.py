"""Image quality metrics over [-1, 1] images (dynamic range 2)."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .errors import ShapeError

PSNR_CAP_DB = 99.0
DATA_RANGE = 2.0


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 for identical inputs."""
    if a.shape != b.shape:
        raise ShapeError(f"shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    err = float(torch.mean((a.double() - b.double()) ** 2))
    if err <= 0.0:
        return PSNR_CAP_DB
    value = 10.0 * math.log10(DATA_RANGE ** 2 / err)
    return min(value, PSNR_CAP_DB)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


_WINDOW = _gaussian_window()


def ssim(a: torch.Tensor, b: torch.Tensor, k1: float = 0.01, k2: float = 0.03) -> float:
    """Structural similarity with an 11x11 Gaussian window, sigma 1.5.

    Channels are scored independently and averaged; the window is applied
    without padding.
    """
    if a.shape != b.shape:
        raise ShapeError(f"shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    x = a.double()
    y = b.double()
    if x.dim() == 2:
        x = x.unsqueeze(0)
        y = y.unsqueeze(0)
    if x.dim() == 3:
        x = x.unsqueeze(0)
        y = y.unsqueeze(0)
    c = x.shape[1]
    win = _WINDOW.to(x.device).expand(c, 1, -1, -1)

    mu_x = F.conv2d(x, win, groups=c)
    mu_y = F.conv2d(y, win, groups=c)
    xx = F.conv2d(x * x, win, groups=c) - mu_x ** 2
    yy = F.conv2d(y * y, win, groups=c) - mu_y ** 2
    xy = F.conv2d(x * y, win, groups=c) - mu_x * mu_y

    c1 = (k1 * DATA_RANGE) ** 2
    c2 = (k2 * DATA_RANGE) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
    return float((num / den).mean())


def mask_iou(pred: torch.Tensor, gt: torch.Tensor, threshold: float = 0.5):
    """IoU of the thresholded mask against a binary ground truth.

    Returns None when the ground truth has no positive pixels (undefined).
    """
    if pred.shape != gt.shape:
        raise ShapeError(f"shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    p = pred > threshold
    g = gt > 0.5
    if not bool(g.any()):
        return None
    union = (p | g).double().sum()
    inter = (p & g).double().sum()
    return float(inter / union)
