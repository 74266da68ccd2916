"""Spatial alignment and masking: per-level flow/mask prediction, the
iterative alignment recurrence, bilinear warping, and cross-resolution mask
gathering.

Conventions fixed here and relied on by the tests:

* Flow fields are in normalized coordinates where the image spans [-1, 1] in
  each axis, so a displacement of one pixel equals 2 / width.
* Warping is gather-style: output(p) = input(p + flow(p)), with bilinear
  interpolation and border padding (out-of-range samples clamp to the edge).
* The mask recurrence within a level is M <- m * M + M * (1 - M); across
  levels the gathered mask follows M~ <- M~ * (up(M) - M~ + 1). Both maps
  preserve [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import SammConfig
from .errors import ShapeError, ValidationError
from .nets import EqualConv2d

# absorb floating-point drift up to this much outside [0, 1]; anything worse
# than RANGE_ERROR_TOL indicates a logic bug and raises
RANGE_CLAMP_TOL = 1e-7
RANGE_ERROR_TOL = 1e-5


def clamp_unit(values: torch.Tensor, what: str = "mask") -> torch.Tensor:
    """Clamp to [0, 1], raising if any value is out of range beyond round-off."""
    lo = values.min().item() if values.numel() else 0.0
    hi = values.max().item() if values.numel() else 0.0
    if lo < -RANGE_ERROR_TOL or hi > 1.0 + RANGE_ERROR_TOL:
        raise ValidationError(f"{what} left [0, 1] by more than {RANGE_ERROR_TOL}: "
                              f"min={lo:.3e} max={hi:.3e}")
    return values.clamp(0.0, 1.0)


def _as_batched(feature, *flows):
    """Promote (C, H, W) / (H, W) inputs to batched form; return unsqueeze flag."""
    single = feature.dim() == 3
    if single:
        feature = feature.unsqueeze(0)
        flows = tuple(f.unsqueeze(0) for f in flows)
    return single, feature, flows


def grid_sample(feature: torch.Tensor, dx: torch.Tensor, dy: torch.Tensor) -> torch.Tensor:
    """Warp features along a flow field.

    feature: (C, H, W) or (B, C, H, W); dx, dy: matching (H, W) or (B, H, W)
    displacements in normalized coordinates. Differentiable in both feature
    and flow.
    """
    single, feature, (dx, dy) = _as_batched(feature, dx, dy)
    b, _, h, w = feature.shape
    if dx.shape[-2:] != (h, w) or dy.shape[-2:] != (h, w):
        raise ShapeError(
            f"flow shape {tuple(dx.shape[-2:])} does not match feature {(h, w)}"
        )
    if not (torch.isfinite(dx).all() and torch.isfinite(dy).all()):
        raise ValidationError("flow contains non-finite values")
    dtype, device = feature.dtype, feature.device
    xs = (torch.arange(w, dtype=dtype, device=device) * 2 + 1) / w - 1
    ys = (torch.arange(h, dtype=dtype, device=device) * 2 + 1) / h - 1
    base_y, base_x = torch.meshgrid(ys, xs, indexing="ij")
    grid = torch.stack(
        (base_x.unsqueeze(0) + dx, base_y.unsqueeze(0) + dy), dim=-1
    )  # (B, H, W, 2)
    out = F.grid_sample(
        feature, grid, mode="bilinear", padding_mode="border", align_corners=False
    )
    return out.squeeze(0) if single else out


def accumulate_mask(m_new: torch.Tensor, m_prev: torch.Tensor | None,
                    is_first: bool, alt_update: bool = False) -> torch.Tensor:
    """One step of the within-level mask recurrence."""
    if is_first:
        return clamp_unit(m_new, "mask update input")
    if m_prev is None:
        raise ValidationError("previous mask required when is_first is false")
    if m_new.shape != m_prev.shape:
        raise ShapeError(f"mask shapes differ: {tuple(m_new.shape)} vs {tuple(m_prev.shape)}")
    for t, name in ((m_new, "new mask"), (m_prev, "accumulated mask")):
        if t.min() < -RANGE_ERROR_TOL or t.max() > 1.0 + RANGE_ERROR_TOL:
            raise ValidationError(f"{name} out of [0, 1]")
    if alt_update:
        out = m_new * m_prev + m_new * (1 - m_prev)
    else:
        out = m_prev * (m_new + 1 - m_prev)
    return clamp_unit(out, "mask update")


class SammLevel(nn.Module):
    """Flow-delta and mask predictor for one alignment resolution.

    The same weights are reused for every iteration within the level;
    separate levels get separate instances.
    """

    def __init__(self, channels: int, cfg: SammConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.conv0 = EqualConv2d(2 * channels, channels, 3, padding=1)
        self.conv1 = EqualConv2d(channels, channels, 3, padding=1)
        self.head = EqualConv2d(channels, 3, 3, padding=1)
        # start masks just under the area budget: the reconstruction error
        # can then steer mass toward uninvertible regions before the
        # binarization pressure locks the spatial layout in
        with torch.no_grad():
            self.head.bias[2] = -1.0

    def predict_step(self, f, g_prev):
        """Predict (dx, dy, mask) from concatenated encoder/generator features."""
        single = f.dim() == 3
        if single:
            f = f.unsqueeze(0)
            g_prev = g_prev.unsqueeze(0)
        if f.shape[-2:] != g_prev.shape[-2:]:
            raise ShapeError(
                f"feature sizes differ: {tuple(f.shape[-2:])} vs {tuple(g_prev.shape[-2:])}"
            )
        h = F.leaky_relu(self.conv0(torch.cat((f, g_prev), dim=1)), 0.2)
        h = F.leaky_relu(self.conv1(h), 0.2)
        out = self.head(h)
        dx = torch.tanh(out[:, 0]) * self.cfg.max_displacement
        dy = torch.tanh(out[:, 1]) * self.cfg.max_displacement
        mask = torch.sigmoid(out[:, 2])
        if single:
            dx, dy, mask = dx.squeeze(0), dy.squeeze(0), mask.squeeze(0)
        return dx, dy, mask

    forward = predict_step


@dataclass
class AlignResult:
    aligned: torch.Tensor  # g after the final warp-and-blend
    mask: torch.Tensor     # accumulated mask M after the last iteration
    dx: torch.Tensor       # accumulated flow
    dy: torch.Tensor


def iterative_align(predict_step, f, g, cfg: SammConfig,
                    n_override: int | None = None,
                    skip_warp: bool = False) -> AlignResult:
    """Run the cyclic flow/mask prediction for one level.

    Each iteration predicts a flow delta and mask from (f, g_prev),
    accumulates both, and re-blends: the warp always resamples the original
    g with the accumulated flow. `skip_warp` replaces the warp with identity
    (mask prediction still runs), used by the alignment ablation.
    """
    cfg.validate()
    if f.shape[-2:] != g.shape[-2:]:
        raise ShapeError(f"encoder/generator sizes differ: "
                         f"{tuple(f.shape[-2:])} vs {tuple(g.shape[-2:])}")
    n = cfg.n_iters if n_override is None else int(n_override)
    if n < 1:
        raise ValidationError(f"iteration count must be >= 1, got {n}")
    g_cur = g
    mask = None
    dx = dy = None
    for j in range(n):
        ddx, ddy, m = predict_step(f, g_cur)
        dx = ddx if dx is None else dx + ddx
        dy = ddy if dy is None else dy + ddy
        mask = accumulate_mask(m, mask, is_first=(j == 0), alt_update=cfg.alt_mask_update)
        warped = g if skip_warp else grid_sample(g, dx, dy)
        mask_c = mask.unsqueeze(-3)
        g_cur = warped * mask_c + g * (1 - mask_c)
    return AlignResult(aligned=g_cur, mask=mask, dx=dx, dy=dy)


def apply_alignment(g, dx, dy, mask, skip_warp: bool = False) -> torch.Tensor:
    """Re-apply a recorded (flow, mask) pair to new features.

    This mirrors the final blend of `iterative_align` exactly, so replaying a
    recorded alignment onto the unedited features reproduces the original
    aligned output bit-for-bit.
    """
    warped = g if skip_warp else grid_sample(g, dx, dy)
    mask_c = mask.unsqueeze(-3)
    return warped * mask_c + g * (1 - mask_c)


def upsample_mask(mask: torch.Tensor, target_resolution: int) -> torch.Tensor:
    """Bilinearly upsample a mask level to `target_resolution`."""
    h = mask.shape[-1]
    if target_resolution < h:
        raise ValidationError(
            f"cannot upsample mask from {h} down to {target_resolution}"
        )
    if target_resolution == h:
        return mask
    single = mask.dim() == 2
    m = mask[None, None] if single else mask.unsqueeze(1)
    out = F.interpolate(m, size=(target_resolution, target_resolution),
                        mode="bilinear", align_corners=False)
    out = clamp_unit(out, "upsampled mask")
    return out[0, 0] if single else out.squeeze(1)


def gather_masks(levels, target_resolution: int) -> torch.Tensor:
    """Merge per-level masks (ordered low to high resolution) into one mask.

    The running mask starts as the upsampled lowest level and is updated per
    level with M~ <- M~ * (up(M) - M~ + 1); pixels the running mask has
    driven to zero stay zero.
    """
    levels = list(levels)
    if not levels:
        raise ValidationError("gather_masks needs at least one mask level")
    gathered = upsample_mask(levels[0], target_resolution)
    for level in levels[1:]:
        up = upsample_mask(level, target_resolution)
        gathered = gathered * (up - gathered + 1)
        gathered = clamp_unit(gathered, "gathered mask")
    return gathered


def save_mask_pngs(mask_levels: dict, gathered: torch.Tensor, out_dir) -> list:
    """Dump per-level masks and the gathered mask as 8-bit grayscale PNGs."""
    from pathlib import Path

    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    items = [(f"mask_r{res}.png", m) for res, m in sorted(mask_levels.items())]
    items.append(("mask_gathered.png", gathered))
    for name, mask in items:
        arr = np.round(mask.detach().cpu().numpy() * 255.0).astype(np.uint8)
        path = out_dir / name
        Image.fromarray(arr, mode="L").save(path)
        written.append(path)
    return written
