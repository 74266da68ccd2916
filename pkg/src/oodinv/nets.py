"""Miniature style-based generator, image-to-latent encoder and discriminator.

The generator is a reduced modulated-convolution synthesis network: a learned
constant at 4x4, bilinear upsampling between blocks, one style vector per
layer taken from a (num_style_slots, style_dim) latent. Per-layer noise is
intentionally absent, so synthesis is a pure function of (weights, latent,
hook) and every inversion test can assert bit-exact repeatability.

The encoder is a strided convolutional pyramid with a style head per slot and
1x1 taps emitting a feature pyramid at every alignment resolution; the taps
are guaranteed to match the generator's channel schedule so encoder and
generator features can always be concatenated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import NetConfig
from .errors import ShapeError, ValidationError


@dataclass
class LatentCode:
    """One style vector per generator layer; the sole control of synthesis."""

    styles: torch.Tensor  # (num_style_slots, style_dim)

    def validate(self, cfg: NetConfig) -> "LatentCode":
        want = (cfg.num_style_slots, cfg.style_dim)
        if tuple(self.styles.shape) != want:
            raise ShapeError(f"latent must have shape {want}, got {tuple(self.styles.shape)}")
        if not torch.isfinite(self.styles).all():
            raise ValidationError("latent contains non-finite entries")
        return self

    def batched(self) -> torch.Tensor:
        return self.styles.unsqueeze(0)


@dataclass
class FeaturePyramid:
    """Feature maps indexed by resolution; role is 'f' (encoder) or 'g' (generator)."""

    levels: dict = field(default_factory=dict)  # resolution -> (C, H, W)
    role: str = "g"

    def validate(self, cfg: NetConfig) -> "FeaturePyramid":
        for res, feat in self.levels.items():
            if tuple(feat.shape[-2:]) != (res, res):
                raise ShapeError(f"level {res} has spatial size {tuple(feat.shape[-2:])}")
            if feat.shape[-3] != cfg.channels[res]:
                raise ShapeError(
                    f"level {res} has {feat.shape[-3]} channels, schedule says {cfg.channels[res]}"
                )
        return self

    def resolutions(self) -> tuple:
        return tuple(sorted(self.levels))


def validate_image(x: torch.Tensor, resolution: int) -> torch.Tensor:
    """Check an image tensor is (3, R, R) or (B, 3, R, R) with finite values."""
    if x.dim() not in (3, 4) or x.shape[-3] != 3 or x.shape[-2:] != (resolution, resolution):
        raise ShapeError(
            f"expected image shaped (3, {resolution}, {resolution}), got {tuple(x.shape)}"
        )
    if not torch.isfinite(x).all():
        raise ValidationError("image contains non-finite values")
    return x


class EqualLinear(nn.Module):
    """Linear layer with runtime weight scaling (equalized learning rate)."""

    def __init__(self, in_features, out_features, bias_init=0.0, lr_mul=1.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features) / lr_mul)
        self.bias = nn.Parameter(torch.full((out_features,), float(bias_init)))
        self.scale = lr_mul / math.sqrt(in_features)
        self.lr_mul = lr_mul

    def forward(self, x):
        return F.linear(x, self.weight * self.scale, self.bias * self.lr_mul)


class EqualConv2d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0):
        super().__init__()
        self.weight = nn.Parameter(
            torch.randn(out_channels, in_channels, kernel_size, kernel_size)
        )
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.scale = math.sqrt(2.0 / (in_channels * kernel_size ** 2))
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return F.conv2d(x, self.weight * self.scale, self.bias, self.stride, self.padding)


class ModulatedConv2d(nn.Module):
    """Style-modulated convolution with optional demodulation.

    Implemented in the activation-scaling form: scale the input channel-wise
    by the style, run one shared convolution, then rescale outputs by the
    analytic demodulation coefficient. This is algebraically identical to
    building per-sample weights but avoids grouped convolutions.
    """

    def __init__(self, in_channels, out_channels, kernel_size, style_dim, demodulate=True):
        super().__init__()
        self.weight = nn.Parameter(
            torch.randn(out_channels, in_channels, kernel_size, kernel_size)
        )
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.affine = EqualLinear(style_dim, in_channels, bias_init=1.0)
        self.scale = 1.0 / math.sqrt(in_channels * kernel_size ** 2)
        self.padding = kernel_size // 2
        self.demodulate = demodulate

    def forward(self, x, w):
        # w: (B, style_dim) style slot for this layer
        style = self.affine(w)  # (B, in)
        weight = self.weight * self.scale
        out = F.conv2d(x * style[:, :, None, None], weight, padding=self.padding)
        if self.demodulate:
            w2 = weight.pow(2).sum(dim=(2, 3))  # (out, in)
            sigma = (style.pow(2) @ w2.t() + 1e-8).rsqrt()  # (B, out)
            out = out * sigma[:, :, None, None]
        return out + self.bias.view(1, -1, 1, 1)


class StyledConv(nn.Module):
    def __init__(self, in_channels, out_channels, style_dim):
        super().__init__()
        self.conv = ModulatedConv2d(in_channels, out_channels, 3, style_dim)

    def forward(self, x, w):
        return F.leaky_relu(self.conv(x, w), 0.2)


class SynthesisBlock(nn.Module):
    """Bilinear 2x upsample followed by two styled convolutions."""

    def __init__(self, in_channels, out_channels, style_dim):
        super().__init__()
        self.conv0 = StyledConv(in_channels, out_channels, style_dim)
        self.conv1 = StyledConv(out_channels, out_channels, style_dim)

    def forward(self, x, w0, w1):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.conv0(x, w0)
        return self.conv1(x, w1)


class ToRGB(nn.Module):
    """Output convolution mapping the last feature map to a 3-channel image."""

    def __init__(self, in_channels, style_dim):
        super().__init__()
        self.conv = ModulatedConv2d(in_channels, 3, 1, style_dim, demodulate=False)

    def forward(self, x, w, clamp=True):
        out = self.conv(x, w)
        return torch.tanh(out) if clamp else out


class MappingNetwork(nn.Module):
    def __init__(self, style_dim, num_layers=3):
        super().__init__()
        self.layers = nn.ModuleList(
            EqualLinear(style_dim, style_dim) for _ in range(num_layers)
        )

    def forward(self, z):
        x = z * (z.pow(2).mean(dim=-1, keepdim=True) + 1e-8).rsqrt()
        for layer in self.layers:
            x = F.leaky_relu(layer(x), 0.2)
        return x


class Generator(nn.Module):
    """Synthesis network with feature taps at every alignment resolution."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch = cfg.channels
        self.mapping = MappingNetwork(cfg.style_dim)
        self.register_buffer("w_avg", torch.zeros(cfg.style_dim))
        self.const = nn.Parameter(torch.randn(1, ch[4], 4, 4))
        self.conv_in = StyledConv(ch[4], ch[4], cfg.style_dim)
        self.blocks = nn.ModuleList()
        prev = 4
        for res in cfg.synthesis_resolutions:
            self.blocks.append(SynthesisBlock(ch[prev], ch[res], cfg.style_dim))
            prev = res
        self.to_rgb = ToRGB(ch[cfg.output_resolution], cfg.style_dim)

    @property
    def num_style_slots(self):
        return self.cfg.num_style_slots

    def update_w_avg(self, w_batch, decay=0.995):
        with torch.no_grad():
            self.w_avg.lerp_(w_batch.detach().mean(dim=0), 1.0 - decay)

    def map_latents(self, z, truncation=1.0):
        """Map (B, style_dim) noise to (B, slots, style_dim) broadcast styles."""
        if not torch.isfinite(z).all():
            raise ValidationError("latent noise contains non-finite values")
        if not (0.0 < truncation <= 1.0):
            raise ValidationError(f"truncation must be in (0, 1], got {truncation}")
        w = self.mapping(z)
        if truncation != 1.0:
            w = self.w_avg + truncation * (w - self.w_avg)
        return w.unsqueeze(1).repeat(1, self.num_style_slots, 1)

    def forward(self, ws, layer_hook=None):
        """Run synthesis for (B, slots, style_dim) styles.

        Returns the image in [-1, 1] and the dict of pre-hook generator
        features at every alignment resolution. A hook, when given, is called
        as hook(resolution, features) and its output feeds the next block; it
        must preserve the feature shape.
        """
        if ws.dim() != 3 or ws.shape[1] != self.num_style_slots:
            raise ShapeError(
                f"styles must be (B, {self.num_style_slots}, {self.cfg.style_dim}), "
                f"got {tuple(ws.shape)}"
            )
        x = self.const.expand(ws.shape[0], -1, -1, -1)
        x = self.conv_in(x, ws[:, 0])
        pyramid = {}
        slot = 1
        for res, block in zip(self.cfg.synthesis_resolutions, self.blocks):
            x = block(x, ws[:, slot], ws[:, slot + 1])
            slot += 2
            if res in self.cfg.align_resolutions:
                pyramid[res] = x
                if layer_hook is not None:
                    hooked = layer_hook(res, x)
                    if hooked.shape != x.shape:
                        raise ShapeError(
                            f"hook at level {res} returned shape {tuple(hooked.shape)}, "
                            f"expected {tuple(x.shape)}"
                        )
                    x = hooked
        img = self.to_rgb(x, ws[:, slot])
        return img, pyramid


class EncoderBlock(nn.Module):
    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv0 = EqualConv2d(in_channels, in_channels, 3, padding=1)
        self.conv1 = EqualConv2d(in_channels, out_channels, 3, stride=2, padding=1)

    def forward(self, x):
        x = F.leaky_relu(self.conv0(x), 0.2)
        return F.leaky_relu(self.conv1(x), 0.2)


class Encoder(nn.Module):
    """Strided pyramid predicting the latent plus per-resolution feature taps."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch = cfg.channels
        res_chain = list(reversed(cfg.synthesis_resolutions))  # e.g. 64, 32, ..., 8
        self.from_rgb = EqualConv2d(3, ch[res_chain[0]], 1)
        self.blocks = nn.ModuleList()
        self.taps = nn.ModuleDict()
        for res in res_chain:
            self.blocks.append(EncoderBlock(ch[res], ch[res // 2]))
            if res // 2 in cfg.align_resolutions:
                self.taps[str(res // 2)] = EqualConv2d(ch[res // 2], ch[res // 2], 1)
        hidden = 256
        self.head_hidden = EqualLinear(ch[4] * 16, hidden)
        self.head_out = EqualLinear(hidden, cfg.num_style_slots * cfg.style_dim)

    def forward(self, x):
        """Encode (B, 3, R, R) images to ((B, slots, dim) styles, feature dict)."""
        validate_image(x, self.cfg.output_resolution)
        x = F.leaky_relu(self.from_rgb(x), 0.2)
        pyramid = {}
        res = self.cfg.output_resolution
        for block in self.blocks:
            x = block(x)
            res //= 2
            if res in self.cfg.align_resolutions:
                pyramid[res] = self.taps[str(res)](x)
        h = F.leaky_relu(self.head_hidden(x.flatten(1)), 0.2)
        ws = self.head_out(h).view(-1, self.cfg.num_style_slots, self.cfg.style_dim)
        return ws, pyramid


class MinibatchStd(nn.Module):
    """Append the cross-sample feature deviation as an extra channel.

    Gives the discriminator a handle on sample diversity, the usual guard
    against generator mode collapse. Batches of one see a constant channel,
    so single-image logits stay deterministic.
    """

    def __init__(self, group_size=4):
        super().__init__()
        self.group_size = group_size

    def forward(self, x):
        n, _, h, w = x.shape
        g = min(self.group_size, n)
        while n % g:
            g -= 1
        y = x.view(g, n // g, -1)
        y = y - y.mean(dim=0, keepdim=True)
        y = (y.square().mean(dim=0) + 1e-8).sqrt().mean(dim=1)  # one value per group
        y = y.repeat(g)[:, None, None, None].expand(n, 1, h, w)
        return torch.cat((x, y), dim=1)


class Discriminator(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch = cfg.channels
        res_chain = list(reversed(cfg.synthesis_resolutions))
        self.from_rgb = EqualConv2d(3, ch[res_chain[0]], 1)
        self.blocks = nn.ModuleList(
            EncoderBlock(ch[res], ch[res // 2]) for res in res_chain
        )
        self.mb_std = MinibatchStd()
        self.final_conv = EqualConv2d(ch[4] + 1, ch[4], 3, padding=1)
        self.head = EqualLinear(ch[4] * 16, 1)

    def forward(self, x):
        validate_image(x, self.cfg.output_resolution)
        x = F.leaky_relu(self.from_rgb(x), 0.2)
        for block in self.blocks:
            x = block(x)
        x = self.mb_std(x)
        x = F.leaky_relu(self.final_conv(x), 0.2)
        return self.head(x.flatten(1)).squeeze(1)
