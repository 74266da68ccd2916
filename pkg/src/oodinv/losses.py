"""Training objectives: reconstruction (perceptual proxy + MSE + identity
proxy), non-saturating adversarial terms with R1, and the mask
regularization (binary + area), combined into one reported total.

The perceptual and identity terms use frozen random-weight networks (seeds 0
and 1) instead of pretrained feature extractors: reproducible, dependency
free, and sufficient for relative-improvement measurements. Both accept an
externally supplied extractor for callers who want pretrained features.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import LossConfig
from .errors import ShapeError, ValidationError

PERCEPTUAL_SEED = 0
IDENTITY_SEED = 1


def _seeded_init(module: nn.Module, seed: int) -> nn.Module:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            if p.dim() > 1:
                p.copy_(torch.randn(p.shape, generator=gen) * (p[0].numel() ** -0.5))
            else:
                p.zero_()
    module.requires_grad_(False)
    module.eval()
    return module


class _FeatureStack(nn.Module):
    """Four random conv stages; features are tapped after every stage."""

    def __init__(self):
        super().__init__()
        chans = [3, 16, 32, 64, 64]
        self.stages = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, padding=1) for i in range(4)
        )

    def forward(self, x):
        feats = []
        for i, stage in enumerate(self.stages):
            x = F.leaky_relu(stage(x), 0.2)
            feats.append(x)
            if i < len(self.stages) - 1:
                x = F.avg_pool2d(x, 2)
        return feats


class _EmbeddingNet(nn.Module):
    """Random conv trunk pooled into a fixed-length embedding."""

    def __init__(self, dim=64):
        super().__init__()
        self.conv = nn.ModuleList([
            nn.Conv2d(3, 32, 3, stride=2, padding=1),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.Conv2d(64, 64, 3, stride=2, padding=1),
        ])
        self.proj = nn.Linear(64, dim)

    def forward(self, x):
        for conv in self.conv:
            x = F.leaky_relu(conv(x), 0.2)
        return self.proj(x.mean(dim=(-2, -1)))


_PROXIES: dict = {}


def _proxy(kind: str, dtype: torch.dtype) -> nn.Module:
    key = (kind, dtype)
    if key not in _PROXIES:
        if kind == "perceptual":
            net = _seeded_init(_FeatureStack(), PERCEPTUAL_SEED)
        else:
            net = _seeded_init(_EmbeddingNet(), IDENTITY_SEED)
        _PROXIES[key] = net.to(dtype)
    return _PROXIES[key]


def _pair_check(x, y):
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    return (x.unsqueeze(0), y.unsqueeze(0)) if x.dim() == 3 else (x, y)


def perceptual_proxy(x, y, extractor=None):
    """Mean squared feature distance across the frozen random conv stages."""
    x, y = _pair_check(x, y)
    net = extractor if extractor is not None else _proxy("perceptual", x.dtype)
    fx, fy = net(x), net(y)
    terms = [F.mse_loss(a, b) for a, b in zip(fx, fy)]
    return torch.stack(terms).mean()


def mse(x, y):
    x, y = _pair_check(x, y)
    return F.mse_loss(x, y)


def embed(x, extractor=None):
    """Embedding used by the identity term; deterministic given weights."""
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    net = extractor if extractor is not None else _proxy("identity", x.dtype)
    e = net(x)
    return e.squeeze(0) if single else e


def identity_proxy(x, y, extractor=None):
    """1 - cosine similarity of fixed-network embeddings; lies in [0, 2]."""
    x, y = _pair_check(x, y)
    ex, ey = embed(x, extractor), embed(y, extractor)
    cos = F.cosine_similarity(ex, ey, dim=-1)
    return (1.0 - cos).mean()


def rec_loss(x, x_hat, cfg: LossConfig):
    """Weighted sum of the three reconstruction terms."""
    return (cfg.w_perceptual * perceptual_proxy(x, x_hat)
            + cfg.w_mse * mse(x, x_hat)
            + cfg.w_identity * identity_proxy(x, x_hat))


def bin_loss(mask):
    """Mean of min(M, 1 - M); zero iff the mask is binary everywhere.

    At M = 0.5 the left branch is taken, fixing the subgradient to +1.
    """
    if mask.min() < 0 or mask.max() > 1:
        raise ValidationError("mask values must lie in [0, 1]")
    return torch.where(mask <= 0.5, mask, 1.0 - mask).mean()


def area_loss(mask, phi: float):
    """Hinge on the mean mask intensity above the expected OOD budget phi.

    Minimizing penalizes masks larger than the budget; masks at or below the
    budget incur zero loss (hinge derivative 0 at the boundary).
    """
    if not (0.0 < phi < 1.0):
        raise ValidationError(f"phi must be in (0, 1), got {phi}")
    if mask.min() < 0 or mask.max() > 1:
        raise ValidationError("mask values must lie in [0, 1]")
    return F.relu(mask.mean() - phi)


def mask_loss(levels, cfg: LossConfig, resolutions=None):
    """Sum over levels of lambda_bin * binary term + area term."""
    levels = list(levels)
    if resolutions is None:
        resolutions = sorted(cfg.phi_area)
    phis = cfg.phi_for(resolutions)
    if len(levels) != len(phis):
        raise ValidationError(
            f"{len(levels)} mask levels but {len(phis)} phi_area entries"
        )
    total = levels[0].new_zeros(())
    for mask, phi in zip(levels, phis):
        total = total + cfg.lambda_bin * bin_loss(mask) + area_loss(mask, phi)
    return total


def adversarial_losses(real_logits, fake_logits, gamma: float = 0.0,
                       real_grad_sq=None):
    """Non-saturating logistic GAN terms.

    Returns (g_term, d_term): g_term = softplus(-fake); d_term =
    softplus(fake) + softplus(-real) plus gamma/2 times the R1 gradient
    penalty when supplied.
    """
    if not (torch.isfinite(real_logits).all() and torch.isfinite(fake_logits).all()):
        raise ValidationError("adversarial logits must be finite")
    g_term = F.softplus(-fake_logits).mean()
    d_term = F.softplus(fake_logits).mean() + F.softplus(-real_logits).mean()
    if gamma > 0.0:
        if real_grad_sq is None:
            raise ValidationError("gamma > 0 requires the real-batch gradient penalty")
        d_term = d_term + 0.5 * gamma * real_grad_sq
    return g_term, d_term


def r1_gradient_penalty(discriminator, x_real):
    """Mean squared gradient norm of the discriminator at real samples."""
    x = x_real.detach().requires_grad_(True)
    logits = discriminator(x)
    (grad,) = torch.autograd.grad(logits.sum(), x, create_graph=True)
    return grad.pow(2).sum(dim=(1, 2, 3)).mean()


@dataclass
class LossReport:
    """Flat name -> value record of every objective term for one step."""

    terms: dict

    def audit(self, tol: float = 1e-6) -> bool:
        lhs = self.terms["total"]
        rhs = self.terms["rec"] + self.terms["adv_g"] + self.terms["mask"]
        return abs(lhs - rhs) <= tol * max(1.0, abs(lhs))

    def to_line(self) -> str:
        import json

        return json.dumps({k: float(v) for k, v in self.terms.items()}, sort_keys=True)


def total_loss(x, x_hat, mask_levels, real_logits, fake_logits, cfg: LossConfig,
               resolutions=None, real_grad_sq=None):
    """Assemble the full objective; returns (total tensor, LossReport).

    The total combines the reconstruction, weighted generator-side
    adversarial and mask terms; the discriminator term is reported but not
    part of the total.
    """
    per = perceptual_proxy(x, x_hat)
    l2 = mse(x, x_hat)
    ident = identity_proxy(x, x_hat)
    rec = cfg.w_perceptual * per + cfg.w_mse * l2 + cfg.w_identity * ident

    g_raw, d_term = adversarial_losses(real_logits, fake_logits,
                                       gamma=cfg.r1_gamma if real_grad_sq is not None else 0.0,
                                       real_grad_sq=real_grad_sq)
    adv_g = cfg.w_adv * g_raw

    levels = list(mask_levels)
    if resolutions is None:
        resolutions = sorted(cfg.phi_area)
    phis = cfg.phi_for(resolutions)
    if len(levels) != len(phis):
        raise ValidationError(
            f"{len(levels)} mask levels but {len(phis)} phi_area entries"
        )
    terms = {}
    mask_total = x.new_zeros(()) if isinstance(x, torch.Tensor) else torch.zeros(())
    for res, mask, phi in zip(resolutions, levels, phis):
        b = cfg.lambda_bin * bin_loss(mask)
        a = area_loss(mask, phi)
        terms[f"bin_{res}"] = float(b.detach())
        terms[f"area_{res}"] = float(a.detach())
        mask_total = mask_total + b + a

    total = rec + adv_g + mask_total
    terms.update(
        per=float(per.detach()),
        mse=float(l2.detach()),
        id=float(ident.detach()),
        rec=float(rec.detach()),
        adv_g=float(adv_g.detach()),
        adv_d=float(d_term.detach()),
        mask=float(mask_total.detach()),
        total=float(total.detach()),
    )
    return total, LossReport(terms=terms)
