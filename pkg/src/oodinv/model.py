"""The full inversion model: frozen-weight bundle of generator, encoder,
discriminator and per-level alignment modules, plus the end-to-end pipeline
(encode, aligned synthesis, mask gathering, blending) and its editing replay.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import checkpoint as ckpt
from .compose import blend
from .config import NetConfig, SammConfig
from .errors import ShapeError, ValidationError
from .nets import (Discriminator, Encoder, FeaturePyramid, Generator,
                   LatentCode, validate_image)
from .samm import SammLevel, apply_alignment, gather_masks, iterative_align


@dataclass
class InversionOutputs:
    """Everything one aligned inversion pass produces (batched)."""

    ws: torch.Tensor          # (B, slots, dim)
    f_levels: dict            # res -> (B, C, r, r) encoder features
    g_levels: dict            # res -> (B, C, r, r) pre-alignment generator features
    masks: dict               # res -> (B, r, r) accumulated masks
    flows: dict               # res -> (dx, dy) accumulated flow, each (B, r, r)
    x_in_hat: torch.Tensor    # (B, 3, R, R) generated image
    gathered: torch.Tensor    # (B, R, R) full-resolution mask
    x_hat: torch.Tensor       # (B, 3, R, R) blended result
    n_iters: int
    skip_alignment: bool


class InversionModel:
    """Bundle of all networks behind the inversion/editing pipelines.

    Weights are only mutated by the training loops; everywhere else the
    model is treated as an immutable snapshot.
    """

    def __init__(self, net_cfg: NetConfig | None = None,
                 samm_cfg: SammConfig | None = None, seed: int = 0):
        self.net_cfg = (net_cfg or NetConfig()).validate()
        self.samm_cfg = (samm_cfg or SammConfig()).validate()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.generator = Generator(self.net_cfg)
            self.encoder = Encoder(self.net_cfg)
            self.discriminator = Discriminator(self.net_cfg)
            self.samm = torch.nn.ModuleDict({
                str(res): SammLevel(self.net_cfg.channels[res], self.samm_cfg)
                for res in self.net_cfg.align_resolutions
            })

    # ------------------------------------------------------------------
    # single-sample operations
    # ------------------------------------------------------------------

    @property
    def resolution(self) -> int:
        return self.net_cfg.output_resolution

    def modules(self) -> dict:
        return {"g": self.generator, "e": self.encoder,
                "d": self.discriminator, "samm": self.samm}

    def to(self, dtype):
        for m in self.modules().values():
            m.to(dtype)
        return self

    def map_latent(self, z: torch.Tensor, truncation: float = 1.0) -> LatentCode:
        """Map a (style_dim,) noise vector to a latent code."""
        if z.dim() != 1 or z.shape[0] != self.net_cfg.style_dim:
            raise ShapeError(f"noise must be ({self.net_cfg.style_dim},), got {tuple(z.shape)}")
        ws = self.generator.map_latents(z.unsqueeze(0), truncation=truncation)
        return LatentCode(styles=ws.squeeze(0)).validate(self.net_cfg)

    def synthesize(self, w: LatentCode, layer_hook=None):
        """Generate an image and the pre-hook feature pyramid for one latent."""
        w.validate(self.net_cfg)
        hook = None
        if layer_hook is not None:
            def hook(res, g):
                out = layer_hook(res, g.squeeze(0))
                return out.unsqueeze(0)
        img, levels = self.generator(w.batched(), layer_hook=hook)
        pyr = FeaturePyramid(levels={r: t.squeeze(0) for r, t in levels.items()},
                             role="g").validate(self.net_cfg)
        return img.squeeze(0), pyr

    def to_rgb(self, g_last: torch.Tensor, w: LatentCode, clamp: bool = True):
        """Map the final feature map to a 3-channel image."""
        r = self.resolution
        if g_last.shape[-2:] != (r, r):
            raise ShapeError(f"final features must be at {r}x{r}, got {tuple(g_last.shape[-2:])}")
        single = g_last.dim() == 3
        g = g_last.unsqueeze(0) if single else g_last
        out = self.generator.to_rgb(g, w.batched()[:, -1], clamp=clamp)
        return out.squeeze(0) if single else out

    def encode(self, x: torch.Tensor):
        """Encode one image into (latent, encoder feature pyramid)."""
        validate_image(x, self.resolution)
        ws, levels = self.encoder(x.unsqueeze(0))
        code = LatentCode(styles=ws.squeeze(0)).validate(self.net_cfg)
        pyr = FeaturePyramid(levels={r: t.squeeze(0) for r, t in levels.items()},
                             role="f").validate(self.net_cfg)
        return code, pyr

    def discriminate(self, x: torch.Tensor) -> torch.Tensor:
        validate_image(x, self.resolution)
        return self.discriminator(x.unsqueeze(0)).squeeze(0)

    # ------------------------------------------------------------------
    # batched pipeline
    # ------------------------------------------------------------------

    def align_and_synthesize(self, ws, f_levels, n_override=None,
                             skip_alignment=False):
        """Synthesis with per-level iterative alignment against f_levels.

        Returns (image, g_levels, masks, flows).
        """
        records = {}

        def hook(res, g):
            level = self.samm[str(res)]
            result = iterative_align(level.predict_step, f_levels[res], g,
                                     self.samm_cfg, n_override=n_override,
                                     skip_warp=skip_alignment)
            records[res] = result
            return result.aligned

        img, g_levels = self.generator(ws, layer_hook=hook)
        masks = {res: records[res].mask for res in records}
        flows = {res: (records[res].dx, records[res].dy) for res in records}
        return img, g_levels, masks, flows

    def invert_batch(self, x: torch.Tensor, n_override=None,
                     skip_alignment=False, encode_grad=False) -> InversionOutputs:
        """Full pipeline on a (B, 3, R, R) batch."""
        validate_image(x, self.resolution)
        if encode_grad:
            ws, f_levels = self.encoder(x)
        else:
            with torch.no_grad():
                ws, f_levels = self.encoder(x)
        img, g_levels, masks, flows = self.align_and_synthesize(
            ws, f_levels, n_override=n_override, skip_alignment=skip_alignment)
        ordered = [masks[res] for res in sorted(masks)]
        gathered = gather_masks(ordered, self.resolution)
        x_hat = blend(x, img, gathered)
        n = self.samm_cfg.n_iters if n_override is None else int(n_override)
        return InversionOutputs(ws=ws, f_levels=f_levels, g_levels=g_levels,
                                masks=masks, flows=flows, x_in_hat=img,
                                gathered=gathered, x_hat=x_hat, n_iters=n,
                                skip_alignment=bool(skip_alignment))

    def replay_batch(self, x: torch.Tensor, ws: torch.Tensor,
                     outputs: InversionOutputs) -> tuple:
        """Re-synthesize with new styles, reusing recorded flows and masks.

        The recorded alignment is applied verbatim, so masks (and the blend
        mask) are unchanged; with the original styles this reproduces the
        original pass bit-for-bit.
        """
        def hook(res, g):
            dx, dy = outputs.flows[res]
            return apply_alignment(g, dx, dy, outputs.masks[res],
                                   skip_warp=outputs.skip_alignment)

        img, _ = self.generator(ws, layer_hook=hook)
        x_hat = blend(x, img, outputs.gathered)
        return x_hat, img

    def invert(self, x: torch.Tensor, n_override=None,
               skip_alignment=False) -> InversionOutputs:
        """Single-image pipeline; returns outputs with the batch dim dropped."""
        out = self.invert_batch(x.unsqueeze(0), n_override=n_override,
                                skip_alignment=skip_alignment)
        return InversionOutputs(
            ws=out.ws.squeeze(0),
            f_levels={r: t.squeeze(0) for r, t in out.f_levels.items()},
            g_levels={r: t.squeeze(0) for r, t in out.g_levels.items()},
            masks={r: t.squeeze(0) for r, t in out.masks.items()},
            flows={r: (dx.squeeze(0), dy.squeeze(0)) for r, (dx, dy) in out.flows.items()},
            x_in_hat=out.x_in_hat.squeeze(0),
            gathered=out.gathered.squeeze(0),
            x_hat=out.x_hat.squeeze(0),
            n_iters=out.n_iters,
            skip_alignment=out.skip_alignment,
        )

    # ------------------------------------------------------------------
    # persistence
    # ------------------------------------------------------------------

    def state_arrays(self) -> dict:
        arrays = {}
        for prefix, module in self.modules().items():
            for key, value in module.state_dict().items():
                arrays[f"{prefix}.{key}"] = value.detach().cpu().numpy()
        return arrays

    def load_arrays(self, arrays: dict):
        for prefix, module in self.modules().items():
            state = {}
            want = module.state_dict()
            for key in want:
                name = f"{prefix}.{key}"
                if name not in arrays:
                    raise ValidationError(f"checkpoint is missing array {name!r}")
                state[key] = torch.from_numpy(np.array(arrays[name]))
            module.load_state_dict(state)

    def parameter_digest(self, prefixes=("g", "e")) -> str:
        """Hash of selected module weights; used by freeze audits."""
        import hashlib

        h = hashlib.sha256()
        arrays = self.state_arrays()
        for name in sorted(arrays):
            if name.split(".", 1)[0] in prefixes:
                h.update(name.encode())
                h.update(arrays[name].tobytes())
        return h.hexdigest()

    def save(self, path, stage: str, extra_arrays: dict | None = None,
             extra_meta: dict | None = None) -> str:
        arrays = self.state_arrays()
        if extra_arrays:
            overlap = set(arrays) & set(extra_arrays)
            if overlap:
                raise ValidationError(f"extra arrays clash with model arrays: {overlap}")
            arrays.update(extra_arrays)
        return ckpt.save_checkpoint(path, stage, self.net_cfg, self.samm_cfg,
                                    arrays, extra=extra_meta)

    @classmethod
    def load(cls, path, min_stage: str | None = None) -> tuple:
        """Build a model from a checkpoint; returns (model, manifest, arrays)."""
        manifest, arrays = ckpt.load_checkpoint(path, min_stage=min_stage)
        net_cfg = NetConfig.from_dict(manifest["config"]["net"])
        samm_cfg = SammConfig.from_dict(manifest["config"]["samm"])
        model = cls(net_cfg, samm_cfg, seed=0)
        model.load_arrays(arrays)
        for module in model.modules().values():
            module.requires_grad_(False)
            module.eval()
        return model, manifest, arrays
