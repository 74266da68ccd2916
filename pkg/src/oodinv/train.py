"""Three-stage training: a1 trains the toy GAN, a2 trains the encoder against
the frozen generator, b trains the alignment/masking module with both the
encoder and generator frozen. Also the evaluation pass producing PSNR / SSIM
/ average-OOD-area / mask-IoU reports.

All stages run single-threaded under a forked RNG when cfg.deterministic is
set, making final metrics bit-reproducible for a given (seed, config).
"""

from __future__ import annotations

import contextlib
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses
from .config import LossConfig, TrainConfig
from .data import make_dataset
from .errors import DivergenceError, ValidationError
from .metrics import mask_iou, psnr, ssim
from .model import InversionModel

R1_INTERVAL = 4  # lazy regularization: apply the R1 term every k-th step, scaled by k


@contextlib.contextmanager
def deterministic_mode(seed: int, enabled: bool = True):
    """Single-threaded, seed-forked execution; bit-reproducible on one host."""
    if not enabled:
        yield
        return
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            yield
    finally:
        torch.set_num_threads(prev_threads)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def add(self, step: int, terms: dict):
        rec = {"step": step}
        rec.update({k: float(v) for k, v in terms.items()})
        self.records.append(rec)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as f:
            for rec in self.records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
            f.write(json.dumps({"summary": self.summary}, sort_keys=True) + "\n")


def _check_finite(value: torch.Tensor, what: str):
    if not torch.isfinite(value).all():
        raise DivergenceError(f"{what} became non-finite")


def _optimizer_arrays(opt: torch.optim.Adam, prefix: str) -> dict:
    arrays = {}
    for gi, group in enumerate(opt.param_groups):
        for pi, p in enumerate(group["params"]):
            state = opt.state.get(p)
            if not state:
                continue
            base = f"opt.{prefix}.{gi}.{pi}"
            arrays[f"{base}.step"] = np.asarray(
                state["step"].cpu() if torch.is_tensor(state["step"]) else state["step"]
            )
            arrays[f"{base}.exp_avg"] = state["exp_avg"].detach().cpu().numpy()
            arrays[f"{base}.exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy()
    return arrays


def _stack_images(samples) -> torch.Tensor:
    return torch.stack([s.image for s in samples])


def train_stage_a1(model: InversionModel, cfg: TrainConfig,
                   loss_cfg: LossConfig | None = None,
                   checkpoint_path=None, log_path=None) -> TrainLog:
    """Adversarially train the toy generator and discriminator."""
    cfg.validate()
    if cfg.stage != "a1":
        raise ValidationError(f"expected stage a1 config, got {cfg.stage}")
    loss_cfg = (loss_cfg or LossConfig()).validate()
    log = TrainLog()
    gen, disc = model.generator, model.discriminator
    gen.requires_grad_(True)
    disc.requires_grad_(True)

    with deterministic_mode(cfg.seed, cfg.deterministic):
        data = make_dataset(cfg.dataset_size, seed=cfg.seed, decal_rate=0.0,
                            resolution=model.net_cfg.output_resolution)
        images = _stack_images(data)
        mean_image = images.mean(dim=0)
        g_opt = torch.optim.Adam(gen.parameters(), lr=cfg.learning_rate, betas=cfg.betas)
        d_opt = torch.optim.Adam(disc.parameters(), lr=cfg.learning_rate, betas=cfg.betas)
        z_probe = torch.randn(32, model.net_cfg.style_dim)

        def sample_dist():
            with torch.no_grad():
                imgs, _ = gen(gen.map_latents(z_probe, truncation=0.7))
                return float((imgs - mean_image).pow(2).mean())

        def save_ckpt():
            extra = _optimizer_arrays(g_opt, "g")
            extra.update(_optimizer_arrays(d_opt, "d"))
            return model.save(checkpoint_path, "a1", extra_arrays=extra,
                              extra_meta={"train": cfg.to_dict()})

        log.summary["init_mean_image_dist"] = sample_dist()
        for step in range(cfg.steps):
            idx = torch.randint(0, len(images), (cfg.batch_size,))
            real = images[idx]
            z = torch.randn(cfg.batch_size, model.net_cfg.style_dim)
            ws = gen.map_latents(z)
            gen.update_w_avg(ws[:, 0])
            fake, _ = gen(ws)

            real_logits = disc(real)
            fake_logits = disc(fake.detach())
            use_r1 = loss_cfg.r1_gamma > 0 and step % R1_INTERVAL == 0
            r1 = losses.r1_gradient_penalty(disc, real) if use_r1 else None
            _, d_term = losses.adversarial_losses(
                real_logits, fake_logits,
                gamma=loss_cfg.r1_gamma * R1_INTERVAL if use_r1 else 0.0,
                real_grad_sq=r1)
            _check_finite(d_term, "discriminator loss")
            d_opt.zero_grad()
            d_term.backward()
            d_opt.step()

            g_term, _ = losses.adversarial_losses(real_logits.detach(), disc(fake))
            _check_finite(g_term, "generator loss")
            g_opt.zero_grad()
            g_term.backward()
            g_opt.step()

            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                log.add(step, {"adv_g": g_term.detach(), "adv_d": d_term.detach()})
            if (checkpoint_path is not None and cfg.checkpoint_every
                    and (step + 1) % cfg.checkpoint_every == 0):
                save_ckpt()

        log.summary["final_mean_image_dist"] = sample_dist()
        log.summary["final_adv_g"] = log.records[-1]["adv_g"]
        log.summary["final_adv_d"] = log.records[-1]["adv_d"]
        if checkpoint_path is not None:
            log.summary["checkpoint_id"] = save_ckpt()
    if log_path is not None:
        log.save(log_path)
    return log


def _augment_with_decals(x: torch.Tensor, rate: float, seed: int) -> torch.Tensor:
    """Paste decals onto a `rate` fraction of a batch (targets stay clean)."""
    from .data import decal_mask, sample_decal

    rng = np.random.default_rng(seed)
    out = x.clone()
    for i in range(x.shape[0]):
        if rng.random() >= rate:
            continue
        spec = sample_decal(rng.integers(0, 2 ** 31), resolution=x.shape[-1])
        support = decal_mask(spec, x.shape[-1])
        alpha = (support * spec.opacity).to(x.dtype)
        color = torch.tensor(spec.color, dtype=x.dtype).view(3, 1, 1)
        out[i] = x[i] * (1 - alpha) + color * alpha
    return out


def train_stage_a2(model: InversionModel, cfg: TrainConfig,
                   loss_cfg: LossConfig | None = None,
                   checkpoint_path=None, log_path=None) -> TrainLog:
    """Train the encoder by latent regression plus image reconstruction,
    generator frozen.

    cfg.decal_rate controls occlusion augmentation: that fraction of the
    batch gets a decal pasted on the encoder input while the latent and
    image targets stay clean, making the encoder robust to OOD content the
    way a pretrained face encoder is."""
    cfg.validate()
    if cfg.stage != "a2":
        raise ValidationError(f"expected stage a2 config, got {cfg.stage}")
    log = TrainLog()
    gen, enc = model.generator, model.encoder
    gen.requires_grad_(False)
    gen.zero_grad(set_to_none=True)
    enc.requires_grad_(True)
    digest_before = model.parameter_digest(("g",))

    with deterministic_mode(cfg.seed, cfg.deterministic):
        opt = torch.optim.Adam(enc.parameters(), lr=cfg.learning_rate, betas=cfg.betas)

        def save_ckpt():
            return model.save(checkpoint_path, "a2",
                              extra_arrays=_optimizer_arrays(opt, "e"),
                              extra_meta={"train": cfg.to_dict()})

        for step in range(cfg.steps):
            z = torch.randn(cfg.batch_size, model.net_cfg.style_dim)
            with torch.no_grad():
                ws = gen.map_latents(z, truncation=0.7)
                x, _ = gen(ws)
            x_in = x
            if cfg.decal_rate > 0:
                x_in = _augment_with_decals(x, cfg.decal_rate,
                                            seed=cfg.seed * 100003 + step)
            ws_hat, _ = enc(x_in)
            latent_term = torch.nn.functional.mse_loss(ws_hat, ws)
            x_hat, _ = gen(ws_hat)
            image_term = torch.nn.functional.mse_loss(x_hat, x)
            loss = latent_term + image_term
            _check_finite(loss, "encoder loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            if step == 0:
                log.summary["first_latent_loss"] = float(latent_term.detach())
            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                log.add(step, {"latent": latent_term.detach(),
                               "image": image_term.detach()})
            if (checkpoint_path is not None and cfg.checkpoint_every
                    and (step + 1) % cfg.checkpoint_every == 0):
                save_ckpt()
        log.summary["final_latent_loss"] = log.records[-1]["latent"]
        if model.parameter_digest(("g",)) != digest_before:
            raise DivergenceError("generator weights changed during stage a2")
        if checkpoint_path is not None:
            log.summary["checkpoint_id"] = save_ckpt()
    if log_path is not None:
        log.save(log_path)
    return log


def train_stage_b(model: InversionModel, cfg: TrainConfig,
                  loss_cfg: LossConfig | None = None,
                  checkpoint_path=None, log_path=None) -> TrainLog:
    """Train the alignment/masking module (and optionally fine-tune the
    discriminator) on blended reconstructions; encoder and generator frozen."""
    cfg.validate()
    if cfg.stage != "b":
        raise ValidationError(f"expected stage b config, got {cfg.stage}")
    loss_cfg = (loss_cfg or LossConfig()).validate()
    log = TrainLog()
    model.generator.requires_grad_(False)
    model.encoder.requires_grad_(False)
    model.generator.zero_grad(set_to_none=True)
    model.encoder.zero_grad(set_to_none=True)
    model.samm.requires_grad_(True)
    model.discriminator.requires_grad_(not cfg.freeze_discriminator)
    digest_before = model.parameter_digest(("g", "e"))
    frozen_params = list(model.generator.parameters()) + list(model.encoder.parameters())
    resolutions = sorted(model.net_cfg.align_resolutions)

    with deterministic_mode(cfg.seed, cfg.deterministic):
        data = make_dataset(cfg.dataset_size, seed=cfg.seed, decal_rate=cfg.decal_rate,
                            resolution=model.net_cfg.output_resolution)
        images = _stack_images(data)
        samm_opt = torch.optim.Adam(model.samm.parameters(), lr=cfg.learning_rate,
                                    betas=cfg.betas)
        d_opt = None
        if not cfg.freeze_discriminator:
            d_opt = torch.optim.Adam(model.discriminator.parameters(),
                                     lr=cfg.learning_rate, betas=cfg.betas)

        def save_ckpt():
            extra = _optimizer_arrays(samm_opt, "samm")
            if d_opt is not None:
                extra.update(_optimizer_arrays(d_opt, "d"))
            return model.save(checkpoint_path, "b", extra_arrays=extra,
                              extra_meta={"train": cfg.to_dict()})

        for step in range(cfg.steps):
            if cfg.fixed_batch:
                x = images[: cfg.batch_size]
            else:
                idx = torch.randint(0, len(images), (cfg.batch_size,))
                x = images[idx]
            out = model.invert_batch(x)
            for res, mask in out.masks.items():
                if mask.min() < -1e-5 or mask.max() > 1 + 1e-5:
                    raise DivergenceError(f"mask at level {res} left [0, 1]")

            if d_opt is not None:
                real_logits = model.discriminator(x)
                fake_logits_d = model.discriminator(out.x_in_hat.detach())
                use_r1 = loss_cfg.r1_gamma > 0 and step % R1_INTERVAL == 0
                r1 = losses.r1_gradient_penalty(model.discriminator, x) if use_r1 else None
                _, d_term = losses.adversarial_losses(
                    real_logits, fake_logits_d,
                    gamma=loss_cfg.r1_gamma * R1_INTERVAL if use_r1 else 0.0,
                    real_grad_sq=r1)
                _check_finite(d_term, "discriminator loss")
                d_opt.zero_grad()
                d_term.backward()
                d_opt.step()

            real_logits = model.discriminator(x).detach()
            fake_logits = model.discriminator(out.x_in_hat)
            mask_list = [out.masks[r] for r in resolutions]
            warmup = max(1, int(cfg.mask_warmup_frac * cfg.steps))
            step_cfg = dataclasses.replace(
                loss_cfg, lambda_bin=loss_cfg.lambda_bin * min(1.0, step / warmup))
            total, report = losses.total_loss(x, out.x_hat, mask_list,
                                              real_logits, fake_logits, step_cfg,
                                              resolutions=resolutions)
            _check_finite(total, "total loss")
            samm_opt.zero_grad()
            total.backward()
            samm_opt.step()
            bad = [p for p in frozen_params if p.grad is not None and p.grad.abs().max() > 0]
            if bad:
                raise DivergenceError("frozen generator/encoder received gradients")

            if step == 0:
                log.summary["first_rec"] = report.terms["rec"]
                log.summary["first_total"] = report.terms["total"]
            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                terms = dict(report.terms)
                for res in resolutions:
                    terms[f"mask_mean_{res}"] = float(out.masks[res].detach().mean())
                log.add(step, terms)
            if (checkpoint_path is not None and cfg.checkpoint_every
                    and (step + 1) % cfg.checkpoint_every == 0):
                save_ckpt()

        tail = [r["rec"] for r in log.records[-10:]]
        log.summary["final_rec"] = float(np.mean(tail))
        log.summary["final_total"] = log.records[-1]["total"]
        for res in resolutions:
            log.summary[f"final_mask_mean_{res}"] = log.records[-1][f"mask_mean_{res}"]
        if model.parameter_digest(("g", "e")) != digest_before:
            raise DivergenceError("frozen weights changed during stage b")
        log.summary["frozen_digest"] = digest_before
        if checkpoint_path is not None:
            log.summary["checkpoint_id"] = save_ckpt()
    if log_path is not None:
        log.save(log_path)
    return log


@dataclass
class EvalReport:
    """Aggregated inversion quality over a dataset, plus per-image records."""

    psnr_db: float
    ssim: float
    aoa: float
    mask_iou: float | None
    rec: float
    psnr_no_blend: float
    n_iters: int
    skip_alignment: bool
    num_images: int
    per_image: list = field(default_factory=list)

    def validate(self) -> "EvalReport":
        if not (-1.0 <= self.ssim <= 1.0):
            raise ValidationError(f"ssim out of range: {self.ssim}")
        if not (0.0 <= self.aoa <= 1.0):
            raise ValidationError(f"aoa out of range: {self.aoa}")
        if self.mask_iou is not None and not (0.0 <= self.mask_iou <= 1.0):
            raise ValidationError(f"iou out of range: {self.mask_iou}")
        return self

    def to_dict(self) -> dict:
        return {
            "psnr_db": self.psnr_db, "ssim": self.ssim, "aoa": self.aoa,
            "mask_iou": self.mask_iou, "rec": self.rec,
            "psnr_no_blend": self.psnr_no_blend, "n_iters": self.n_iters,
            "skip_alignment": self.skip_alignment, "num_images": self.num_images,
            "per_image": self.per_image,
        }

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))

    def table(self) -> str:
        iou = "n/a" if self.mask_iou is None else f"{self.mask_iou:7.4f}"
        variant = f"n={self.n_iters}" + (", no alignment" if self.skip_alignment else "")
        return "\n".join([
            f"inversion quality over {self.num_images} images ({variant})",
            f"  psnr      {self.psnr_db:7.2f} dB   (no blend: {self.psnr_no_blend:.2f} dB)",
            f"  ssim      {self.ssim:7.4f}",
            f"  aoa       {self.aoa:7.4f}",
            f"  mask iou  {iou}",
            f"  rec loss  {self.rec:7.4f}",
        ])


def evaluate(model: InversionModel, samples, loss_cfg: LossConfig | None = None,
             n_override=None, skip_alignment=False, jobs: int = 1) -> EvalReport:
    """Run the inversion pipeline over a dataset and aggregate metrics."""
    if not samples:
        raise ValidationError("evaluation dataset is empty")
    loss_cfg = (loss_cfg or LossConfig()).validate()

    def one(i):
        s = samples[i]
        with torch.no_grad():
            out = model.invert(s.image, n_override=n_override,
                               skip_alignment=skip_alignment)
            rec = float(losses.rec_loss(s.image, out.x_hat, loss_cfg))
        iou = mask_iou(out.gathered, s.gt_ood_mask)
        return {
            "index": i,
            "psnr_db": psnr(s.image, out.x_hat),
            "psnr_no_blend": psnr(s.image, out.x_in_hat),
            "ssim": ssim(s.image, out.x_hat),
            "aoa": float(out.gathered.mean()),
            "mask_iou": iou,
            "rec": rec,
        }

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_image = list(pool.map(one, range(len(samples))))
    else:
        per_image = [one(i) for i in range(len(samples))]

    ious = [r["mask_iou"] for r in per_image if r["mask_iou"] is not None]
    report = EvalReport(
        psnr_db=float(np.mean([r["psnr_db"] for r in per_image])),
        ssim=float(np.mean([r["ssim"] for r in per_image])),
        aoa=float(np.mean([r["aoa"] for r in per_image])),
        mask_iou=float(np.mean(ious)) if ious else None,
        rec=float(np.mean([r["rec"] for r in per_image])),
        psnr_no_blend=float(np.mean([r["psnr_no_blend"] for r in per_image])),
        n_iters=model.samm_cfg.n_iters if n_override is None else int(n_override),
        skip_alignment=bool(skip_alignment),
        num_images=len(per_image),
        per_image=per_image,
    )
    return report.validate()
