"""Command-line entry point: dataset generation, the three training stages,
inversion, editing, mask dumps, evaluation, and the HTTP service.

Exit codes: 0 success, 1 runtime failure, 2 validation/usage error. All
randomness flows from --seed (default 0). Images are 8-bit PNGs; the float
conversion is v / 127.5 - 1 on read and round((v + 1) * 127.5) on write.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .config import FullConfig, LossConfig
from .data import export_dataset, from_uint8, load_dataset, make_dataset, to_uint8
from .errors import ValidationError
from .metrics import psnr, ssim
from .model import InversionModel
from .samm import save_mask_pngs

CHECKPOINT_ENV = "OODINV_CHECKPOINT_DIR"


def resolve_checkpoint(arg) -> Path:
    """Find the checkpoint file, honoring the OODINV_CHECKPOINT_DIR override."""
    env = os.environ.get(CHECKPOINT_ENV)
    if arg is None:
        if not env:
            raise ValidationError(
                f"--checkpoint is required (or set {CHECKPOINT_ENV})")
        path = Path(env) / "model.ckpt"
    else:
        path = Path(arg)
        if not path.exists() and env and not path.is_absolute():
            alt = Path(env) / path
            if alt.exists():
                path = alt
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path} (--checkpoint)")
    return path


def load_image(path, resolution: int) -> torch.Tensor:
    from PIL import Image

    path = Path(path)
    if not path.exists():
        raise ValidationError(f"image not found: {path} (--image)")
    try:
        img = Image.open(path).convert("RGB")
    except Exception as e:
        raise ValidationError(f"cannot read image {path}: {e}") from e
    if img.width != img.height:
        raise ValidationError(
            f"image must be square, got {img.width}x{img.height}")
    if img.width != resolution:
        img = img.resize((resolution, resolution), Image.BILINEAR)
    return from_uint8(np.asarray(img))


def save_image(tensor: torch.Tensor, path):
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(tensor)).save(path)


def _loss_cfg_for(model: InversionModel, config: FullConfig | None) -> LossConfig:
    cfg = config.loss if config is not None else LossConfig()
    missing = [r for r in model.net_cfg.align_resolutions if r not in cfg.phi_area]
    if missing:
        raise ValidationError(f"loss config lacks phi_area for resolutions {missing}")
    return cfg


def _maybe_config(args) -> FullConfig | None:
    if getattr(args, "config", None):
        return FullConfig.load(args.config)
    return None


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------

def cmd_data(args) -> int:
    samples = make_dataset(args.n, seed=args.seed, decal_rate=args.decal_rate,
                           resolution=args.resolution)
    out = export_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    from . import train as train_mod

    config = _maybe_config(args) or FullConfig()
    tcfg = config.train
    tcfg.stage = args.stage
    tcfg.seed = args.seed
    if args.steps is not None:
        tcfg.steps = args.steps
    if args.batch_size is not None:
        tcfg.batch_size = args.batch_size
    if args.decal_rate is not None:
        tcfg.decal_rate = args.decal_rate
    tcfg.validate()

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.stage == "a1":
        model = InversionModel(config.net, config.samm, seed=args.seed)
    else:
        min_stage = "a1" if args.stage == "a2" else "a2"
        ckpt = resolve_checkpoint(args.checkpoint)
        model, _, _ = InversionModel.load(ckpt, min_stage=min_stage)
    loss_cfg = _loss_cfg_for(model, config)
    fn = {"a1": train_mod.train_stage_a1, "a2": train_mod.train_stage_a2,
          "b": train_mod.train_stage_b}[args.stage]
    log = fn(model, tcfg, loss_cfg,
             checkpoint_path=out_dir / f"{args.stage}.ckpt",
             log_path=out_dir / f"{args.stage}.jsonl")
    print(json.dumps(log.summary, sort_keys=True, indent=1))
    return 0


def _run_inversion(args, model):
    x = load_image(args.image, model.resolution)
    n_override = getattr(args, "iters", None)
    with torch.no_grad():
        out = model.invert(x, n_override=n_override,
                           skip_alignment=getattr(args, "skip_alignment", False))
    return x, out


def _write_inversion_artifacts(x, out, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_image(out.x_in_hat, out_dir / "inversion.png")
    save_image(out.x_hat, out_dir / "blended.png")
    save_mask_pngs(out.masks, out.gathered, out_dir)
    metrics = {
        "psnr_db": psnr(x, out.x_hat),
        "psnr_no_blend_db": psnr(x, out.x_in_hat),
        "ssim": ssim(x, out.x_hat),
        "aoa": float(out.gathered.mean()),
        "n_iters": out.n_iters,
        "skip_alignment": out.skip_alignment,
    }
    (out_dir / "metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=1))
    return metrics


def cmd_invert(args) -> int:
    model, _, _ = InversionModel.load(resolve_checkpoint(args.checkpoint),
                                      min_stage="b")
    x, out = _run_inversion(args, model)
    metrics = _write_inversion_artifacts(x, out, args.out)
    print(json.dumps(metrics, sort_keys=True, indent=1))
    return 0


def cmd_edit(args) -> int:
    from .edit import invert_edit_blend, load_direction

    ckpt_path = resolve_checkpoint(args.checkpoint)
    model, _, _ = InversionModel.load(ckpt_path, min_stage="b")
    directions_dir = args.directions_dir
    if directions_dir is None:
        directions_dir = ckpt_path.parent / "directions"
    direction = load_direction(directions_dir, args.direction)
    x, out = _run_inversion(args, model)
    metrics = _write_inversion_artifacts(x, out, args.out)
    with torch.no_grad():
        edited, mask, _ = invert_edit_blend(x, direction, args.strength, model)
    save_image(edited, Path(args.out) / "edited.png")
    metrics["direction"] = direction.name
    metrics["strength"] = args.strength
    print(json.dumps(metrics, sort_keys=True, indent=1))
    return 0


def cmd_masks(args) -> int:
    model, _, _ = InversionModel.load(resolve_checkpoint(args.checkpoint),
                                      min_stage="b")
    x, out = _run_inversion(args, model)
    written = save_mask_pngs(out.masks, out.gathered, args.out)
    print("\n".join(str(p) for p in written))
    return 0


def cmd_eval(args) -> int:
    from .train import evaluate

    model, _, _ = InversionModel.load(resolve_checkpoint(args.checkpoint),
                                      min_stage="b")
    samples = load_dataset(args.dataset)
    if not samples:
        raise ValidationError(f"dataset directory {args.dataset} is empty")
    config = _maybe_config(args)
    report = evaluate(model, samples, _loss_cfg_for(model, config),
                      n_override=args.n_override,
                      skip_alignment=args.skip_alignment, jobs=args.jobs)
    if args.out:
        report.save(args.out)
    print(report.table())
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import build_app

    app = build_app(resolve_checkpoint(args.checkpoint),
                    directions_dir=args.directions_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_print_config(args) -> int:
    config = _maybe_config(args) or FullConfig()
    print(config.to_json())
    return 0


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oodinv",
        description="Out-of-domain GAN inversion via invertibility decomposition.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("data", help="generate a toy dataset with OOD decals")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=64, help="number of samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--decal-rate", type=float, default=0.7,
                   help="fraction of samples carrying an OOD decal")
    p.add_argument("--resolution", type=int, default=64)
    p.set_defaults(func=cmd_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", required=True, choices=["a1", "a2", "b"])
    p.add_argument("--out", required=True, help="directory for checkpoint and log")
    p.add_argument("--checkpoint", help="input checkpoint (stages a2 and b)")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--decal-rate", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("invert", help="invert one image")
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, help="override the alignment iteration count")
    p.add_argument("--skip-alignment", action="store_true",
                   help="skip the feature warp (ablation)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("edit", help="invert and apply a latent direction")
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--direction", required=True)
    p.add_argument("--strength", type=float, default=1.0)
    p.add_argument("--directions-dir", help="directory of direction files "
                   "(default: <checkpoint dir>/directions)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("masks", help="dump per-level and gathered masks as PNGs")
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_masks)

    p = sub.add_parser("eval", help="evaluate a checkpoint over a dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset", required=True, help="exported dataset directory")
    p.add_argument("--out", help="write the report JSON here")
    p.add_argument("--config")
    p.add_argument("--n-override", type=int)
    p.add_argument("--skip-alignment", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the HTTP inversion/editing service")
    p.add_argument("--checkpoint")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--directions-dir")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("print-config", help="print the effective configuration")
    p.add_argument("--config")
    p.set_defaults(func=cmd_print_config)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception as e:  # runtime failures
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
