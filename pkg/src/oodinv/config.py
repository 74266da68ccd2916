"""Dataclass configs for networks, alignment, losses and training.

All defaults target the 64x64 desk-scale preset. Configs round-trip through
plain dicts so they can be echoed into checkpoint manifests and JSON config
files.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class NetConfig:
    """Shapes of the generator / encoder / discriminator trio."""

    output_resolution: int = 64
    style_dim: int = 64
    # channel count per feature resolution, from the 4x4 constant up to the output
    channels: dict = field(
        default_factory=lambda: {4: 128, 8: 128, 16: 64, 32: 64, 64: 32}
    )
    # resolutions at which generator features are aligned to encoder features
    align_resolutions: tuple = (8, 16, 32)

    @property
    def num_style_slots(self) -> int:
        return 2 * int(math.log2(self.output_resolution)) - 2

    @property
    def synthesis_resolutions(self) -> tuple:
        """Block output resolutions, 8 up to the output resolution."""
        return tuple(2 ** k for k in range(3, int(math.log2(self.output_resolution)) + 1))

    def validate(self) -> "NetConfig":
        r = self.output_resolution
        if r < 16 or not _is_pow2(r):
            raise ValidationError(f"output_resolution must be a power of two >= 16, got {r}")
        if self.style_dim < 1:
            raise ValidationError("style_dim must be positive")
        needed = [4] + list(self.synthesis_resolutions)
        for res in needed:
            if res not in self.channels:
                raise ValidationError(f"channel schedule is missing resolution {res}")
        for res in self.align_resolutions:
            if not _is_pow2(res) or res < 8 or res >= r:
                raise ValidationError(
                    f"align resolution {res} must be a power of two in [8, {r})"
                )
            if res not in self.channels:
                raise ValidationError(f"align resolution {res} not in channel schedule")
        if tuple(sorted(self.align_resolutions)) != tuple(self.align_resolutions):
            raise ValidationError("align_resolutions must be sorted ascending")
        return self

    def to_dict(self) -> dict:
        return {
            "output_resolution": self.output_resolution,
            "style_dim": self.style_dim,
            "channels": {str(k): v for k, v in sorted(self.channels.items())},
            "align_resolutions": list(self.align_resolutions),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(
            output_resolution=int(d["output_resolution"]),
            style_dim=int(d["style_dim"]),
            channels={int(k): int(v) for k, v in d["channels"].items()},
            align_resolutions=tuple(int(r) for r in d["align_resolutions"]),
        ).validate()


@dataclass
class SammConfig:
    """Iterative alignment settings shared by every alignment level."""

    n_iters: int = 2
    # tanh scale bounding each per-step flow delta, in normalized coordinates
    max_displacement: float = 0.25
    # alternative mask recurrence M <- m*M + m*(1-M) (ablation only)
    alt_mask_update: bool = False

    def validate(self) -> "SammConfig":
        if self.n_iters < 1:
            raise ValidationError(f"n_iters must be >= 1, got {self.n_iters}")
        if not (0.0 < self.max_displacement <= 1.0):
            raise ValidationError(
                f"max_displacement must be in (0, 1], got {self.max_displacement}"
            )
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SammConfig":
        return cls(
            n_iters=int(d["n_iters"]),
            max_displacement=float(d["max_displacement"]),
            alt_mask_update=bool(d.get("alt_mask_update", False)),
        ).validate()


@dataclass
class LossConfig:
    """Weights for the reconstruction / adversarial / mask objectives."""

    lambda_bin: float = 0.5
    # expected OOD area budget per alignment resolution
    phi_area: dict = field(default_factory=lambda: {8: 0.3, 16: 0.3, 32: 0.25})
    w_perceptual: float = 1.0
    w_mse: float = 1.0
    w_identity: float = 0.1
    w_adv: float = 0.05
    r1_gamma: float = 1.0

    def validate(self) -> "LossConfig":
        for name in ("lambda_bin", "w_perceptual", "w_mse", "w_identity", "w_adv", "r1_gamma"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        for res, phi in self.phi_area.items():
            if not (0.0 < phi < 1.0):
                raise ValidationError(f"phi_area[{res}] must be in (0, 1), got {phi}")
        return self

    def phi_for(self, resolutions) -> list:
        try:
            return [self.phi_area[r] for r in resolutions]
        except KeyError as e:
            raise ValidationError(f"no phi_area entry for resolution {e.args[0]}") from e

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["phi_area"] = {str(k): v for k, v in sorted(self.phi_area.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        kw = dict(d)
        kw["phi_area"] = {int(k): float(v) for k, v in d["phi_area"].items()}
        return cls(**kw).validate()


STAGE_LEARNING_RATES = {"a1": 2e-3, "a2": 1e-3, "b": 1e-3}


@dataclass
class TrainConfig:
    """One training stage: a1 (toy GAN), a2 (encoder), b (alignment module)."""

    stage: str = "a1"
    steps: int = 3000
    batch_size: int = 16
    lr: float | None = None  # defaults to the per-stage reference rate
    betas: tuple = (0.9, 0.99)
    seed: int = 0
    log_every: int = 25
    # overwrite the checkpoint every N steps (crash recovery); None = end only
    checkpoint_every: int | None = None
    dataset_size: int = 1024
    decal_rate: float = 0.0
    # stage b only: keep the discriminator frozen instead of fine-tuning it
    freeze_discriminator: bool = False
    # stage b only: fraction of steps over which the binarization weight
    # ramps from 0 to its configured value (lets the reconstruction error
    # place the masks before they harden)
    mask_warmup_frac: float = 0.4
    # stage b overfit mode: train on one fixed batch of `batch_size` images
    fixed_batch: bool = False
    # single-threaded bit-reproducible mode
    deterministic: bool = True

    def validate(self) -> "TrainConfig":
        if self.stage not in ("a1", "a2", "b"):
            raise ValidationError(f"stage must be one of a1/a2/b, got {self.stage!r}")
        if self.steps < 1 or self.batch_size < 1 or self.dataset_size < 1:
            raise ValidationError("steps, batch_size and dataset_size must be positive")
        if not (0.0 <= self.decal_rate <= 1.0):
            raise ValidationError("decal_rate must be in [0, 1]")
        if not (0.0 <= self.mask_warmup_frac <= 1.0):
            raise ValidationError("mask_warmup_frac must be in [0, 1]")
        return self

    @property
    def learning_rate(self) -> float:
        return self.lr if self.lr is not None else STAGE_LEARNING_RATES[self.stage]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kw = dict(d)
        kw["betas"] = tuple(d.get("betas", (0.9, 0.99)))
        return cls(**kw).validate()


@dataclass
class FullConfig:
    """Everything the CLI can read from a single JSON config file."""

    net: NetConfig = field(default_factory=NetConfig)
    samm: SammConfig = field(default_factory=SammConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "FullConfig":
        self.net.validate()
        self.samm.validate()
        self.loss.validate()
        self.train.validate()
        return self

    def to_dict(self) -> dict:
        return {
            "net": self.net.to_dict(),
            "samm": self.samm.to_dict(),
            "loss": self.loss.to_dict(),
            "train": self.train.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "FullConfig":
        return cls(
            net=NetConfig.from_dict(d["net"]) if "net" in d else NetConfig(),
            samm=SammConfig.from_dict(d["samm"]) if "samm" in d else SammConfig(),
            loss=LossConfig.from_dict(d["loss"]) if "loss" in d else LossConfig(),
            train=TrainConfig.from_dict(d["train"]) if "train" in d else TrainConfig(),
        ).validate()

    @classmethod
    def load(cls, path) -> "FullConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ValidationError(f"cannot read config file {path}: {e}") from e
        return cls.from_dict(d)
