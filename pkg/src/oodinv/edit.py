"""Linear attribute directions in latent space and the
invert -> edit -> align -> blend pipeline.

A direction is the unit-normalized least-squares regression of an attribute
on flattened latents. Editing reuses the flows and masks recorded from the
unedited pass: re-running alignment against edited features would pull them
back toward the input geometry and cancel the edit, so the recorded spatial
correction is applied verbatim to the edited synthesis.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ShapeError, ValidationError
from .model import InversionModel
from .nets import LatentCode


@dataclass
class EditDirection:
    """Named unit direction in latent space, optionally restricted to slots."""

    name: str
    direction: torch.Tensor          # (slots, style_dim), Frobenius norm 1
    slot_mask: torch.Tensor | None = None  # (slots,) bool; None means all slots
    suggested_range: tuple = (-2.0, 2.0)

    def validate(self) -> "EditDirection":
        norm = float(self.direction.norm())
        if abs(norm - 1.0) > 1e-6:
            raise ValidationError(f"direction norm must be 1, got {norm}")
        return self


def fit_direction(samples, name: str, suggested_range=(-2.0, 2.0)) -> EditDirection:
    """Least-squares fit of an attribute onto flattened latents.

    samples: iterable of (latent, attribute) where latent is a LatentCode or
    a (slots, style_dim) tensor. Requires at least 32 samples and a
    non-constant attribute.
    """
    pairs = list(samples)
    if len(pairs) < 32:
        raise ValidationError(f"need at least 32 samples to fit a direction, got {len(pairs)}")
    lat = []
    attr = []
    for w, a in pairs:
        styles = w.styles if isinstance(w, LatentCode) else w
        lat.append(styles.detach().double().flatten())
        attr.append(float(a))
    X = torch.stack(lat)
    y = torch.tensor(attr, dtype=torch.float64)
    if float(y.std()) < 1e-9:
        raise ValidationError(f"attribute {name!r} is constant; direction fit is degenerate")
    Xc = X - X.mean(dim=0)
    yc = y - y.mean()
    coef = torch.linalg.lstsq(Xc, yc.unsqueeze(1)).solution.squeeze(1)
    norm = float(coef.norm())
    if norm < 1e-12:
        raise ValidationError(f"attribute {name!r} has no linear latent correlate")
    slots = pairs[0][0].styles.shape if isinstance(pairs[0][0], LatentCode) else pairs[0][0].shape
    direction = (coef / norm).view(slots).float()
    return EditDirection(name=name, direction=direction,
                         suggested_range=tuple(suggested_range)).validate()


def apply_edit(w: LatentCode, d: EditDirection, strength: float) -> LatentCode:
    """Shift a latent along a direction; strength 0 is the identity."""
    d.validate()
    if d.direction.shape != w.styles.shape:
        raise ShapeError(
            f"direction shape {tuple(d.direction.shape)} does not match latent "
            f"{tuple(w.styles.shape)}"
        )
    delta = d.direction
    if d.slot_mask is not None:
        delta = delta * d.slot_mask.view(-1, 1).to(delta.dtype)
    return LatentCode(styles=w.styles + strength * delta)


def latent_attribute(w: LatentCode, d: EditDirection) -> float:
    """Linear attribute readout: projection of the latent onto the direction."""
    return float((w.styles.double().flatten() * d.direction.double().flatten()).sum())


def invert_edit_blend(x: torch.Tensor, d: EditDirection, strength: float,
                      model: InversionModel, n_override=None):
    """Invert, shift the latent, re-synthesize with the recorded alignment.

    Masks and flows come from the unedited pass and are reused unchanged, so
    the returned mask is independent of the strength and strength 0
    reproduces the plain inversion exactly.
    """
    out = model.invert_batch(x.unsqueeze(0), n_override=n_override)
    w = LatentCode(styles=out.ws.squeeze(0))
    w_edit = apply_edit(w, d, strength)
    x_hat_edit, x_in_edit = model.replay_batch(x.unsqueeze(0), w_edit.batched(), out)
    diagnostics = {
        "masks": {r: t.squeeze(0) for r, t in out.masks.items()},
        "flows": {r: (dx.squeeze(0), dy.squeeze(0)) for r, (dx, dy) in out.flows.items()},
        "x_hat_plain": out.x_hat.squeeze(0),
        "x_in_hat_edit": x_in_edit.squeeze(0),
        "latent": w,
        "latent_edited": w_edit,
    }
    return x_hat_edit.squeeze(0), out.gathered.squeeze(0), diagnostics


# ----------------------------------------------------------------------
# direction files
# ----------------------------------------------------------------------

def save_direction(d: EditDirection, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arr = d.direction.detach().cpu().numpy().astype(np.float32)
    payload = {
        "name": d.name,
        "shape": list(arr.shape),
        "data_b64": base64.b64encode(arr.tobytes()).decode("ascii"),
        "suggested_range": list(d.suggested_range),
    }
    path = directory / f"{d.name}.json"
    path.write_text(json.dumps(payload, sort_keys=True, indent=1))
    return path


def load_direction(directory, name: str) -> EditDirection:
    path = Path(directory) / f"{name}.json"
    if not path.exists():
        raise ValidationError(
            f"unknown direction {name!r}; available: {sorted(list_directions(directory))}"
        )
    payload = json.loads(path.read_text())
    arr = np.frombuffer(base64.b64decode(payload["data_b64"]), dtype=np.float32)
    direction = torch.from_numpy(arr.copy()).view(*payload["shape"])
    return EditDirection(name=payload["name"], direction=direction,
                         suggested_range=tuple(payload.get("suggested_range", (-2.0, 2.0)))
                         ).validate()


def list_directions(directory) -> list:
    directory = Path(directory)
    if not directory.exists():
        return []
    return sorted(p.stem for p in directory.glob("*.json"))
