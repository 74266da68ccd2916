"""Procedural toy-face images with attribute labels, plus decal compositing
with exact ground-truth OOD masks.

Faces are rendered analytically (background, elliptical face, two eyes, a
curved mouth) at 4x supersampling and box-downsampled, so rendering is
deterministic and cheap. Decals are hard-alpha shapes pasted on top; the
ground-truth mask is exactly the decal support, and pixels outside the
support are untouched, so decomposing a sample with its own mask and
re-blending the pre-decal render reconstructs it exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ValidationError

SUPERSAMPLE = 4

# decal support must cover this fraction range of the canvas
DECAL_AREA_MIN = 0.02
DECAL_AREA_MAX = 0.25


@dataclass
class ToyFaceParams:
    """Geometry and colors of one face; all coordinates in [-1, 1] canvas units."""

    background_color: tuple
    face_center: tuple
    face_axes: tuple
    face_color: tuple
    eye_centers: tuple  # ((x, y), (x, y))
    eye_radius: float
    mouth_curvature: float  # kappa in [-1, 1]; positive curves the corners up
    mouth_width: float

    eye_color: tuple = (-0.85, -0.85, -0.85)
    mouth_color: tuple = (-0.6, -0.75, -0.75)
    mouth_thickness: float = 0.045

    def validate(self) -> "ToyFaceParams":
        cx, cy = self.face_center
        ax, ay = self.face_axes
        if ax <= 0 or ay <= 0:
            raise ValidationError("face axes must be positive")
        if abs(cx) + ax > 1.0 or abs(cy) + ay > 1.0:
            raise ValidationError("face ellipse leaves the canvas")
        if not (-1.0 <= self.mouth_curvature <= 1.0):
            raise ValidationError("mouth curvature must be in [-1, 1]")
        if self.eye_radius <= 0 or self.mouth_width <= 0:
            raise ValidationError("eye radius and mouth width must be positive")
        margin = self.eye_radius / min(ax, ay)
        for ex, ey in self.eye_centers:
            d = np.hypot((ex - cx) / ax, (ey - cy) / ay)
            if d + margin > 1.0:
                raise ValidationError("eyes must lie inside the face ellipse")
        return self


@dataclass
class DecalSpec:
    """One synthetic OOD shape: polygon, stroke, or ring."""

    kind: str  # polygon | stroke | ring
    color: tuple
    opacity: float
    # polygon: vertices (k, 2); stroke: (p0, p1, half_width); ring: (center, r_out, r_in)
    geometry: dict = field(default_factory=dict)

    def validate(self) -> "DecalSpec":
        if self.kind not in ("polygon", "stroke", "ring"):
            raise ValidationError(f"unknown decal kind {self.kind!r}")
        if not (0.5 < self.opacity <= 1.0):
            raise ValidationError("decal opacity must be in (0.5, 1]")
        return self


@dataclass
class Sample:
    """One dataset entry: image, exact OOD mask, attribute labels, seed."""

    image: torch.Tensor        # (3, R, R) in [-1, 1]
    gt_ood_mask: torch.Tensor  # (R, R) binary float
    attributes: dict
    seed: int
    has_decal: bool = False


def _grids(resolution: int):
    s = resolution * SUPERSAMPLE
    coords = (np.arange(s, dtype=np.float64) + 0.5) / s * 2.0 - 1.0
    return np.meshgrid(coords, coords)  # X, Y with Y increasing downward


def _downsample(hi: np.ndarray, resolution: int) -> np.ndarray:
    s = SUPERSAMPLE
    if hi.ndim == 2:
        return hi.reshape(resolution, s, resolution, s).mean(axis=(1, 3))
    return hi.reshape(hi.shape[0], resolution, s, resolution, s).mean(axis=(2, 4))


def render_toy_face(params: ToyFaceParams, resolution: int = 64) -> torch.Tensor:
    """Rasterize a face; deterministic in params."""
    params.validate()
    X, Y = _grids(resolution)
    img = np.empty((3, *X.shape), dtype=np.float64)
    for c in range(3):
        img[c].fill(params.background_color[c])

    cx, cy = params.face_center
    ax, ay = params.face_axes
    face = ((X - cx) / ax) ** 2 + ((Y - cy) / ay) ** 2 <= 1.0
    for c in range(3):
        img[c][face] = params.face_color[c]

    for ex, ey in params.eye_centers:
        eye = (X - ex) ** 2 + (Y - ey) ** 2 <= params.eye_radius ** 2
        for c in range(3):
            img[c][eye] = params.eye_color[c]

    # mouth: quadratic curve, corners rise with positive curvature (y axis
    # points down, so the curve subtracts kappa * t^2)
    half_w = params.mouth_width / 2.0
    y0 = cy + 0.45 * ay
    depth = 0.18 * ay
    t = np.clip((X - cx) / half_w, -1.0, 1.0)
    curve_y = y0 - params.mouth_curvature * depth * t * t
    mouth = (np.abs(X - cx) <= half_w) & (np.abs(Y - curve_y) <= params.mouth_thickness)
    for c in range(3):
        img[c][mouth] = params.mouth_color[c]

    return torch.from_numpy(_downsample(img, resolution)).float()


def sample_params(seed) -> tuple:
    """Draw face params and the attribute record from documented uniform ranges."""
    rng = np.random.default_rng(seed)
    bg = tuple(rng.uniform(-1.0, -0.25, size=3))
    ax = rng.uniform(0.5, 0.68)
    ay = rng.uniform(0.58, 0.78)
    cx = rng.uniform(-0.06, 0.06)
    cy = rng.uniform(-0.06, 0.06)
    face_color = tuple(rng.uniform(0.05, 0.65, size=3))
    eye_dx = rng.uniform(0.3, 0.42) * ax
    eye_y = cy - rng.uniform(0.25, 0.38) * ay
    eye_radius = rng.uniform(0.045, 0.1)
    kappa = rng.uniform(-1.0, 1.0)
    mouth_width = rng.uniform(0.45, 0.75) * ax
    params = ToyFaceParams(
        background_color=bg,
        face_center=(cx, cy),
        face_axes=(ax, ay),
        face_color=face_color,
        eye_centers=((cx - eye_dx, eye_y), (cx + eye_dx, eye_y)),
        eye_radius=eye_radius,
        mouth_curvature=kappa,
        mouth_width=mouth_width,
    ).validate()
    attributes = {
        "smile": float(kappa),
        "eye_size": float(eye_radius),
        "face_width": float(ax),
        "face_height": float(ay),
    }
    return params, attributes


def default_face_params() -> ToyFaceParams:
    """A centered, mirror-symmetric face used by rendering tests."""
    return ToyFaceParams(
        background_color=(-0.7, -0.6, -0.5),
        face_center=(0.0, 0.0),
        face_axes=(0.58, 0.7),
        face_color=(0.45, 0.3, 0.2),
        eye_centers=((-0.22, -0.2), (0.22, -0.2)),
        eye_radius=0.07,
        mouth_curvature=0.0,
        mouth_width=0.36,
    )


def _decal_support(spec: DecalSpec, resolution: int) -> np.ndarray:
    X, Y = _grids(resolution)
    g = spec.geometry
    if spec.kind == "polygon":
        verts = np.asarray(g["vertices"], dtype=np.float64)
        inside = np.zeros_like(X, dtype=bool)
        n = len(verts)
        # even-odd ray casting; handles any simple polygon
        for i in range(n):
            x0, y0 = verts[i]
            x1, y1 = verts[(i + 1) % n]
            crosses = (y0 > Y) != (y1 > Y)
            with np.errstate(divide="ignore", invalid="ignore"):
                x_at = x0 + (Y - y0) * (x1 - x0) / (y1 - y0)
            inside ^= crosses & (X < x_at)
        support = inside
    elif spec.kind == "stroke":
        (x0, y0), (x1, y1) = g["p0"], g["p1"]
        hw = g["half_width"]
        vx, vy = x1 - x0, y1 - y0
        length_sq = vx * vx + vy * vy
        t = np.clip(((X - x0) * vx + (Y - y0) * vy) / max(length_sq, 1e-12), 0.0, 1.0)
        dist = np.hypot(X - (x0 + t * vx), Y - (y0 + t * vy))
        support = dist <= hw
    else:  # ring
        (cx, cy) = g["center"]
        r = np.hypot(X - cx, Y - cy)
        support = (r <= g["r_out"]) & (r >= g["r_in"])
    return _downsample(support.astype(np.float64), resolution)


def decal_mask(spec: DecalSpec, resolution: int = 64) -> torch.Tensor:
    """Binary decal support at the output resolution."""
    coverage = _decal_support(spec.validate(), resolution)
    return torch.from_numpy((coverage >= 0.5).astype(np.float32))


def sample_decal(seed, resolution: int = 64) -> DecalSpec:
    """Draw a decal whose support fraction lands inside the documented bounds."""
    rng = np.random.default_rng(seed)
    for _ in range(64):
        kind = rng.choice(["polygon", "stroke", "ring"])
        color = tuple(rng.uniform(-1.0, 1.0, size=3))
        opacity = float(rng.uniform(0.7, 1.0))
        cx, cy = rng.uniform(-0.45, 0.45, size=2)
        if kind == "polygon":
            k = int(rng.integers(3, 7))
            radius = rng.uniform(0.14, 0.3)
            base = rng.uniform(0, 2 * np.pi)
            angles = base + np.sort(rng.uniform(0, 2 * np.pi, size=k))
            radii = radius * rng.uniform(0.7, 1.0, size=k)
            verts = [(cx + r * np.cos(a), cy + r * np.sin(a)) for r, a in zip(radii, angles)]
            geometry = {"vertices": verts}
        elif kind == "stroke":
            ang = rng.uniform(0, np.pi)
            length = rng.uniform(0.5, 1.1)
            dx, dy = np.cos(ang) * length / 2, np.sin(ang) * length / 2
            geometry = {
                "p0": (cx - dx, cy - dy),
                "p1": (cx + dx, cy + dy),
                "half_width": float(rng.uniform(0.05, 0.12)),
            }
        else:
            r_out = rng.uniform(0.16, 0.32)
            geometry = {"center": (cx, cy), "r_out": r_out,
                        "r_in": r_out * rng.uniform(0.4, 0.7)}
        spec = DecalSpec(kind=str(kind), color=color, opacity=opacity,
                         geometry=geometry).validate()
        frac = decal_mask(spec, resolution).mean().item()
        if DECAL_AREA_MIN <= frac <= DECAL_AREA_MAX:
            return spec
    raise ValidationError("could not sample a decal within the area bounds")


def paste_decal(image: torch.Tensor, spec: DecalSpec, attributes=None,
                seed: int = 0, resolution: int | None = None) -> Sample:
    """Composite a hard-alpha decal; the ground-truth mask is its exact support."""
    spec.validate()
    res = resolution if resolution is not None else image.shape[-1]
    support = decal_mask(spec, res)
    frac = support.mean().item()
    if not (DECAL_AREA_MIN <= frac <= DECAL_AREA_MAX):
        raise ValidationError(
            f"decal area fraction {frac:.4f} outside [{DECAL_AREA_MIN}, {DECAL_AREA_MAX}]"
        )
    alpha = support * spec.opacity
    color = torch.tensor(spec.color, dtype=image.dtype).view(3, 1, 1)
    out = image * (1 - alpha) + color * alpha
    return Sample(image=out, gt_ood_mask=support, attributes=dict(attributes or {}),
                  seed=seed, has_decal=True)


def make_dataset(n: int, seed: int = 0, decal_rate: float = 0.0,
                 resolution: int = 64) -> list:
    """Deterministic list of samples; a decal_rate fraction carry decals."""
    if n < 1:
        raise ValidationError("dataset size must be >= 1")
    if not (0.0 <= decal_rate <= 1.0):
        raise ValidationError("decal_rate must be in [0, 1]")
    children = np.random.SeedSequence(seed).spawn(n)
    samples = []
    for i, child in enumerate(children):
        face_seed, decal_seed, coin_seed = child.spawn(3)
        params, attributes = sample_params(face_seed)
        image = render_toy_face(params, resolution)
        coin = np.random.default_rng(coin_seed).random()
        if coin < decal_rate:
            sample = paste_decal(image, sample_decal(decal_seed, resolution),
                                 attributes=attributes, seed=i, resolution=resolution)
        else:
            sample = Sample(image=image,
                            gt_ood_mask=torch.zeros(resolution, resolution),
                            attributes=attributes, seed=i, has_decal=False)
        samples.append(sample)
    return samples


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """[-1, 1] float to HWC uint8."""
    arr = ((image.detach().cpu().numpy() + 1.0) * 127.5).round().clip(0, 255)
    return arr.astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    """HWC uint8 to [-1, 1] float CHW."""
    return torch.from_numpy(arr.astype(np.float32).transpose(2, 0, 1) / 127.5 - 1.0)


def export_dataset(samples, out_dir) -> Path:
    """Write images, ground-truth masks and a JSONL metadata sidecar."""
    from PIL import Image

    out_dir = Path(out_dir)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        name = f"img_{i:05d}.png"
        Image.fromarray(to_uint8(s.image)).save(out_dir / name)
        mask8 = (s.gt_ood_mask.numpy() * 255).round().astype(np.uint8)
        Image.fromarray(mask8, mode="L").save(out_dir / "masks" / f"mask_{i:05d}.png")
        lines.append(json.dumps({
            "image": name, "seed": s.seed, "has_decal": s.has_decal,
            "attributes": s.attributes,
        }, sort_keys=True))
    (out_dir / "metadata.jsonl").write_text("\n".join(lines) + "\n")
    return out_dir


def load_dataset(path) -> list:
    """Read back an exported dataset directory."""
    from PIL import Image

    path = Path(path)
    meta_path = path / "metadata.jsonl"
    if not meta_path.exists():
        raise ValidationError(f"dataset directory {path} has no metadata.jsonl")
    samples = []
    for i, line in enumerate(meta_path.read_text().splitlines()):
        rec = json.loads(line)
        img = from_uint8(np.asarray(Image.open(path / rec["image"]).convert("RGB")))
        mask_file = path / "masks" / f"mask_{i:05d}.png"
        if mask_file.exists():
            mask = torch.from_numpy(
                (np.asarray(Image.open(mask_file)) >= 128).astype(np.float32)
            )
        else:
            mask = torch.zeros(img.shape[-2:])
        samples.append(Sample(image=img, gt_ood_mask=mask,
                              attributes=rec.get("attributes", {}),
                              seed=rec.get("seed", i),
                              has_decal=bool(rec.get("has_decal", False))))
    return samples
