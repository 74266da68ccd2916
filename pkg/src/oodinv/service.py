"""HTTP API wrapping inversion and editing over an immutable model snapshot.

Sessions cache the intermediates of the last inversion (latent, features,
flows, masks) so slider-style edits skip the encode and alignment passes.
The cache is bounded (LRU, 64 entries) and entries expire after 15 minutes.
All responses are JSON with base64-encoded PNG payloads.
"""

from __future__ import annotations

import base64
import binascii
import io
import secrets
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from .data import from_uint8, to_uint8
from .edit import apply_edit, list_directions, load_direction
from .errors import ValidationError
from .metrics import psnr, ssim
from .model import InversionModel, InversionOutputs
from .nets import LatentCode

SESSION_TTL_SECONDS = 15 * 60
MAX_SESSIONS = 64
PAYLOAD_LIMIT_BYTES = 8 * 1024 * 1024
STRENGTH_LIMIT = 3.0


class InvertRequest(BaseModel):
    image_b64: str


class EditRequest(BaseModel):
    session_id: str
    direction: str
    strength: float


@dataclass
class Session:
    created: float
    x: torch.Tensor
    outputs: InversionOutputs
    blended_png: str
    mask_png: str


def _error(status: int, code: str, message: str) -> HTTPException:
    return HTTPException(status_code=status,
                         detail={"code": code, "message": message})


def _png_b64(image: torch.Tensor) -> str:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(to_uint8(image)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _mask_png_b64(mask: torch.Tensor) -> str:
    from PIL import Image

    buf = io.BytesIO()
    arr = np.round(mask.detach().cpu().numpy() * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def build_app(checkpoint_path, directions_dir=None) -> FastAPI:
    from PIL import Image

    model, manifest, _ = InversionModel.load(checkpoint_path, min_stage="b")
    ckpt_id = manifest["checkpoint_id"]
    if directions_dir is None:
        directions_dir = Path(checkpoint_path).parent / "directions"
    directions_dir = Path(directions_dir)

    sessions: OrderedDict[str, Session] = OrderedDict()
    lock = threading.Lock()

    app = FastAPI(title="oodinv", version="1")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
        allow_headers=["*"],
    )
    app.state.model = model
    app.state.checkpoint_id = ckpt_id
    app.state.sessions = sessions

    def _store_session(entry: Session) -> str:
        sid = secrets.token_hex(16)
        with lock:
            sessions[sid] = entry
            while len(sessions) > MAX_SESSIONS:
                sessions.popitem(last=False)
        return sid

    def _fetch_session(sid: str) -> Session:
        with lock:
            entry = sessions.get(sid)
            if entry is not None and time.monotonic() - entry.created > SESSION_TTL_SECONDS:
                del sessions[sid]
                entry = None
            if entry is None:
                raise _error(404, "session_not_found",
                             "unknown or expired session id; re-run /invert")
            sessions.move_to_end(sid)
        return entry

    @app.post("/v1/invert")
    def invert(req: InvertRequest):
        if len(req.image_b64) > PAYLOAD_LIMIT_BYTES * 4 // 3 + 8:
            raise _error(413, "payload_too_large",
                         f"image payload exceeds {PAYLOAD_LIMIT_BYTES} bytes")
        try:
            raw = base64.b64decode(req.image_b64, validate=True)
        except (binascii.Error, ValueError) as e:
            raise _error(400, "bad_base64", f"image_b64 is not valid base64: {e}")
        if len(raw) > PAYLOAD_LIMIT_BYTES:
            raise _error(413, "payload_too_large",
                         f"image payload exceeds {PAYLOAD_LIMIT_BYTES} bytes")
        try:
            img = Image.open(io.BytesIO(raw)).convert("RGB")
        except Exception as e:
            raise _error(400, "bad_image", f"cannot decode image: {e}")
        if img.width != img.height:
            raise _error(422, "not_square",
                         f"image must be square, got {img.width}x{img.height}")
        if img.width != model.resolution:
            img = img.resize((model.resolution, model.resolution), Image.BILINEAR)
        x = from_uint8(np.asarray(img))
        with torch.no_grad():
            out = model.invert_batch(x.unsqueeze(0))
        blended = out.x_hat.squeeze(0)
        gathered = out.gathered.squeeze(0)
        blended_png = _png_b64(blended)
        mask_png = _mask_png_b64(gathered)
        sid = _store_session(Session(created=time.monotonic(), x=x, outputs=out,
                                     blended_png=blended_png, mask_png=mask_png))
        return {
            "session_id": sid,
            "inversion_png": _png_b64(out.x_in_hat.squeeze(0)),
            "blended_png": blended_png,
            "mask_png": mask_png,
            "psnr": psnr(x, blended),
            "ssim": ssim(x, blended),
            "aoa": float(gathered.mean()),
        }

    @app.post("/v1/edit")
    def edit(req: EditRequest):
        if not (-STRENGTH_LIMIT <= req.strength <= STRENGTH_LIMIT):
            raise _error(400, "strength_out_of_range",
                         f"strength must lie in [-{STRENGTH_LIMIT}, {STRENGTH_LIMIT}]")
        try:
            direction = load_direction(directions_dir, req.direction)
        except ValidationError as e:
            raise _error(400, "unknown_direction", str(e))
        entry = _fetch_session(req.session_id)
        w = LatentCode(styles=entry.outputs.ws.squeeze(0))
        w_edit = apply_edit(w, direction, req.strength)
        with torch.no_grad():
            x_hat, _ = model.replay_batch(entry.x.unsqueeze(0), w_edit.batched(),
                                          entry.outputs)
        return {
            "edited_png": _png_b64(x_hat.squeeze(0)),
            "mask_png": entry.mask_png,
        }

    @app.get("/v1/directions")
    def directions():
        items = []
        for name in list_directions(directions_dir):
            d = load_direction(directions_dir, name)
            items.append({"name": name,
                          "suggested_range": list(d.suggested_range)})
        return {"directions": items}

    @app.get("/v1/health")
    def health():
        return {"status": "ok", "checkpoint_id": ckpt_id}

    return app
