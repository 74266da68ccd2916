"""Versioned checkpoint archives.

A checkpoint is a zip file with fixed entry metadata (so saving the same
state twice produces byte-identical archives) holding named float arrays and
a JSON manifest. The manifest echoes the network configs, records the
producing stage, and stores a digest per array plus a digest of the manifest
body itself; loading validates all of them and fails on any mismatch.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .config import NetConfig, SammConfig
from .errors import CheckpointError

FORMAT_VERSION = 1

# stages in pipeline order; later stages contain everything earlier ones do
STAGE_ORDER = {"a1": 0, "a2": 1, "b": 2}

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes):
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def checkpoint_id(array_digests: dict, config_echo: dict) -> str:
    body = json.dumps({"arrays": array_digests, "config": config_echo},
                      sort_keys=True).encode()
    return hashlib.sha256(body).hexdigest()[:16]


def save_checkpoint(path, stage: str, net_cfg: NetConfig, samm_cfg: SammConfig,
                    arrays: dict, extra: dict | None = None) -> str:
    """Write a checkpoint archive; returns its content id."""
    if stage not in STAGE_ORDER:
        raise CheckpointError(f"unknown stage {stage!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(arrays)
    digests = {}
    payloads = {}
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        payload = _npy_bytes(arr)
        payloads[name] = payload
        digests[name] = hashlib.sha256(payload).hexdigest()
    config_echo = {"net": net_cfg.to_dict(), "samm": samm_cfg.to_dict()}
    manifest = {
        "format_version": FORMAT_VERSION,
        "stage": stage,
        "config": config_echo,
        "arrays": digests,
        "checkpoint_id": checkpoint_id(digests, config_echo),
        "extra": extra or {},
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True, indent=1).encode()
    manifest_digest = hashlib.sha256(manifest_bytes).hexdigest()
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "manifest.json", manifest_bytes)
        _write_entry(zf, "manifest.sha256", manifest_digest.encode())
        for name in names:
            _write_entry(zf, f"arrays/{name}.npy", payloads[name])
    return manifest["checkpoint_id"]


def load_checkpoint(path, expect_net: NetConfig | None = None,
                    min_stage: str | None = None) -> tuple:
    """Read (manifest, arrays) from an archive, validating every digest.

    `expect_net` rejects archives whose network config differs from the live
    one; `min_stage` rejects archives produced before the required stage.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest_bytes = zf.read("manifest.json")
            stored_digest = zf.read("manifest.sha256").decode().strip()
            if hashlib.sha256(manifest_bytes).hexdigest() != stored_digest:
                raise CheckpointError(f"manifest digest mismatch in {path}")
            manifest = json.loads(manifest_bytes)
            if manifest.get("format_version") != FORMAT_VERSION:
                raise CheckpointError(
                    f"unsupported format_version {manifest.get('format_version')} in {path}"
                )
            arrays = {}
            for name, digest in manifest["arrays"].items():
                payload = zf.read(f"arrays/{name}.npy")
                if hashlib.sha256(payload).hexdigest() != digest:
                    raise CheckpointError(f"array {name!r} is corrupted in {path}")
                arrays[name] = np.load(io.BytesIO(payload), allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, OSError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if expect_net is not None:
        live = expect_net.to_dict()
        stored = manifest["config"]["net"]
        if stored != live:
            raise CheckpointError(
                f"checkpoint network config {stored} does not match live config {live}"
            )
    if min_stage is not None:
        have = manifest.get("stage")
        if STAGE_ORDER.get(have, -1) < STAGE_ORDER[min_stage]:
            raise CheckpointError(
                f"checkpoint was produced by stage {have!r}; stage {min_stage!r} or later required"
            )
    return manifest, arrays
