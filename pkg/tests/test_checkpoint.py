"""Checkpoint archive round-trips, integrity checks, and stage gating."""

import zipfile

import numpy as np
import pytest
import torch

from oodinv.checkpoint import load_checkpoint, save_checkpoint
from oodinv.config import NetConfig, SammConfig
from oodinv.errors import CheckpointError
from oodinv.model import InversionModel

from conftest import tiny_net_cfg


@pytest.fixture
def model():
    return InversionModel(tiny_net_cfg(), SammConfig(), seed=0)


class TestRoundTrip:
    def test_save_load_save_byte_identical(self, model, tmp_path):
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        model.save(p1, "a1")
        loaded, manifest, arrays = InversionModel.load(p1)
        loaded.save(p2, manifest["stage"])
        assert p1.read_bytes() == p2.read_bytes()

    def test_weights_bit_exact(self, model, tmp_path):
        path = tmp_path / "m.ckpt"
        model.save(path, "b")
        loaded, _, _ = InversionModel.load(path)
        before = model.state_arrays()
        after = loaded.state_arrays()
        assert set(before) == set(after)
        for k in before:
            assert (before[k] == after[k]).all(), k

    def test_optimizer_state_round_trips(self, tmp_path):
        arrays = {
            "opt.g.0.0.exp_avg": np.random.default_rng(0).normal(size=(4, 4)).astype(np.float32),
            "opt.g.0.0.step": np.asarray(17),
        }
        cfg = tiny_net_cfg()
        save_checkpoint(tmp_path / "o.ckpt", "a1", cfg, SammConfig(), arrays)
        _, loaded = load_checkpoint(tmp_path / "o.ckpt")
        for k, v in arrays.items():
            assert (loaded[k] == v).all()

    def test_behavior_identical_after_reload(self, model, tmp_path):
        path = tmp_path / "m.ckpt"
        model.save(path, "b")
        loaded, _, _ = InversionModel.load(path)
        x = torch.rand(3, 16, 16) * 2 - 1
        a = model.invert(x)
        b = loaded.invert(x)
        assert torch.equal(a.x_hat, b.x_hat)
        assert torch.equal(a.gathered, b.gathered)


class TestValidation:
    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope.ckpt")

    def test_tampered_manifest_rejected(self, model, tmp_path):
        path = tmp_path / "m.ckpt"
        model.save(path, "a1")
        names = {}
        with zipfile.ZipFile(path) as zf:
            for info in zf.infolist():
                names[info.filename] = zf.read(info.filename)
        names["manifest.json"] = names["manifest.json"].replace(b'"a1"', b'"b"')
        with zipfile.ZipFile(path, "w") as zf:
            for name, payload in names.items():
                zf.writestr(name, payload)
        with pytest.raises(CheckpointError, match="manifest digest"):
            load_checkpoint(path)

    def test_corrupted_array_rejected(self, model, tmp_path):
        path = tmp_path / "m.ckpt"
        model.save(path, "a1")
        names = {}
        with zipfile.ZipFile(path) as zf:
            for info in zf.infolist():
                names[info.filename] = zf.read(info.filename)
        victim = next(n for n in names if n.startswith("arrays/"))
        names[victim] = names[victim][:-4] + b"\x00\x00\x00\x01"
        with zipfile.ZipFile(path, "w") as zf:
            for name, payload in names.items():
                zf.writestr(name, payload)
        with pytest.raises(CheckpointError, match="corrupt"):
            load_checkpoint(path)

    def test_stage_gating(self, model, tmp_path):
        path = tmp_path / "a1.ckpt"
        model.save(path, "a1")
        with pytest.raises(CheckpointError, match="stage"):
            load_checkpoint(path, min_stage="a2")
        with pytest.raises(CheckpointError, match="stage"):
            InversionModel.load(path, min_stage="b")
        load_checkpoint(path, min_stage="a1")

    def test_config_mismatch_rejected(self, model, tmp_path):
        path = tmp_path / "m.ckpt"
        model.save(path, "a1")
        other = NetConfig()
        with pytest.raises(CheckpointError, match="config"):
            load_checkpoint(path, expect_net=other)

    def test_garbage_file_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"definitely not a zip")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
