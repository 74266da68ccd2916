"""CLI behavior: flag validation, exit codes, artifact sets, idempotency."""

import json

import pytest
import torch

from oodinv.cli import main
from oodinv.data import export_dataset, make_dataset, to_uint8
from oodinv.edit import EditDirection, save_direction

from conftest import tiny_net_cfg


@pytest.fixture
def face_png(tmp_path):
    from PIL import Image

    sample = make_dataset(1, seed=0, decal_rate=1.0, resolution=16)[0]
    path = tmp_path / "face.png"
    Image.fromarray(to_uint8(sample.image)).save(path)
    return path


@pytest.fixture
def directions_dir(tmp_path, tiny_checkpoint):
    torch.manual_seed(0)
    d = torch.randn(6, 16)
    direction = EditDirection(name="smile", direction=d / d.norm())
    out = tiny_checkpoint.parent / "directions"
    save_direction(direction, out)
    return out


class TestExitCodes:
    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["--help"])
        assert e.value.code == 0

    def test_every_subcommand_help_exits_zero(self):
        for cmd in ["data", "train", "invert", "edit", "masks", "eval",
                    "serve", "print-config"]:
            with pytest.raises(SystemExit) as e:
                main([cmd, "--help"])
            assert e.value.code == 0

    def test_missing_checkpoint_exit_2(self, face_png, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv("OODINV_CHECKPOINT_DIR", raising=False)
        code = main(["invert", "--image", str(face_png),
                     "--checkpoint", str(tmp_path / "missing.ckpt"),
                     "--out", str(tmp_path / "o")])
        assert code == 2
        assert "--checkpoint" in capsys.readouterr().err

    def test_no_checkpoint_flag_exit_2(self, face_png, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv("OODINV_CHECKPOINT_DIR", raising=False)
        code = main(["invert", "--image", str(face_png),
                     "--out", str(tmp_path / "o")])
        assert code == 2

    def test_unknown_flag_exit_2(self):
        with pytest.raises(SystemExit) as e:
            main(["invert", "--bogus"])
        assert e.value.code == 2

    def test_env_checkpoint_dir(self, face_png, tmp_path, tiny_checkpoint, monkeypatch):
        monkeypatch.setenv("OODINV_CHECKPOINT_DIR", str(tiny_checkpoint.parent))
        code = main(["invert", "--image", str(face_png),
                     "--checkpoint", tiny_checkpoint.name,
                     "--out", str(tmp_path / "o")])
        assert code == 0


class TestInvert:
    def test_produces_documented_file_set(self, face_png, tmp_path, tiny_checkpoint):
        out = tmp_path / "out"
        code = main(["invert", "--image", str(face_png),
                     "--checkpoint", str(tiny_checkpoint), "--out", str(out)])
        assert code == 0
        names = sorted(p.name for p in out.iterdir())
        assert names == ["blended.png", "inversion.png", "mask_gathered.png",
                         "mask_r8.png", "metrics.json"]
        metrics = json.loads((out / "metrics.json").read_text())
        assert {"psnr_db", "ssim", "aoa"} <= set(metrics)

    def test_idempotent_reruns(self, face_png, tmp_path, tiny_checkpoint):
        out = tmp_path / "out"
        argv = ["invert", "--image", str(face_png),
                "--checkpoint", str(tiny_checkpoint), "--out", str(out)]
        assert main(argv) == 0
        first = {p.name: p.read_bytes() for p in out.iterdir()}
        assert main(argv) == 0
        second = {p.name: p.read_bytes() for p in out.iterdir()}
        assert first == second

    def test_skip_alignment_changes_output(self, face_png, tmp_path, tiny_checkpoint):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        base = ["invert", "--image", str(face_png),
                "--checkpoint", str(tiny_checkpoint)]
        assert main(base + ["--out", str(out_a)]) == 0
        assert main(base + ["--out", str(out_b), "--skip-alignment"]) == 0
        assert (out_a / "blended.png").read_bytes() != (out_b / "blended.png").read_bytes()

    def test_iters_override_changes_metrics(self, face_png, tmp_path, tiny_checkpoint):
        out1 = tmp_path / "n1"
        out3 = tmp_path / "n3"
        base = ["invert", "--image", str(face_png),
                "--checkpoint", str(tiny_checkpoint)]
        assert main(base + ["--out", str(out1), "--iters", "1"]) == 0
        assert main(base + ["--out", str(out3), "--iters", "3"]) == 0
        m1 = json.loads((out1 / "metrics.json").read_text())
        m3 = json.loads((out3 / "metrics.json").read_text())
        assert m1["n_iters"] == 1 and m3["n_iters"] == 3


class TestEdit:
    def test_zero_strength_matches_blended(self, face_png, tmp_path,
                                           tiny_checkpoint, directions_dir):
        out = tmp_path / "out"
        code = main(["edit", "--image", str(face_png),
                     "--checkpoint", str(tiny_checkpoint),
                     "--direction", "smile", "--strength", "0.0",
                     "--out", str(out)])
        assert code == 0
        assert (out / "edited.png").read_bytes() == (out / "blended.png").read_bytes()

    def test_unknown_direction_exit_2(self, face_png, tmp_path, tiny_checkpoint,
                                      directions_dir, capsys):
        code = main(["edit", "--image", str(face_png),
                     "--checkpoint", str(tiny_checkpoint),
                     "--direction", "nope", "--out", str(tmp_path / "o")])
        assert code == 2
        assert "smile" in capsys.readouterr().err

    def test_deterministic_outputs(self, face_png, tmp_path, tiny_checkpoint,
                                   directions_dir):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            assert main(["edit", "--image", str(face_png),
                         "--checkpoint", str(tiny_checkpoint),
                         "--direction", "smile", "--strength", "0.8",
                         "--out", str(out)]) == 0
            outs.append((out / "edited.png").read_bytes())
        assert outs[0] == outs[1]


class TestMasks:
    def test_writes_mask_files(self, face_png, tmp_path, tiny_checkpoint):
        out = tmp_path / "m"
        assert main(["masks", "--image", str(face_png),
                     "--checkpoint", str(tiny_checkpoint), "--out", str(out)]) == 0
        names = sorted(p.name for p in out.iterdir())
        assert names == ["mask_gathered.png", "mask_r8.png"]


class TestEval:
    def test_eval_writes_report(self, tmp_path, tiny_checkpoint):
        ds = tmp_path / "ds"
        export_dataset(make_dataset(4, seed=1, decal_rate=1.0, resolution=16), ds)
        report_path = tmp_path / "report.json"
        code = main(["eval", "--checkpoint", str(tiny_checkpoint),
                     "--dataset", str(ds), "--out", str(report_path)])
        assert code == 0
        report = json.loads(report_path.read_text())
        per = report["per_image"]
        for key in ("psnr_db", "ssim", "aoa"):
            mean = sum(r[key] for r in per) / len(per)
            assert abs(report[key] - mean) < 1e-9

    def test_eval_records_override(self, tmp_path, tiny_checkpoint):
        ds = tmp_path / "ds"
        export_dataset(make_dataset(2, seed=2, decal_rate=0.5, resolution=16), ds)
        for n in (1, 3):
            rp = tmp_path / f"r{n}.json"
            assert main(["eval", "--checkpoint", str(tiny_checkpoint),
                         "--dataset", str(ds), "--out", str(rp),
                         "--n-override", str(n)]) == 0
            assert json.loads(rp.read_text())["n_iters"] == n

    def test_empty_dataset_exit_2(self, tmp_path, tiny_checkpoint):
        empty = tmp_path / "empty"
        empty.mkdir()
        code = main(["eval", "--checkpoint", str(tiny_checkpoint),
                     "--dataset", str(empty)])
        assert code == 2

    def test_missing_gt_masks_reported_absent(self, tmp_path, tiny_checkpoint):
        ds = tmp_path / "ds"
        export_dataset(make_dataset(3, seed=3, decal_rate=0.0, resolution=16), ds)
        rp = tmp_path / "r.json"
        assert main(["eval", "--checkpoint", str(tiny_checkpoint),
                     "--dataset", str(ds), "--out", str(rp)]) == 0
        assert json.loads(rp.read_text())["mask_iou"] is None


class TestStageGating:
    def test_a1_checkpoint_rejected_for_stage_b(self, tmp_path):
        from oodinv.config import SammConfig
        from oodinv.model import InversionModel

        model = InversionModel(tiny_net_cfg(), SammConfig(), seed=0)
        a1 = tmp_path / "a1.ckpt"
        model.save(a1, "a1")
        code = main(["train", "--stage", "b", "--out", str(tmp_path / "o"),
                     "--checkpoint", str(a1), "--steps", "1"])
        assert code == 2


class TestDataAndConfig:
    def test_data_command(self, tmp_path):
        out = tmp_path / "ds"
        assert main(["data", "--out", str(out), "--n", "4", "--seed", "1",
                     "--decal-rate", "1.0", "--resolution", "16"]) == 0
        assert (out / "metadata.jsonl").exists()
        assert len(list(out.glob("img_*.png"))) == 4

    def test_print_config(self, capsys):
        assert main(["print-config"]) == 0
        cfg = json.loads(capsys.readouterr().out)
        assert cfg["net"]["output_resolution"] == 64
        assert cfg["samm"]["n_iters"] == 2
        assert cfg["loss"]["lambda_bin"] == 0.5

    def test_print_config_roundtrip(self, tmp_path, capsys):
        assert main(["print-config"]) == 0
        text = capsys.readouterr().out
        path = tmp_path / "cfg.json"
        path.write_text(text)
        assert main(["print-config", "--config", str(path)]) == 0
        assert json.loads(capsys.readouterr().out) == json.loads(text)
