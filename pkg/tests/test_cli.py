import csv
import json

import cv2
import numpy as np
import pytest
import torch

from safnet import hdrio, radiometry
from safnet.cli import run_cli
from safnet.config import load_config, parse_overrides
from safnet.datakit import load_scene, save_scene, synth_scene, write_flow
from safnet.model import ModelConfig, SAFNet, save_checkpoint, zero_decoder_, zero_refiner_output_
from safnet.trainer import ConfigError, TrainConfig


@pytest.fixture
def scene_dir(tmp_path):
    assert run_cli(["synth", str(tmp_path / "scene"), "--size", "64", "--motion", "2,1", "--format", "pfm"]) == 0
    return tmp_path / "scene"


@pytest.fixture
def zero_ckpt(tmp_path):
    model = SAFNet(ModelConfig.for_variant("safnet-s"))
    zero_refiner_output_(zero_decoder_(model))
    save_checkpoint(tmp_path / "zero.pt", model)
    return tmp_path / "zero.pt"


class TestConfig:
    def test_defaults(self):
        m, t = load_config()
        assert m == ModelConfig() and t == TrainConfig()

    def test_file_and_overrides(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"model": {"variant": "safnet-s"}, "train": {"batch": 2, "epochs": 3}}))
        m, t = load_config(p, ["train.epochs=5", "model.half_res_io=off", "model.refine_dilations=1,2,1"])
        assert m.refine_channels == 32 and not m.half_res_io and m.refine_dilations == (1, 2, 1)
        assert t.batch == 2 and t.epochs == 5

    @pytest.mark.parametrize("bad", [["train.nope=1"], ["train.batch=two"], ["batch=2"], ["x.y=1"],
                                     ["model.half_res_io=maybe"], ["train.lr_min=1"]])
    def test_rejects(self, bad):
        with pytest.raises(ConfigError):
            load_config(None, bad)

    def test_bad_file(self, tmp_path):
        (tmp_path / "c.json").write_text("{nope")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "c.json")
        (tmp_path / "c.json").write_text('{"optim": {}}')
        with pytest.raises(ConfigError, match="optim"):
            load_config(tmp_path / "c.json")

    def test_parse_overrides(self):
        assert parse_overrides(["train.seed=3", "model.variant=safnet-s"]) == {
            "train": {"seed": "3"}, "model": {"variant": "safnet-s"}}


class TestSynthAndStats:
    def test_synth_writes_scene(self, scene_dir):
        s = load_scene(scene_dir)
        assert s.shape == (64, 64) and s.exposures == (0.0, 2.0, 4.0)
        assert np.all(s.gt_flows[1] == [2.0, 1.0])

    def test_synth_count(self, tmp_path):
        assert run_cli(["synth", str(tmp_path), "--size", "16", "--count", "2", "--seed", "5"]) == 0
        assert sorted(p.name for p in tmp_path.iterdir()) == ["synth_5", "synth_6"]

    def test_stats_three_four_five(self, tmp_path):
        root = tmp_path / "set"
        run_cli(["synth", str(root), "--size", "32", "--count", "2", "--motion", "3,4"])
        out = tmp_path / "stats.csv"
        assert run_cli(["stats", str(root), "--out", str(out)]) == 0
        rows = list(csv.DictReader(out.open()))
        assert [r["scene_id"] for r in rows] == ["synth_0", "synth_1", "mean"]
        assert all(abs(float(r["motion_magnitude"]) - 5.0) <= 1e-6 for r in rows)

    def test_stats_known_saturation(self, tmp_path):
        s = synth_scene(size=20)
        ldr2 = np.full((20, 20, 3), 0.5)
        ldr2[:5] = 1.0  # exactly a quarter saturated
        save_scene(type(s)((s.ldr[0], ldr2, s.ldr[2]), s.exposures, s.gt, s.gt_flows), tmp_path / "a")
        ext = tmp_path / "flows"
        ext.mkdir()
        write_flow(ext / "a.pfm", np.zeros((20, 20, 2)))
        out = tmp_path / "s.csv"
        assert run_cli(["stats", str(tmp_path / "a"), "--flows", str(ext), "--out", str(out)]) == 0
        row = next(csv.DictReader(out.open()))
        assert float(row["saturation_ratio"]) == 0.25 and float(row["motion_magnitude"]) == 0.0


class TestFuseEval:
    def test_zero_weight_fuse_is_lambda_merge(self, scene_dir, zero_ckpt, tmp_path):
        out = tmp_path / "out.pfm"
        assert run_cli(["fuse", str(scene_dir), "--checkpoint", str(zero_ckpt), "--out", str(out)]) == 0
        s = load_scene(scene_dir)
        hs = [radiometry.ldr_to_linear(torch.from_numpy(l), t).numpy() for l, t in zip(s.ldr, s.times)]
        lam1, lam2, lam3 = (v.numpy() for v in radiometry.initial_coefficients(torch.from_numpy(s.ldr[1]).permute(2, 0, 1)))
        lam1, lam2, lam3 = (v.transpose(1, 2, 0) for v in (lam1, lam2, lam3))
        expected = 0.5 * lam1 * hs[0] + (lam2 + 0.5 * (lam1 + lam3)) * hs[1] + 0.5 * lam3 * hs[2]
        np.testing.assert_allclose(hdrio.read_pfm(out), expected, rtol=1e-5, atol=1e-7)

    def test_fuse_is_idempotent_and_dumps(self, scene_dir, zero_ckpt, tmp_path):
        args = ["fuse", str(scene_dir), "--checkpoint", str(zero_ckpt)]
        assert run_cli(args + ["--out", str(tmp_path / "a.pfm"), "--dump-flow", str(tmp_path / "f"),
                               "--dump-masks", str(tmp_path / "m"), "--preview", str(tmp_path / "p.png")]) == 0
        assert run_cli(args + ["--out", str(tmp_path / "b.pfm")]) == 0
        assert (tmp_path / "a.pfm").read_bytes() == (tmp_path / "b.pfm").read_bytes()
        assert np.all(hdrio.read_pfm(tmp_path / "f" / "flow_21.pfm") == 0)
        mask = cv2.imread(str(tmp_path / "m" / "mask_1.png"), cv2.IMREAD_UNCHANGED)
        assert mask.shape == (64, 64) and np.all(mask == 128)  # round(0.5 * 255)
        assert (tmp_path / "p.png").exists()

    def test_fuse_hdr_format(self, scene_dir, zero_ckpt, tmp_path):
        assert run_cli(["fuse", str(scene_dir), "--checkpoint", str(zero_ckpt), "--out", str(tmp_path / "o.hdr")]) == 0
        assert hdrio.read_rgbe(tmp_path / "o.hdr").shape == (64, 64, 3)

    def test_eval_csv(self, scene_dir, zero_ckpt, tmp_path):
        out = tmp_path / "m.csv"
        assert run_cli(["eval", str(scene_dir), "--checkpoint", str(zero_ckpt), "--out", str(out)]) == 0
        rows = list(csv.DictReader(out.open()))
        assert len(rows) == 1 and rows[0]["scene_id"] == "scene"
        assert float(rows[0]["psnr_mu"]) > 20

    def test_train_smoke(self, tmp_path):
        out = tmp_path / "run"
        code = run_cli(["train", "--variant", "safnet-s", "--out", str(out), "--set", "train.epochs=1",
                        "--set", "train.s1_crop=64", "--set", "train.s2_window=32", "--set", "train.synthetic_train=1",
                        "--set", "train.synthetic_eval=1", "--set", "train.synthetic_size=64",
                        "--set", "model.refine_channels=8"])
        assert code == 0
        assert (out / "checkpoint.pt").exists() and (out / "metrics.csv").exists()
        ckpt = out / "checkpoint.pt"
        assert run_cli(["train", "--out", str(out), "--checkpoint", str(ckpt)]) == 0


class TestExitCodes:
    def test_usage(self):
        assert run_cli(["fuse"]) == 2

    def test_missing_scene(self, zero_ckpt, tmp_path):
        assert run_cli(["fuse", str(tmp_path / "nope"), "--checkpoint", str(zero_ckpt), "--out", str(tmp_path / "o.pfm")]) == 4
        assert not (tmp_path / "o.pfm").exists()

    def test_bad_checkpoint(self, scene_dir, tmp_path):
        (tmp_path / "bad.pt").write_bytes(b"xx")
        assert run_cli(["fuse", str(scene_dir), "--checkpoint", str(tmp_path / "bad.pt"), "--out", str(tmp_path / "o.pfm")]) == 5
        assert not (tmp_path / "o.pfm").exists()

    def test_variant_mismatch(self, scene_dir, zero_ckpt, tmp_path):
        assert run_cli(["fuse", str(scene_dir), "--checkpoint", str(zero_ckpt), "--variant", "safnet",
                        "--out", str(tmp_path / "o.pfm")]) == 5

    def test_bad_config(self, scene_dir, zero_ckpt, tmp_path):
        assert run_cli(["fuse", str(scene_dir), "--checkpoint", str(zero_ckpt), "--set", "train.bogus=1",
                        "--out", str(tmp_path / "o.pfm")]) == 3

    def test_unwritable_output(self, scene_dir, zero_ckpt, tmp_path):
        out = tmp_path / "missing_dir" / "o.pfm"
        assert run_cli(["fuse", str(scene_dir), "--checkpoint", str(zero_ckpt), "--out", str(out)]) == 6
        assert not out.parent.exists()

    def test_bad_threads(self, scene_dir, monkeypatch, tmp_path):
        monkeypatch.setenv("SAFNET_NUM_THREADS", "lots")
        assert run_cli(["stats", str(scene_dir)]) == 3

    def test_stats_empty_root(self, tmp_path):
        assert run_cli(["stats", str(tmp_path)]) == 4

    def test_eval_needs_ground_truth(self, scene_dir, zero_ckpt):
        (scene_dir / "gt.pfm").unlink()
        assert run_cli(["eval", str(scene_dir), "--checkpoint", str(zero_ckpt)]) == 4
