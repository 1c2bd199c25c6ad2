import itertools
import math

import numpy as np
import pytest
import torch

from safnet.datakit import Scene, synth_scene
from safnet.model import ModelConfig, SAFNet
from safnet.trainer import (
    AugmentDraw,
    ConfigError,
    TrainConfig,
    TrainingDivergedError,
    augment_sample,
    baseline_psnr_mu,
    cosine_lr,
    fit,
    load_train_state,
    network_inputs,
    new_train_state,
    predict,
    total_steps_for,
    train_path,
    train_step,
)
from safnet.datakit import scene_to_tensors
from safnet.warpgrid import backward_warp

TINY = ModelConfig.for_variant("safnet-s", enc_channels=6, dec_channels=12, refine_channels=6)


def tiny_cfg(**kw):
    base = dict(s1_crop=64, s2_window=32, batch=2, epochs=2, lr_max=1e-3, lr_min=1e-4, eval_every=2, ckpt_every=2)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def scenes():
    return [synth_scene(seed=i, size=80, motion=(2.0, -1.0), texture=t) for i, t in enumerate(["blobs", "gradient", "blobs"])]


class TestCosine:
    def test_endpoints(self):
        assert cosine_lr(0, 101, 2e-4, 1e-5) == 2e-4
        assert cosine_lr(100, 101, 2e-4, 1e-5) == 1e-5

    def test_midpoint(self):
        assert cosine_lr(50, 101, 2e-4, 1e-5) == pytest.approx(1.05e-4, rel=1e-14)

    def test_quarter(self):
        expected = 1e-5 + 0.5 * 1.9e-4 * (1 + math.cos(math.pi / 4))
        assert cosine_lr(25, 101, 2e-4, 1e-5) == pytest.approx(expected, rel=1e-14)

    def test_monotone(self):
        lrs = [cosine_lr(s, 37, 1.0, 0.1) for s in range(37)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_single_step(self):
        assert cosine_lr(0, 1, 1.0, 0.1) == 1.0


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(s1_crop=100, s2_window=64), dict(lr_min=1.0), dict(batch=0), dict(epochs=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_total_steps(self):
        assert total_steps_for(5, TrainConfig(batch=2, epochs=3)) == 9
        assert total_steps_for(5, TrainConfig(batch=2, epochs=3, max_steps=4)) == 4


class TestAugment:
    def brute_force(self, a, d, crop):
        """Pixel-by-pixel dihedral map of the crop."""
        a = a[d.y0:d.y0 + crop, d.x0:d.x0 + crop]
        out = np.empty_like(a)
        for y, x in itertools.product(range(crop), range(crop)):
            yy, xx = y, x
            for _ in range(d.rot90):
                # output of one CCW turn at (y, x) reads input (x, W-1-y)
                yy, xx = xx, crop - 1 - yy
            if d.vflip:
                yy = crop - 1 - yy
            if d.hflip:
                xx = crop - 1 - xx
            out[y, x] = a[yy, xx]
        return out

    @pytest.mark.parametrize("hflip, vflip, rot", list(itertools.product([False, True], [False, True], range(4))))
    def test_dihedral_images(self, hflip, vflip, rot):
        a = np.random.default_rng(0).random((9, 10, 3))
        d = AugmentDraw(1, 2, hflip, vflip, rot, False)
        s = Scene((a, a, a), (0.0, 2.0, 4.0), a.clip(0, 1), scene_id="x")
        out = augment_sample(s, draw=d, crop=6)
        assert np.array_equal(out.ldr[0], self.brute_force(a, d, 6))

    def test_channel_reversal(self):
        a = np.random.default_rng(1).random((8, 8, 3))
        s = Scene((a, a, a), (0.0, 2.0, 4.0), a, scene_id="x")
        out = augment_sample(s, draw=AugmentDraw(reverse_channels=True), crop=8)
        assert np.array_equal(out.gt, a[..., ::-1])

    @pytest.mark.parametrize("hflip, vflip, rot", list(itertools.product([False, True], [False, True], range(4))))
    def test_flow_stays_consistent_with_images(self, hflip, vflip, rot):
        s = synth_scene(seed=2, size=64, motion=(3.0, -2.0), exposures=(0.0, 0.5, 1.0))
        out = augment_sample(s, draw=AugmentDraw(4, 8, hflip, vflip, rot, False), crop=48)
        to_t = lambda a: torch.from_numpy(np.ascontiguousarray(a)).permute(2, 0, 1).unsqueeze(0)  # noqa: E731
        ref = to_t(out.gt)
        for i, flow in ((0, out.gt_flows[0]), (2, out.gt_flows[1])):
            radiance = to_t(out.ldr[i] ** 2.2 / out.times[i])
            warped = backward_warp(radiance, to_t(flow))
            clipped = backward_warp(to_t(out.clip_masks[i][..., None].astype(np.float64)), to_t(flow)) > 0
            err = (warped - ref).abs().masked_fill(clipped, 0)[..., 6:-6, 6:-6]
            assert (~clipped[..., 6:-6, 6:-6]).sum() > 500
            assert err.max().item() < 1e-9

    def test_sampled_draws_are_valid(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            d = AugmentDraw.sample(rng, (80, 70), 64)
            assert 0 <= d.y0 <= 16 and 0 <= d.x0 <= 6 and 0 <= d.rot90 < 4

    def test_small_scene_is_padded(self):
        s = synth_scene(size=40)
        with pytest.warns(UserWarning, match="reflect"):
            out = augment_sample(s, np.random.default_rng(0), crop=64)
        assert out.shape == (64, 64) and out.gt_flows is None


def test_train_path_matches_eval_path_on_single_window():
    model = SAFNet(ModelConfig.for_variant("safnet-s", refine_channels=8), seed=1).eval()
    s = synth_scene(seed=4, size=128, motion=(3.0, 1.0))
    l1, l2, l3, times, _ = scene_to_tensors(s)
    with torch.no_grad():
        xs = network_inputs(model, l1, l2, l3, times)
        train = train_path(model, xs, 128)
        ev = predict(model, s)
    assert torch.equal(train.hdr_refined, ev.hdr_refined)
    assert torch.equal(train.hdr_merged, ev.hdr_merged)


def test_gradient_reaches_stage1_through_partition(scenes):
    state = new_train_state(TINY, tiny_cfg(), 1)
    l1, l2, l3, times, _ = scene_to_tensors([s for s in scenes[:1]])
    xs = network_inputs(state.model, l1[..., :64, :64], l2[..., :64, :64], l3[..., :64, :64], times)
    train_path(state.model, xs, 32).hdr_refined.sum().backward()
    assert state.model.encoder.blocks[0][0][0].weight.grad.abs().sum() > 0


def test_detach_stage1_blocks_refiner_gradient(scenes):
    state = new_train_state(TINY, tiny_cfg(detach_stage1=True), 1)
    l1, l2, l3, times, _ = scene_to_tensors(scenes[:1])
    xs = network_inputs(state.model, l1[..., :64, :64], l2[..., :64, :64], l3[..., :64, :64], times)
    train_path(state.model, xs, 32, detach_stage1=True).hdr_refined.sum().backward()
    assert state.model.encoder.blocks[0][0][0].weight.grad is None


class TestFit:
    def test_epochs_zero_keeps_init(self, scenes, tmp_path):
        cfg = tiny_cfg(epochs=0)
        state = fit(scenes, cfg, TINY, out_dir=tmp_path)
        fresh = SAFNet(TINY, seed=cfg.seed)
        assert state.step == 0
        assert all(torch.equal(a, b) for a, b in zip(state.model.state_dict().values(), fresh.state_dict().values()))
        assert (tmp_path / "checkpoint.pt").exists()

    def test_history_lr_and_logs(self, scenes, tmp_path):
        cfg = tiny_cfg()
        state = fit(scenes, cfg, TINY, eval_scenes=scenes[:1], out_dir=tmp_path)
        assert state.step == 4
        assert [r["lr"] for r in state.history] == [cosine_lr(i, 4, 1e-3, 1e-4) for i in range(4)]
        assert "eval_psnr_mu" in state.history[1] and "eval_psnr_mu" in state.history[3]
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0].startswith("step,lr,l1_r") and len(lines) == 5

    def test_deterministic_runs(self, scenes):
        a = fit(scenes, tiny_cfg(), TINY)
        b = fit(scenes, tiny_cfg(), TINY)
        assert [r["total"] for r in a.history] == [r["total"] for r in b.history]

    def test_resume_is_bit_identical(self, scenes, tmp_path):
        full = fit(scenes, tiny_cfg(), TINY)

        class Interrupt(Exception):
            pass

        def stop_after_two(state, _):
            if state.step == 2:
                raise Interrupt

        with pytest.raises(Interrupt):
            fit(scenes, tiny_cfg(), TINY, out_dir=tmp_path, on_step=stop_after_two)
        state = load_train_state(tmp_path / "checkpoint.pt")
        assert state.step == 2 and state.total_steps == 4
        resumed = fit(scenes, state.config, state=state)
        assert [r["total"] for r in resumed.history] == [r["total"] for r in full.history]
        for a, b in zip(resumed.model.state_dict().values(), full.model.state_dict().values()):
            assert torch.equal(a, b)

    def test_nan_aborts_before_update(self, scenes):
        bad_gt = scenes[0].gt.copy()
        bad_gt[0, 0, 0] = np.nan
        bad = Scene(scenes[0].ldr, scenes[0].exposures, bad_gt, scene_id="bad")
        state = new_train_state(TINY, tiny_cfg(augment=False, s1_crop=64), 1)
        before = {k: v.clone() for k, v in state.model.state_dict().items()}
        with pytest.raises(TrainingDivergedError):
            train_step(state, [Scene(tuple(a[:64, :64] for a in bad.ldr), bad.exposures, bad.gt[:64, :64])])
        assert state.step == 0
        assert all(torch.equal(before[k], v) for k, v in state.model.state_dict().items())

    def test_rejects_indivisible_crop(self, scenes):
        state = new_train_state(TINY, tiny_cfg(), 1)
        with pytest.raises(ConfigError):
            train_step(state, [scenes[0]])  # 80 is not a multiple of 32

    def test_no_scenes(self):
        with pytest.raises(ValueError):
            fit([], tiny_cfg(), TINY)


def test_baseline_is_reference_frame_psnr():
    s = synth_scene(seed=0, size=32, exposures=(0.0, 0.0001, 4.0))
    # the reference frame alone is exact wherever it is unclipped
    assert baseline_psnr_mu([s]) > 60


def test_fixed_batch_loss_mostly_decreases_over_50_steps():
    s = synth_scene(seed=3, size=64, motion=(2.0, -1.0))
    cfg = TrainConfig(s1_crop=64, s2_window=32, batch=1, epochs=50, augment=False, eval_every=0, ckpt_every=0)
    totals = [r["total"] for r in fit([s], cfg, TINY).history]
    assert len(totals) == 50
    assert sum(b >= a for a, b in zip(totals, totals[1:])) <= 5
    assert totals[-1] < totals[0]


def test_census_settings_reach_the_loss(scenes):
    crop = [Scene(tuple(a[:64, :64] for a in scenes[0].ldr), scenes[0].exposures, scenes[0].gt[:64, :64])]
    reps = []
    for q in (0.1, 0.4):
        state = new_train_state(TINY, tiny_cfg(augment=False, batch=1, census_q=q), 1)
        reps.append(train_step(state, crop)[1].as_floats())
    assert reps[0]["l1_m"] == reps[1]["l1_m"] and reps[0]["census_m"] > reps[1]["census_m"]


@pytest.mark.parametrize("kw", [dict(census_patch=4), dict(census_patch=1), dict(census_eps=0.0), dict(census_q=-1.0)])
def test_invalid_census_settings(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)
