"""Optimization loop: cosine schedule, augmentation, window-partition cropping."""
from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import radiometry
from .datakit import Scene, scene_to_tensors
from .hdrio import atomic_write
from .losses import ALPHA, BETA, LossReport, RandomConvFeatures, total_loss
from .metrics import psnr
from .model import SAFNet, SAFNetOutput, CheckpointError, ModelConfig, forward_full, load_checkpoint, save_checkpoint
from .warpgrid import window_partition, window_reverse

log = logging.getLogger(__name__)

_EPOCH_STREAM, _AUGMENT_STREAM = 0, 1

LOG_FIELDS = ("step", "lr", "l1_r", "perc_r", "l1_m", "census_m", "total", "eval_psnr_mu")


class ConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    s1_crop: int = 512
    s2_window: int = 128
    batch: int = 4
    epochs: int = 200
    max_steps: int = 0  # 0 disables the cap
    lr_max: float = 2e-4
    lr_min: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_alpha: float = ALPHA
    loss_beta: float = BETA
    census_patch: int = 7
    census_eps: float = 0.0081
    census_q: float = 0.1
    detach_stage1: bool = False
    augment: bool = True
    seed: int = 0
    ckpt_every: int = 100
    eval_every: int = 50
    train_dirs: list = field(default_factory=list)
    eval_dirs: list = field(default_factory=list)
    synthetic_train: int = 4
    synthetic_eval: int = 1
    synthetic_size: int = 512
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.s2_window <= 0 or self.s1_crop % self.s2_window:
            raise ConfigError(f"s2_window={self.s2_window} must divide s1_crop={self.s1_crop}")
        if not 0 < self.lr_min < self.lr_max:
            raise ConfigError("need 0 < lr_min < lr_max")
        if self.batch < 1 or self.epochs < 0 or self.max_steps < 0:
            raise ConfigError("batch must be positive and epochs/max_steps nonnegative")
        if self.census_patch < 3 or self.census_patch % 2 == 0 or self.census_eps <= 0 or self.census_q <= 0:
            raise ConfigError("census_patch must be odd and >= 3, census_eps and census_q positive")


def cosine_lr(step, total_steps, lr_max, lr_min):
    """Cosine decay from ``lr_max`` at step 0 to ``lr_min`` at the last step."""
    last = total_steps - 1
    if step <= 0 or last <= 0:
        return lr_max
    if step >= last:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / last))


# -- augmentation -----------------------------------------------------------------


@dataclass(frozen=True)
class AugmentDraw:
    y0: int = 0
    x0: int = 0
    hflip: bool = False
    vflip: bool = False
    rot90: int = 0  # counter-clockwise quarter turns, as np.rot90
    reverse_channels: bool = False

    @classmethod
    def sample(cls, rng, shape, crop):
        h, w = shape
        return cls(
            y0=int(rng.integers(0, h - crop + 1)),
            x0=int(rng.integers(0, w - crop + 1)),
            hflip=bool(rng.random() < 0.5),
            vflip=bool(rng.random() < 0.5),
            rot90=int(rng.integers(0, 4)),
            reverse_channels=bool(rng.random() < 0.5),
        )


def _apply_image(a, d: AugmentDraw, crop, channels=True):
    a = a[d.y0:d.y0 + crop, d.x0:d.x0 + crop]
    if d.hflip:
        a = a[:, ::-1]
    if d.vflip:
        a = a[::-1]
    a = np.rot90(a, d.rot90)
    if channels and d.reverse_channels:
        a = a[..., ::-1]
    return np.ascontiguousarray(a)


def _apply_flow(f, d: AugmentDraw, crop):
    f = _apply_image(f, d, crop, channels=False).copy()
    if d.hflip:
        f[..., 0] = -f[..., 0]
    if d.vflip:
        f[..., 1] = -f[..., 1]
    for _ in range(d.rot90 % 4):
        # a CCW quarter turn maps (x, y) -> (y, W-1-x), so (u, v) -> (v, -u)
        f = np.stack([f[..., 1], -f[..., 0]], axis=-1)
    return f


def _reflect_pad(scene: Scene, crop) -> Scene:
    h, w = scene.shape
    ph, pw = max(0, crop - h), max(0, crop - w)
    widths = ((0, ph), (0, pw), (0, 0))
    pad = lambda a: np.pad(a, widths[: a.ndim], mode="reflect" if ph < h and pw < w else "edge")  # noqa: E731
    return Scene(
        tuple(pad(a) for a in scene.ldr),
        scene.exposures,
        None if scene.gt is None else pad(scene.gt),
        None,  # reflected content has no single global flow
        None if scene.clip_masks is None else tuple(pad(m) for m in scene.clip_masks),
        scene.scene_id,
    )


def augment_sample(scene: Scene, rng=None, crop=512, draw: AugmentDraw | None = None) -> Scene:
    """Random crop, flips, quarter turns and RGB reversal, shared by all frames."""
    h, w = scene.shape
    if h < crop or w < crop:
        warnings.warn(f"scene {scene.scene_id!r} ({h}x{w}) is smaller than the {crop} crop; reflect-padding")
        scene = _reflect_pad(scene, crop)
    if draw is None:
        draw = AugmentDraw.sample(rng, scene.shape, crop)
    return Scene(
        tuple(_apply_image(a, draw, crop) for a in scene.ldr),
        scene.exposures,
        None if scene.gt is None else _apply_image(scene.gt, draw, crop),
        None if scene.gt_flows is None else tuple(_apply_flow(f, draw, crop) for f in scene.gt_flows),
        None if scene.clip_masks is None else tuple(_apply_image(m, draw, crop, False) for m in scene.clip_masks),
        scene.scene_id,
    )


# -- forward paths ----------------------------------------------------------------


def network_inputs(model: SAFNet, l1, l2, l3, times):
    g = model.config.gamma
    return [radiometry.make_network_input(l, times[:, i], g) for i, l in enumerate((l1, l2, l3))]


def train_path(model: SAFNet, xs, window, detach_stage1=False) -> SAFNetOutput:
    """Stage 1 on the full crop, refiner on window tiles moved to the batch axis."""
    f21, f23, m1, m3, hm = model.align_and_merge(*xs)
    stage1 = (f21, f23, m1, m3, hm)
    if detach_stage1:
        stage1 = tuple(t.detach() for t in stage1)
    size = hm.shape[-2:]
    tiles = [window_partition(t, window) for t in (*xs, *stage1)]
    hr = window_reverse(model.refine(*tiles), window, size)
    return SAFNetOutput(f21, f23, m1, m3, hm, hr)


# -- state and steps --------------------------------------------------------------


@dataclass
class TrainState:
    model: SAFNet
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    total_steps: int
    step: int = 0
    history: list = field(default_factory=list)
    fx: torch.nn.Module = field(default_factory=RandomConvFeatures)

    def step_rng(self, *key):
        """Generator derived from (seed, key); makes resumed runs replay exactly."""
        return np.random.default_rng([self.config.seed, *key])


def new_train_state(model_cfg: ModelConfig, train_cfg: TrainConfig, total_steps: int, model: SAFNet | None = None):
    model = model or SAFNet(model_cfg, seed=train_cfg.seed)
    opt = torch.optim.Adam(
        model.parameters(),
        lr=train_cfg.lr_max,
        betas=(train_cfg.adam_beta1, train_cfg.adam_beta2),
        eps=train_cfg.adam_eps,
    )
    return TrainState(model, opt, train_cfg, total_steps)


def batch_loss(state: TrainState, batch, window=None) -> tuple[SAFNetOutput, LossReport]:
    cfg = state.config
    model = state.model
    dtype = next(model.parameters()).dtype
    l1, l2, l3, times, gt = scene_to_tensors(batch, dtype)
    if gt is None:
        raise ValueError("training scenes need ground truth")
    xs = network_inputs(model, l1, l2, l3, times)
    out = train_path(model, xs, window or cfg.s2_window, cfg.detach_stage1)
    rep = total_loss(out.hdr_refined, out.hdr_merged, gt, state.fx, cfg.loss_alpha, cfg.loss_beta, model.config.mu,
                     dict(patch=cfg.census_patch, eps=cfg.census_eps, q=cfg.census_q))
    return out, rep


def train_step(state: TrainState, batch) -> tuple[TrainState, LossReport]:
    cfg = state.config
    for s in batch:
        if s.shape[0] % cfg.s2_window or s.shape[1] % cfg.s2_window:
            raise ConfigError(f"crop {s.shape} is not divisible by window {cfg.s2_window}")
    state.model.train()
    _, rep = batch_loss(state, batch)
    if not torch.isfinite(rep.total):
        raise TrainingDivergedError(f"non-finite loss at step {state.step}")
    lr = cosine_lr(state.step, state.total_steps, cfg.lr_max, cfg.lr_min)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    rep.total.backward()
    state.optimizer.step()
    state.step += 1
    state.history.append({"step": state.step, "lr": lr, **rep.as_floats()})
    return state, rep


@torch.no_grad()
def fixed_batch_loss(state: TrainState, scenes) -> float:
    """Total loss of the current weights on un-augmented scenes (training path)."""
    return float(batch_loss(state, list(scenes))[1].total)


@torch.no_grad()
def predict(model: SAFNet, scene: Scene) -> SAFNetOutput:
    """Evaluation path: no window partition."""
    model.eval()
    dtype = next(model.parameters()).dtype
    l1, l2, l3, times, _ = scene_to_tensors(scene, dtype)
    return forward_full(model, l1, l2, l3, times)


def to_hwc(t):
    return t[0].permute(1, 2, 0).double().numpy()


def mean_psnr_mu(model: SAFNet, scenes) -> float:
    vals = [psnr(to_hwc(predict(model, s).hdr_refined), s.gt, "mu", model.config.mu) for s in scenes]
    return float(np.mean(vals))


def baseline_psnr_mu(scenes, gamma=radiometry.GAMMA, mu=radiometry.MU) -> float:
    """PSNR-mu of the masks-off, zero-flow merge (the reference frame alone)."""
    vals = []
    for s in scenes:
        h2 = radiometry.ldr_to_linear(s.ldr[1], s.times[1], gamma).numpy()
        vals.append(psnr(h2, s.gt, "mu", mu))
    return float(np.mean(vals))


# -- checkpoints --------------------------------------------------------------------


def save_train_state(path, state: TrainState):
    save_checkpoint(path, state.model, extra={
        "train_state": {
            "optimizer": state.optimizer.state_dict(),
            "step": state.step,
            "total_steps": state.total_steps,
            "train_config": asdict(state.config),
            "history": [dict(r) for r in state.history],
        }
    })


def load_train_state(path) -> TrainState:
    model, payload = load_checkpoint(path)
    ts = payload.get("train_state")
    if ts is None:
        raise CheckpointError(f"{path} holds weights only; it cannot resume training")
    cfg = TrainConfig(**ts["train_config"])
    state = new_train_state(model.config, cfg, ts["total_steps"], model=model)
    state.optimizer.load_state_dict(ts["optimizer"])
    state.step = ts["step"]
    state.history = list(ts["history"])
    return state


def write_metrics_log(path, rows):
    buf = io.StringIO()
    wr = csv.DictWriter(buf, LOG_FIELDS, extrasaction="ignore", lineterminator="\n")
    wr.writeheader()
    for r in rows:
        wr.writerow({k: r.get(k, "") for k in LOG_FIELDS})
    with atomic_write(path) as fh:
        fh.write(buf.getvalue().encode())


# -- fit -------------------------------------------------------------------------------


def total_steps_for(n_scenes, cfg: TrainConfig):
    steps = cfg.epochs * math.ceil(n_scenes / cfg.batch)
    return min(steps, cfg.max_steps) if cfg.max_steps else steps


def fit(train_scenes, train_cfg: TrainConfig, model_cfg: ModelConfig | None = None, eval_scenes=None,
        out_dir=None, state: TrainState | None = None, on_step=None) -> TrainState:
    """Train until ``total_steps``; resumes from ``state`` when given.

    Each step's batch order and augmentation draws derive from
    ``(seed, epoch)`` and ``(seed, step, index)``, so a resumed run replays the
    uninterrupted one exactly.
    """
    train_scenes = list(train_scenes)
    if not train_scenes:
        raise ValueError("fit needs at least one training scene")
    if state is None:
        state = new_train_state(model_cfg or ModelConfig(), train_cfg, total_steps_for(len(train_scenes), train_cfg))
    cfg = state.config
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    n = len(train_scenes)
    per_epoch = math.ceil(n / cfg.batch)

    while state.step < state.total_steps:
        epoch, k = divmod(state.step, per_epoch)
        order = state.step_rng(_EPOCH_STREAM, epoch).permutation(n)
        idx = order[k * cfg.batch:(k + 1) * cfg.batch]
        batch = []
        for j, i in enumerate(idx):
            scene = train_scenes[i]
            if cfg.augment:
                scene = augment_sample(scene, state.step_rng(_AUGMENT_STREAM, state.step, j), cfg.s1_crop)
            batch.append(scene)
        try:
            _, rep = train_step(state, batch)
        except TrainingDivergedError as exc:
            where = f"; last good checkpoint kept in {out}" if out else ""
            raise TrainingDivergedError(f"{exc}{where}") from exc
        row = state.history[-1]
        last = state.step == state.total_steps
        if eval_scenes and (state.step % cfg.eval_every == 0 or last):
            row["eval_psnr_mu"] = mean_psnr_mu(state.model, eval_scenes)
        if out and (state.step % cfg.ckpt_every == 0 or last):
            save_train_state(out / "checkpoint.pt", state)
            write_metrics_log(out / "metrics.csv", state.history)
        if on_step:
            on_step(state, rep)
        log.info("step %d/%d loss %.5f", state.step, state.total_steps, row["total"])
    if out and state.total_steps == 0:
        save_train_state(out / "checkpoint.pt", state)
        write_metrics_log(out / "metrics.csv", state.history)
    return state
