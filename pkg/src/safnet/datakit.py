"""Scene directories, the synthetic oracle-scene generator and dataset statistics.

Scene directory layout::

    input_1.png  input_2.png  input_3.png   8/16-bit PNG or TIFF, ordered by exposure
    exposures.txt                           three lines, log2 relative exposure
    gt.hdr | gt.pfm                         optional linear ground truth in [0, 1]
    gt_flow_21.pfm  gt_flow_23.pfm          optional flows (3-channel PF, third channel 0)
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import hdrio
from .hdrio import atomic_write

LDR_SUFFIXES = (".png", ".tif", ".tiff")
GT_NAMES = ("gt.hdr", "gt.pfm", "HDRImg.hdr")
FLOW_NAMES = ("gt_flow_21.pfm", "gt_flow_23.pfm")
SATURATION_THRESHOLD = 0.95


class SceneLoadError(ValueError):
    pass


@dataclass
class Scene:
    ldr: tuple  # three H×W×3 arrays in [0, 1], under/mid/over exposed
    exposures: tuple  # log2 relative exposures, strictly increasing
    gt: np.ndarray | None = None
    gt_flows: tuple | None = None  # (F_2->1, F_2->3), each H×W×2
    clip_masks: tuple | None = None  # per frame, True where any channel clipped
    scene_id: str = ""

    @property
    def times(self):
        return tuple(2.0 ** e for e in self.exposures)

    @property
    def shape(self):
        return self.ldr[1].shape[:2]

    def validate(self):
        if len(self.ldr) != 3 or len(self.exposures) != 3:
            raise SceneLoadError("a scene needs exactly three exposures")
        shapes = {a.shape for a in self.ldr}
        if len(shapes) != 1 or self.ldr[0].ndim != 3 or self.ldr[0].shape[2] != 3:
            raise SceneLoadError(f"LDR frames must share one H×W×3 shape, got {sorted(shapes)}")
        for i, a in enumerate(self.ldr, 1):
            if np.any(a < 0) or np.any(a > 1):
                raise SceneLoadError(f"frame {i} has values outside [0, 1]")
        e = self.exposures
        if not (e[0] < e[1] < e[2]):
            raise SceneLoadError(f"exposures must be strictly increasing, got {list(e)}")
        if self.gt is not None:
            if self.gt.shape != self.ldr[0].shape:
                raise SceneLoadError(f"ground truth shape {self.gt.shape} differs from LDR {self.ldr[0].shape}")
            if np.any(self.gt < 0) or np.any(self.gt > 1):
                raise SceneLoadError("ground truth must lie in [0, 1]")
        return self


# -- directory I/O ---------------------------------------------------------------


def _find_ldr(root: Path, i: int) -> Path:
    for suffix in LDR_SUFFIXES:
        p = root / f"input_{i}{suffix}"
        if p.exists():
            return p
    raise SceneLoadError(f"{root}: missing input_{i} image (tried {', '.join(LDR_SUFFIXES)})")


def read_flow(path):
    flow = hdrio.read_pfm(path)
    if flow.ndim != 3:
        raise SceneLoadError(f"{path}: flow files must be 3-channel PFM")
    return flow[..., :2].astype(np.float64)


def write_flow(path, flow):
    flow = np.asarray(flow, dtype=np.float32)
    pad = np.zeros(flow.shape[:2] + (1,), dtype=np.float32)
    hdrio.write_pfm(path, np.concatenate([flow, pad], axis=-1))


def load_scene(dir_path) -> Scene:
    root = Path(dir_path)
    if not root.is_dir():
        raise SceneLoadError(f"scene directory {root} does not exist")
    exp_file = root / "exposures.txt"
    if not exp_file.exists():
        raise SceneLoadError(f"{root}: missing exposures.txt")
    try:
        exposures = tuple(float(v) for v in exp_file.read_text().split())
    except ValueError as exc:
        raise SceneLoadError(f"{exp_file}: unparsable exposure value ({exc})") from exc
    if len(exposures) != 3:
        raise SceneLoadError(f"{exp_file}: expected three exposure values, got {len(exposures)}")
    try:
        ldr = tuple(hdrio.read_ldr(_find_ldr(root, i)) for i in (1, 2, 3))
        gt = None
        for name in GT_NAMES:
            if (root / name).exists():
                gt = hdrio.load_hdr(root / name).astype(np.float64)
                break
        flows = None
        if all((root / n).exists() for n in FLOW_NAMES):
            flows = tuple(read_flow(root / n) for n in FLOW_NAMES)
    except hdrio.HdrIOError as exc:
        raise SceneLoadError(str(exc)) from exc
    if gt is not None:
        # RGBE decoding can overshoot 1 by half a quantization step
        gt = np.clip(gt, 0.0, 1.0)
    return Scene(ldr, exposures, gt, flows, scene_id=root.name).validate()


def save_scene(scene: Scene, dir_path, gt_format="hdr", bit_depth=16):
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(scene.ldr, 1):
        hdrio.write_ldr(root / f"input_{i}.png", img, bit_depth)
    with atomic_write(root / "exposures.txt") as fh:
        fh.write("".join(f"{e!r}\n" for e in scene.exposures).encode())
    if scene.gt is not None:
        hdrio.save_hdr(scene.gt, root / f"gt.{gt_format}", gt_format)
    if scene.gt_flows is not None:
        for name, flow in zip(FLOW_NAMES, scene.gt_flows):
            write_flow(root / name, flow)
    return root


def list_scene_dirs(root):
    root = Path(root)
    if (root / "exposures.txt").exists():
        return [root]
    return sorted(p for p in root.iterdir() if (p / "exposures.txt").exists())


# -- synthetic oracle scenes -------------------------------------------------------


def _radiance_field(rng, h, w, texture):
    """Return a smooth radiance function R(x, y) -> H×W×3 with values in [0, 1)."""
    if texture == "blobs":
        k = 7
        span = max(h, w)
        cx = rng.uniform(-0.2, 1.2, k) * w
        cy = rng.uniform(-0.2, 1.2, k) * h
        sigma = rng.uniform(0.08, 0.22, k) * span
        amp = rng.uniform(0.5, 0.95, k)
        color = rng.uniform(0.35, 1.0, (k, 3))
        bg_dir = rng.normal(size=2)
        bg_dir /= np.linalg.norm(bg_dir)
        bg_color = rng.uniform(0.3, 1.0, 3)

        def field_fn(x, y):
            t = (bg_dir[0] * x / w + bg_dir[1] * y / h + 1.5) / 3.0
            bg = 0.004 + 0.08 * np.clip(t, 0, 1)[..., None] * bg_color
            keep = np.ones(x.shape + (3,))
            for j in range(k):
                g = np.exp(-((x - cx[j]) ** 2 + (y - cy[j]) ** 2) / (2 * sigma[j] ** 2))
                keep *= 1.0 - amp[j] * g[..., None] * color[j]
            return bg + 0.9 * (1.0 - keep)

        return field_fn

    if texture == "gradient":
        fx, fy = rng.uniform(0.5, 2.0, 2)
        phase = rng.uniform(0, 2 * np.pi, 3)
        color = rng.uniform(0.4, 1.0, 3)

        def field_fn(x, y):
            ramp = np.clip(x / w, 0, 1)[..., None]
            wave = 0.5 + 0.5 * np.sin(2 * np.pi * (fx * x / w + fy * y / h)[..., None] + phase)
            return 0.003 + 0.95 * color * ramp * (0.3 + 0.7 * wave)

        return field_fn

    raise ValueError(f"unknown texture {texture!r}")


def synth_scene(seed=0, size=256, motion=(0.0, 0.0), exposures=(0.0, 2.0, 4.0), texture="blobs", gamma=2.2,
                bit_depth=None) -> Scene:
    """Three exposures of one analytic radiance field under global translation.

    Frame 1 sees the scene shifted by ``+motion`` and frame 3 by ``-motion``,
    so the ground-truth flows from the reference are the constants
    ``-motion`` and ``+motion``. Optional ``bit_depth`` quantizes the LDRs.
    """
    from .radiometry import linear_to_ldr

    h, w = (size, size) if np.isscalar(size) else tuple(size)
    dx, dy = motion
    if h < 8 or w < 8:
        raise ValueError(f"scene size {h}x{w} is degenerate (need at least 8x8)")
    if abs(dx) >= w or abs(dy) >= h:
        raise ValueError("motion leaves no overlap between frames")
    rng = np.random.default_rng(seed)
    field_fn = _radiance_field(rng, h, w, texture)
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    radiance = (field_fn(x + dx, y + dy), field_fn(x, y), field_fn(x - dx, y - dy))
    gt = radiance[1]
    times = [2.0 ** e for e in exposures]
    ldr, clips = [], []
    for r, t in zip(radiance, times):
        l = linear_to_ldr(r, t, gamma).numpy()
        if bit_depth:
            q = 2**bit_depth - 1
            l = np.round(l * q) / q
        ldr.append(l)
        clips.append(np.any(r * t >= 1.0, axis=-1))
    flow21 = np.broadcast_to(np.array([-dx, -dy], dtype=np.float64), (h, w, 2)).copy()
    flow23 = -flow21
    return Scene(tuple(ldr), tuple(float(e) for e in exposures), gt, (flow21, flow23), tuple(clips),
                 scene_id=f"synth_{seed}").validate()


# -- statistics -------------------------------------------------------------------------


@dataclass
class DatasetStats:
    motion_magnitude: float
    saturation_ratio: float


def saturation_ratio(ldr_ref, thresh=SATURATION_THRESHOLD):
    """Fraction of reference pixels whose brightest channel reaches ``thresh``."""
    return float(np.mean(np.asarray(ldr_ref).max(axis=-1) >= thresh))


def motion_magnitude(flow):
    """Mean Euclidean displacement of an H×W×2 flow, in pixels."""
    flow = np.asarray(flow, dtype=np.float64)
    return float(np.mean(np.hypot(flow[..., 0], flow[..., 1])))


def scene_stats(scene: Scene, flow=None, thresh=SATURATION_THRESHOLD) -> DatasetStats:
    if flow is None:
        if scene.gt_flows is None:
            raise SceneLoadError(f"scene {scene.scene_id!r} has no flow; supply an external flow file")
        flow = scene.gt_flows[0]
    return DatasetStats(motion_magnitude(flow), saturation_ratio(scene.ldr[1], thresh))


def stats_rows(scene_dirs, flow_dir=None, thresh=SATURATION_THRESHOLD):
    rows = []
    for d in scene_dirs:
        scene = load_scene(d)
        flow = None
        if flow_dir is not None:
            path = Path(flow_dir) / f"{scene.scene_id}.pfm"
            if not path.exists():
                raise SceneLoadError(f"missing external flow {path}")
            flow = read_flow(path)
        s = scene_stats(scene, flow, thresh)
        rows.append((scene.scene_id, s.motion_magnitude, s.saturation_ratio))
    return sorted(rows)


def write_stats_csv(rows, path=None):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["scene_id", "motion_magnitude", "saturation_ratio"])
    for sid, mm, sr in rows:
        wr.writerow([sid, f"{mm:.9f}", f"{sr:.9f}"])
    if rows:
        wr.writerow(["mean", f"{np.mean([r[1] for r in rows]):.9f}", f"{np.mean([r[2] for r in rows]):.9f}"])
    text = buf.getvalue()
    if path is not None:
        with atomic_write(path) as fh:
            fh.write(text.encode())
    return text


def scene_to_tensors(scenes, dtype=None):
    """Stack scenes into (l1, l2, l3, times, gt) NCHW tensors."""
    import torch

    dtype = dtype or torch.get_default_dtype()
    if isinstance(scenes, Scene):
        scenes = [scenes]

    def stack(arrs):
        # contiguous NCHW: a channels-last view would select different conv kernels
        return torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2).to(dtype).contiguous()

    ls = [stack([s.ldr[i] for s in scenes]) for i in range(3)]
    times = torch.tensor([s.times for s in scenes], dtype=dtype)
    gt = stack([s.gt for s in scenes]) if all(s.gt is not None for s in scenes) else None
    return ls[0], ls[1], ls[2], times, gt
