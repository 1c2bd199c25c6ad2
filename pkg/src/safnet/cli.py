"""``safnet`` command line: fuse, train, eval, synth, stats."""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import datakit, hdrio, metrics
from .config import load_config
from .datakit import SceneLoadError
from .model import CheckpointError, SAFNet, load_checkpoint
from .trainer import ConfigError, TrainingDivergedError, fit, load_train_state, predict, to_hwc

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 3
EXIT_SCENE = 4
EXIT_CHECKPOINT = 5
EXIT_IO = 6
EXIT_DIVERGED = 7

log = logging.getLogger("safnet")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def num_workers():
    raw = os.environ.get("SAFNET_NUM_THREADS")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"SAFNET_NUM_THREADS must be an integer, got {raw!r}", EXIT_CONFIG) from None
    return max(1, n)


def _pair(text, n, cast=float):
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated values, got {text!r}")
    return tuple(cast(p) for p in parts)


def _on_off(text):
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--variant", choices=("safnet", "safnet-s"))
    common.add_argument("--half-res-io", type=_on_off, default=None, metavar="{on,off}")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="safnet", description="Selective-alignment multi-exposure HDR fusion")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fuse", parents=[common], help="fuse one scene into an HDR image")
    f.add_argument("scene")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--format", choices=("hdr", "pfm"), default=None)
    f.add_argument("--preview", help="write a mu-law tonemapped 8-bit PNG")
    f.add_argument("--dump-flow", metavar="DIR")
    f.add_argument("--dump-masks", metavar="DIR")

    e = sub.add_parser("eval", parents=[common], help="metrics against ground truth")
    e.add_argument("scenes", nargs="+", help="scene directories or roots containing them")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", help="CSV path (default: stdout)")

    t = sub.add_parser("train", parents=[common], help="train from a config")
    t.add_argument("--out", help="output directory (overrides train.out_dir)")
    t.add_argument("--checkpoint", help="resume from a training checkpoint")

    s = sub.add_parser("synth", parents=[common], help="write a synthetic oracle scene")
    s.add_argument("out_dir")
    s.add_argument("--size", type=int, default=512)
    s.add_argument("--motion", type=lambda v: _pair(v, 2), default=(0.0, 0.0))
    s.add_argument("--exposures", type=lambda v: _pair(v, 3), default=(0.0, 2.0, 4.0))
    s.add_argument("--texture", choices=("blobs", "gradient"), default="blobs")
    s.add_argument("--count", type=int, default=1, help="write COUNT scenes into OUT_DIR/synth_<seed>")
    s.add_argument("--format", choices=("hdr", "pfm"), default="hdr", help="ground-truth file format")

    st = sub.add_parser("stats", parents=[common], help="motion and saturation statistics as CSV")
    st.add_argument("root")
    st.add_argument("--flows", help="directory of <scene_id>.pfm flows (default: scenes' gt_flow_21.pfm)")
    st.add_argument("--thresh", type=float, default=datakit.SATURATION_THRESHOLD)
    st.add_argument("--out", help="CSV path (default: stdout)")
    return p


def _model_overrides(args):
    extra = []
    if args.variant:
        extra.append(f"model.variant={args.variant}")
    if args.half_res_io is not None:
        extra.append(f"model.half_res_io={'on' if args.half_res_io else 'off'}")
    if args.seed is not None:
        extra.append(f"train.seed={args.seed}")
    return extra


def _load_model(args) -> SAFNet:
    model, _ = load_checkpoint(args.checkpoint)
    cfg = model.config
    if args.variant and args.variant != cfg.variant:
        raise CliError(f"checkpoint holds variant {cfg.variant!r}, not {args.variant!r}", EXIT_CHECKPOINT)
    if args.half_res_io is not None and args.half_res_io != cfg.half_res_io:
        # weights do not depend on the I/O resolution switch
        state = model.state_dict()
        model = SAFNet(replace(cfg, half_res_io=args.half_res_io))
        model.load_state_dict(state)
    return model


def _write_text(path, text):
    if path is None:
        sys.stdout.write(text)
        return
    with hdrio.atomic_write(path) as fh:
        fh.write(text.encode())


def cmd_fuse(args):
    model = _load_model(args)
    scene = datakit.load_scene(args.scene)
    out = predict(model, scene)
    hr = to_hwc(out.hdr_refined)
    fmt = args.format or (Path(args.out).suffix.lstrip(".").lower() or "hdr")
    if fmt not in ("hdr", "pfm"):
        raise CliError(f"cannot infer an HDR format from {args.out}; pass --format", EXIT_CONFIG)
    hdrio.save_hdr(hr, args.out, fmt)
    if args.preview:
        hdrio.write_ldr(args.preview, metrics.tonemap_mu_np(hr, model.config.mu), bit_depth=8)
    if args.dump_flow:
        d = Path(args.dump_flow)
        d.mkdir(parents=True, exist_ok=True)
        datakit.write_flow(d / "flow_21.pfm", to_hwc(out.flow21))
        datakit.write_flow(d / "flow_23.pfm", to_hwc(out.flow23))
    if args.dump_masks:
        d = Path(args.dump_masks)
        d.mkdir(parents=True, exist_ok=True)
        hdrio.write_ldr(d / "mask_1.png", to_hwc(out.mask1)[..., 0], bit_depth=8)
        hdrio.write_ldr(d / "mask_3.png", to_hwc(out.mask3)[..., 0], bit_depth=8)
    return EXIT_OK


def cmd_eval(args):
    model = _load_model(args)
    dirs = [d for root in args.scenes for d in datakit.list_scene_dirs(root)]
    if not dirs:
        raise CliError("no scene directories found", EXIT_SCENE)

    def run(d):
        scene = datakit.load_scene(d)
        if scene.gt is None:
            raise SceneLoadError(f"{d}: evaluation needs a ground-truth image")
        rep = metrics.evaluate(to_hwc(predict(model, scene).hdr_refined), scene.gt, model.config.mu)
        return scene.scene_id, rep

    with ThreadPoolExecutor(num_workers()) as pool:
        rows = sorted(pool.map(run, dirs), key=lambda r: r[0])
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["scene_id", "psnr_mu", "psnr_l", "ssim_mu", "ssim_l"])
    for sid, rep in rows:
        wr.writerow([sid] + [f"{v:.6f}" for v in asdict(rep).values()])
    _write_text(args.out, buf.getvalue())
    return EXIT_OK


def _training_scenes(dirs, count, size, seed, offset):
    if dirs:
        return [datakit.load_scene(d) for root in dirs for d in datakit.list_scene_dirs(root)]
    rng = np.random.default_rng([seed, offset])
    scenes = []
    for i in range(count):
        motion = tuple(float(v) for v in rng.integers(-8, 9, 2))
        texture = "blobs" if i % 2 == 0 else "gradient"
        scenes.append(datakit.synth_scene(seed=offset + seed * 1000 + i, size=size, motion=motion, texture=texture))
    return scenes


def cmd_train(args):
    overrides = list(args.overrides) + _model_overrides(args)
    if args.out:
        overrides.append(f"train.out_dir={args.out}")
    model_cfg, train_cfg = load_config(args.config, overrides)
    train = _training_scenes(train_cfg.train_dirs, train_cfg.synthetic_train, train_cfg.synthetic_size,
                             train_cfg.seed, 0)
    evals = _training_scenes(train_cfg.eval_dirs, train_cfg.synthetic_eval, train_cfg.synthetic_size,
                             train_cfg.seed, 10_000)
    state = load_train_state(args.checkpoint) if args.checkpoint else None
    fit(train, train_cfg, model_cfg, eval_scenes=evals, out_dir=train_cfg.out_dir, state=state)
    return EXIT_OK


def cmd_synth(args):
    seed = args.seed if args.seed is not None else 0
    root = Path(args.out_dir)
    for i in range(args.count):
        scene = datakit.synth_scene(seed=seed + i, size=args.size, motion=args.motion,
                                    exposures=args.exposures, texture=args.texture)
        target = root if args.count == 1 else root / f"synth_{seed + i}"
        datakit.save_scene(scene, target, gt_format=args.format)
    return EXIT_OK


def cmd_stats(args):
    dirs = datakit.list_scene_dirs(args.root)
    if not dirs:
        raise CliError(f"no scene directories under {args.root}", EXIT_SCENE)
    with ThreadPoolExecutor(num_workers()) as pool:
        chunks = pool.map(lambda d: datakit.stats_rows([d], args.flows, args.thresh), dirs)
        rows = sorted(r for chunk in chunks for r in chunk)
    _write_text(args.out, datakit.write_stats_csv(rows))
    return EXIT_OK


COMMANDS = {"fuse": cmd_fuse, "eval": cmd_eval, "train": cmd_train, "synth": cmd_synth, "stats": cmd_stats}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.seed is not None:
        torch.manual_seed(args.seed)
    try:
        torch.set_num_threads(num_workers())
        if args.command != "train" and (args.config or args.overrides):
            load_config(args.config, args.overrides)  # validate even when unused
        return COMMANDS[args.command](args)
    except CliError as exc:
        msg, code = str(exc), exc.code
    except ConfigError as exc:
        msg, code = f"config error: {exc}", EXIT_CONFIG
    except SceneLoadError as exc:
        msg, code = f"scene error: {exc}", EXIT_SCENE
    except CheckpointError as exc:
        msg, code = f"checkpoint error: {exc}", EXIT_CHECKPOINT
    except TrainingDivergedError as exc:
        msg, code = f"training diverged: {exc}", EXIT_DIVERGED
    except (hdrio.HdrIOError, OSError) as exc:
        msg, code = f"I/O error: {exc}", EXIT_IO
    except ValueError as exc:
        msg, code = f"invalid input: {exc}", EXIT_FAILURE
    print(f"safnet {args.command}: {msg}", file=sys.stderr)
    return code


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
