"""Desk-scale overfit on four synthetic 512² scenes; prints the acceptance numbers."""
import argparse
import json

import torch

from safnet.experiments import OverfitConfig, overfit_synthetic
from safnet.model import ModelConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    d = OverfitConfig()
    p.add_argument("--steps", type=int, default=d.steps)
    p.add_argument("--crop", type=int, default=d.crop)
    p.add_argument("--window", type=int, default=d.window)
    p.add_argument("--lr-max", type=float, default=d.lr_max)
    p.add_argument("--lr-min", type=float, default=d.lr_min)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--full-width", action="store_true", help="use the standard SAFNet-S widths")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--json", help="write the result here")
    args = p.parse_args()

    torch.set_num_threads(args.threads)
    cfg = OverfitConfig(steps=args.steps, crop=args.crop, window=args.window, lr_max=args.lr_max,
                        lr_min=args.lr_min, seed=args.seed)
    if args.full_width:
        cfg.model = ModelConfig.for_variant("safnet-s")
    res = overfit_synthetic(cfg, log=print)
    print(f"baseline PSNR-mu {res.baseline_psnr_mu:.2f} dB, final {res.final_psnr_mu:.2f} dB ({res.gain_db:+.2f} dB)")
    print(f"loss ratio step {res.steps}/step {cfg.probe_step}: {res.loss_ratio:.3f}; {res.seconds / 60:.1f} min")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({**res.__dict__, "gain_db": res.gain_db, "loss_ratio": res.loss_ratio}, fh, indent=2)


if __name__ == "__main__":
    main()
