"""Training objectives on mu-law tonemapped images."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .radiometry import MU, tonemap_mu

ALPHA = 0.01
BETA = 0.1

# A feature extractor maps an N×3×H×W image to a list of feature maps.
FeatureExtractor = Callable[[torch.Tensor], Sequence[torch.Tensor]]


@dataclass
class LossReport:
    l1_r: torch.Tensor
    perc_r: torch.Tensor
    l1_m: torch.Tensor
    census_m: torch.Tensor
    total: torch.Tensor
    alpha: float = ALPHA
    beta: float = BETA

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("l1_r", "perc_r", "l1_m", "census_m", "total")}


class RandomConvFeatures(nn.Module):
    """Frozen stride-2 conv stack standing in for a pretrained backbone.

    Weights come from a private generator, so building one never disturbs the
    global RNG stream.
    """

    def __init__(self, channels=(16, 32, 64), seed=0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        stages, cin = [], 3
        for cout in channels:
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.normal_(0.0, (2.0 / (9 * cin)) ** 0.5, generator=gen)
                conv.bias.zero_()
            stages.append(nn.Sequential(conv, nn.ReLU()))
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def tonemapped_l1(pred, gt, mu=MU):
    _same_shape(pred, gt)
    return (tonemap_mu(pred, mu) - tonemap_mu(gt, mu)).abs().mean()


def perceptual_loss(pred, gt, fx: FeatureExtractor):
    """Sum over feature stages of the mean absolute feature difference."""
    _same_shape(pred, gt)
    total = pred.new_zeros(())
    for fp, fg in zip(fx(pred), fx(gt)):
        total = total + (fp - fg).abs().mean()
    return total


def census_transform(img, patch=7, eps=0.0081):
    """Soft-sign census descriptor, one channel per neighbour (N×(patch²-1)×H×W).

    Neighbours outside the image read as zero; callers should drop the
    border band of width ``patch // 2``.
    """
    if patch % 2 == 0:
        raise ValueError("census patch size must be odd")
    gray = img.mean(dim=1, keepdim=True)
    r = patch // 2
    padded = F.pad(gray, (r, r, r, r))
    h, w = gray.shape[-2:]
    diffs = []
    for dy in range(patch):
        for dx in range(patch):
            if dy == r and dx == r:
                continue
            diffs.append(padded[:, :, dy:dy + h, dx:dx + w] - gray)
    d = torch.cat(diffs, dim=1)
    return d / torch.sqrt(eps + d * d)


def census_loss(pred, gt, patch=7, eps=0.0081, q=0.1):
    """Soft Hamming distance ``d²/(q + d²)`` between census descriptors.

    Averaged over neighbours and over pixels whose full window lies inside
    the image.
    """
    _same_shape(pred, gt)
    r = patch // 2
    h, w = pred.shape[-2:]
    if h <= 2 * r or w <= 2 * r:
        raise ValueError(f"image {h}x{w} too small for a {patch}x{patch} census window")
    d = census_transform(pred, patch, eps) - census_transform(gt, patch, eps)
    dist = d * d / (q + d * d)
    return dist[:, :, r:h - r, r:w - r].mean()


def total_loss(hr, hm, hgt, fx: FeatureExtractor, alpha=ALPHA, beta=BETA, mu=MU, census=None) -> LossReport:
    """``census`` optionally overrides the census keywords (patch, eps, q)."""
    _same_shape(hr, hgt)
    _same_shape(hm, hgt)
    t_r, t_m, t_gt = tonemap_mu(hr, mu), tonemap_mu(hm, mu), tonemap_mu(hgt, mu)
    l1_r = (t_r - t_gt).abs().mean()
    perc_r = perceptual_loss(t_r, t_gt, fx)
    l1_m = (t_m - t_gt).abs().mean()
    census_m = census_loss(t_m, t_gt, **(census or {}))
    total = (l1_r + alpha * perc_r) + beta * (l1_m + census_m)
    return LossReport(l1_r, perc_r, l1_m, census_m, total, alpha, beta)
