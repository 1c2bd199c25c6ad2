"""PSNR and SSIM in the linear and mu-law tonemapped domains (numpy, H×W×C)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .radiometry import MU

PSNR_CAP = 99.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


@dataclass
class MetricReport:
    psnr_mu: float
    psnr_l: float
    ssim_mu: float
    ssim_l: float


def tonemap_mu_np(x, mu=MU):
    return np.log1p(mu * np.clip(x, 0.0, 1.0)) / np.log1p(mu)


def _to_domain(pred, gt, domain, mu):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if domain == "mu":
        return tonemap_mu_np(pred, mu), tonemap_mu_np(gt, mu)
    if domain == "linear":
        return pred, gt
    raise ValueError(f"unknown domain {domain!r}")


def psnr(pred, gt, domain="linear", mu=MU):
    a, b = _to_domain(pred, gt, domain, mu)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def gaussian_window(size=SSIM_WIN, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    r = len(g) // 2
    out = correlate1d(img, g, axis=0, mode="reflect")
    out = correlate1d(out, g, axis=1, mode="reflect")
    return out[r:-r, r:-r]


def ssim_map(a, b, data_range=1.0):
    """Local SSIM of two 2-D arrays over the fully-inside window positions."""
    g = gaussian_window()
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))


def ssim(pred, gt, domain="linear", mu=MU):
    a, b = _to_domain(pred, gt, domain, mu)
    if min(a.shape[:2]) < SSIM_WIN:
        raise ValueError(f"SSIM needs images of at least {SSIM_WIN}x{SSIM_WIN}, got {a.shape[:2]}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return float(np.mean([ssim_map(a[..., c], b[..., c]).mean() for c in range(a.shape[-1])]))


def evaluate(pred, gt, mu=MU) -> MetricReport:
    return MetricReport(
        psnr_mu=psnr(pred, gt, "mu", mu),
        psnr_l=psnr(pred, gt, "linear"),
        ssim_mu=ssim(pred, gt, "mu", mu),
        ssim_l=ssim(pred, gt, "linear"),
    )
