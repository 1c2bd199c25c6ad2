"""Pointwise radiometric math: domain conversions, fusion weights, explicit merge.

All functions take and return ``torch.Tensor`` in NCHW layout (any leading
batch shape works as long as the channel axis is third from the end).
Array-likes are accepted and converted with ``torch.as_tensor``.
"""
import math

import torch

GAMMA = 2.2
MU = 5000.0


class InvalidExposureError(ValueError):
    pass


def _exposure(t, like):
    t = torch.as_tensor(t, dtype=like.dtype)
    if torch.any(t <= 0):
        raise InvalidExposureError(f"exposure time must be positive, got {t.tolist()}")
    # (B,) -> (B,1,1,1) so per-sample times broadcast over C,H,W
    while t.dim() and t.dim() < like.dim():
        t = t.reshape(*t.shape, 1)
    return t


def ldr_to_linear(ldr, t, gamma=GAMMA):
    """Display-domain LDR in [0, 1] to linear radiance, ``ldr**gamma / t``."""
    ldr = torch.as_tensor(ldr)
    if not ldr.is_floating_point():
        ldr = ldr.double()
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return ldr ** gamma / _exposure(t, ldr)


def linear_to_ldr(hdr, t, gamma=GAMMA):
    """Inverse of :func:`ldr_to_linear` with sensor clipping at 1."""
    hdr = torch.as_tensor(hdr)
    if not hdr.is_floating_point():
        hdr = hdr.double()
    return (hdr * _exposure(t, hdr)).clamp(0.0, 1.0) ** (1.0 / gamma)


def tonemap_mu(hdr, mu=MU):
    """mu-law compression ``log(1 + mu*h) / log(1 + mu)`` of ``clamp(h, 0, 1)``."""
    hdr = torch.as_tensor(hdr)
    return torch.log1p(mu * hdr.clamp(0.0, 1.0)) / math.log1p(mu)


def make_network_input(ldr, t, gamma=GAMMA):
    """6-channel ``[L, H]`` tensor fed to the encoder and refiner."""
    ldr = torch.as_tensor(ldr)
    return torch.cat([ldr, ldr_to_linear(ldr, t, gamma)], dim=-3)


def initial_coefficients(ldr_ref):
    """Triangle fusion coefficients from reference brightness ``y = max(RGB)``.

    Bright reference pixels hand their weight to the short exposure (frame 1),
    dark ones to the long exposure (frame 3). At most one of ``lam1``/``lam3``
    is nonzero at any pixel.
    """
    ldr_ref = torch.as_tensor(ldr_ref)
    y = ldr_ref.amax(dim=-3, keepdim=True)
    lam1 = ((y - 0.5) / 0.5).clamp(min=0.0)
    lam3 = ((0.5 - y) / 0.5).clamp(min=0.0)
    lam2 = 1.0 - lam1 - lam3
    return lam1, lam2, lam3


def _check_mask(m, name):
    if torch.any(m < 0) or torch.any(m > 1):
        raise ValueError(f"{name} must lie in [0, 1]")


def reweight_coefficients(lam, m1, m3):
    """Mask-reweighted fusion weights.

    ``w1 = lam1*m1`` and ``w3 = lam3*m3``; the discarded share goes to the
    reference. ``w2`` is formed as ``1 - w1 - w3``, which equals
    ``lam2 + lam1*(1-m1) + lam3*(1-m3)`` whenever the coefficients sum to one,
    and makes zero masks give ``w2 == 1`` bit-exactly.
    """
    lam1, _, lam3 = lam
    _check_mask(m1, "m1")
    _check_mask(m3, "m3")
    w1 = lam1 * m1
    w3 = lam3 * m3
    w2 = 1.0 - w1 - w3
    return w1, w2, w3


def merge_hdr(h1w, h2, h3w, w1, w2, w3):
    """Explicit merge ``w1*h1w + w2*h2 + w3*h3w`` of aligned linear images."""
    if not (h1w.shape == h2.shape == h3w.shape):
        raise ValueError(f"shape mismatch: {tuple(h1w.shape)}, {tuple(h2.shape)}, {tuple(h3w.shape)}")
    return w1 * h1w + w2 * h2 + w3 * h3w
