"""Geometric primitives: backward warping, flow resizing, window partitioning.

Images are NCHW tensors. Flows are N×2×H×W in pixel units, channel 0 the
horizontal displacement (+right) and channel 1 the vertical one (+down), so
that ``backward_warp(src, flow)(p) == src(p + flow(p))``.
"""
import torch
import torch.nn.functional as F


class PartitionError(ValueError):
    pass


def backward_warp(src, flow):
    """Bilinearly sample ``src`` at ``p + flow(p)``.

    Sample coordinates are clamped to the image border. At exactly integer
    coordinates the gradient w.r.t. the flow is the right-sided one.
    """
    if src.dim() != 4 or flow.dim() != 4 or flow.shape[1] != 2:
        raise ValueError("expected src N×C×H×W and flow N×2×H×W")
    n, c, h, w = src.shape
    if flow.shape[0] != n or flow.shape[2:] != src.shape[2:]:
        raise ValueError(f"flow {tuple(flow.shape)} does not match image {tuple(src.shape)}")

    gy = torch.arange(h, dtype=flow.dtype, device=flow.device).view(1, h, 1)
    gx = torch.arange(w, dtype=flow.dtype, device=flow.device).view(1, 1, w)
    x = (gx + flow[:, 0]).clamp(0, w - 1)
    y = (gy + flow[:, 1]).clamp(0, h - 1)

    x0 = x.detach().floor()
    y0 = y.detach().floor()
    wx = (x - x0).unsqueeze(1)
    wy = (y - y0).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = src.reshape(n, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).view(n, 1, h * w).expand(n, c, h * w)
        return flat.gather(2, idx).view(n, c, h, w)

    v00 = gather(y0, x0)
    v01 = gather(y0, x1)
    v10 = gather(y1, x0)
    v11 = gather(y1, x1)
    return (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11)


def resize_flow(flow, size):
    """Bilinear resize with displacement magnitudes rescaled to the new grid."""
    h, w = flow.shape[-2:]
    out = F.interpolate(flow, size=size, mode="bilinear", align_corners=False)
    scale = torch.tensor([size[1] / w, size[0] / h], dtype=flow.dtype, device=flow.device)
    return out * scale.view(1, 2, 1, 1)


def upsample_flow2x(flow):
    h, w = flow.shape[-2:]
    return 2.0 * F.interpolate(flow, size=(2 * h, 2 * w), mode="bilinear", align_corners=False)


def upsample2x(x):
    h, w = x.shape[-2:]
    return F.interpolate(x, size=(2 * h, 2 * w), mode="bilinear", align_corners=False)


def window_partition(x, window):
    """Tile N×C×H×W into (N·H/h·W/w)×C×h×w, tiles row-major per image."""
    wh, ww = (window, window) if isinstance(window, int) else window
    n, c, h, w = x.shape
    if h % wh or w % ww:
        raise PartitionError(f"image {h}x{w} is not divisible by window {wh}x{ww}")
    x = x.view(n, c, h // wh, wh, w // ww, ww)
    return x.permute(0, 2, 4, 1, 3, 5).reshape(-1, c, wh, ww)


def window_reverse(tiles, window, full_size):
    """Exact inverse of :func:`window_partition`."""
    wh, ww = (window, window) if isinstance(window, int) else window
    h, w = full_size
    nt, c, th, tw = tiles.shape
    if (th, tw) != (wh, ww) or h % wh or w % ww:
        raise PartitionError(f"tiles {th}x{tw} inconsistent with window {wh}x{ww} and size {h}x{w}")
    per_image = (h // wh) * (w // ww)
    if nt % per_image:
        raise PartitionError(f"{nt} tiles cannot form whole {h}x{w} images")
    x = tiles.view(nt // per_image, h // wh, w // ww, c, wh, ww)
    return x.permute(0, 3, 1, 4, 2, 5).reshape(-1, c, h, w)
