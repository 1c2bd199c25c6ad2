"""Readers/writers for PFM and Radiance RGBE, plus 8/16-bit LDR images.

Every writer goes through :func:`atomic_write` so a failed save never leaves
a truncated file at the destination.
"""
from __future__ import annotations

import contextlib
import os
import re
import tempfile
from pathlib import Path

import cv2
import numpy as np


class HdrIOError(IOError):
    pass


def _umask():
    mask = os.umask(0)
    os.umask(mask)
    return mask


@contextlib.contextmanager
def atomic_write(path):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".partial", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            yield fh
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


# -- PFM ----------------------------------------------------------------------


def write_pfm(path, img):
    img = np.asarray(img, dtype="<f4")
    if img.ndim == 2 or (img.ndim == 3 and img.shape[2] == 1):
        tag, img = b"Pf", img.reshape(img.shape[0], img.shape[1])
    elif img.ndim == 3 and img.shape[2] == 3:
        tag = b"PF"
    else:
        raise HdrIOError(f"PFM stores 1 or 3 channels, got shape {img.shape}")
    h, w = img.shape[:2]
    try:
        with atomic_write(path) as fh:
            fh.write(tag + b"\n" + f"{w} {h}\n-1.0\n".encode())
            fh.write(np.ascontiguousarray(img[::-1]).tobytes())
    except OSError as exc:
        raise HdrIOError(f"cannot write {path}: {exc}") from exc


def read_pfm(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise HdrIOError(f"cannot read {path}: {exc}") from exc
    m = re.match(rb"(PF|Pf)\s+(\d+)\s+(\d+)\s+(\S+)\s", data)
    if not m:
        raise HdrIOError(f"{path}: not a PFM file")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    body = data[m.end():]
    if len(body) < 4 * count:
        raise HdrIOError(f"{path}: truncated PFM payload")
    img = np.frombuffer(body, dtype=dtype, count=count).astype(np.float32)
    img = img.reshape(h, w, channels)[::-1]
    return np.ascontiguousarray(img if channels == 3 else img[..., 0])


# -- Radiance RGBE -----------------------------------------------------------


def float_to_rgbe(img):
    img = np.asarray(img, dtype=np.float64)
    v = img.max(axis=-1)
    mant, exp = np.frexp(v)
    out = np.zeros(img.shape[:-1] + (4,), dtype=np.uint8)
    ok = v > 1e-32
    scale = np.where(ok, 256.0 / np.ldexp(1.0, exp), 0.0)
    out[..., :3] = np.floor(img * scale[..., None]).clip(0, 255).astype(np.uint8)
    out[..., 3] = np.where(ok, exp + 128, 0).astype(np.uint8)
    out[~ok] = 0
    return out


def rgbe_to_float(rgbe):
    rgbe = np.asarray(rgbe)
    e = rgbe[..., 3].astype(np.int32)
    f = np.where(e > 0, np.ldexp(1.0, e - (128 + 8)), 0.0)
    return ((rgbe[..., :3].astype(np.float64) + 0.5) * f[..., None]).astype(np.float32)


def write_rgbe(path, img):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise HdrIOError(f"Radiance files store 3 channels, got shape {img.shape}")
    if not np.all(np.isfinite(img)) or np.any(img < 0):
        raise HdrIOError("Radiance output must be finite and nonnegative")
    h, w = img.shape[:2]
    header = f"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y {h} +X {w}\n".encode()
    try:
        with atomic_write(path) as fh:
            fh.write(header)
            fh.write(float_to_rgbe(img).tobytes())
    except OSError as exc:
        raise HdrIOError(f"cannot write {path}: {exc}") from exc


def _read_rle_scanline(buf, pos, w):
    line = np.empty((4, w), dtype=np.uint8)
    for c in range(4):
        x = 0
        while x < w:
            count = buf[pos]
            pos += 1
            if count > 128:
                count -= 128
                line[c, x:x + count] = buf[pos]
                pos += 1
            else:
                line[c, x:x + count] = np.frombuffer(buf, np.uint8, count, pos)
                pos += count
            x += count
        if x != w:
            raise HdrIOError("corrupt run-length scanline")
    return line.T, pos


def read_rgbe(path):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise HdrIOError(f"cannot read {path}: {exc}") from exc
    if not (buf.startswith(b"#?RADIANCE") or buf.startswith(b"#?RGBE")):
        raise HdrIOError(f"{path}: not a Radiance file")
    end = buf.find(b"\n\n")
    if end < 0:
        raise HdrIOError(f"{path}: unterminated header")
    res_end = buf.find(b"\n", end + 2)
    m = re.match(rb"-Y (\d+) \+X (\d+)", buf[end + 2:res_end])
    if not m:
        raise HdrIOError(f"{path}: unsupported resolution line")
    h, w = int(m.group(1)), int(m.group(2))
    pos = res_end + 1
    out = np.empty((h, w, 4), dtype=np.uint8)
    try:
        for y in range(h):
            if 8 <= w < 32768 and buf[pos] == 2 and buf[pos + 1] == 2 and (buf[pos + 2] << 8 | buf[pos + 3]) == w:
                out[y], pos = _read_rle_scanline(buf, pos + 4, w)
            else:
                out[y] = np.frombuffer(buf, np.uint8, 4 * w, pos).reshape(w, 4)
                pos += 4 * w
    except (IndexError, ValueError) as exc:
        raise HdrIOError(f"{path}: truncated pixel data") from exc
    return rgbe_to_float(out)


def save_hdr(img, path, fmt=None):
    """Write a linear image as ``pfm`` or ``hdr`` (default from the suffix)."""
    fmt = fmt or Path(path).suffix.lstrip(".").lower()
    if fmt == "pfm":
        write_pfm(path, img)
    elif fmt in ("hdr", "radiance", "rgbe"):
        write_rgbe(path, img)
    else:
        raise HdrIOError(f"unknown HDR format {fmt!r}")


def load_hdr(path):
    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        return read_pfm(path)
    if suffix in (".hdr", ".pic", ".rgbe"):
        return read_rgbe(path)
    raise HdrIOError(f"unknown HDR file type {path}")


# -- LDR ------------------------------------------------------------------------


def read_ldr(path):
    """8/16-bit PNG or TIFF to float64 RGB in [0, 1]."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise HdrIOError(f"cannot decode image {path}")
    if img.ndim != 3 or img.shape[2] < 3:
        raise HdrIOError(f"{path}: expected an RGB image, got shape {img.shape}")
    img = img[..., 2::-1]
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    if img.dtype == np.uint16:
        return img.astype(np.float64) / 65535.0
    if img.dtype in (np.float32, np.float64):
        return np.clip(img.astype(np.float64), 0.0, 1.0)
    raise HdrIOError(f"{path}: unsupported pixel type {img.dtype}")


def write_ldr(path, img, bit_depth=16):
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if bit_depth == 16:
        q = np.round(img * 65535.0).astype(np.uint16)
    elif bit_depth == 8:
        q = np.round(img * 255.0).astype(np.uint8)
    else:
        raise HdrIOError("bit_depth must be 8 or 16")
    if q.ndim == 3:
        q = q[..., ::-1]
    ok, enc = cv2.imencode(Path(path).suffix or ".png", np.ascontiguousarray(q))
    if not ok:
        raise HdrIOError(f"cannot encode {path}")
    try:
        with atomic_write(path) as fh:
            fh.write(enc.tobytes())
    except OSError as exc:
        raise HdrIOError(f"cannot write {path}: {exc}") from exc
