"""PFM and binary PPM readers/writers for ``[3,H,W]`` arrays."""

from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np


def write_pfm(path, img) -> None:
    """Little-endian colour PFM (scale -1.0), stored bottom row first."""
    img = np.asarray(img, dtype="<f4")
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a [3,H,W] image, got shape {img.shape}")
    _, H, W = img.shape
    payload = np.ascontiguousarray(img.transpose(1, 2, 0)[::-1])
    _atomic_write(path, f"PF\n{W} {H}\n-1.0\n".encode("ascii") + payload.tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"(PF|Pf)\s+(\d+)\s+(\d+)\s+(-?[\d.eE+-]+)\s", data)
    if not m:
        raise ValueError(f"{path}: not a PFM file")
    channels = 3 if m.group(1) == b"PF" else 1
    W, H, scale = int(m.group(2)), int(m.group(3)), float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    count = W * H * channels
    body = data[m.end():]
    if len(body) != 4 * count:
        raise ValueError(f"{path}: expected {4 * count} payload bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=dtype).reshape(H, W, channels)[::-1]
    arr = arr.astype(np.float32)
    if channels == 1:
        arr = np.repeat(arr, 3, axis=2)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_ppm(path, img, bits: int = 8) -> None:
    """Binary P6 from a ``[3,H,W]`` image in [0, 1]."""
    if bits not in (8, 16):
        raise ValueError("PPM bit depth must be 8 or 16")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a [3,H,W] image, got shape {img.shape}")
    _, H, W = img.shape
    maxval = 2 ** bits - 1
    q = np.round(np.clip(img, 0, 1) * maxval).transpose(1, 2, 0)
    payload = q.astype(">u2" if bits == 16 else "u1").tobytes()
    _atomic_write(path, f"P6\n{W} {H}\n{maxval}\n".encode("ascii") + payload)


def read_ppm(path) -> np.ndarray:
    """Binary P6 into a float32 ``[3,H,W]`` array in [0, 1]."""
    data = Path(path).read_bytes()
    m = re.match(rb"P6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    W, H, maxval = (int(g) for g in m.groups())
    dtype = ">u2" if maxval > 255 else "u1"
    count = W * H * 3
    body = data[m.end():]
    if len(body) != count * np.dtype(dtype).itemsize:
        raise ValueError(f"{path}: truncated PPM payload")
    arr = np.frombuffer(body, dtype=dtype).reshape(H, W, 3).astype(np.float64) / maxval
    return np.ascontiguousarray(arr.transpose(2, 0, 1)).astype(np.float32)


def heatmap(idx, grid) -> np.ndarray:
    """Colour a position map: red = source column, green = source row, blue = displacement."""
    idx = np.asarray(idx).reshape(grid)
    gh, gw = grid
    sy, sx = idx // gw, idx % gw
    yy, xx = np.mgrid[0:gh, 0:gw]
    disp = np.hypot(sy - yy, sx - xx) / max(np.hypot(gh - 1, gw - 1), 1)
    return np.stack([sx / max(gw - 1, 1), sy / max(gh - 1, 1), disp])


def _atomic_write(path, blob: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
