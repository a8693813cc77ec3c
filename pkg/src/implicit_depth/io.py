"""Binary depth maps (IDEP) and PNG helpers."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import DepthMap

DEPTH_MAGIC = b"IDEP"


class FormatError(ValueError):
    pass


def write_depth(path, depth: DepthMap) -> None:
    h, w = depth.shape
    vals = np.where(depth.valid, depth.values, np.nan).astype("<f4")
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC)
        f.write(struct.pack("<II", w, h))
        f.write(vals.tobytes())


def read_depth(path, allow_nan: bool = True) -> DepthMap:
    """Read an IDEP file. NaN marks invalid pixels; infinities are rejected."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc})") from exc
    if len(raw) < 12 or raw[:4] != DEPTH_MAGIC:
        raise FormatError(f"{path}: not an IDEP depth file")
    w, h = struct.unpack_from("<II", raw, 4)
    if len(raw) != 12 + 4 * w * h:
        raise FormatError(f"{path}: expected {w}x{h} floats, file has {len(raw) - 12} payload bytes")
    vals = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w).astype(np.float64)
    nan = np.isnan(vals)
    if nan.any() and not allow_nan:
        raise FormatError(f"{path}: depth contains NaN")
    if np.isinf(vals).any():
        raise FormatError(f"{path}: depth contains non-finite values")
    if np.any(vals[~nan] <= 0):
        raise FormatError(f"{path}: depth contains non-positive values")
    return DepthMap(np.where(nan, 0.0, vals), ~nan)


def write_rgb(path, rgb: np.ndarray) -> None:
    img = np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(path)


def read_rgb(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    except OSError as exc:
        raise FormatError(f"{path}: cannot read image ({exc})") from exc
    return arr / 255.0


def write_mask(path, mask: np.ndarray, coverage: np.ndarray | None = None) -> None:
    """8-bit grayscale; 255 = real shown, 0 = virtual shown. Off-coverage pixels are written as 255."""
    vals = np.asarray(mask, dtype=np.float64)
    if coverage is not None:
        vals = np.where(coverage, vals, 1.0)
    img = np.clip(np.rint(vals * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)
