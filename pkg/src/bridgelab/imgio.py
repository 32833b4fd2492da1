"""Portable image file format and PNG rendering.

SBIM1 layout: the 5 magic bytes, width and height as little-endian u32,
then the row-major pixel payload as little-endian float32. Values must be
finite. PNG rendering maps [0, 1] to [0, 255] with clipping so raters see a
consistent window.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np
from PIL import Image

MAGIC = b"SBIM1"


def write_image(path: str | Path, img: np.ndarray) -> None:
    arr = np.asarray(img, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(arr.tobytes())


def read_image(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:5] != MAGIC:
        raise ValueError(f"{path}: bad magic, not an SBIM1 image")
    w, h = struct.unpack_from("<II", data, 5)
    expected = 13 + 4 * w * h
    if len(data) != expected:
        raise ValueError(f"{path}: payload length {len(data) - 13}, expected {4 * w * h}")
    arr = np.frombuffer(data, dtype="<f4", count=w * h, offset=13).reshape(h, w)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{path}: image contains non-finite values")
    return arr.astype(float)


def png_bytes(img: np.ndarray) -> bytes:
    """Grayscale PNG with the fixed [0,1] -> [0,255] window."""
    u8 = np.clip(np.asarray(img, dtype=float), 0.0, 1.0)
    u8 = (u8 * 255.0).round().astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8, mode="L").save(buf, format="PNG")
    return buf.getvalue()
