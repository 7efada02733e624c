"""Binary PGM (P5, maxval 255) emission of prediction maps."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_erosion

_HEADER = re.compile(rb"^P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


class PGMError(ValueError):
    pass


def quantize(values) -> np.ndarray:
    """Map [0,1] to 0..255 with round-half-up: floor(v*255 + 0.5).

    The product v*255 is taken in float64 (so 0.3 gives 76.5 and rounds to
    77); the half-up step is then exact.  Adding 0.5 in floating point
    would round values just below one half up to the next integer.
    """
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot quantize non-finite values")
    p = np.clip(v, 0.0, 1.0) * 255.0
    q = np.floor(p)
    return (q + (p - q >= 0.5)).astype(np.uint8)


def outline(mask) -> np.ndarray:
    """Boundary pixels of ``mask``: inside the mask, with a 4-neighbour outside it."""
    m = np.asarray(mask, dtype=bool)
    return m & ~binary_erosion(m, border_value=0)


def write_pgm(path, image) -> Path:
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"PGM needs a 2-d uint8 array, got {img.dtype} {img.shape}")
    path = Path(path)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = _HEADER.match(data)
    if not m:
        raise PGMError(f"{path}: not a binary P5 PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise PGMError(f"{path}: maxval {maxval} unsupported (need 255)")
    body = data[m.end():]
    if len(body) != w * h:
        raise PGMError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, np.uint8).reshape(h, w).copy()


def write_heatmap(path, y_hat, region) -> tuple[Path, Path]:
    """Write the quantized map to ``path`` and the outline of ``region`` to ``<stem>_region.pgm``."""
    path = Path(path)
    heat = write_pgm(path, quantize(y_hat))
    ring = write_pgm(path.with_name(path.stem + "_region.pgm"), outline(region).astype(np.uint8) * 255)
    return heat, ring
