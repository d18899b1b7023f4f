"""Image/mask PNG I/O and bilinear resampling.

Images are ``uint8`` arrays of shape (H, W, 3); masks are boolean (H, W).
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError


class ImageReadError(OSError):
    """An image or mask file could not be read or decoded."""


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, UnidentifiedImageError, SyntaxError) as exc:
        raise ImageReadError(f"cannot read image {path}: {exc}") from exc


def read_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L")) >= 128
    except (OSError, UnidentifiedImageError, SyntaxError) as exc:
        raise ImageReadError(f"cannot read mask {path}: {exc}") from exc


def write_png(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    if arr.dtype != np.uint8:
        raise TypeError(f"write_png expects uint8 or bool data, got {arr.dtype}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG", optimize=False, compress_level=6)


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres: dst i samples src (i + 0.5) * n_in / n_out - 0.5
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def bilinear_resize(array: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a (H, W) or (H, W, C) array, returned as float64."""
    a = np.asarray(array, dtype=np.float64)
    if a.shape[:2] == (height, width):
        return a.copy()
    y0, y1, fy = _axis_weights(a.shape[0], height)
    x0, x1, fx = _axis_weights(a.shape[1], width)
    extra = (1,) * (a.ndim - 2)
    fy = fy.reshape((-1, 1) + extra)
    fx = fx.reshape((1, -1) + extra)
    top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
    bottom = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def bilinear_sample(array: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``array`` at fractional coordinates with edge clamping."""
    a = np.asarray(array, dtype=np.float64)
    h, w = a.shape[:2]
    ys = np.clip(ys, 0.0, h - 1)
    xs = np.clip(xs, 0.0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = ys - y0
    fx = xs - x0
    if a.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    return ((a[y0, x0] * (1 - fx) + a[y0, x1] * fx) * (1 - fy)
            + (a[y1, x0] * (1 - fx) + a[y1, x1] * fx) * fy)


def to_uint8(array: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(array), 0, 255).astype(np.uint8)
