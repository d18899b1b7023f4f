"""Procedural textured scenes with per-object masks, a small stand-in for COCO."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw

from .imaging import bilinear_resize, to_uint8


@dataclass(frozen=True)
class ProceduralConfig:
    size: int = 64
    min_shapes: int = 1
    max_shapes: int = 4
    # shape radius as a fraction of the image side
    radius_range: tuple[float, float] = (0.12, 0.28)
    pixel_noise: float = 14.0
    placement_attempts: int = 60


def _value_noise(rng, size: int, cells: int, channels: int = 3) -> np.ndarray:
    grid = rng.uniform(0, 1, size=(cells, cells, channels))
    return bilinear_resize(grid, size, size)


def _texture(rng, size: int, pixel_noise: float) -> np.ndarray:
    base = rng.uniform(30, 225, size=3)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(0.15, 0.6)
    stripes = np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + rng.uniform(0, 2 * np.pi))
    tint = rng.uniform(-1, 1, size=3) * rng.uniform(15, 45)
    tex = base + stripes[..., None] * tint
    tex += (_value_noise(rng, size, int(rng.integers(3, 7))) - 0.5) * 40
    tex += rng.normal(0, pixel_noise, size=(size, size, 3))
    return tex


def _ellipse(rng, size: int, r_lo: float, r_hi: float) -> np.ndarray:
    a, b = rng.uniform(r_lo, r_hi, size=2)
    cy, cx = rng.uniform(0, size, size=2)
    phi = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = (xx - cx) * np.cos(phi) + (yy - cy) * np.sin(phi)
    v = -(xx - cx) * np.sin(phi) + (yy - cy) * np.cos(phi)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _polygon(rng, size: int, r_lo: float, r_hi: float) -> np.ndarray:
    n = int(rng.integers(3, 8))
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
    radii = rng.uniform(r_lo, r_hi, size=n)
    cy, cx = rng.uniform(0, size, size=2)
    pts = [(float(cx + r * np.cos(t)), float(cy + r * np.sin(t))) for r, t in zip(radii, angles)]
    canvas = Image.new("L", (size, size), 0)
    ImageDraw.Draw(canvas).polygon(pts, fill=255)
    return np.asarray(canvas) > 0


def make_procedural_image(seed: int, config: ProceduralConfig = ProceduralConfig()):
    """Render a textured scene; returns ``(image, masks)`` with disjoint masks.

    Deterministic in ``seed``.
    """
    rng = np.random.default_rng(seed)
    size = config.size
    img = np.full((size, size, 3), rng.uniform(60, 200, size=3))
    img += (_value_noise(rng, size, int(rng.integers(3, 9))) - 0.5) * 90
    img += rng.normal(0, config.pixel_noise, size=(size, size, 3))

    want = int(rng.integers(config.min_shapes, config.max_shapes + 1))
    r_lo, r_hi = (f * size for f in config.radius_range)
    occupied = np.zeros((size, size), dtype=bool)
    masks: list[np.ndarray] = []
    for _ in range(config.placement_attempts):
        if len(masks) == want:
            break
        shape = _ellipse if rng.random() < 0.5 else _polygon
        m = shape(rng, size, r_lo, r_hi)
        if m.sum() < 4 or (m & occupied).any():
            continue
        img[m] = _texture(rng, size, config.pixel_noise)[m]
        occupied |= m
        masks.append(m)
    if not masks:
        # an empty canvas always accepts a centred ellipse
        yy, xx = np.mgrid[0:size, 0:size]
        m = (yy - size / 2) ** 2 + (xx - size / 2) ** 2 <= (0.5 * (r_lo + r_hi)) ** 2
        img[m] = _texture(rng, size, config.pixel_noise)[m]
        masks.append(m)
    return to_uint8(img), masks
