"""Copy-move and inpainting forgery synthesis with ground-truth masks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .imaging import bilinear_sample, to_uint8


class SynthesisSkipped(Exception):
    """No forgery could be produced for this source; ``reason`` says why."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class TransformOutOfBounds(ValueError):
    """The transformed mask left the image; the caller should resample."""


@dataclass(frozen=True)
class AffineTransform:
    rotation: float = 0.0  # degrees, counter-clockwise as displayed
    scale: float = 1.0
    translate: tuple[float, float] = (0.0, 0.0)  # (dx, dy) pixels

    def __post_init__(self):
        if not 0.5 <= self.scale <= 2.0:
            raise ValueError(f"scale {self.scale} outside [0.5, 2.0]")

    def matrix(self) -> np.ndarray:
        """Linear part acting on (x, y) column vectors in y-down image coordinates."""
        th = math.radians(self.rotation)
        c, s = math.cos(th), math.sin(th)
        return self.scale * np.array([[c, s], [-s, c]])

    def to_dict(self) -> dict:
        return {"rotation_deg": self.rotation, "scale": self.scale,
                "dx": self.translate[0], "dy": self.translate[1]}


@dataclass(frozen=True)
class SynthConfig:
    area_bounds: tuple[float, float] = (0.01, 0.30)
    rotation_range: tuple[float, float] = (-30.0, 30.0)
    scale_range: tuple[float, float] = (0.7, 1.3)
    min_shift_frac: float = 0.15  # of the image diagonal
    translate: tuple[float, float] | None = None  # fixed (dx, dy) instead of sampling
    alpha_interior: float = 0.95
    feather_px: int = 2
    max_transform_attempts: int = 10
    dilation_radius: int = 2
    inpaint_tol: float = 1e-4
    inpaint_max_iters: int = 20000


@dataclass
class SynthRecord:
    forged_image: np.ndarray
    truth_mask: np.ndarray
    forgery_kind: str  # "copy_move" | "inpaint"
    source_id: str
    seed: int
    transform: AffineTransform | None = None
    alpha_interior: float | None = None
    mask_index: int = 0
    extra: dict = field(default_factory=dict)

    def provenance(self, mask_path: str | None = None) -> dict:
        return {
            "source_id": self.source_id,
            "kind": self.forgery_kind,
            "seed": self.seed,
            "transform": None if self.transform is None else self.transform.to_dict(),
            "alpha_interior": self.alpha_interior,
            "mask_path": mask_path,
        }


def area_fraction(mask: np.ndarray) -> float:
    return float(np.count_nonzero(mask)) / mask.size


def select_largest_mask(masks):
    """Index and mask with the most foreground pixels (first wins ties)."""
    if len(masks) == 0:
        raise ValueError("no masks given")
    shape = np.shape(masks[0])
    if any(np.shape(m) != shape for m in masks):
        raise ValueError("masks have differing dimensions")
    areas = [int(np.count_nonzero(m)) for m in masks]
    best = int(np.argmax(areas))
    if areas[best] == 0:
        raise ValueError("all masks are empty")
    return best, np.asarray(masks[best], dtype=bool)


def apply_affine(image: np.ndarray, mask: np.ndarray, t: AffineTransform):
    """Warp the masked region about the mask centroid.

    Returns ``(patch, warped_mask)``: the patch holds bilinearly resampled
    source pixels inside the warped mask and zeros elsewhere.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("mask is empty")
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    cx, cy = xs.mean(), ys.mean()
    a = t.matrix()
    dx, dy = t.translate

    fwd = a @ np.vstack([xs - cx, ys - cy])
    fx, fy = fwd[0] + cx + dx, fwd[1] + cy + dy
    if fx.min() < 0 or fy.min() < 0 or fx.max() > w - 1 or fy.max() > h - 1:
        raise TransformOutOfBounds(
            f"transform {t.to_dict()} moves the mask outside the {w}x{h} image")

    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    inv = np.linalg.inv(a)
    sx = inv[0, 0] * (gx - cx - dx) + inv[0, 1] * (gy - cy - dy) + cx
    sy = inv[1, 0] * (gx - cx - dx) + inv[1, 1] * (gy - cy - dy) + cy

    # zero border so samples that fall off the source read as background
    padded = np.pad(mask.astype(np.float64), 1)
    warped_mask = bilinear_sample(padded, sy + 1, sx + 1) >= 0.5
    if not warped_mask.any():
        raise TransformOutOfBounds("warped mask is empty")
    patch = bilinear_sample(image, sy, sx)
    patch = np.where(warped_mask[..., None], to_uint8(patch), 0).astype(np.uint8)
    return patch, warped_mask


def feather_mask(mask: np.ndarray, alpha_interior: float, ramp_px: int) -> np.ndarray:
    """Soft alpha: ``alpha_interior`` inside, linear ramp over ``ramp_px`` boundary pixels."""
    mask = np.asarray(mask, dtype=bool)
    if ramp_px <= 0:
        return mask * float(alpha_interior)
    dist = ndimage.distance_transform_edt(mask)
    return np.minimum(1.0, dist / (ramp_px + 1)) * float(alpha_interior)


def blend_paste(background: np.ndarray, patch: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Composite ``alpha * patch + (1 - alpha) * background``, rounded to 8 bits."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if background.shape != patch.shape or background.shape[:2] != alpha.shape:
        raise ValueError(f"shape mismatch: background {background.shape}, patch {patch.shape}, "
                         f"alpha {alpha.shape}")
    if alpha.size and (alpha.min() < 0 or alpha.max() > 1 or not np.isfinite(alpha).all()):
        raise ValueError("alpha must lie in [0, 1]")
    a = alpha[..., None] if background.ndim == 3 else alpha
    out = to_uint8(a * patch + (1.0 - a) * background)
    untouched = alpha == 0
    out[untouched] = background[untouched]
    return out


def _admissible(masks, bounds) -> list[int]:
    lo, hi = bounds
    return [i for i, m in enumerate(masks) if lo <= area_fraction(m) <= hi]


def _sample_transform(rng, mask: np.ndarray, config: SynthConfig) -> AffineTransform | None:
    h, w = mask.shape
    rot = float(rng.uniform(*config.rotation_range))
    scale = float(rng.uniform(*config.scale_range))
    if config.translate is not None:
        return AffineTransform(rot, scale, tuple(float(v) for v in config.translate))
    ys, xs = np.nonzero(mask)
    cx, cy = xs.mean(), ys.mean()
    fwd = AffineTransform(rot, scale).matrix() @ np.vstack([xs - cx, ys - cy])
    x_lo, x_hi = -(fwd[0].min() + cx), (w - 1) - (fwd[0].max() + cx)
    y_lo, y_hi = -(fwd[1].min() + cy), (h - 1) - (fwd[1].max() + cy)
    if x_lo > x_hi or y_lo > y_hi:
        return None
    min_shift = config.min_shift_frac * math.hypot(h, w)
    for _ in range(50):
        dx, dy = float(rng.uniform(x_lo, x_hi)), float(rng.uniform(y_lo, y_hi))
        if math.hypot(dx, dy) >= min_shift:
            return AffineTransform(rot, scale, (dx, dy))
    return None


def synth_copy_move(image: np.ndarray, masks, seed: int, config: SynthConfig = SynthConfig(),
                    source_id: str = "") -> SynthRecord:
    """Copy the largest admissible object, transform it, and paste it back."""
    candidates = _admissible(masks, config.area_bounds)
    if not candidates:
        raise SynthesisSkipped("no mask within the area-fraction bounds")
    sub, mask = select_largest_mask([masks[i] for i in candidates])
    index = candidates[sub]
    rng = np.random.default_rng(seed)
    min_shift = config.min_shift_frac * math.hypot(*mask.shape)
    lo, hi = config.area_bounds
    for _ in range(config.max_transform_attempts):
        t = _sample_transform(rng, mask, config)
        if t is None or math.hypot(*t.translate) < min_shift:
            continue
        try:
            patch, warped = apply_affine(image, mask, t)
        except TransformOutOfBounds:
            continue
        if not lo <= area_fraction(warped) <= hi:
            continue
        alpha = feather_mask(warped, config.alpha_interior, config.feather_px)
        forged = blend_paste(image, patch, alpha)
        return SynthRecord(forged, warped, "copy_move", source_id, seed, t,
                           config.alpha_interior, index)
    raise SynthesisSkipped(f"{config.max_transform_attempts} consecutive transform rejections")


# --------------------------------------------------------------------------
# inpainting
# --------------------------------------------------------------------------

def _neighbour_sum(u: np.ndarray) -> np.ndarray:
    s = np.zeros_like(u)
    s[1:] += u[:-1]
    s[:-1] += u[1:]
    s[:, 1:] += u[:, :-1]
    s[:, :-1] += u[:, 1:]
    return s


def diffusion_fill(image: np.ndarray, mask: np.ndarray, max_iters: int = 20000,
                   tol: float = 1e-4):
    """Jacobi iteration of Laplace's equation inside ``mask``.

    Unmasked pixels act as fixed boundary values; image borders are treated as
    reflecting (only existing 4-neighbours are averaged). Returns the filled
    float image and the number of iterations performed.
    """
    mask = np.asarray(mask, dtype=bool)
    img = np.asarray(image, dtype=np.float64)
    if not mask.any():
        raise ValueError("mask is empty")
    if mask.all():
        raise ValueError("mask covers the entire image; no boundary data to diffuse from")
    ys, xs = np.nonzero(mask)
    y0, y1 = max(ys.min() - 1, 0), min(ys.max() + 2, mask.shape[0])
    x0, x1 = max(xs.min() - 1, 0), min(xs.max() + 2, mask.shape[1])
    u = img[y0:y1, x0:x1].copy()
    m = mask[y0:y1, x0:x1]

    count = _neighbour_sum(np.ones(m.shape))
    if u.ndim == 3:
        count = count[..., None]
    ring = ndimage.binary_dilation(m) & ~m
    u[m] = u[ring].mean(axis=0)

    iters = 0
    for iters in range(1, max_iters + 1):
        new = _neighbour_sum(u) / count
        change = np.abs(new[m] - u[m]).max()
        u[m] = new[m]
        if change < tol:
            break
    out = img.copy()
    out[y0:y1, x0:x1] = u
    return out, iters


def inpaint_diffusion(image: np.ndarray, mask: np.ndarray, max_iters: int = 20000,
                      tol: float = 1e-4) -> np.ndarray:
    filled, _ = diffusion_fill(image, mask, max_iters, tol)
    out = image.copy()
    mask = np.asarray(mask, dtype=bool)
    out[mask] = to_uint8(filled[mask])
    return out


def disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return yy * yy + xx * xx <= radius * radius


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if radius <= 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=disk(radius))


def synth_inpaint(image: np.ndarray, masks, seed: int, config: SynthConfig = SynthConfig(),
                  source_id: str = "") -> SynthRecord:
    """Remove a uniformly chosen admissible object by diffusion inpainting."""
    lo, hi = config.area_bounds
    dilated = {}
    for i, m in enumerate(masks):
        d = dilate(m, config.dilation_radius)
        if np.any(m) and not d.all() and lo <= area_fraction(d) <= hi:
            dilated[i] = d
    if not dilated:
        raise SynthesisSkipped("no mask within the area-fraction bounds")
    rng = np.random.default_rng(seed)
    keys = sorted(dilated)
    index = keys[int(rng.integers(len(keys)))]
    truth = dilated[index]
    forged = inpaint_diffusion(image, truth, config.inpaint_max_iters, config.inpaint_tol)
    return SynthRecord(forged, truth, "inpaint", source_id, seed, None, None, index)
