"""Grad-CAM heatmaps for the single-logit forgery classifier, plus overlays and
mask-based localization scoring."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import bilinear_resize, to_uint8
from .model import Model
from .tensor import ShapeError

FORGED = "forged"
AUTHENTIC = "authentic"


@dataclass
class CamWeights:
    alpha: np.ndarray
    class_id: str = FORGED


@dataclass
class HeatMap:
    raw: np.ndarray
    normalized: np.ndarray
    min: float
    max: float

    @property
    def degenerate(self) -> bool:
        return not self.max > self.min


@dataclass
class LocalizationScore:
    mass_in_mask_fraction: float
    mask_area_fraction: float
    concentration_ratio: float
    degenerate: bool = False


def class_sign(class_id: str) -> float:
    # the forged score is the logit itself, the authentic score its negation
    if class_id == FORGED:
        return 1.0
    if class_id == AUTHENTIC:
        return -1.0
    raise ValueError(f"class_id must be {FORGED!r} or {AUTHENTIC!r}, got {class_id!r}")


def feature_gradients(model: Model, image: np.ndarray, class_id: str = FORGED):
    """Feature maps at the last conv block (post-ReLU, pre-pool) and the
    gradient of the class score with respect to them.

    ``image`` is a (1, C, H, W) tensor. Returns ``(A, dY_dA, logit)``.
    """
    sign = class_sign(class_id)
    a = model.arch
    if image.shape != (1, a.in_channels, a.input_size, a.input_size):
        raise ShapeError(f"image shape {image.shape} does not match model input "
                         f"(1, {a.in_channels}, {a.input_size}, {a.input_size})")
    logits, cache = model.forward(image, "infer")
    grad = model.backward(cache, np.array([sign]), stop_at_features=True)
    return cache.feature_maps, grad, float(logits[0])


def compute_weights(grad: np.ndarray, class_id: str = FORGED) -> CamWeights:
    """Global-average-pool the gradient maps: one weight per channel."""
    if grad.ndim != 4 or grad.shape[0] != 1:
        raise ShapeError(f"expected a single-sample (1, K, H, W) gradient, got {grad.shape}")
    return CamWeights(grad[0].astype(np.float64).mean(axis=(1, 2)), class_id)


def compute_cam(weights: CamWeights, feature_maps: np.ndarray) -> np.ndarray:
    """ReLU of the weighted sum of feature maps, at feature-map resolution."""
    a = feature_maps[0] if feature_maps.ndim == 4 else feature_maps
    if a.shape[0] != weights.alpha.shape[0]:
        raise ShapeError(f"{weights.alpha.shape[0]} weights for {a.shape[0]} feature maps")
    cam = np.tensordot(weights.alpha, a.astype(np.float64), axes=(0, 0))
    return np.maximum(cam, 0.0)


def upsample_and_normalize(raw: np.ndarray, height: int, width: int) -> HeatMap:
    """Bilinear upsample to (height, width) and min-max scale to [0, 1].

    A constant map normalizes to all zeros.
    """
    up = bilinear_resize(raw, height, width)
    lo, hi = float(up.min()), float(up.max())
    if hi > lo:
        norm = np.clip((up - lo) / (hi - lo), 0.0, 1.0)
    else:
        norm = np.zeros_like(up)
    return HeatMap(np.asarray(raw, dtype=np.float64), norm, lo, hi)


def grad_cam(model: Model, image: np.ndarray, class_id: str = FORGED):
    """Full pipeline for one image tensor; returns ``(heatmap, logit)``."""
    feats, grad, logit = feature_gradients(model, image, class_id)
    raw = compute_cam(compute_weights(grad, class_id), feats)
    return upsample_and_normalize(raw, image.shape[2], image.shape[3]), logit


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------

_ANCHORS = np.array([
    [0, 0, 255],      # blue
    [0, 255, 255],    # cyan
    [0, 255, 0],      # green
    [255, 255, 0],    # yellow
    [255, 0, 0],      # red
], dtype=np.float64)


def colormap_lut() -> np.ndarray:
    """256-entry blue-cyan-green-yellow-red lookup table (uint8, shape (256, 3))."""
    pos = np.linspace(0, len(_ANCHORS) - 1, 256)
    lo = np.minimum(np.floor(pos).astype(int), len(_ANCHORS) - 2)
    f = (pos - lo)[:, None]
    return to_uint8(_ANCHORS[lo] * (1 - f) + _ANCHORS[lo + 1] * f)


LUT = colormap_lut()


def heatmap_to_gray(heatmap: HeatMap) -> np.ndarray:
    return to_uint8(heatmap.normalized * 255)


def render_overlay(image: np.ndarray, heatmap: HeatMap, blend: float = 0.4) -> np.ndarray:
    if not 0.0 <= blend <= 1.0:
        raise ValueError("blend must lie in [0, 1]")
    if heatmap.normalized.shape != image.shape[:2]:
        raise ShapeError(f"heatmap {heatmap.normalized.shape} vs image {image.shape[:2]}")
    if blend == 0.0:
        return image.copy()
    colors = LUT[heatmap_to_gray(heatmap)].astype(np.float64)
    return to_uint8(blend * colors + (1.0 - blend) * image)


# --------------------------------------------------------------------------
# scoring
# --------------------------------------------------------------------------

def localization_score(heatmap: HeatMap, truth_mask: np.ndarray,
                       top_fraction: float = 0.1) -> LocalizationScore:
    """How much of the hottest heat falls inside the ground-truth mask.

    The normalized heatmap is thresholded at its ``1 - top_fraction``
    quantile; the ratio compares the in-mask share of the surviving heat mass
    to the mask's share of the image (1 means chance).
    """
    h = heatmap.normalized
    mask = np.asarray(truth_mask, dtype=bool)
    if mask.shape != h.shape:
        raise ShapeError(f"mask {mask.shape} vs heatmap {h.shape}")
    if not 0 < top_fraction <= 1:
        raise ValueError("top_fraction must be in (0, 1]")
    area = float(mask.mean())
    if area <= 0:
        raise ValueError("truth mask is empty")
    thresh = np.quantile(h, 1.0 - top_fraction)
    kept = np.where(h >= thresh, h, 0.0)
    total = kept.sum()
    if total <= 0:
        return LocalizationScore(0.0, area, 0.0, degenerate=True)
    inside = float(kept[mask].sum() / total)
    return LocalizationScore(inside, area, inside / area)
