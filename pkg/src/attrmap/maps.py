"""Attribute activation maps.

Two ways to weight the pooled tap maps ``f_k`` of one image into a spatial
field for attribute ``a``:

* weight projection: ``grid = sum_k W[a, k] * f_k`` using the head weights;
* gradient sum: per-unit weights ``sum_xy d score_a / d f_k(x, y)`` obtained by
  backpropagation, then the same weighted sum.

With a linear head over mean-pooled taps the two coincide, and the mean of
the projection grid plus the head bias reproduces the predicted score.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ForwardCache, TapNet
from .ppm import encode_ppm

WEIGHT_PROJECTION = "weight_projection"
GRADIENT_SUM = "gradient_sum"


@dataclass
class AttributeMap:
    attribute: str
    method: str
    grid: np.ndarray        # S x S, raw and signed
    upsampled: np.ndarray   # H x W in [0, 1]
    raw_min: float
    raw_max: float
    score: float

    def sidecar(self) -> str:
        return (f"attribute={self.attribute}\nmethod={self.method}\nscore={self.score!r}\n"
                f"raw_min={self.raw_min!r}\nraw_max={self.raw_max!r}\n")


def _attribute_index(net: TapNet, attribute) -> int:
    names = net.config.attribute_names
    if isinstance(attribute, str):
        if attribute not in names:
            raise IndexError(f"unknown attribute {attribute!r}; valid: {', '.join(names)}")
        return names.index(attribute)
    idx = int(attribute)
    if not 0 <= idx < len(names):
        raise IndexError(f"attribute index {idx} out of range 0..{len(names) - 1}")
    return idx


def _single(cache: ForwardCache) -> np.ndarray:
    if cache.features.shape[0] != 1:
        raise ValueError(f"activation maps need a single-image cache, got N={cache.features.shape[0]}")
    return np.concatenate([t[0] for t in cache.taps], axis=0).astype(np.float64)


def project(unit_weights, cache: ForwardCache) -> np.ndarray:
    """``sum_k unit_weights[k] * f_k`` over the concatenated pooled taps."""
    units = _single(cache)
    return np.tensordot(np.asarray(unit_weights, np.float64), units, axes=1)


def upsample_bilinear(grid, target: int) -> np.ndarray:
    """Align-corners bilinear resize of a square grid to ``target x target``."""
    grid = np.asarray(grid, dtype=np.float64)
    s = grid.shape[0]
    if s == 1:
        return np.full((target, target), grid[0, 0])
    pos = np.arange(target) * ((s - 1) / (target - 1)) if target > 1 else np.zeros(1)
    lo = np.minimum(np.floor(pos).astype(int), s - 1)
    hi = np.minimum(lo + 1, s - 1)
    frac = pos - lo
    # a + t (b - a) keeps constant rows exactly constant
    rows = grid[lo] + frac[:, None] * (grid[hi] - grid[lo])
    return rows[:, lo] + frac[None, :] * (rows[:, hi] - rows[:, lo])


def normalize(field) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant field maps to 0.5 everywhere."""
    field = np.asarray(field, dtype=np.float64)
    lo, hi = field.min(), field.max()
    if hi == lo:
        return np.full(field.shape, 0.5)
    return (field - lo) / (hi - lo)


def _make_map(net, cache, idx, method, grid) -> AttributeMap:
    grid = grid.astype(np.float32)
    up = normalize(upsample_bilinear(grid, net.config.input_size))
    return AttributeMap(net.config.attribute_names[idx], method, grid, up,
                        float(grid.min()), float(grid.max()), float(cache.predictions[0, idx]))


def cam(net: TapNet, cache: ForwardCache, attribute) -> AttributeMap:
    """Weight-projection map of ``attribute`` from a single-image forward cache."""
    idx = _attribute_index(net, attribute)
    grid = project(net.params["head.weight"][idx], cache)
    return _make_map(net, cache, idx, WEIGHT_PROJECTION, grid)


def grad_cam(net: TapNet, image, attribute) -> AttributeMap:
    """Gradient-sum map: unit weights are spatial sums of backpropagated gradients."""
    idx = _attribute_index(net, attribute)
    cache = net.forward(np.asarray(image)[None])
    seed = np.zeros_like(cache.predictions)
    seed[0, idx] = 1
    grads = net.tap_gradients(cache, seed)
    weights = np.concatenate([g[0].sum(axis=(1, 2), dtype=np.float64) for g in grads])
    return _make_map(net, cache, idx, GRADIENT_SUM, project(weights, cache))


# 256-entry blue -> cyan -> green -> yellow -> red ramp
_x = np.linspace(0.0, 1.0, 256)
JET = np.rint(255 * np.clip(1.5 - np.abs(4 * _x[:, None] - np.array([3.0, 2.0, 1.0])), 0, 1)).astype(np.uint8)
del _x


def grayscale(image) -> np.ndarray:
    """Rec. 601 luma of a 3 x H x W image, as H x W."""
    image = np.asarray(image, dtype=np.float64)
    return 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]


def overlay_pixels(image, amap: AttributeMap, alpha: float = 0.5) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    gray = grayscale(image)
    if gray.shape != amap.upsampled.shape:
        raise ValueError(f"image {gray.shape} and map {amap.upsampled.shape} differ in size")
    colors = JET[np.rint(amap.upsampled * 255).astype(int)] / 255.0
    blend = (1 - alpha) * gray[..., None] + alpha * colors
    return np.clip(np.rint(blend * 255), 0, 255).astype(np.uint8)


def render_overlay(image, amap: AttributeMap, alpha: float = 0.5) -> bytes:
    """Heatmap blended over the grayscale image, as P6 PPM bytes."""
    return encode_ppm(overlay_pixels(image, amap, alpha))
