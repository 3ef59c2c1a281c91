"""Class-weight grids to images: per-class heatmaps, blended overlays,
hard-cluster maps, and compositing over the tissue photograph.

All renderers are pure functions of their inputs with fixed PNG encoder
settings, so identical inputs produce byte-identical files.
"""

from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np
from PIL import Image

from .aggregate import LatticeGrid
from .errors import ValidationError
from .nmf import argmax_cluster

# ColorBrewer Set1: red, blue, green, purple, orange, yellow for classes 1-6
_BASE_COLORS = (
    (228, 26, 28),
    (55, 126, 184),
    (77, 175, 74),
    (152, 78, 163),
    (255, 127, 0),
    (255, 255, 51),
)

DEFAULT_QUANTILE = 0.99


def default_palette(k: int) -> tuple[tuple[int, int, int], ...]:
    """K pairwise-distinct display colors; golden-ratio hues past the first six."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    colors = list(_BASE_COLORS[:k])
    i = 0
    while len(colors) < k:
        hue = (0.61803398875 * i) % 1.0
        rgb = tuple(int(round(255 * c)) for c in colorsys.hsv_to_rgb(hue, 0.85, 0.9))
        if rgb not in colors:
            colors.append(rgb)
        i += 1
    return tuple(colors)


def _check_palette(palette, k: int) -> None:
    if len(palette) < k:
        raise ValidationError(f"palette has {len(palette)} colors for {k} classes")
    if len(set(palette[:k])) != k:
        raise ValidationError("palette colors must be pairwise distinct")


def _class_alpha(grid: LatticeGrid, k0: int, quantile: float) -> np.ndarray:
    """Per-cell alpha in [0, 1] for 0-based class k0: weight / positive-weight
    quantile, clamped."""
    w = grid.values[:, :, k0].astype(np.float64)
    w = np.where(grid.present, w, 0.0)
    positive = w[w > 0]
    if positive.size == 0:
        return np.zeros_like(w)
    q = float(np.quantile(positive, quantile))
    if q <= 0:
        return np.zeros_like(w)
    return np.clip(w / q, 0.0, 1.0)


def _upscale(img: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return img
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


def _finalize_rgba(rgb: np.ndarray, alpha: np.ndarray, scale: int) -> np.ndarray:
    out = np.zeros((*alpha.shape, 4), dtype=np.uint8)
    out[:, :, :3] = np.rint(rgb).astype(np.uint8)
    out[:, :, 3] = np.rint(alpha * 255.0).astype(np.uint8)
    return _upscale(out, scale)


def render_class_heatmap(
    grid: LatticeGrid,
    k: int,
    palette=None,
    *,
    quantile: float = DEFAULT_QUANTILE,
    scale: int | None = None,
) -> np.ndarray:
    """RGBA heatmap of one class (1-based k): palette color at alpha
    proportional to weight, normalized by the positive-weight quantile."""
    if not (1 <= k <= grid.channels):
        raise ValidationError(f"class {k} out of range 1..{grid.channels}")
    palette = default_palette(grid.channels) if palette is None else palette
    _check_palette(palette, grid.channels)
    scale = grid.cell_size_px if scale is None else scale
    alpha = _class_alpha(grid, k - 1, quantile)
    rgb = np.zeros((*alpha.shape, 3), dtype=np.float64)
    rgb[alpha > 0] = palette[k - 1]
    return _finalize_rgba(rgb, alpha, scale)


def render_blended(
    grid: LatticeGrid,
    palette=None,
    *,
    quantile: float = DEFAULT_QUANTILE,
    scale: int | None = None,
) -> np.ndarray:
    """All classes over-composited in class order after per-class
    normalization (later classes paint over earlier ones where they overlap)."""
    palette = default_palette(grid.channels) if palette is None else palette
    _check_palette(palette, grid.channels)
    scale = grid.cell_size_px if scale is None else scale
    acc_rgb = np.zeros((grid.height, grid.width, 3), dtype=np.float64)
    acc_a = np.zeros((grid.height, grid.width), dtype=np.float64)
    for k0 in range(grid.channels):
        a = _class_alpha(grid, k0, quantile)
        color = np.asarray(palette[k0], dtype=np.float64)
        out_a = a + acc_a * (1.0 - a)
        num = color[None, None, :] * a[:, :, None] + acc_rgb * (acc_a * (1.0 - a))[:, :, None]
        nz = out_a > 0
        acc_rgb = np.where(nz[:, :, None], num / np.where(nz, out_a, 1.0)[:, :, None], 0.0)
        acc_a = out_a
    return _finalize_rgba(acc_rgb, acc_a, scale)


def render_clustering(
    grid: LatticeGrid,
    palette=None,
    *,
    scale: int | None = None,
) -> np.ndarray:
    """Solid color of the argmax class per cell; unassigned cells transparent."""
    palette = default_palette(grid.channels) if palette is None else palette
    _check_palette(palette, grid.channels)
    scale = grid.cell_size_px if scale is None else scale
    flat = grid.values.reshape(-1, grid.channels)
    labels = argmax_cluster(flat).reshape(grid.height, grid.width)
    labels = np.where(grid.present, labels, 0)
    rgb = np.zeros((grid.height, grid.width, 3), dtype=np.float64)
    alpha = np.zeros((grid.height, grid.width), dtype=np.float64)
    for k0 in range(grid.channels):
        mask = labels == k0 + 1
        rgb[mask] = palette[k0]
        alpha[mask] = 1.0
    return _finalize_rgba(rgb, alpha, scale)


def composite_over_tissue(
    overlay: np.ndarray,
    tissue: np.ndarray,
    opacity: float = 1.0,
) -> np.ndarray:
    """Alpha-composite an RGBA overlay onto the RGB tissue image.

    The overlay is nearest-neighbor upscaled when its dimensions divide the
    tissue's; ``opacity`` multiplies the overlay alpha globally.
    """
    overlay = np.asarray(overlay)
    tissue = np.asarray(tissue)
    if overlay.ndim != 3 or overlay.shape[2] != 4:
        raise ValidationError(f"overlay must be RGBA, got shape {overlay.shape}")
    if tissue.ndim != 3 or tissue.shape[2] != 3:
        raise ValidationError(f"tissue must be RGB, got shape {tissue.shape}")
    if not (0.0 <= opacity <= 1.0):
        raise ValidationError(f"opacity {opacity} outside [0, 1]")
    th, tw = tissue.shape[:2]
    oh, ow = overlay.shape[:2]
    if th % oh or tw % ow or th // oh != tw // ow:
        raise ValidationError(
            f"overlay {oh}x{ow} does not divide tissue {th}x{tw} by a common factor"
        )
    scaled = _upscale(overlay, th // oh)
    a = scaled[:, :, 3].astype(np.float64) / 255.0 * opacity
    out = scaled[:, :, :3].astype(np.float64) * a[:, :, None] + tissue.astype(
        np.float64
    ) * (1.0 - a)[:, :, None]
    return np.rint(out).astype(np.uint8)


def write_png(path: str | Path, image: np.ndarray) -> None:
    """PNG with pinned encoder settings (8-bit, no interlacing)."""
    arr = np.asarray(image)
    mode = {3: "RGB", 4: "RGBA"}.get(arr.shape[2] if arr.ndim == 3 else 0)
    if mode is None or arr.dtype != np.uint8:
        raise ValidationError(f"expected uint8 RGB/RGBA array, got {arr.dtype} {arr.shape}")
    Image.fromarray(arr, mode).save(path, format="PNG", compress_level=6, optimize=False)


def read_image(path: str | Path) -> np.ndarray:
    """8-bit RGB array from any PIL-readable image (PNG, PPM, ...)."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))
