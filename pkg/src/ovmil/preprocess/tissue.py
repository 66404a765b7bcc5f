"""Saturation-based tissue segmentation, patch grids and box downsampling."""
from __future__ import annotations

import numpy as np
from scipy import ndimage


class GeometryError(ValueError):
    pass


class DegenerateHistogramError(ValueError):
    pass


def as_tile(pixels):
    tile = np.asarray(pixels)
    if tile.ndim != 3 or tile.shape[2] != 3 or tile.shape[0] < 1 or tile.shape[1] < 1:
        raise ValueError(f"expected an HxWx3 RGB tile, got shape {tile.shape}")
    if tile.dtype != np.uint8:
        if tile.min() < 0 or tile.max() > 255:
            raise ValueError("RGB channel values must lie in [0, 255]")
        tile = tile.astype(np.uint8)
    return tile


def saturation_channel(tile):
    """HSV saturation on the 0..255 scale, round(255 * (max - min) / max)."""
    tile = as_tile(tile).astype(np.int64)
    mx = tile.max(axis=2)
    mn = tile.min(axis=2)
    safe = np.where(mx == 0, 1, mx)
    # round half up in integer arithmetic
    sat = (2 * 255 * (mx - mn) + safe) // (2 * safe)
    return np.where(mx == 0, 0, sat).astype(np.uint8)


def segment_tissue_fixed(tile, threshold=8, median_kernel=0):
    if not 0 <= threshold <= 255:
        raise ValueError("threshold must lie in [0, 255]")
    mask = saturation_channel(tile) > threshold
    if median_kernel and median_kernel > 1:
        mask = ndimage.median_filter(mask.astype(np.uint8), size=median_kernel) > 0
    return mask


def saturation_histogram(tile):
    return np.bincount(saturation_channel(tile).ravel(), minlength=256)


def otsu_threshold(histogram):
    """Otsu threshold t: class 0 is bins <= t, class 1 is bins > t.

    Between-class variance is compared in exact integer arithmetic, so ties
    resolve deterministically to the smallest t.
    """
    hist = [int(c) for c in np.asarray(histogram).ravel()]
    if len(hist) != 256:
        raise ValueError(f"histogram must have 256 bins, got {len(hist)}")
    if any(c < 0 for c in hist):
        raise ValueError("histogram counts must be non-negative")
    if sum(1 for c in hist if c > 0) < 2:
        raise DegenerateHistogramError("histogram needs at least two populated bins")

    total = sum(hist)
    total_mass = sum(i * c for i, c in enumerate(hist))
    # sigma_b^2 * total^3 = (total*s0 - total_mass*w0)^2 / (w0*w1); keep as a fraction
    best_t, best_num, best_den = 0, 0, 1
    w0 = s0 = 0
    for t in range(255):
        w0 += hist[t]
        s0 += t * hist[t]
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            continue
        num = (total * s0 - total_mass * w0) ** 2
        den = w0 * w1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def segment_tissue_otsu(tile, offset=0, median_kernel=0):
    """Otsu on the saturation histogram; ``offset`` shifts the computed threshold."""
    t = otsu_threshold(saturation_histogram(tile))
    t = int(np.clip(t + offset, 0, 255))
    return segment_tissue_fixed(tile, t, median_kernel), t


def patch_grid(mask, patch_px, stride_px, min_tissue_fraction=0.5):
    """Top-left (x, y) of every grid window whose tissue fraction reaches the minimum."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    if patch_px < 1 or stride_px < 1:
        raise GeometryError("patch and stride must be positive")
    if patch_px > h or patch_px > w:
        raise GeometryError(f"patch {patch_px}px larger than image {w}x{h}")
    integral = np.zeros((h + 1, w + 1), dtype=np.int64)
    integral[1:, 1:] = mask.cumsum(0).cumsum(1)
    ys = np.arange(0, h - patch_px + 1, stride_px)
    xs = np.arange(0, w - patch_px + 1, stride_px)
    y0, x0 = np.meshgrid(ys, xs, indexing="ij")
    y1, x1 = y0 + patch_px, x0 + patch_px
    counts = integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0]
    keep = counts >= min_tissue_fraction * patch_px * patch_px
    return [(int(x), int(y)) for y, x in zip(y0[keep], x0[keep])]


def downsample(tile, factor):
    """Box-filter downsampling with round-half-up."""
    tile = as_tile(tile)
    h, w, _ = tile.shape
    if factor < 1 or h % factor or w % factor:
        raise GeometryError(f"factor {factor} does not divide {w}x{h}")
    if factor == 1:
        return tile.copy()
    blocks = tile.reshape(h // factor, factor, w // factor, factor, 3).astype(np.int64)
    sums = blocks.sum(axis=(1, 3))
    n = factor * factor
    return ((2 * sums + n) // (2 * n)).astype(np.uint8)


def mask_outline(mask):
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, border_value=0)


def segmentation_preview(tile, mask, colour=(0, 200, 0), width=2):
    """Copy of the tile with the tissue boundary drawn in ``colour``."""
    out = as_tile(tile).copy()
    edge = mask_outline(mask)
    if width > 1:
        edge = ndimage.binary_dilation(edge, iterations=width - 1)
    out[edge] = colour
    return out
