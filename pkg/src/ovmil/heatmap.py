"""Attention heatmaps: overlap-averaged patch scores mapped through a colour LUT."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ._colormap import VIRIDIS
from .abmil.model import EmptyBagError
from .preprocess.tissue import GeometryError

COLORMAPS = {"viridis": np.array(VIRIDIS, dtype=np.uint8)}


@dataclass(frozen=True)
class HeatmapSpec:
    patch_px: int = 256
    stride_px: int = 128
    downsample: int = 16
    colormap: str = "viridis"
    normalisation: str = "percentile"
    opacity: float = 0.5
    clip_percentiles: tuple = (1.0, 99.0)

    def __post_init__(self):
        if self.patch_px < 1 or self.stride_px < 1 or self.downsample < 1:
            raise ValueError("patch, stride and downsample must be positive")
        if self.stride_px != self.patch_px and self.patch_px % self.stride_px:
            raise ValueError("stride must equal or divide the patch size")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("opacity must lie in [0, 1]")
        if self.normalisation not in ("percentile", "minmax"):
            raise ValueError(f"unknown normalisation {self.normalisation!r}")
        if self.colormap not in COLORMAPS:
            raise ValueError(f"unknown colormap {self.colormap!r}")


def canvas_shape(slide_dims, downsample):
    w, h = slide_dims
    return (-(-h // downsample), -(-w // downsample))


def overlap_scores(coords, attention, slide_dims, patch_px, downsample=1):
    """Per canvas pixel mean attention of the covering patches (NaN where uncovered)."""
    attention = np.asarray(attention, dtype=np.float64).ravel()
    if attention.size == 0:
        raise EmptyBagError("no attention scores to render")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if len(coords) != len(attention):
        raise ValueError("one coordinate pair per attention score required")
    w, h = slide_dims
    if (coords < 0).any() or (coords[:, 0] >= w).any() or (coords[:, 1] >= h).any():
        raise GeometryError("patch coordinate outside the slide")
    ch, cw = canvas_shape(slide_dims, downsample)
    x0 = coords[:, 0] // downsample
    y0 = coords[:, 1] // downsample
    x1 = np.minimum(-(-(coords[:, 0] + patch_px) // downsample), cw)
    y1 = np.minimum(-(-(coords[:, 1] + patch_px) // downsample), ch)

    acc = np.zeros((ch + 1, cw + 1))
    cnt = np.zeros((ch + 1, cw + 1))
    for grid, val in ((acc, attention), (cnt, np.ones_like(attention))):
        np.add.at(grid, (y0, x0), val)
        np.add.at(grid, (y0, x1), -val)
        np.add.at(grid, (y1, x0), -val)
        np.add.at(grid, (y1, x1), val)
    acc = acc.cumsum(0).cumsum(1)[:ch, :cw]
    cnt = np.rint(cnt.cumsum(0).cumsum(1)[:ch, :cw])
    covered = cnt > 0
    scores = np.full((ch, cw), np.nan)
    scores[covered] = acc[covered] / cnt[covered]
    return scores


def normalise_scores(scores, mode="percentile", clip_percentiles=(1.0, 99.0)):
    covered = ~np.isnan(scores)
    vals = scores[covered]
    if mode == "percentile":
        lo, hi = np.percentile(vals, clip_percentiles)
    else:
        lo, hi = vals.min(), vals.max()
    out = np.full(scores.shape, np.nan)
    if hi - lo <= 1e-15 * max(abs(hi), 1.0):
        out[covered] = 1.0
    else:
        out[covered] = (np.clip(vals, lo, hi) - lo) / (hi - lo)
    return out


def render_heatmap(coords, attention, slide_dims, spec=None, background=None):
    """RGB uint8 canvas of size slide_dims / spec.downsample."""
    spec = spec or HeatmapSpec()
    scores = overlap_scores(coords, attention, slide_dims, spec.patch_px, spec.downsample)
    norm = normalise_scores(scores, spec.normalisation, spec.clip_percentiles)
    covered = ~np.isnan(norm)
    lut = COLORMAPS[spec.colormap]
    colours = lut[np.rint(norm[covered] * (len(lut) - 1)).astype(int)].astype(np.float64)

    shape = norm.shape + (3,)
    if background is None:
        out = np.full(shape, 255, dtype=np.uint8)
        out[covered] = colours.astype(np.uint8)
        return out
    bg = np.asarray(background, dtype=np.uint8)
    if bg.shape != shape:
        bg = np.asarray(Image.fromarray(bg).resize((shape[1], shape[0]), Image.BILINEAR))
    out = bg.copy()
    blended = (1.0 - spec.opacity) * bg[covered].astype(np.float64) + spec.opacity * colours
    out[covered] = np.clip(np.rint(blended), 0, 255).astype(np.uint8)
    return out


def attention_stats(attention):
    a = np.asarray(attention, dtype=np.float64)
    nz = a[a > 0]
    return {
        "n_patches": int(a.size),
        "attention_min": float(a.min()),
        "attention_max": float(a.max()),
        "attention_entropy": float(-(nz * np.log(nz)).sum()),
    }


def write_heatmap(path, image, slide_id, attention, spec):
    """Save the PNG plus a key=value sidecar (``<name>.txt``) describing it."""
    path = Path(path)
    Image.fromarray(image).save(path)
    info = {"slide_id": slide_id, **asdict(spec), **attention_stats(attention)}
    lines = [f"{k}={v}" for k, v in info.items()]
    path.with_suffix(".txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
