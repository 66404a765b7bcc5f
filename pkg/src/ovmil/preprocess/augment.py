"""Seeded colour jitter and RGB channel standardisation."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .tissue import as_tile

_LUMA = np.array([0.299, 0.587, 0.114])

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class AugmentParams:
    """Jitter half-widths: brightness is additive on [0, 1] intensities, contrast and
    saturation are factors drawn from [1 - x, 1 + x], hue is a shift on the unit circle."""

    brightness: float = 0.25
    contrast: float = 0.25
    saturation: float = 0.25
    hue: float = 0.04
    seed: int = 0

    def __post_init__(self):
        if self.brightness < 0 or self.contrast < 0 or self.saturation < 0 or self.hue < 0:
            raise ValueError("jitter ranges must be non-negative")
        if self.contrast >= 1 or self.saturation >= 1:
            raise ValueError("contrast and saturation factors must stay positive")
        if self.hue > 0.5:
            raise ValueError("hue shift must lie within +-0.5")


def sample_jitter(params):
    rng = np.random.default_rng(params.seed)
    u = rng.uniform(-1.0, 1.0, size=4)
    return (
        params.brightness * u[0],
        1.0 + params.contrast * u[1],
        1.0 + params.saturation * u[2],
        params.hue * u[3],
    )


def colour_augment(tile, params):
    tile = as_tile(tile)
    b, c, s, h = sample_jitter(params)
    x = tile.astype(np.float64) / 255.0
    if b != 0.0:
        x = np.clip(x + b, 0.0, 1.0)
    if c != 1.0:
        m = float((x @ _LUMA).mean())
        x = np.clip((x - m) * c + m, 0.0, 1.0)
    chroma = x.max(axis=2) > x.min(axis=2)
    if s != 1.0 and chroma.any():
        gray = (x @ _LUMA)[..., None]
        x = np.where(chroma[..., None], np.clip(gray + s * (x - gray), 0.0, 1.0), x)
    if h != 0.0 and chroma.any():
        hsv = rgb_to_hsv(x)
        hsv[..., 0] = np.mod(hsv[..., 0] + h, 1.0)
        x = np.where(chroma[..., None], hsv_to_rgb(hsv), x)
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def augment_copies(tile, params, copies):
    """``copies`` independently jittered versions, copy k seeded from (seed, k)."""
    out = []
    for k in range(copies):
        seed = int(np.random.SeedSequence([params.seed, k]).generate_state(1, np.uint64)[0])
        out.append(colour_augment(tile, replace(params, seed=seed)))
    return out


def channel_standardise(tile, means=IMAGENET_MEAN, stds=IMAGENET_STD):
    means = np.asarray(means, dtype=np.float64)
    stds = np.asarray(stds, dtype=np.float64)
    if np.any(stds <= 0):
        raise ValueError("channel stds must be positive")
    return (as_tile(tile).astype(np.float64) / 255.0 - means) / stds


def channel_unstandardise(values, means=IMAGENET_MEAN, stds=IMAGENET_STD):
    x = np.asarray(values, dtype=np.float64) * np.asarray(stds) + np.asarray(means)
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)
