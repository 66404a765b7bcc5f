"""Reinhard (lαβ moment matching) and Macenko (SVD stain separation) normalisation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tissue import as_tile

_RGB_TO_LMS = np.array(
    [
        [0.3811, 0.5783, 0.0402],
        [0.1967, 0.7244, 0.0782],
        [0.0241, 0.1288, 0.8444],
    ]
)
_LMS_TO_RGB = np.linalg.inv(_RGB_TO_LMS)
_LOG_LMS_TO_LAB = np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)]) @ np.array(
    [[1.0, 1.0, 1.0], [1.0, 1.0, -2.0], [1.0, -1.0, 0.0]]
)
_LAB_TO_LOG_LMS = np.linalg.inv(_LOG_LMS_TO_LAB)

# H&E reference (haematoxylin, eosin columns) and 99th-percentile concentrations
DEFAULT_HE_STAINS = np.array(
    [
        [0.5626, 0.2159],
        [0.7201, 0.8012],
        [0.4062, 0.5581],
    ]
)
DEFAULT_HE_MAX_CONC = np.array([1.9705, 1.0308])


class StainError(ValueError):
    pass


class DegenerateTileError(StainError):
    pass


class InsufficientTissueError(StainError):
    pass


class DegenerateStainError(StainError):
    pass


# -- Reinhard ---------------------------------------------------------------

def rgb_to_lab(pixels):
    """RGB (0..255, any leading shape) to lαβ via log10 LMS. Offsets by +1 to keep log finite."""
    rgb = np.asarray(pixels, dtype=np.float64) + 1.0
    lms = rgb @ _RGB_TO_LMS.T
    return np.log10(lms) @ _LOG_LMS_TO_LAB.T


def lab_to_rgb(lab):
    lms = 10.0 ** (np.asarray(lab, dtype=np.float64) @ _LAB_TO_LOG_LMS.T)
    return lms @ _LMS_TO_RGB.T - 1.0


@dataclass(frozen=True)
class LabStats:
    means: tuple
    stds: tuple

    @classmethod
    def of(cls, tile):
        lab = rgb_to_lab(as_tile(tile)).reshape(-1, 3)
        return cls(tuple(lab.mean(axis=0)), tuple(lab.std(axis=0)))


def reinhard_normalise(tile, target):
    """Match the tile's per-channel lαβ mean and std to ``target`` (a LabStats)."""
    tile = as_tile(tile)
    lab = rgb_to_lab(tile)
    flat = lab.reshape(-1, 3)
    mu, sd = flat.mean(axis=0), flat.std(axis=0)
    if np.any(sd < 1e-9):
        raise DegenerateTileError("tile has zero variance in an lαβ channel")
    t_mu = np.asarray(target.means, dtype=np.float64)
    t_sd = np.asarray(target.stds, dtype=np.float64)
    out = (lab - mu) / sd * t_sd + t_mu
    rgb = lab_to_rgb(out)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


# -- Macenko ----------------------------------------------------------------

def optical_density(pixels):
    return -np.log10((np.asarray(pixels, dtype=np.float64) + 1.0) / 256.0)


def od_to_rgb(od):
    return 256.0 * 10.0 ** (-np.asarray(od, dtype=np.float64)) - 1.0


@dataclass(frozen=True)
class MacenkoReference:
    stains: np.ndarray = DEFAULT_HE_STAINS
    max_conc: np.ndarray = DEFAULT_HE_MAX_CONC

    def __post_init__(self):
        stains = np.asarray(self.stains, dtype=np.float64)
        if stains.shape != (3, 2):
            raise ValueError("reference stains must be a 3x2 matrix")
        object.__setattr__(self, "stains", stains / np.linalg.norm(stains, axis=0))
        object.__setattr__(self, "max_conc", np.asarray(self.max_conc, dtype=np.float64))


def estimate_stain_matrix(od, percentiles=(1.0, 99.0)):
    """Two unit stain vectors (columns, haematoxylin first) from tissue OD rows."""
    od = np.asarray(od, dtype=np.float64).reshape(-1, 3)
    _, sv, vt = np.linalg.svd(od, full_matrices=False)
    if sv[0] <= 0 or sv[1] <= 1e-10 * sv[0]:
        raise DegenerateStainError("optical density matrix is rank deficient")
    basis = vt[:2].T
    if basis[:, 0].sum() < 0:
        basis[:, 0] *= -1
    if basis[:, 1].sum() < 0:
        basis[:, 1] *= -1
    proj = od @ basis
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, percentiles)
    v_lo = basis @ np.array([np.cos(lo), np.sin(lo)])
    v_hi = basis @ np.array([np.cos(hi), np.sin(hi)])
    if v_lo[0] >= v_hi[0]:
        stains = np.column_stack([v_lo, v_hi])
    else:
        stains = np.column_stack([v_hi, v_lo])
    stains *= np.sign(stains.sum(axis=0))
    return stains / np.linalg.norm(stains, axis=0)


def stain_concentrations(od, stains):
    """Per-pixel non-negative least squares for OD ~ stains @ c with two stains."""
    od = np.asarray(od, dtype=np.float64).reshape(-1, 3)
    s = np.asarray(stains, dtype=np.float64)
    conc = od @ np.linalg.pinv(s).T
    bad = (conc < 0).any(axis=1)
    if bad.any():
        sub = od[bad]
        options = [np.zeros((len(sub), 2))]
        for j in range(2):
            c = np.zeros((len(sub), 2))
            c[:, j] = np.maximum(sub @ s[:, j] / (s[:, j] @ s[:, j]), 0.0)
            options.append(c)
        resid = np.stack([((sub - c @ s.T) ** 2).sum(axis=1) for c in options])
        pick = resid.argmin(axis=0)
        conc[bad] = np.stack(options)[pick, np.arange(len(sub))]
    return conc


def _rgb_values(tile):
    """HxWx3 intensities on 0..255; float input is kept unquantised."""
    arr = np.asarray(tile)
    if arr.dtype == np.uint8:
        return as_tile(arr)
    if arr.ndim != 3 or arr.shape[2] != 3 or not np.isfinite(arr).all():
        raise ValueError(f"expected a finite HxWx3 RGB tile, got shape {arr.shape}")
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("RGB channel values must lie in [0, 255]")
    return arr.astype(np.float64)


def macenko_analyse(tile, percentiles=(1.0, 99.0), od_cutoff=0.15, min_tissue=100):
    """Returns (stains 3x2, concentrations Nx2, tissue mask N) for a tile."""
    tile = _rgb_values(tile)
    od = optical_density(tile.reshape(-1, 3))
    tissue = od.sum(axis=1) >= od_cutoff
    if tissue.sum() < min_tissue:
        raise InsufficientTissueError(
            f"{int(tissue.sum())} tissue pixels, need at least {min_tissue}"
        )
    stains = estimate_stain_matrix(od[tissue], percentiles)
    return stains, stain_concentrations(od, stains), tissue


def fit_macenko_reference(tile, percentiles=(1.0, 99.0), od_cutoff=0.15, min_tissue=100,
                          conc_percentile=99.0):
    stains, conc, tissue = macenko_analyse(tile, percentiles, od_cutoff, min_tissue)
    return MacenkoReference(stains, np.percentile(conc[tissue], conc_percentile, axis=0))


def macenko_normalise(tile, reference=None, percentiles=(1.0, 99.0), od_cutoff=0.15,
                      min_tissue=100, conc_percentile=99.0):
    reference = reference or MacenkoReference()
    tile = _rgb_values(tile)
    _, conc, tissue = macenko_analyse(tile, percentiles, od_cutoff, min_tissue)
    max_c = np.percentile(conc[tissue], conc_percentile, axis=0)
    if np.any(max_c <= 0):
        raise DegenerateStainError("a stain has no positive concentration")
    conc = conc * (reference.max_conc / max_c)
    rgb = od_to_rgb(conc @ reference.stains.T)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8).reshape(tile.shape)
