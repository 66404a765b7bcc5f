"""Synthetic MIL bags with a known signal: a few patches per bag carry a class direction."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import NUM_CLASSES, FeatureBag, SlideRecord, SubtypeLabel, write_feature_bag, write_manifest


@dataclass
class SyntheticBag:
    slide_id: str
    features: np.ndarray
    label: int
    signal: np.ndarray  # bool per patch


def class_directions(dim, n_classes=NUM_CLASSES, seed=0):
    """Orthonormal unit directions, one per class (columns)."""
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(dim, n_classes)))
    return q


def make_signal_bags(n_bags, dim=64, n_classes=NUM_CLASSES, patch_range=(5, 50),
                     signal_fraction=0.1, amplitude=4.0, seed=0, directions=None, prefix="s"):
    """Each bag: N ~ U[patch_range] patches of N(0, I) noise, of which
    ceil(signal_fraction * N) get ``amplitude`` times their class direction added.
    Labels cycle through the classes so the set is balanced."""
    rng = np.random.default_rng(seed)
    if directions is None:
        directions = class_directions(dim, n_classes, seed)
    bags = []
    for i in range(n_bags):
        label = i % n_classes
        n = int(rng.integers(patch_range[0], patch_range[1] + 1))
        feats = rng.normal(size=(n, dim))
        n_sig = max(1, int(np.ceil(signal_fraction * n)))
        signal = np.zeros(n, dtype=bool)
        signal[rng.choice(n, size=n_sig, replace=False)] = True
        feats[signal] += amplitude * directions[:, label]
        bags.append(SyntheticBag(f"{prefix}{i:05d}", feats.astype(np.float32), label, signal))
    return bags


def grid_coords(n, patch_px=256):
    side = int(np.ceil(np.sqrt(n)))
    return np.array([((i % side) * patch_px, (i // side) * patch_px) for i in range(n)])


def write_dataset(bags, out_dir, manifest_name="manifest.csv", cohort="train", slides_per_case=1):
    """Write FBAG files and a manifest; consecutive bags of one label share a case."""
    out = Path(out_dir)
    (out / "bags").mkdir(parents=True, exist_ok=True)
    records = []
    for i, b in enumerate(bags):
        path = out / "bags" / f"{b.slide_id}.fbag"
        write_feature_bag(FeatureBag(b.slide_id, b.features, grid_coords(len(b.features))), path)
        case = f"{cohort}-c{b.label}-{i // (NUM_CLASSES * slides_per_case):05d}"
        records.append(SlideRecord(b.slide_id, case, SubtypeLabel(b.label), path, cohort))
    write_manifest(records, out / manifest_name)
    return records
