"""Dataset model (slides, cases, subtype labels) and the FBAG feature-bag format.

FBAG layout, all little-endian::

    b"FBAG" | version u16 | n_patches u32 | dim u32 | patch_size_px u32
    | coords (n_patches x 2) u32 | features (n_patches x dim) f32, row-major
"""
from __future__ import annotations

import csv
import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MANIFEST_HEADER = ("slide_id", "case_id", "label", "feature_path", "cohort_tag")

FBAG_MAGIC = b"FBAG"
FBAG_VERSION = 1
_FBAG_HEADER = struct.Struct("<4sHIII")
FBAG_HEADER_SIZE = _FBAG_HEADER.size


class SubtypeLabel(enum.IntEnum):
    HGSC = 0
    LGSC = 1
    CCC = 2
    EC = 3
    MC = 4

    @classmethod
    def parse(cls, text):
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise LabelParseError(f"unknown subtype label {text!r}") from None


NUM_CLASSES = len(SubtypeLabel)


class FeatureStoreError(Exception):
    pass


class ManifestError(FeatureStoreError):
    pass


class LabelConflictError(ManifestError):
    pass


class LabelParseError(ManifestError):
    pass


class BagFormatError(FeatureStoreError):
    pass


class BagLengthError(BagFormatError):
    pass


class BagIntegrityError(BagFormatError):
    pass


@dataclass(frozen=True)
class SlideRecord:
    slide_id: str
    case_id: str
    label: SubtypeLabel
    feature_path: Path
    cohort_tag: str


@dataclass(eq=False)
class FeatureBag:
    slide_id: str
    features: np.ndarray
    coords: np.ndarray
    patch_size_px: int = 256

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype="<f4")
        self.coords = np.ascontiguousarray(self.coords, dtype="<u4").reshape(-1, 2)
        validate_bag(self)

    @property
    def n_patches(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def __eq__(self, other):
        if not isinstance(other, FeatureBag):
            return NotImplemented
        return (
            self.slide_id == other.slide_id
            and self.patch_size_px == other.patch_size_px
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
            and np.array_equal(self.coords, other.coords)
        )


def validate_bag(bag):
    f = bag.features
    if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
        raise BagIntegrityError(f"features must be a non-empty 2-D matrix, got shape {f.shape}")
    if bag.coords.shape[0] != f.shape[0]:
        raise BagIntegrityError(
            f"{bag.coords.shape[0]} coords for {f.shape[0]} patches"
        )
    if not np.isfinite(f).all():
        raise BagIntegrityError(f"slide {bag.slide_id!r}: non-finite feature values")
    if int(bag.patch_size_px) < 1:
        raise BagIntegrityError("patch_size_px must be positive")


def encode_feature_bag(bag):
    validate_bag(bag)
    header = _FBAG_HEADER.pack(
        FBAG_MAGIC, FBAG_VERSION, bag.n_patches, bag.dim, int(bag.patch_size_px)
    )
    coords = np.ascontiguousarray(bag.coords, dtype="<u4")
    feats = np.ascontiguousarray(bag.features, dtype="<f4")
    return header + coords.tobytes() + feats.tobytes()


def decode_feature_bag(data, slide_id=""):
    if len(data) < FBAG_HEADER_SIZE:
        raise BagLengthError(f"truncated header: {len(data)} bytes")
    magic, version, n, dim, patch_px = _FBAG_HEADER.unpack_from(data)
    if magic != FBAG_MAGIC:
        raise BagFormatError(f"bad magic {magic!r}")
    if version != FBAG_VERSION:
        raise BagFormatError(f"unsupported FBAG version {version}")
    expected = FBAG_HEADER_SIZE + n * 8 + n * dim * 4
    if len(data) != expected:
        raise BagLengthError(f"expected {expected} bytes for {n}x{dim} bag, found {len(data)}")
    off = FBAG_HEADER_SIZE
    coords = np.frombuffer(data, dtype="<u4", count=2 * n, offset=off).reshape(n, 2)
    feats = np.frombuffer(data, dtype="<f4", count=n * dim, offset=off + 8 * n).reshape(n, dim)
    return FeatureBag(slide_id, feats.copy(), coords.copy(), patch_px)


def write_feature_bag(bag, path):
    Path(path).write_bytes(encode_feature_bag(bag))


def read_feature_bag(path, slide_id=None):
    """Read an FBAG file. The format carries no slide id; it defaults to the file stem."""
    path = Path(path)
    return decode_feature_bag(path.read_bytes(), path.stem if slide_id is None else slide_id)


def load_manifest(path):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        if tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            slide_id, case_id, label, feature_path, cohort = (c.strip() for c in row)
            fp = Path(feature_path)
            if not fp.is_absolute():
                fp = path.parent / fp
            records.append(SlideRecord(slide_id, case_id, SubtypeLabel.parse(label), fp, cohort))
    check_manifest(records)
    return records


def check_manifest(records):
    seen = set()
    case_label = {}
    for r in records:
        if r.slide_id in seen:
            raise ManifestError(f"duplicate slide_id {r.slide_id!r}")
        seen.add(r.slide_id)
        prev = case_label.setdefault(r.case_id, r.label)
        if prev != r.label:
            raise LabelConflictError(
                f"case {r.case_id!r} has labels {prev.name} and {r.label.name}"
            )


def write_manifest(records, path):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in records:
            fp = Path(r.feature_path)
            try:
                fp = fp.relative_to(path.parent)
            except ValueError:
                pass
            w.writerow([r.slide_id, r.case_id, r.label.name, fp.as_posix(), r.cohort_tag])


def load_bags(records):
    """Read the bag for every record, checking that the feature dim is shared."""
    bags = []
    dim = None
    for r in records:
        bag = read_feature_bag(r.feature_path, r.slide_id)
        if dim is None:
            dim = bag.dim
        elif bag.dim != dim:
            raise BagIntegrityError(
                f"slide {r.slide_id!r} has dim {bag.dim}, expected {dim}"
            )
        bags.append(bag)
    return bags


def class_counts(labels, num_classes=NUM_CLASSES):
    return np.bincount(np.asarray(labels, dtype=int), minlength=num_classes)
