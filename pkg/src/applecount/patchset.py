"""Labeled 227x227 count patches: cropping, augmentation, balanced datasets.

The on-disk manifest is a CSV with header
``path,count,split,source_image,x,y,w,h``; patches are stored as PNG next to
it (paths in the manifest are relative to the manifest's directory).
"""
import csv
import io
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np

from ._validation import check_box, check_count_label, check_rgb_image

logger = logging.getLogger(__name__)

PATCH_SIZE = 227
N_CLASSES = 7
SPLITS = ("train", "val", "test")
MANIFEST_FIELDS = ["path", "count", "split", "source_image", "x", "y", "w", "h"]


class UnbalanceableClassError(ValueError):
    """A count class has no examples and was not declared absent."""


@dataclass
class LabeledPatch:
    pixels: np.ndarray
    count_label: int
    source_image: str = ""
    box: tuple = (0, 0, PATCH_SIZE, PATCH_SIZE)

    def __post_init__(self):
        check_count_label(self.count_label)
        if self.pixels.shape != (PATCH_SIZE, PATCH_SIZE, 3):
            raise ValueError(f"patch must be {PATCH_SIZE}x{PATCH_SIZE}x3, got {self.pixels.shape}")


@dataclass(frozen=True)
class AugmentationPolicy:
    """Label-preserving transforms. Cropping is deliberately not offered."""

    horizontal_flip: bool = True
    rotation_range: float = 5.0
    brightness: tuple = (0.8, 1.2)
    saturation: tuple = (0.8, 1.2)

    def __post_init__(self):
        if not 0.0 <= self.rotation_range <= 10.0:
            raise ValueError("rotation_range must lie in [0, 10] degrees")
        for name in ("brightness", "saturation"):
            lo, hi = getattr(self, name)
            if not 0.7 <= lo <= hi <= 1.3:
                raise ValueError(f"{name} scale range must lie within [0.7, 1.3]")


@dataclass
class ManifestRow:
    path: str
    count: int
    split: str
    source_image: str
    box: tuple

    def as_record(self):
        x, y, w, h = self.box
        return {"path": self.path, "count": self.count, "split": self.split,
                "source_image": self.source_image, "x": x, "y": y, "w": w, "h": h}


@dataclass
class DatasetManifest:
    rows: list = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for r in self.rows:
            check_count_label(r.count)
            if r.split not in SPLITS:
                raise ValueError(f"unknown split {r.split!r}")
            if r.path in seen:
                raise ValueError(f"duplicate patch path {r.path!r}")
            seen.add(r.path)
        sources = {}
        for r in self.rows:
            if sources.setdefault(r.source_image, r.split) != r.split:
                raise ValueError(f"source image {r.source_image!r} spans several splits")

    def split(self, name):
        return [r for r in self.rows if r.split == name]

    def histogram(self, split="train"):
        hist = np.zeros(N_CLASSES, dtype=int)
        for r in self.split(split):
            hist[r.count] += 1
        return hist


def crop_and_resize(image, box, size=PATCH_SIZE):
    """Crop ``box`` = (x, y, w, h) and stretch it bilinearly to size x size."""
    image = check_rgb_image(image)
    x, y, w, h = check_box(box, image.shape)
    crop = image[y:y + h, x:x + w]
    if crop.shape[:2] == (size, size):
        return crop.copy()
    return cv2.resize(crop, (size, size), interpolation=cv2.INTER_LINEAR)


def hflip(pixels):
    return pixels[:, ::-1].copy()


def rotate(pixels, degrees):
    h, w = pixels.shape[:2]
    m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), degrees, 1.0)
    return cv2.warpAffine(pixels, m, (w, h), flags=cv2.INTER_LINEAR,
                          borderMode=cv2.BORDER_REFLECT_101)


def color_jitter(pixels, brightness, saturation):
    """Scale saturation around the per-pixel gray level, then brightness."""
    img = pixels.astype(np.float64)
    gray = img.mean(axis=2, keepdims=True)
    img = brightness * (gray + saturation * (img - gray))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def augment(patch, policy=AugmentationPolicy(), seed=0, n=1):
    """Draw ``n`` augmented copies of ``patch``; labels are never touched."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        px = patch.pixels
        if policy.horizontal_flip and rng.random() < 0.5:
            px = hflip(px)
        if policy.rotation_range > 0:
            px = rotate(px, rng.uniform(-policy.rotation_range, policy.rotation_range))
        px = color_jitter(px, rng.uniform(*policy.brightness), rng.uniform(*policy.saturation))
        out.append(replace(patch, pixels=px))
    return out


def split_sources(sources, seed, ratios=(0.8, 0.1, 0.1)):
    """Assign each source image id to a split (whole images, never patches)."""
    sources = sorted(set(sources))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(sources))
    n_train = int(round(ratios[0] * len(sources)))
    n_val = int(round(ratios[1] * len(sources)))
    assignment = {}
    for rank, i in enumerate(order):
        if rank < n_train:
            assignment[sources[i]] = "train"
        elif rank < n_train + n_val:
            assignment[sources[i]] = "val"
        else:
            assignment[sources[i]] = "test"
    return assignment


def build_balanced_dataset(manifest, out_dir, target_per_class, policy=AugmentationPolicy(),
                           seed=0, absent=(), root=None):
    """Oversample minority training classes by augmentation up to the target.

    ``manifest`` is a :class:`DatasetManifest` (or a list of them) whose
    patches are readable relative to ``root``. Augmented patches are written
    as PNG into ``out_dir``; val/test rows are carried over untouched. Classes
    above the target are subsampled.
    """
    if isinstance(manifest, DatasetManifest):
        manifest = [manifest]
    rows = [r for m in manifest for r in m.rows]
    root = Path(root) if root is not None else Path(out_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    by_class = {c: [r for r in rows if r.split == "train" and r.count == c] for c in range(N_CLASSES)}
    missing = [c for c, rs in by_class.items() if not rs and c not in absent]
    if missing:
        raise UnbalanceableClassError(f"no training examples for count classes {missing}")

    out_rows = [r for r in rows if r.split != "train"]
    for c in range(N_CLASSES):
        members = sorted(by_class[c], key=lambda r: r.path)
        if not members:
            continue
        if len(members) >= target_per_class:
            keep = sorted(rng.choice(len(members), size=target_per_class, replace=False))
            out_rows.extend(members[i] for i in keep)
            continue
        out_rows.extend(members)
        deficit = target_per_class - len(members)
        picks = rng.integers(len(members), size=deficit)
        seeds = rng.integers(2**31, size=deficit)
        for k, (i, s) in enumerate(zip(picks, seeds)):
            src = members[i]
            patch = LabeledPatch(read_png(root / src.path), src.count, src.source_image, src.box)
            aug = augment(patch, policy, seed=int(s))[0]
            name = f"aug_c{c}_{k:06d}.png"
            write_png(out_dir / name, aug.pixels)
            rel = os.path.relpath(out_dir / name, root)
            out_rows.append(ManifestRow(rel, c, "train", src.source_image, src.box))
    logger.info("balanced training split: %s", [target_per_class] * N_CLASSES)
    return DatasetManifest(out_rows)


def read_png(path):
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise FileNotFoundError(path)
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def write_png(path, pixels):
    if pixels.ndim == 3:
        pixels = cv2.cvtColor(pixels, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), pixels):
        raise OSError(f"could not write {path}")


def manifest_to_csv(manifest):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in manifest.rows:
        writer.writerow(r.as_record())
    return buf.getvalue()


def write_manifest(manifest, path):
    Path(path).write_text(manifest_to_csv(manifest))


def read_manifest(path):
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            count = int(rec["count"])
            if count > N_CLASSES - 1:
                raise ValueError(f"count {count} exceeds the largest class {N_CLASSES - 1}")
            rows.append(ManifestRow(rec["path"], count, rec["split"], rec["source_image"],
                                    tuple(int(rec[k]) for k in ("x", "y", "w", "h"))))
    return DatasetManifest(rows)


def load_split(manifest, split, root):
    """Stack the patches of one split as (N, 227, 227, 3) uint8 plus labels."""
    rows = manifest.split(split)
    X = np.empty((len(rows), PATCH_SIZE, PATCH_SIZE, 3), dtype=np.uint8)
    for i, r in enumerate(rows):
        X[i] = read_png(Path(root) / r.path)
    y = np.array([r.count for r in rows], dtype=np.int64)
    return X, y
