"""Labeled count patches rendered from synthetic apple clusters."""
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from ..patchset import PATCH_SIZE, LabeledPatch, crop_and_resize
from . import render

VARIETIES = ("red", "yellow", "green")


@dataclass
class PatchStyle:
    """Knobs for :func:`render_patch`; ``None`` means drawn from the seed."""

    variety: str = None
    apple_radius: tuple = (9.0, 22.0)
    min_visible: float = 0.5
    max_occluders: int = 3
    box_pad: tuple = (0.0, 0.35)


@dataclass
class RenderedPatch:
    patch: LabeledPatch
    mask: np.ndarray
    instances: list = field(default_factory=list)


def _layout_ok(ids, count, areas, min_visible):
    vis = np.bincount(ids[ids >= 0].ravel(), minlength=count)[:count]
    return np.all(vis >= min_visible * areas), vis


def render_cluster_canvas(count, rng, radius, variety, min_visible=0.5, max_occluders=3):
    """Render a cluster of ``count`` apples on foliage.

    Returns (uint8 image, per-pixel instance ids, pixel centers, radius,
    instance ledger).
    """
    for _attempt in range(50):
        centers = render.cluster_layout(count, rng) * radius if count else np.zeros((0, 2))
        extent = (np.abs(centers).max() if count else 0.0) + radius
        half = int(np.ceil(extent + (2 if count else 5) * radius))
        size = 2 * half
        centers = centers + half
        img = render.foliage_background(size, size, rng, leaf_size=radius * rng.uniform(0.6, 1.1),
                                        sky=rng.choice([0.0, 0.0, 0.05]))
        ids = np.full((size, size), -1, dtype=np.int32)
        light = render.random_light(rng)
        areas = np.zeros(count)
        depth_order = rng.permutation(count)
        for k in depth_order:
            color = render.apple_color(variety, rng)
            r_k = radius * rng.uniform(0.9, 1.1)
            m = render.draw_apple(img, centers[k, 0], centers[k, 1], r_k, color, light, rng, ids, k)
            areas[k] = m.sum()
        ok, vis = _layout_ok(ids, count, areas, min_visible)
        if not ok:
            continue
        for _ in range(rng.integers(0, max_occluders + 1)) if count else ():
            k = rng.integers(count)
            trial_img, trial_ids = img.copy(), ids.copy()
            ang = rng.uniform(0, 2 * np.pi)
            off = radius * rng.uniform(0.6, 1.4)
            render.draw_leaf(trial_img, centers[k, 0] + off * np.cos(ang), centers[k, 1] + off * np.sin(ang),
                             radius * rng.uniform(0.5, 0.9), rng, trial_ids)
            good, _ = _layout_ok(trial_ids, count, areas, min_visible)
            if good:
                img, ids = trial_img, trial_ids
        _, vis = _layout_ok(ids, count, areas, min_visible)
        ledger = [{"center": centers[k].tolist(), "visible_fraction": float(vis[k] / areas[k])}
                  for k in range(count)]
        return render.finish(img, rng), ids, centers, radius, ledger
    raise RuntimeError("could not place a cluster layout")  # pragma: no cover


def cluster_box(centers, radius, pad, shape):
    """Box around apple centers padded by ``radius * (1 + pad)``, clipped."""
    h, w = shape[:2]
    reach = radius * (1.0 + pad)
    x0 = max(int(np.floor(centers[:, 0].min() - reach)), 0)
    y0 = max(int(np.floor(centers[:, 1].min() - reach)), 0)
    x1 = min(int(np.ceil(centers[:, 0].max() + reach)), w)
    y1 = min(int(np.ceil(centers[:, 1].max() + reach)), h)
    return x0, y0, x1 - x0, y1 - y0


def render_patch(count, style=None, seed=0):
    """Render a 227x227 patch holding exactly ``count`` apples (0..6).

    Returns a :class:`RenderedPatch` whose ``mask`` marks apple pixels after
    the resize and whose ``instances`` ledger lists every drawn apple with its
    visible fraction.
    """
    if int(count) != count or not 0 <= count <= 6:
        raise ValueError(f"count must be in 0..6, got {count!r}")
    style = style or PatchStyle()
    rng = np.random.default_rng([int(seed), int(count)])
    variety = style.variety or VARIETIES[rng.integers(len(VARIETIES))]
    radius = rng.uniform(*style.apple_radius)
    img, ids, centers, radius, ledger = render_cluster_canvas(
        count, rng, radius, variety, style.min_visible, style.max_occluders)
    if count:
        box = cluster_box(centers, radius, rng.uniform(*style.box_pad), img.shape)
    else:
        side = rng.uniform(2.5, 8.0) * radius
        bw = int(max(side * rng.uniform(0.7, 1.4), 4))
        bh = int(max(side * rng.uniform(0.7, 1.4), 4))
        bw, bh = min(bw, img.shape[1]), min(bh, img.shape[0])
        box = (int(rng.integers(0, img.shape[1] - bw + 1)), int(rng.integers(0, img.shape[0] - bh + 1)), bw, bh)
    pixels = crop_and_resize(img, box)
    x, y, w, h = box
    apple = (ids[y:y + h, x:x + w] >= 0).astype(np.uint8)
    mask = cv2.resize(apple, (PATCH_SIZE, PATCH_SIZE), interpolation=cv2.INTER_NEAREST).astype(bool)
    patch = LabeledPatch(pixels, int(count), f"synth-{int(seed)}-{int(count)}", tuple(int(v) for v in box))
    return RenderedPatch(patch, mask, ledger)


def render_corpus(per_class, seed=0, style=None):
    """``per_class`` rendered patches for each count 0..6, in a fixed order."""
    out = []
    for i in range(per_class):
        for c in range(7):
            out.append(render_patch(c, style, seed=seed * 1_000_000 + i))
    return out


def write_patch_corpus(out_dir, per_class, seed=0, ratios=(0.8, 0.1, 0.1), style=None):
    """Render a labeled corpus to ``out_dir``: patches/, masks/ and manifest.csv.

    Every patch is its own source image, so the split is by patch.
    """
    from ..patchset import DatasetManifest, ManifestRow, split_sources, write_manifest, write_png

    out = Path(out_dir)
    (out / "patches").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    rendered = render_corpus(per_class, seed, style)
    assignment = split_sources([r.patch.source_image for r in rendered], seed, ratios)
    rows = []
    for r in rendered:
        name = f"{r.patch.source_image}.png"
        write_png(out / "patches" / name, r.patch.pixels)
        write_png(out / "masks" / name, r.mask.astype(np.uint8) * 255)
        rows.append(ManifestRow(f"patches/{name}", r.patch.count_label, assignment[r.patch.source_image],
                                r.patch.source_image, r.patch.box))
    manifest = DatasetManifest(rows)
    write_manifest(manifest, out / "manifest.csv")
    return manifest
