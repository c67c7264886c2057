"""Drawing primitives shared by the patch and scene generators.

Images are float RGB arrays in [0, 1], shape (H, W, 3). Every primitive takes
an explicit ``numpy.random.Generator`` so renders are seed-deterministic.
"""
import numpy as np
from scipy.ndimage import gaussian_filter

# base RGB colors per apple variety; per-apple hue noise is added on top
APPLE_PALETTE = {
    "red": np.array([0.72, 0.09, 0.08]),
    "yellow": np.array([0.92, 0.72, 0.16]),
    "green": np.array([0.66, 0.84, 0.24]),
}

LEAF_COLORS = np.array([
    [0.10, 0.28, 0.06],
    [0.16, 0.36, 0.10],
    [0.22, 0.42, 0.12],
    [0.08, 0.20, 0.07],
    [0.28, 0.40, 0.14],
    [0.30, 0.34, 0.16],
])
BRANCH_COLOR = np.array([0.30, 0.22, 0.15])
SKY_COLOR = np.array([0.72, 0.78, 0.84])


def _local_grid(cx, cy, rx, ry, shape):
    h, w = shape
    x0 = max(int(np.floor(cx - rx - 1)), 0)
    x1 = min(int(np.ceil(cx + rx + 1)) + 1, w)
    y0 = max(int(np.floor(cy - ry - 1)), 0)
    y1 = min(int(np.ceil(cy + ry + 1)) + 1, h)
    if x0 >= x1 or y0 >= y1:
        return None
    yy, xx = np.mgrid[y0:y1, x0:x1]
    return (slice(y0, y1), slice(x0, x1)), xx + 0.5, yy + 0.5


def local_ellipse(shape, cx, cy, a, b, angle=0.0):
    """(slices, local boolean mask) of an ellipse, or None when off-image."""
    r = max(a, b)
    grid = _local_grid(cx, cy, r, r, shape)
    if grid is None:
        return None
    sl, xx, yy = grid
    c, s = np.cos(angle), np.sin(angle)
    dx, dy = xx - cx, yy - cy
    u = (c * dx + s * dy) / a
    v = (-s * dx + c * dy) / b
    return sl, u * u + v * v <= 1.0


def ellipse_mask(shape, cx, cy, a, b, angle=0.0):
    """Boolean mask of an ellipse with semi-axes ``a``, ``b`` (pixels)."""
    mask = np.zeros(shape, dtype=bool)
    hit = local_ellipse(shape, cx, cy, a, b, angle)
    if hit is not None:
        mask[hit[0]] = hit[1]
    return mask


def foliage_background(h, w, rng, leaf_size=12.0, sky=0.0, branches=2):
    """Leafy canopy texture: mottled greens, leaf ellipses, a few branches."""
    base = LEAF_COLORS[rng.integers(len(LEAF_COLORS))]
    noise = gaussian_filter(rng.normal(size=(h, w)), sigma=max(leaf_size, 2.0))
    noise /= noise.std() + 1e-12
    img = base[None, None, :] * (1.0 + 0.25 * noise[..., None])

    if sky > 0:
        sky_field = gaussian_filter(rng.normal(size=(h, w)), sigma=3 * leaf_size)
        sky_field /= sky_field.std() + 1e-12
        gaps = sky_field > np.quantile(sky_field, 1.0 - sky)
        img[gaps] = SKY_COLOR * rng.uniform(0.85, 1.05)

    for _ in range(branches):
        x0, x1 = rng.uniform(0, w, size=2)
        y0, y1 = rng.uniform(0, h, size=2)
        thickness = rng.uniform(0.15, 0.4) * leaf_size
        n = int(np.hypot(x1 - x0, y1 - y0) / max(thickness, 1.0)) + 2
        color = BRANCH_COLOR * rng.uniform(0.8, 1.1)
        for t in np.linspace(0, 1, n):
            hit = local_ellipse((h, w), x0 + t * (x1 - x0), y0 + t * (y1 - y0), thickness, thickness)
            if hit is not None:
                img[hit[0]][hit[1]] = color

    n_leaves = int(1.4 * h * w / (np.pi * leaf_size * leaf_size * 0.5))
    for _ in range(n_leaves):
        draw_leaf(img, rng.uniform(0, w), rng.uniform(0, h), leaf_size, rng)
    return np.clip(img, 0.0, 1.0)


def draw_leaf(img, cx, cy, leaf_size, rng, ids=None):
    """Paint one leaf. Marks ``ids`` with -1 where painted."""
    a = leaf_size * rng.uniform(0.7, 1.3)
    b = a * rng.uniform(0.35, 0.55)
    angle = rng.uniform(0, np.pi)
    color = LEAF_COLORS[rng.integers(len(LEAF_COLORS))] * rng.uniform(0.75, 1.2)
    hit = local_ellipse(img.shape[:2], cx, cy, a, b, angle)
    if hit is None:
        return
    sl, m = hit
    img[sl][m] = np.clip(color, 0, 1)
    if ids is not None:
        ids[sl][m] = -1


def apple_color(variety, rng):
    base = APPLE_PALETTE[variety].copy()
    base = base + rng.normal(scale=0.04, size=3)
    return np.clip(base, 0.02, 0.98)


def draw_apple(img, cx, cy, radius, color, light, rng, ids=None, apple_id=0):
    """Paint a shaded ellipsoid (diffuse + specular) and return its mask.

    ``light`` is a unit 3-vector in image coordinates (x right, y down,
    z toward the viewer).
    """
    aspect = rng.uniform(0.92, 1.08)
    rx, ry = radius * aspect, radius / aspect
    grid = _local_grid(cx, cy, rx, ry, img.shape[:2])
    full = np.zeros(img.shape[:2], dtype=bool)
    if grid is None:
        return full
    sl, xx, yy = grid
    u = (xx - cx) / rx
    v = (yy - cy) / ry
    d2 = u * u + v * v
    inside = d2 <= 1.0
    nz = np.sqrt(np.clip(1.0 - d2, 0.0, 1.0))
    diffuse = np.clip(u * light[0] + v * light[1] + nz * light[2], 0.0, 1.0)
    half = light + np.array([0.0, 0.0, 1.0])
    half /= np.linalg.norm(half)
    spec = np.clip(u * half[0] + v * half[1] + nz * half[2], 0.0, 1.0) ** 24
    shade = 0.38 + 0.62 * diffuse
    streak = 1.0 + 0.06 * np.sin(9.0 * np.arctan2(v, u) + rng.uniform(0, 2 * np.pi))
    rgb = color[None, None, :] * (shade * streak)[..., None] + 0.35 * spec[..., None]
    patch = img[sl]
    patch[inside] = np.clip(rgb[inside], 0.0, 1.0)
    full[sl] = inside
    if ids is not None:
        ids[sl][inside] = apple_id
    return full


def random_light(rng):
    v = np.array([rng.uniform(-0.7, 0.7), rng.uniform(-0.8, 0.1), 1.0])
    return v / np.linalg.norm(v)


def finish(img, rng, noise=0.015):
    """Global illumination scale plus sensor noise, returned as uint8."""
    img = img * rng.uniform(0.85, 1.15)
    img = img + rng.normal(scale=noise, size=img.shape)
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def cluster_layout(count, rng, min_gap=1.55, max_link=2.05):
    """2D centers (in apple-radius units) of ``count`` touching apples.

    Each new apple sits next to a random earlier one; no two centers are
    closer than ``min_gap`` radii, so the chain-link distance stays at most
    ``max_link`` radii.
    """
    pts = [np.zeros(2)]
    while len(pts) < count:
        anchor = pts[rng.integers(len(pts))]
        theta = rng.uniform(0, 2 * np.pi)
        d = rng.uniform(1.75, max_link)
        cand = anchor + d * np.array([np.cos(theta), np.sin(theta)])
        if all(np.hypot(*(cand - p)) >= min_gap for p in pts):
            pts.append(cand)
    pts = np.array(pts)
    return pts - pts.mean(axis=0)
