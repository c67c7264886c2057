"""Two-side orchard row scenes with cameras, a point cloud and ground truth.

World axes: x runs along the row, y across it (front cameras at negative y,
back cameras at positive y), z up, meters. Clusters hang in the canopy and
are marked visible from the front, the back or both; a cluster is only drawn
in the images of the sides that see it. Ground clusters lie on z = 0.
"""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..yieldmerge import CameraFrame, Detection
from . import render

SIDES = ("front", "back")


@dataclass
class CameraPath:
    distance: float = 2.0
    height: float = 0.85
    pitch_deg: float = 3.0
    step: float = 0.4
    focal: float = 700.0
    width: int = 1280
    height_px: int = 960
    overhang: float = 1.2


@dataclass
class SceneSpec:
    n_trees: int = 10
    tree_spacing: float = 0.9
    clusters_per_tree: dict = field(default_factory=lambda: {3: 0.25, 4: 0.5, 5: 0.25})
    cluster_size: dict = field(default_factory=lambda: {1: 0.1, 2: 0.15, 3: 0.2, 4: 0.25, 5: 0.2, 6: 0.1})
    ground_fraction: float = 0.1
    shared_fraction: float = 0.2
    palette: tuple = ("red", "yellow", "green")
    apple_radius: float = 0.04
    cameras: CameraPath = field(default_factory=CameraPath)
    detection_jitter: float = 0.08
    min_detect_visible: float = 0.25
    seed: int = 0

    def __post_init__(self):
        for name in ("clusters_per_tree", "cluster_size"):
            dist = {int(k): float(v) for k, v in getattr(self, name).items()}
            total = sum(dist.values())
            if total <= 0 or any(v < 0 for v in dist.values()):
                raise ValueError(f"{name} must be a nonnegative distribution")
            setattr(self, name, {k: v / total for k, v in sorted(dist.items())})
        if not set(self.cluster_size) <= set(range(1, 7)):
            raise ValueError("cluster sizes must lie in 1..6")
        if not 0 <= self.ground_fraction <= 1 or not 0 <= self.shared_fraction <= 1:
            raise ValueError("fractions must lie in [0, 1]")
        unknown = set(self.palette) - set(render.APPLE_PALETTE)
        if unknown:
            raise ValueError(f"unknown varieties {sorted(unknown)}")


@dataclass
class RowScene:
    images: dict
    frames: dict
    cloud: np.ndarray
    cloud_colors: np.ndarray
    detections: dict
    ledger: dict
    id_maps: dict = None

    def write(self, out_dir):
        """Write PNG frames, cloud PLY, poses JSON, detections CSV and ledger JSON."""
        from .. import formats
        from ..patchset import write_png

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        formats.write_ply(out / "cloud.ply", self.cloud, self.cloud_colors)
        formats.write_ledger(out / "ledger.json", self.ledger)
        for side in SIDES:
            (out / side).mkdir(exist_ok=True)
            for fid, img in self.images[side].items():
                write_png(out / side / f"{fid}.png", img)
            formats.write_poses(out / f"poses_{side}.json", self.frames[side])
            formats.write_detections(out / f"detections_{side}.csv", self.detections[side])
        return out


def camera_pose(side, x, path):
    """World-to-camera (R, t) for a camera at row position ``x``."""
    s, c = np.sin(np.radians(path.pitch_deg)), np.cos(np.radians(path.pitch_deg))
    sign = -1.0 if side == "front" else 1.0
    forward = np.array([0.0, -sign * c, -s])
    down = np.array([0.0, sign * s, -c])
    right = np.cross(down, forward)
    R = np.vstack([right, down, forward])
    center = np.array([x, sign * path.distance, path.height])
    return R, -R @ center


def _draw(dist, rng):
    keys = list(dist)
    return keys[rng.choice(len(keys), p=[dist[k] for k in keys])]


def _place_clusters(spec, rng):
    R = spec.apple_radius
    row_len = max(spec.n_trees - 1, 0) * spec.tree_spacing
    clusters = []
    xz_taken = []

    def free(pts, min_d):
        return all(np.min(np.linalg.norm(q[:, None, [0, 2]] - pts[None, :, [0, 2]], axis=2)) >= min_d
                   for q in xz_taken)

    tree_sizes = []
    for t in range(spec.n_trees):
        tree_sizes += [(t, _draw(spec.cluster_size, rng)) for _ in range(_draw(spec.clusters_per_tree, rng))]
    for t, size in tree_sizes:
        variety = spec.palette[t % len(spec.palette)]
        for _ in range(500):
            layout = render.cluster_layout(size, rng) * R
            roll = rng.random()
            if roll < spec.shared_fraction:
                sides, y0 = ["front", "back"], rng.uniform(-0.08, 0.08)
            elif roll < spec.shared_fraction + (1 - spec.shared_fraction) / 2:
                sides, y0 = ["front"], rng.uniform(-0.34, -0.26)
            else:
                sides, y0 = ["back"], rng.uniform(0.26, 0.34)
            cx = t * spec.tree_spacing + rng.uniform(-0.45, 0.45)
            cz = rng.uniform(0.55, 1.6)
            pts = np.column_stack([cx + layout[:, 0], y0 + rng.uniform(-0.2, 0.2, size) * R, cz + layout[:, 1]])
            if free(pts, 5 * R):
                break
        else:
            raise RuntimeError("row too crowded for the requested cluster count")
        xz_taken.append(pts)
        clusters.append({"size": int(size), "ground": False, "sides": sides, "variety": variety, "apples": pts})
    n_ground = int(round(spec.ground_fraction * len(clusters)))
    ground_taken = []
    for _ in range(n_ground):
        size = _draw(spec.cluster_size, rng)
        for _ in range(500):
            layout = render.cluster_layout(size, rng) * R
            side = SIDES[rng.integers(2)]
            y0 = (-1 if side == "front" else 1) * rng.uniform(0.5, 0.65)
            cx = rng.uniform(-0.3, row_len + 0.3)
            pts = np.column_stack([cx + layout[:, 0], y0 + layout[:, 1], np.full(size, R)])
            if all(np.min(np.linalg.norm(q[:, None, :2] - pts[None, :, :2], axis=2)) >= 5 * R for q in ground_taken):
                break
        ground_taken.append(pts)
        clusters.append({"size": int(size), "ground": True, "sides": [side],
                         "variety": spec.palette[rng.integers(len(spec.palette))], "apples": pts})
    return clusters


def _foliage_points(spec, clusters, rng):
    R = spec.apple_radius
    row_len = max(spec.n_trees - 1, 0) * spec.tree_spacing
    apples = np.concatenate([c["apples"] for c in clusters]) if clusters else np.zeros((0, 3))
    n = int(25 * max(spec.n_trees, 0))
    canopy = np.column_stack([rng.uniform(-0.5, row_len + 0.5, n), rng.uniform(-0.15, 0.15, n),
                              rng.uniform(0.4, 1.9, n)])
    gx, gy = np.meshgrid(np.arange(-1.0, row_len + 1.0, 0.25), np.arange(-1.0, 1.01, 0.25))
    ground = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])
    pts = np.concatenate([canopy, ground])
    if len(apples):
        d = np.min(np.linalg.norm(pts[:, None, :] - apples[None, :, :], axis=2), axis=1)
        pts = pts[d >= 3 * R]
    colors = np.where(pts[:, 2:3] > 0, [[40, 90, 30]], [[110, 85, 60]]).astype(np.uint8)
    return pts, colors


def _render_frame(frame, side, clusters, spec, rng, keep_ids):
    R = spec.apple_radius
    h, w = frame.height, frame.width
    img = render.foliage_background(h, w, rng, leaf_size=rng.uniform(10, 16), branches=6)
    ids = np.full((h, w), -1, dtype=np.int32)
    apples = []
    for ci, c in enumerate(clusters):
        if side not in c["sides"]:
            continue
        uv, z = frame.project(c["apples"])
        for k in range(c["size"]):
            if z[k] <= 0:
                continue
            r_px = frame.fx * R / z[k]
            u, v = uv[k]
            if -r_px < u < w + r_px and -r_px < v < h + r_px:
                apples.append((z[k], ci, k, u, v, r_px))
    light = render.random_light(rng)
    apples.sort(key=lambda a: -a[0])
    area = {}
    for n, (z, ci, k, u, v, r_px) in enumerate(apples):
        color = clusters[ci]["colors"][k]
        render.draw_apple(img, u, v, r_px, color, light, rng, ids, n)
        area[n] = np.pi * r_px * r_px
    n_apples = len(apples)
    areas = np.array([area[n] for n in range(n_apples)])
    vis = np.bincount(ids[ids >= 0], minlength=n_apples)
    for _ in range(int(1.5 * n_apples)):
        n = rng.integers(n_apples)
        _, _, _, u, v, r_px = apples[n]
        ang, off = rng.uniform(0, 2 * np.pi), r_px * rng.uniform(0.7, 1.5)
        a = r_px * rng.uniform(0.5, 0.9) * rng.uniform(0.7, 1.3)
        b = a * rng.uniform(0.35, 0.55)
        color = np.clip(render.LEAF_COLORS[rng.integers(len(render.LEAF_COLORS))] * rng.uniform(0.75, 1.2), 0, 1)
        hit = render.local_ellipse((h, w), u + off * np.cos(ang), v + off * np.sin(ang), a, b, rng.uniform(0, np.pi))
        if hit is None:
            continue
        sl, m = hit
        covered = ids[sl][m]
        lost = np.bincount(covered[covered >= 0], minlength=n_apples)
        after = vis - lost
        if np.all(after[lost > 0] >= 0.5 * areas[lost > 0]):
            img[sl][m] = color
            ids[sl][m] = -1
            vis = after
    seen = []
    for n, (z, ci, k, u, v, r_px) in enumerate(apples):
        seen.append({"cluster": ci, "apple": k, "u": float(u), "v": float(v), "radius_px": float(r_px),
                     "visible_fraction": float(vis[n] / area[n]), "render_id": n})
    return render.finish(img, rng), (ids if keep_ids else None), seen


def render_row_scene(spec, keep_ids=False):
    """Render both sides of a row; returns a :class:`RowScene`.

    The ledger lists every cluster with its size, ground flag, visible sides
    and apple centers; ``total_apples`` counts all clusters and
    ``yield_total`` only those in the canopy.
    """
    rng = np.random.default_rng([spec.seed, 424242])
    clusters = _place_clusters(spec, rng) if spec.n_trees > 0 else []
    for c in clusters:
        c["colors"] = [render.apple_color(c["variety"], rng) for _ in range(c["size"])]
    foliage, foliage_colors = _foliage_points(spec, clusters, rng)
    apple_pts = [c["apples"] for c in clusters]
    apple_cols = [np.clip(np.array(c["colors"]) * 255 + 0.5, 0, 255).astype(np.uint8) for c in clusters]
    cloud = np.concatenate(apple_pts + [foliage]) if apple_pts else foliage
    cloud_colors = np.concatenate(apple_cols + [foliage_colors]) if apple_cols else foliage_colors
    offsets = np.cumsum([0] + [c["size"] for c in clusters])

    path = spec.cameras
    row_len = max(spec.n_trees - 1, 0) * spec.tree_spacing
    xs = np.arange(-path.overhang, row_len + path.overhang + 1e-9, path.step)
    images, frames, detections, id_maps = {}, {}, {}, {}
    views = [[[] for _ in range(c["size"])] for c in clusters]
    for side in SIDES:
        images[side], frames[side], detections[side], id_maps[side] = {}, [], [], {}
        for i, x in enumerate(xs):
            Rm, t = camera_pose(side, x, path)
            fid = f"{side}_{i:03d}"
            frame = CameraFrame(fid, path.focal, path.focal, path.width / 2.0, path.height_px / 2.0,
                                np.column_stack([Rm, t]), path.width, path.height_px)
            img, ids, seen = _render_frame(frame, side, clusters, spec, rng, keep_ids)
            images[side][fid] = img
            frames[side].append(frame)
            if keep_ids:
                id_maps[side][fid] = ids
            for s in seen:
                inside = 0 <= s["u"] < path.width and 0 <= s["v"] < path.height_px
                if s["visible_fraction"] < spec.min_detect_visible or not inside:
                    continue
                views[s["cluster"]][s["apple"]].append(
                    {"frame_id": fid, "render_id": s["render_id"], "visible_fraction": s["visible_fraction"]})
                r = s["radius_px"]
                j = spec.detection_jitter * r
                cu, cv = s["u"] + rng.normal(scale=j), s["v"] + rng.normal(scale=j)
                half = r * rng.uniform(0.9, 1.1)
                x0, y0 = max(cu - half, 0.0), max(cv - half, 0.0)
                x1, y1 = min(cu + half, path.width), min(cv + half, path.height_px)
                detections[side].append(Detection(fid, round(x0, 2), round(y0, 2), round(x1 - x0, 2),
                                                  round(y1 - y0, 2)))
    ledger_clusters = []
    for ci, c in enumerate(clusters):
        ledger_clusters.append({
            "id": ci, "size": c["size"], "ground": c["ground"], "sides": c["sides"], "variety": c["variety"],
            "cloud_indices": list(range(int(offsets[ci]), int(offsets[ci + 1]))),
            "apples": [{"center": [float(v) for v in c["apples"][k]], "views": views[ci][k]}
                       for k in range(c["size"])],
        })
    ledger = {
        "seed": spec.seed,
        "apple_radius": spec.apple_radius,
        "clusters": ledger_clusters,
        "total_apples": int(sum(c["size"] for c in clusters)),
        "yield_total": int(sum(c["size"] for c in clusters if not c["ground"])),
        "ground_clusters": int(sum(c["ground"] for c in clusters)),
    }
    return RowScene(images, frames, cloud, cloud_colors, detections, ledger, id_maps if keep_ids else None)
