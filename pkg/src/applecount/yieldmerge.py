"""Row-level yield from per-frame patch counts and a 3-D reconstruction.

Per side: detections are back-projected onto the point cloud, the hit points
are grouped by single-linkage within a linking radius, each group is projected
back into the frames that see it, every projected patch is counted, and the
group's count is the mean of its three largest patch counts. Groups near the
ground are dropped. The two sides are merged by matching groups whose padded
bounding boxes overlap.

Heights and bounding boxes are taken in a *row frame* (x along the row, z up),
given as a 4x4 world-to-row rigid transform; it defaults to the world frame.
"""
import logging
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from ._validation import InvalidInputError

logger = logging.getLogger(__name__)


@dataclass
class CameraFrame:
    frame_id: str
    fx: float
    fy: float
    cx: float
    cy: float
    extrinsic: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.frame_id = str(self.frame_id)
        self.extrinsic = np.asarray(self.extrinsic, dtype=np.float64).reshape(3, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError(f"frame {self.frame_id}: focal lengths must be positive")
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise InvalidInputError(f"frame {self.frame_id}: rotation block is not orthonormal")

    @property
    def rotation(self):
        return self.extrinsic[:, :3]

    @property
    def translation(self):
        return self.extrinsic[:, 3]

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    def to_camera(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def project(self, points):
        """Pixel coordinates (n, 2) and camera depths (n,) of world points."""
        pc = self.to_camera(points).reshape(-1, 3)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.column_stack([self.fx * pc[:, 0] / z + self.cx, self.fy * pc[:, 1] / z + self.cy])
        return uv, z

    def ray(self, u, v):
        """World-frame unit direction through pixel (u, v)."""
        d_cam = np.array([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])
        d = self.rotation.T @ d_cam
        return d / np.linalg.norm(d)

    def in_image(self, uv, z):
        return (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < self.width) & (uv[:, 1] >= 0) & (uv[:, 1] < self.height)

    def transformed(self, world_motion):
        """Same camera after moving the world by the 4x4 rigid ``world_motion``."""
        E = np.vstack([self.extrinsic, [0, 0, 0, 1]]) @ np.linalg.inv(world_motion)
        return CameraFrame(self.frame_id, self.fx, self.fy, self.cx, self.cy, E[:3], self.width, self.height)


@dataclass(frozen=True)
class Detection:
    frame_id: str
    x: float
    y: float
    w: float
    h: float

    @property
    def center(self):
        return self.x + self.w / 2.0, self.y + self.h / 2.0


@dataclass
class Backprojection:
    point_index: np.ndarray
    distance: np.ndarray

    @property
    def associated(self):
        return self.point_index >= 0

    def unique_points(self):
        return np.unique(self.point_index[self.point_index >= 0])


@dataclass
class ClusterComponent3D:
    member_indices: np.ndarray
    points: np.ndarray
    patches: list = field(default_factory=list)
    predictions: list = field(default_factory=list)
    fused_count: Fraction = Fraction(0)

    @property
    def centroid(self):
        return self.points.mean(axis=0)


@dataclass
class YieldEstimate:
    front_counts: list
    back_counts: list
    pairs: list
    merged_exact: float
    merged_total: int
    ground_removed: dict
    warnings: list = field(default_factory=list)

    @property
    def front_total(self):
        return float(sum(self.front_counts))

    @property
    def back_total(self):
        return float(sum(self.back_counts))


def backproject_detections(detections, frames, cloud, corridor=0.05):
    """Associate each detection with the cloud point nearest its center ray.

    Only points in front of the camera and within ``corridor`` meters of the
    ray qualify; index -1 marks an unassociated detection.
    """
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(cloud) == 0:
        raise InvalidInputError("point cloud is empty")
    frames = {f.frame_id: f for f in frames} if not isinstance(frames, dict) else frames
    index = np.full(len(detections), -1, dtype=np.int64)
    dist = np.full(len(detections), np.inf)
    any_in_front = False
    for i, det in enumerate(detections):
        frame = frames.get(str(det.frame_id))
        if frame is None:
            raise InvalidInputError(f"detection references unknown frame {det.frame_id!r}")
        origin = frame.center
        d = frame.ray(*det.center)
        rel = cloud - origin
        t = rel @ d
        front = t > 0
        any_in_front |= bool(front.any())
        perp = np.linalg.norm(rel - t[:, None] * d[None, :], axis=1)
        ok = front & (perp <= corridor)
        if ok.any():
            cand = np.flatnonzero(ok)
            best = cand[np.lexsort((t[cand], perp[cand]))[0]]
            index[i] = best
            dist[i] = perp[best]
    if len(detections) and not any_in_front:
        warnings.warn("no cloud points lie in front of any camera; all detections unassociated")
    return Backprojection(index, dist)


def connected_components_3d(points, radius, member_indices=None):
    """Single-linkage groups: hops of at most ``radius`` connect points."""
    if radius <= 0:
        raise InvalidInputError("radius must be positive")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if member_indices is None:
        member_indices = np.arange(len(points))
    if len(points) == 0:
        return []
    pairs = cKDTree(points).query_pairs(radius, output_type="ndarray")
    n = len(points)
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    comps = []
    seen = {}
    for i, lab in enumerate(labels):
        seen.setdefault(lab, []).append(i)
    for members in seen.values():
        idx = np.array(members)
        comps.append(ClusterComponent3D(np.asarray(member_indices)[idx], points[idx]))
    return comps


def project_component_patches(component, frames, object_radius=0.04, margin=0.15, min_side=8):
    """(frame_id, box) for every frame in which some member point is visible.

    The box bounds the visible member projections, padded on each side by the
    projected ``object_radius`` times ``1 + margin`` (so a lone point yields a
    square about one object wide), widened to ``min_side`` and clipped.
    """
    if len(component.points) == 0:
        raise InvalidInputError("component has no points")
    out = []
    for frame in frames:
        uv, z = frame.project(component.points)
        vis = frame.in_image(uv, z)
        if not vis.any():
            continue
        pad = object_radius * (1.0 + margin) * frame.fx / z[vis].mean()
        u, v = uv[vis, 0], uv[vis, 1]
        box = _clip_box(u.min() - pad, v.min() - pad, u.max() + pad, v.max() + pad, min_side,
                        frame.width, frame.height)
        if box is not None:
            out.append((frame.frame_id, box))
    return out


def _clip_box(x0, y0, x1, y1, min_side, width, height):
    if x1 - x0 < min_side:
        c = (x0 + x1) / 2.0
        x0, x1 = c - min_side / 2.0, c + min_side / 2.0
    if y1 - y0 < min_side:
        c = (y0 + y1) / 2.0
        y0, y1 = c - min_side / 2.0, c + min_side / 2.0
    xa, ya = max(int(np.floor(x0)), 0), max(int(np.floor(y0)), 0)
    xb, yb = min(int(np.ceil(x1)), width), min(int(np.ceil(y1)), height)
    if xb <= xa or yb <= ya:
        return None
    return xa, ya, xb - xa, yb - ya


def _as_count(p):
    return p.argmax_count if hasattr(p, "argmax_count") else int(p)


def component_count(predictions):
    """Mean of the three largest argmax counts, as an exact fraction."""
    counts = sorted((_as_count(p) for p in predictions), reverse=True)[:3]
    if not counts:
        return Fraction(0)
    return Fraction(sum(counts), len(counts))


def to_row_frame(points, row_frame=None):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if row_frame is None:
        return points
    T = np.asarray(row_frame, dtype=np.float64)
    return points @ T[:3, :3].T + T[:3, 3]


def filter_ground(components, ground_height, row_frame=None):
    """Split components into (kept, removed) by row-frame centroid height."""
    kept, removed = [], []
    for comp in components:
        z = to_row_frame(comp.centroid, row_frame)[0, 2]
        (removed if z <= ground_height else kept).append(comp)
    return kept, removed


def box_volume_iou(a, b):
    """Volume IoU of axis-aligned boxes given as (min corner, max corner)."""
    lo = np.maximum(a[0], b[0])
    hi = np.minimum(a[1], b[1])
    inter = np.prod(np.clip(hi - lo, 0.0, None))
    va = np.prod(a[1] - a[0])
    vb = np.prod(b[1] - b[0])
    union = va + vb - inter
    return float(inter / union) if union > 0 else 0.0


def component_box(points, pad, row_frame=None):
    p = to_row_frame(points, row_frame)
    return p.min(axis=0) - pad, p.max(axis=0) + pad


def round_half_up(x):
    return int(np.floor(x + 0.5))


def merge_front_back(front, back, iou_threshold=0.1, pad=0.05, row_frame=None, sanity_floor=0.01):
    """Merge per-side (points, count) groups into one row total.

    ``front`` and ``back`` are lists of (points array, count). The overlap
    weight of a pair is the volume IoU of their padded boxes; pairs with weight
    at or above ``iou_threshold`` are matched greedily by descending weight,
    and a matched pair contributes c_f + c_b - w * min(c_f, c_b). The total is
    rounded half-up only at the end.
    """
    boxes_f = [component_box(p, pad, row_frame) for p, _ in front]
    boxes_b = [component_box(p, pad, row_frame) for p, _ in back]
    weights = np.zeros((len(front), len(back)))
    for i, bf in enumerate(boxes_f):
        for j, bb in enumerate(boxes_b):
            weights[i, j] = box_volume_iou(bf, bb)
    candidates = sorted(((weights[i, j], i, j) for i in range(len(front)) for j in range(len(back))
                         if weights[i, j] >= iou_threshold), key=lambda t: (-t[0], t[1], t[2]))
    used_f, used_b, pairs = set(), set(), []
    for w, i, j in candidates:
        if i in used_f or j in used_b:
            continue
        used_f.add(i)
        used_b.add(j)
        pairs.append((i, j, float(w)))
    total = 0.0
    for i, j, w in pairs:
        cf, cb = float(front[i][1]), float(back[j][1])
        total += cf + cb - w * min(cf, cb)
    total += sum(float(c) for k, (_, c) in enumerate(front) if k not in used_f)
    total += sum(float(c) for k, (_, c) in enumerate(back) if k not in used_b)
    notes = []
    if front and back and weights.max(initial=0.0) < sanity_floor:
        msg = (f"no front/back overlap above {sanity_floor} ({len(front)} front, {len(back)} back groups); "
               "are the reconstructions aligned?")
        warnings.warn(msg)
        notes.append(msg)
    return YieldEstimate([c for _, c in front], [c for _, c in back], pairs, total, round_half_up(total),
                         {}, notes)


@dataclass
class YieldConfig:
    linking_radius: float = 0.10
    corridor_radius: float = 0.05
    ground_height: float = 0.25
    iou_threshold: float = 0.1
    object_radius: float = 0.04
    patch_margin: float = 0.15
    row_frame: np.ndarray = None

    def __post_init__(self):
        for name in ("linking_radius", "corridor_radius", "object_radius"):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"{name} must be positive")
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise InvalidInputError("iou_threshold must lie in [0, 1]")


@dataclass
class SideResult:
    components: list
    removed: list
    unassociated: int


def count_side(frames, images, cloud, detections, patch_counter, config):
    """Run one side: back-project, group, project, count, drop ground groups.

    ``images`` maps frame_id -> RGB uint8 image (or a callable returning it);
    ``patch_counter`` maps an (n, 227, 227, 3) uint8 batch to CountPredictions.
    """
    from .patchset import crop_and_resize

    frames = list(frames)
    bp = backproject_detections(detections, frames, cloud, config.corridor_radius)
    idx = bp.unique_points()
    comps = connected_components_3d(np.asarray(cloud)[idx], config.linking_radius, member_indices=idx)
    for comp in comps:
        comp.patches = project_component_patches(comp, frames, config.object_radius, config.patch_margin)
    crops, owners = [], []
    for k, comp in enumerate(comps):
        for frame_id, box in comp.patches:
            img = images[frame_id]
            img = img() if callable(img) else img
            crops.append(crop_and_resize(img, box))
            owners.append(k)
    preds = patch_counter(np.stack(crops)) if crops else []
    for k, p in zip(owners, preds):
        comps[k].predictions.append(p)
    for comp in comps:
        comp.fused_count = component_count(comp.predictions)
    kept, removed = filter_ground(comps, config.ground_height, config.row_frame)
    return SideResult(kept, removed, int((~bp.associated).sum()))


def estimate_yield(front, back, cloud, network=None, config=None, patch_counter=None, color_model=None):
    """End-to-end row estimate.

    ``front`` / ``back`` are dicts with keys ``frames``, ``images`` and
    ``detections`` (a list of :class:`Detection`, or None to derive them from
    ``color_model`` proposals). Counting uses ``patch_counter`` if given,
    else argmax predictions of ``network``.
    """
    config = config or YieldConfig()
    if patch_counter is None:
        if network is None:
            raise InvalidInputError("need a network or a patch_counter")
        from .cnncount import CountPrediction, predict_proba

        def patch_counter(batch):
            return [CountPrediction.from_probs(p) for p in predict_proba(network, batch)]

    sides = {}
    for name, side in (("front", front), ("back", back)):
        detections = side.get("detections")
        if detections is None:
            detections = detections_from_color_model(side["frames"], side["images"], color_model)
        try:
            sides[name] = count_side(side["frames"], side["images"], cloud, detections, patch_counter, config)
        except Exception as exc:
            raise RuntimeError(f"{name} side failed: {exc}") from exc
    est = merge_front_back([(c.points, c.fused_count) for c in sides["front"].components],
                           [(c.points, c.fused_count) for c in sides["back"].components],
                           config.iou_threshold, config.linking_radius / 2.0, config.row_frame)
    est.ground_removed = {k: len(v.removed) for k, v in sides.items()}
    est.sides = sides
    return est


def detections_from_color_model(frames, images, segmenter):
    if segmenter is None:
        raise InvalidInputError("detections missing and no color model to derive them from")
    dets = []
    for frame in frames:
        img = images[frame.frame_id]
        img = img() if callable(img) else img
        for p in segmenter.propose(img, source_image=frame.frame_id):
            dets.append(Detection(frame.frame_id, *p.box))
    return dets


def yield_report(est):
    """JSON-ready dict with per-component breakdown."""
    doc = {
        "merged_total": est.merged_total,
        "merged_exact": est.merged_exact,
        "front_total": est.front_total,
        "back_total": est.back_total,
        "ground_removed": est.ground_removed,
        "pairs": [{"front": i, "back": j, "weight": w} for i, j, w in est.pairs],
        "warnings": est.warnings,
    }
    sides = getattr(est, "sides", None)
    if sides:
        doc["components"] = {
            name: [{"centroid": [float(v) for v in c.centroid], "n_points": int(len(c.points)),
                    "n_patches": len(c.patches), "patch_counts": [_as_count(p) for p in c.predictions],
                    "fused_count": float(c.fused_count)} for c in side.components]
            for name, side in sides.items()
        }
    return doc


def format_yield_report(est):
    lines = [f"merged total: {est.merged_total} (unrounded {est.merged_exact:.2f})",
             f"front: {est.front_total:.2f} over {len(est.front_counts)} clusters",
             f"back:  {est.back_total:.2f} over {len(est.back_counts)} clusters",
             f"matched pairs: {len(est.pairs)}",
             f"ground clusters removed: {est.ground_removed}"]
    lines += [f"warning: {w}" for w in est.warnings]
    return "\n".join(lines)
