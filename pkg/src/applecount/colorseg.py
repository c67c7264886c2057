"""Apple-cluster region proposals from color.

Pipeline: SLIC superpixels in LAB, a 25-class color model fitted on superpixel
mean colors, per-superpixel classification by symmetrized KL divergence
between Gaussians, then connected components of the resulting mask become
bounding-box proposals.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage
from skimage.color import lab2rgb, rgb2lab
from skimage.measure import label as label_regions
from skimage.segmentation import slic
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.cluster import KMeans

from ._validation import InvalidInputError, check_lab_image, check_mask, check_rgb_image

logger = logging.getLogger(__name__)

MODEL_VERSION = 1
COV_REG = 1e-3
MIN_KL_PIXELS = 4


class FewerClassesError(ValueError):
    def __init__(self, wanted, found):
        super().__init__(f"asked for {wanted} color classes but only {found} distinct superpixel colors exist")
        self.wanted = wanted
        self.found = found


class NoAppleClassError(ValueError):
    pass


@dataclass
class SuperpixelMap:
    labels: np.ndarray
    regions: int

    def region_sizes(self):
        return np.bincount(self.labels.ravel(), minlength=self.regions)


@dataclass(frozen=True)
class PatchProposal:
    source_image: str
    box: tuple
    apple_pixel_fraction: float


@dataclass
class ColorModel:
    means: np.ndarray
    covariances: np.ndarray
    is_apple: np.ndarray
    colorspace: str = "LAB"

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covariances = np.asarray(self.covariances, dtype=np.float64)
        self.is_apple = np.asarray(self.is_apple, dtype=bool)
        k = len(self.means)
        if self.means.shape != (k, 3) or self.covariances.shape != (k, 3, 3) or self.is_apple.shape != (k,):
            raise InvalidInputError("inconsistent color model array shapes")

    @property
    def n_classes(self):
        return len(self.means)

    @property
    def apple_ids(self):
        return [int(i) for i in np.flatnonzero(self.is_apple)]

    def with_apple_ids(self, ids):
        flags = np.zeros(self.n_classes, dtype=bool)
        flags[list(ids)] = True
        return ColorModel(self.means.copy(), self.covariances.copy(), flags, self.colorspace)

    def to_dict(self):
        return {
            "version": MODEL_VERSION,
            "colorspace": self.colorspace,
            "classes": [
                {"id": i, "mean": [float(v) for v in self.means[i]],
                 "covariance": [[float(v) for v in row] for row in self.covariances[i]],
                 "is_apple": bool(self.is_apple[i])}
                for i in range(self.n_classes)
            ],
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("colorspace") != "LAB":
            raise InvalidInputError(f"unsupported colorspace {doc.get('colorspace')!r}")
        classes = sorted(doc["classes"], key=lambda c: c["id"])
        if [c["id"] for c in classes] != list(range(len(classes))):
            raise InvalidInputError("class ids must be contiguous from 0")
        return cls([c["mean"] for c in classes], [c["covariance"] for c in classes],
                   [c["is_apple"] for c in classes])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def to_lab(image):
    """uint8 RGB (or already-LAB float) image to a validated LAB array."""
    image = check_rgb_image(image)
    if image.dtype == np.uint8:
        return rgb2lab(image)
    return check_lab_image(image)


def oversegment(image, target_regions, compactness=10.0, max_iter=10, tolerance=0.2):
    """SLIC superpixels with 4-connected, contiguously numbered regions.

    Heavily textured images can make SLIC fragment and then merge into far
    fewer regions than asked for; compactness is then raised (x4 per retry)
    until the count is within ``tolerance`` of ``target_regions``.
    """
    lab = check_lab_image(image)
    n_pixels = lab.shape[0] * lab.shape[1]
    if not 1 <= target_regions <= n_pixels:
        raise InvalidInputError(f"target_regions must lie in 1..{n_pixels}")
    # slic min-max rescales its input to [0, 1]; rescale compactness to match
    # so the color term stays in LAB units
    span = float(lab.max() - lab.min()) or 1.0
    best = None
    for attempt in range(6):
        c = compactness * 4.0 ** attempt
        raw = slic(lab, n_segments=int(target_regions), compactness=c / span, max_num_iter=max_iter,
                   channel_axis=-1, convert2lab=False, enforce_connectivity=True, start_label=0)
        # split anything SLIC left disconnected under 4-connectivity
        labels = label_regions(raw + 1, background=0, connectivity=1) - 1
        spmap = SuperpixelMap(labels.astype(np.int32), int(labels.max()) + 1)
        err = abs(spmap.regions - target_regions) / target_regions
        if best is None or err < best[0]:
            best = (err, spmap)
        if err <= tolerance:
            break
    return best[1]


def superpixel_stats(lab, spmap):
    """Per-region pixel counts, LAB means and (biased) covariances."""
    flat = lab.reshape(-1, 3)
    lab_ids = spmap.labels.ravel()
    n = np.bincount(lab_ids, minlength=spmap.regions).astype(np.float64)
    sums = np.stack([np.bincount(lab_ids, flat[:, c], spmap.regions) for c in range(3)], axis=1)
    means = sums / n[:, None]
    centered = flat - means[lab_ids]
    covs = np.empty((spmap.regions, 3, 3))
    for i in range(3):
        for j in range(i, 3):
            v = np.bincount(lab_ids, centered[:, i] * centered[:, j], spmap.regions) / n
            covs[:, i, j] = covs[:, j, i] = v
    return n.astype(int), means, covs


def region_count(shape, target_regions, superpixel_area=None):
    """Superpixel count for an image: ``target_regions``, or more when
    ``superpixel_area`` asks for regions of about that many pixels."""
    n = target_regions
    if superpixel_area:
        n = max(n, int(shape[0] * shape[1] / superpixel_area))
    return min(n, shape[0] * shape[1])


def fit_color_model(images, k=25, seed=0, target_regions=400, compactness=10.0, superpixel_area=None):
    """Cluster superpixel mean colors of a corpus into ``k`` color classes.

    Each class stores the mean and covariance of its member superpixel
    means (covariance regularized by 1e-3 I). All classes start non-apple.
    """
    if not images:
        raise InvalidInputError("need at least one image")
    if k < 2:
        raise InvalidInputError("k must be >= 2")
    colors = []
    for img in images:
        lab = to_lab(img)
        spmap = oversegment(lab, region_count(lab.shape, target_regions, superpixel_area), compactness)
        colors.append(superpixel_stats(lab, spmap)[1])
    colors = np.concatenate(colors)
    distinct = len(np.unique(np.round(colors, 6), axis=0))
    if distinct < k:
        raise FewerClassesError(k, distinct)
    km = KMeans(n_clusters=k, n_init=10, random_state=seed).fit(colors)
    order = np.lexsort(km.cluster_centers_.T[::-1])
    relabel = np.empty(k, dtype=int)
    relabel[order] = np.arange(k)
    assign = relabel[km.labels_]
    means = np.empty((k, 3))
    covs = np.empty((k, 3, 3))
    for c in range(k):
        members = colors[assign == c]
        means[c] = members.mean(axis=0)
        diff = members - means[c]
        covs[c] = diff.T @ diff / len(members) + COV_REG * np.eye(3)
    return ColorModel(means, covs, np.zeros(k, dtype=bool))


def jeffreys_divergence(mean_p, cov_p, mean_q, cov_q):
    """Symmetrized KL between batches of 3-D Gaussians, shape (P, Q).

    KL(p||q) + KL(q||p) = 0.5 [tr(Sq^-1 Sp) + tr(Sp^-1 Sq) + d^T (Sp^-1 + Sq^-1) d] - dim
    """
    inv_p = np.linalg.inv(cov_p)
    inv_q = np.linalg.inv(cov_q)
    dim = mean_p.shape[1]
    tr_qp = np.einsum("qij,pji->pq", inv_q, cov_p)
    tr_pq = np.einsum("pij,qji->pq", inv_p, cov_q)
    delta = mean_p[:, None, :] - mean_q[None, :, :]
    maha = np.einsum("pqi,pij,pqj->pq", delta, inv_p, delta) + np.einsum("pqi,qij,pqj->pq", delta, inv_q, delta)
    return np.maximum(0.5 * (tr_qp + tr_pq + maha) - dim, 0.0)


def superpixel_divergences(lab, spmap, model):
    """(regions, classes) divergence matrix plus the per-region pixel counts.

    Regions with fewer than 4 pixels use the squared Mahalanobis distance of
    their mean color under each class covariance instead.
    """
    n, means, covs = superpixel_stats(lab, spmap)
    covs = covs + COV_REG * np.eye(3)
    div = jeffreys_divergence(means, covs, model.means, model.covariances)
    small = n < MIN_KL_PIXELS
    if small.any():
        logger.info("%d superpixels below %d pixels: using Mahalanobis fallback", small.sum(), MIN_KL_PIXELS)
        inv_q = np.linalg.inv(model.covariances)
        delta = means[small][:, None, :] - model.means[None, :, :]
        div[small] = np.einsum("pqi,qij,pqj->pq", delta, inv_q, delta)
    return div, n


def classify_superpixels(image, spmap, model):
    """Boolean apple mask: a superpixel is apple iff its nearest class is."""
    if not model.is_apple.any():
        raise NoAppleClassError("color model has no class flagged as apple")
    lab = check_lab_image(image)
    if spmap.labels.shape != lab.shape[:2]:
        raise InvalidInputError("superpixel map does not match image dimensions")
    div, _ = superpixel_divergences(lab, spmap, model)
    nearest = div.argmin(axis=1)
    return model.is_apple[nearest][spmap.labels]


def close_mask(mask):
    """3x3 binary closing that leaves the image border intact."""
    padded = np.pad(mask, 1, mode="edge")
    return ndimage.binary_closing(padded, structure=np.ones((3, 3), bool))[1:-1, 1:-1]


def extract_proposals(mask, min_area=50, margin=0.15, min_box_side=8, closing=True, source_image=""):
    """One box per 8-connected component with at least ``min_area`` pixels.

    Boxes are the component's tight box grown by ``round(margin * side)`` on
    every side, widened to ``min_box_side`` where possible, then clipped.
    """
    mask = check_mask(mask)
    work = close_mask(mask) if closing else mask
    labels, n = ndimage.label(work, structure=np.ones((3, 3), int))
    if n == 0:
        return []
    H, W = mask.shape
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    proposals = []
    for comp, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sizes[comp] < min_area:
            continue
        y0, y1 = sl[0].start, sl[0].stop
        x0, x1 = sl[1].start, sl[1].stop
        mx = int(round(margin * (x1 - x0)))
        my = int(round(margin * (y1 - y0)))
        x0, x1 = _grow(x0 - mx, x1 + mx, min_box_side, W)
        y0, y1 = _grow(y0 - my, y1 + my, min_box_side, H)
        frac = float(mask[y0:y1, x0:x1].mean())
        proposals.append(PatchProposal(source_image, (x0, y0, x1 - x0, y1 - y0), frac))
    return proposals


def _grow(lo, hi, min_side, limit):
    if hi - lo < min_side:
        extra = min_side - (hi - lo)
        lo -= extra // 2
        hi += extra - extra // 2
    return max(lo, 0), min(hi, limit)


def label_apple_classes(model, images, masks, target_regions=400, compactness=10.0, threshold=0.5,
                        superpixel_area=None):
    """Flag classes whose superpixels mostly fall on ground-truth apple pixels.

    Stand-in for the manual swatch review when labeled masks are available.
    """
    hits = np.zeros(model.n_classes)
    totals = np.zeros(model.n_classes)
    for img, m in zip(images, masks):
        lab = to_lab(img)
        spmap = oversegment(lab, region_count(lab.shape, target_regions, superpixel_area), compactness)
        div, n = superpixel_divergences(lab, spmap, model)
        nearest = div.argmin(axis=1)
        apple_frac = np.bincount(spmap.labels.ravel(), check_mask(m, lab.shape).ravel(), spmap.regions) / n
        np.add.at(hits, nearest, apple_frac * n)
        np.add.at(totals, nearest, n)
    ratio = np.divide(hits, totals, out=np.zeros_like(hits), where=totals > 0)
    return model.with_apple_ids(np.flatnonzero(ratio > threshold))


def swatch_montage(model, tile=48, columns=5):
    """RGB uint8 grid of class colors, row-major by class id, ids drawn in."""
    rows = int(np.ceil(model.n_classes / columns))
    canvas = np.full((rows * tile, columns * tile, 3), 255, dtype=np.uint8)
    rgb = (np.clip(lab2rgb(model.means[None, :, :])[0], 0, 1) * 255).astype(np.uint8)
    for i in range(model.n_classes):
        r, c = divmod(i, columns)
        cell = canvas[r * tile:(r + 1) * tile, c * tile:(c + 1) * tile]
        cell[:] = rgb[i]
        ink = (0, 0, 0) if model.means[i, 0] > 50 else (255, 255, 255)
        cv2.putText(cell, str(i), (4, tile - 8), cv2.FONT_HERSHEY_SIMPLEX, 0.5, ink, 1, cv2.LINE_AA)
    return canvas


class ColorSegmenter(TransformerMixin, BaseEstimator):
    """Fit a color model on images, then turn images into apple masks.

    ``superpixel_area`` (pixels) raises the superpixel count on large images
    so regions stay apple-sized. ``fit(images, masks)`` flags apple classes
    from labeled masks; without masks the classes stay unflagged until
    :meth:`set_apple_classes` is called with ids chosen from the swatch
    montage.
    """

    def __init__(self, n_classes=25, target_regions=400, compactness=10.0, min_area=50, margin=0.15,
                 seed=0, superpixel_area=None):
        self.n_classes = n_classes
        self.target_regions = target_regions
        self.compactness = compactness
        self.min_area = min_area
        self.margin = margin
        self.seed = seed
        self.superpixel_area = superpixel_area

    def fit(self, images, masks=None):
        images = list(images)
        model = fit_color_model(images, self.n_classes, self.seed, self.target_regions, self.compactness,
                                self.superpixel_area)
        if masks is not None:
            model = label_apple_classes(model, images, masks, self.target_regions, self.compactness,
                                        superpixel_area=self.superpixel_area)
        self.model_ = model
        return self

    def set_apple_classes(self, ids):
        self.model_ = self.model_.with_apple_ids(ids)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("ColorSegmenter is not fitted yet")

    def segment(self, image):
        self._check_fitted()
        lab = to_lab(image)
        spmap = oversegment(lab, region_count(lab.shape, self.target_regions, self.superpixel_area), self.compactness)
        return classify_superpixels(lab, spmap, self.model_)

    def transform(self, images):
        return [self.segment(img) for img in images]

    def propose(self, image, source_image=""):
        return extract_proposals(self.segment(image), self.min_area, self.margin, source_image=source_image)
