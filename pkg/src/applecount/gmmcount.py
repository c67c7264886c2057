"""Baseline cluster counter: 2-D Gaussian mixtures fitted by EM, sized by BIC.

Points are apple-pixel centers from a segmentation mask; the selected number
of mixture components is the apple count.
"""
import logging
from dataclasses import dataclass, field

import cv2
import numpy as np
from sklearn.base import BaseEstimator

from ._validation import InvalidInputError, check_mask, check_random_seed

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


class InsufficientDataError(InvalidInputError):
    pass


@dataclass
class GaussianMixture2D:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    log_likelihood: float
    n_points: int
    history: list = field(default_factory=list)
    converged: bool = True

    @property
    def n_components(self):
        return len(self.weights)

    @property
    def n_parameters(self):
        k = self.n_components
        return k * (2 + 3) + (k - 1)

    def bic(self):
        return -2.0 * self.log_likelihood + self.n_parameters * np.log(self.n_points)


def _floor_eigenvalues(covs, floor):
    vals, vecs = np.linalg.eigh(covs)
    vals = np.maximum(vals, floor)
    out = np.einsum("kij,kj,klj->kil", vecs, vals, vecs)
    return 0.5 * (out + np.swapaxes(out, 1, 2))


def _log_gaussian(points, means, covs):
    """(n, K) log densities of 2-D Gaussians, closed-form 2x2 inverse."""
    a, b, d = covs[:, 0, 0], covs[:, 0, 1], covs[:, 1, 1]
    det = a * d - b * b
    dx = points[:, None, 0] - means[None, :, 0]
    dy = points[:, None, 1] - means[None, :, 1]
    maha = (d * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
    return -0.5 * maha - 0.5 * np.log(det) - LOG_2PI


def _e_step(points, weights, means, covs):
    log_p = _log_gaussian(points, means, covs) + np.log(weights)[None, :]
    peak = log_p.max(axis=1, keepdims=True)
    log_norm = peak[:, 0] + np.log(np.exp(log_p - peak).sum(axis=1))
    resp = np.exp(log_p - log_norm[:, None])
    return resp, float(log_norm.sum())


def _m_step(points, resp, floor):
    nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
    weights = nk / nk.sum()
    means = resp.T @ points / nk[:, None]
    diff = points[None, :, :] - means[:, None, :]
    covs = np.swapaxes(diff * resp.T[:, :, None], 1, 2) @ diff / nk[:, None, None]
    return weights, means, _floor_eigenvalues(covs, floor)


def _kmeans_pp(points, k, rng):
    centers = [points[rng.integers(len(points))]]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(len(points))
        else:
            idx = rng.choice(len(points), p=d2 / total)
        centers.append(points[idx])
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _run_em(points, k, rng, tol, max_iter, floor):
    centers = _kmeans_pp(points, k, rng)
    labels = ((points[:, None, :] - centers[None]) ** 2).sum(axis=2).argmin(axis=1)
    resp = np.zeros((len(points), k))
    resp[np.arange(len(points)), labels] = 1.0
    weights, means, covs = _m_step(points, resp, floor)
    history = []
    converged = False
    for _ in range(max_iter):
        resp, ll = _e_step(points, weights, means, covs)
        history.append(ll)
        if len(history) > 1 and abs(history[-1] - history[-2]) / len(points) < tol:
            converged = True
            break
        weights, means, covs = _m_step(points, resp, floor)
    return GaussianMixture2D(weights, means, covs, history[-1], len(points), history, converged)


def fit_gmm_em(points, n_components, seed=0, n_init=5, tol=1e-6, max_iter=200, cov_floor=0.5):
    """Fit a K-component 2-D Gaussian mixture by EM.

    Each of ``n_init`` runs starts from a seeded k-means++ hard assignment;
    the run with the highest final log-likelihood wins. Convergence is a
    per-point log-likelihood change below ``tol`` (or ``max_iter`` E-steps).
    Covariance eigenvalues are floored at ``cov_floor`` (px^2) in every M-step.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if n_components < 1:
        raise InvalidInputError("n_components must be >= 1")
    if len(points) < 3 * n_components:
        raise InsufficientDataError(
            f"{len(points)} points cannot support {n_components} components (need {3 * n_components})")
    rng = check_random_seed(seed)
    best = None
    for _ in range(n_init):
        fit = _run_em(points, n_components, rng, tol, max_iter, cov_floor)
        if best is None or fit.log_likelihood > best.log_likelihood:
            best = fit
    return best


def count_by_model_selection(points, k_max=6, seed=0, **em_params):
    """Return (count, mixture) with the count minimizing BIC over 1..k_max."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) < 3:
        raise InsufficientDataError(f"need at least 3 points, got {len(points)}")
    upper = min(k_max, len(points) // 3)
    fits = [fit_gmm_em(points, k, seed=seed, **em_params) for k in range(1, upper + 1)]
    scores = [f.bic() for f in fits]
    best = int(np.argmin(scores))
    return best + 1, fits[best]


def mask_points(mask, max_points=None):
    """Pixel centers of true mask pixels, optionally on a coarser grid.

    With ``max_points`` a mask with more foreground pixels than that is
    area-resampled so roughly ``max_points`` remain. Dense pixel grids make a
    filled disk look non-Gaussian enough that the criterion splits it; a
    fixed point budget keeps the evidence per apple comparable across patch
    scales. Coordinates stay in the resampled grid's units.
    """
    mask = check_mask(mask)
    n = int(mask.sum())
    if max_points is not None and n > max_points:
        scale = np.sqrt(max_points / n)
        w = max(int(round(mask.shape[1] * scale)), 1)
        h = max(int(round(mask.shape[0] * scale)), 1)
        mask = cv2.resize(mask.astype(np.float32), (w, h), interpolation=cv2.INTER_AREA) >= 0.5
    ys, xs = np.nonzero(mask)
    return np.column_stack([xs + 0.5, ys + 0.5])


def count_patch_gmm(patch, mask, k_max=6, seed=0, max_points=250, **em_params):
    """Count apples in a patch from its apple mask (0 for an empty mask)."""
    mask = check_mask(mask, None if patch is None else np.shape(patch))
    pts = mask_points(mask, max_points)
    if len(pts) < 3:
        return 0
    count, _ = count_by_model_selection(pts, k_max=k_max, seed=seed, **em_params)
    return count


class GMMCounter(BaseEstimator):
    """Estimator wrapper around :func:`count_patch_gmm`.

    There is nothing to learn; ``fit`` only validates parameters so the
    counter drops into pipelines and grid searches next to the CNN.
    """

    def __init__(self, k_max=6, seed=0, max_points=250, n_init=5, cov_floor=0.5):
        self.k_max = k_max
        self.seed = seed
        self.max_points = max_points
        self.n_init = n_init
        self.cov_floor = cov_floor

    def fit(self, masks=None, y=None):
        if not 1 <= self.k_max <= 6:
            raise InvalidInputError("k_max must lie in 1..6")
        self.is_fitted_ = True
        return self

    def predict(self, masks):
        return np.array([
            count_patch_gmm(None, m, k_max=self.k_max, seed=self.seed, max_points=self.max_points,
                            n_init=self.n_init, cov_floor=self.cov_floor)
            for m in masks
        ])
