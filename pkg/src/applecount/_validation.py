"""Input validation shared across modules (in the spirit of sklearn.utils)."""
import numpy as np


class InvalidInputError(ValueError):
    pass


def check_rgb_image(image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidInputError(f"expected an (H, W, 3) image, got shape {image.shape}")
    if image.shape[0] == 0 or image.shape[1] == 0:
        raise InvalidInputError("image has zero area")
    return image


def check_lab_image(image):
    """Validate an (H, W, 3) float LAB array: L in [0, 100], a/b in [-128, 127]."""
    image = np.asarray(check_rgb_image(image), dtype=np.float64)
    L, a, b = image[..., 0], image[..., 1], image[..., 2]
    eps = 1e-6
    if L.min() < -eps or L.max() > 100 + eps:
        raise InvalidInputError("L channel outside [0, 100]")
    if min(a.min(), b.min()) < -128 - eps or max(a.max(), b.max()) > 127 + eps:
        raise InvalidInputError("a/b channels outside [-128, 127]")
    return image


def check_mask(mask, shape=None):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise InvalidInputError(f"mask must be 2-D, got shape {mask.shape}")
    if shape is not None and mask.shape != tuple(shape[:2]):
        raise InvalidInputError(f"mask shape {mask.shape} does not match image {tuple(shape[:2])}")
    return mask.astype(bool)


def check_box(box, image_shape):
    x, y, w, h = (int(v) for v in box)
    if w <= 0 or h <= 0:
        raise InvalidInputError(f"box {box} has zero area")
    H, W = image_shape[:2]
    if x < 0 or y < 0 or x + w > W or y + h > H:
        raise InvalidInputError(f"box {box} exceeds image bounds {W}x{H}")
    return x, y, w, h


def check_count_label(label):
    if int(label) != label or not 0 <= label <= 6:
        raise InvalidInputError(f"count label must be an integer in 0..6, got {label!r}")
    return int(label)


def check_random_seed(seed):
    """Accept None, an int, or a Generator; always return a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
