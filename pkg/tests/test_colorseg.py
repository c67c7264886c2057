from collections import deque

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from skimage.color import deltaE_cie76, rgb2lab

from applecount._validation import InvalidInputError
from applecount.colorseg import (
    ColorModel,
    ColorSegmenter,
    FewerClassesError,
    NoAppleClassError,
    SuperpixelMap,
    classify_superpixels,
    extract_proposals,
    fit_color_model,
    jeffreys_divergence,
    oversegment,
    region_count,
    superpixel_divergences,
    swatch_montage,
)


def lab_of(rgb_image):
    return rgb2lab(np.asarray(rgb_image, dtype=np.uint8))


def flood_fill_components(mask):
    """8-connected components by BFS; list of pixel lists."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    for y in range(h):
        for x in range(w):
            if not mask[y, x] or seen[y, x]:
                continue
            queue, pix = deque([(y, x)]), []
            seen[y, x] = True
            while queue:
                cy, cx = queue.popleft()
                pix.append((cy, cx))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = cy + dy, cx + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            queue.append((ny, nx))
            comps.append(pix)
    return comps


def oracle_boxes(mask, min_area, margin, min_side=8):
    h, w = mask.shape
    boxes = []
    for pix in flood_fill_components(mask):
        if len(pix) < min_area:
            continue
        ys = [p[0] for p in pix]
        xs = [p[1] for p in pix]
        x0, x1, y0, y1 = min(xs), max(xs) + 1, min(ys), max(ys) + 1
        mx, my = int(round(margin * (x1 - x0))), int(round(margin * (y1 - y0)))
        x0, x1, y0, y1 = x0 - mx, x1 + mx, y0 - my, y1 + my
        if x1 - x0 < min_side:
            e = min_side - (x1 - x0)
            x0, x1 = x0 - e // 2, x1 + e - e // 2
        if y1 - y0 < min_side:
            e = min_side - (y1 - y0)
            y0, y1 = y0 - e // 2, y1 + e - e // 2
        x0, y0, x1, y1 = max(x0, 0), max(y0, 0), min(x1, w), min(y1, h)
        boxes.append((x0, y0, x1 - x0, y1 - y0))
    return sorted(boxes)


def four_connected(region):
    ys, xs = np.nonzero(region)
    return len(flood_fill_components_4(region)) == 1 if len(ys) else False


def flood_fill_components_4(mask):
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    comps = 0
    for y, x in zip(*np.nonzero(mask)):
        if seen[y, x]:
            continue
        comps += 1
        queue = deque([(y, x)])
        seen[y, x] = True
        while queue:
            cy, cx = queue.popleft()
            for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
                if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    queue.append((ny, nx))
    return range(comps)


def disk_image(size=120, r=30, fg=(200, 30, 30), bg=(40, 120, 40)):
    yy, xx = np.mgrid[0:size, 0:size]
    disk = (xx - size / 2) ** 2 + (yy - size / 2) ** 2 <= r * r
    img = np.empty((size, size, 3), np.uint8)
    img[:] = bg
    img[disk] = fg
    return img, disk


def three_color_corpus():
    colors = [(220, 30, 30), (30, 160, 40), (60, 60, 220)]
    imgs = []
    for k in range(3):
        img = np.zeros((60, 90, 3), np.uint8)
        for j, c in enumerate(colors):
            img[:, 30 * j:30 * (j + 1)] = colors[(j + k) % 3]
        imgs.append(img)
    return imgs, colors


# --- oversegment --------------------------------------------------------------

def test_oversegment_partition_and_contiguous_ids(rng):
    img = rng.integers(0, 256, size=(80, 90, 3), dtype=np.uint8)
    sp = oversegment(lab_of(img), 30)
    assert sp.labels.shape == (80, 90)
    assert sp.labels.min() == 0 and sp.labels.max() == sp.regions - 1
    assert np.all(sp.region_sizes() > 0)
    assert sp.region_sizes().sum() == 80 * 90


def test_oversegment_regions_are_4_connected(rng):
    img, _ = disk_image()
    noisy = np.clip(img.astype(int) + rng.integers(-20, 20, img.shape), 0, 255).astype(np.uint8)
    sp = oversegment(lab_of(noisy), 40)
    for r in range(sp.regions):
        assert four_connected(sp.labels == r)


def test_uniform_image_four_regions():
    img = np.full((100, 100, 3), 128, np.uint8)
    sp = oversegment(lab_of(img), 4)
    assert sp.regions == 4
    assert np.all(np.abs(sp.region_sizes() - 2500) <= 500)


@pytest.mark.parametrize("target", [100, 250, 400])
def test_region_count_near_target(rng, target):
    img = np.clip(rng.normal(128, 30, size=(200, 240, 3)), 0, 255).astype(np.uint8)
    sp = oversegment(lab_of(img), target)
    assert 0.8 * target <= sp.regions <= 1.2 * target


def test_superpixels_adhere_to_disk_boundary():
    img, disk = disk_image()
    sp = oversegment(lab_of(img), 50)
    area = disk.sum()
    for r in range(sp.regions):
        region = sp.labels == r
        inside = (region & disk).sum()
        outside = (region & ~disk).sum()
        assert min(inside, outside) <= 0.1 * area


def test_oversegment_rejects_zero_area():
    with pytest.raises(InvalidInputError):
        oversegment(np.zeros((0, 10, 3)), 1)


def test_oversegment_rejects_target_out_of_range():
    with pytest.raises(InvalidInputError):
        oversegment(lab_of(np.zeros((5, 5, 3), np.uint8)), 26)


def test_region_count_scales_with_area():
    assert region_count((100, 100), 400) == 400
    assert region_count((1000, 1000), 400, superpixel_area=500) == 2000
    assert region_count((10, 10), 400) == 100


# --- fit_color_model ----------------------------------------------------------

def test_fit_recovers_three_colors():
    imgs, colors = three_color_corpus()
    model = fit_color_model(imgs, k=3, seed=0, target_regions=12)
    truth = rgb2lab(np.array([colors], dtype=np.uint8))[0]
    for t in truth:
        d = deltaE_cie76(model.means, t[None, :])
        assert d.min() < 5.0


def test_fit_25_classes_within_lab_bounds(rng):
    imgs = [rng.integers(0, 256, size=(60, 60, 3), dtype=np.uint8) for _ in range(3)]
    model = fit_color_model(imgs, k=25, seed=0, target_regions=100)
    assert model.n_classes == 25
    assert np.all((model.means[:, 0] >= 0) & (model.means[:, 0] <= 100))
    assert np.all(np.abs(model.means[:, 1:]) <= 128)
    assert not model.is_apple.any()
    for c in model.covariances:
        assert np.allclose(c, c.T)
        assert np.linalg.eigvalsh(c).min() > 0


def test_fit_is_deterministic(tmp_path, rng):
    imgs = [rng.integers(0, 256, size=(50, 50, 3), dtype=np.uint8) for _ in range(2)]
    a = fit_color_model(imgs, k=25, seed=3, target_regions=80)
    b = fit_color_model(imgs, k=25, seed=3, target_regions=80)
    a.save(tmp_path / "a.json")
    b.save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_fewer_classes_error_reports_count():
    imgs, _ = three_color_corpus()
    with pytest.raises(FewerClassesError) as err:
        fit_color_model(imgs, k=25, seed=0, target_regions=12)
    assert err.value.found == 3


def test_fit_rejects_small_k_and_empty():
    with pytest.raises(InvalidInputError):
        fit_color_model([], k=3)
    with pytest.raises(InvalidInputError):
        fit_color_model([np.zeros((5, 5, 3), np.uint8)], k=1)


# --- divergences & classification ----------------------------------------------

def random_spd(rng, n):
    a = rng.normal(size=(n, 3, 3))
    return a @ a.transpose(0, 2, 1) + 0.1 * np.eye(3)


def test_jeffreys_self_is_zero_and_nonnegative(rng):
    means = rng.normal(size=(6, 3)) * 20
    covs = random_spd(rng, 6)
    d = jeffreys_divergence(means, covs, means, covs)
    assert np.all(np.abs(np.diag(d)) < 1e-9)
    assert np.all(d >= 0)


def test_jeffreys_matches_sum_of_kl(rng):
    mp, mq = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    sp, sq = random_spd(rng, 1), random_spd(rng, 1)

    def kl(m0, s0, m1, s1):
        inv1 = np.linalg.inv(s1)
        d = m1 - m0
        return 0.5 * (np.trace(inv1 @ s0) + d @ inv1 @ d - 3 + np.log(np.linalg.det(s1) / np.linalg.det(s0)))

    expect = kl(mp[0], sp[0], mq[0], sq[0]) + kl(mq[0], sq[0], mp[0], sp[0])
    assert jeffreys_divergence(mp, sp, mq, sq)[0, 0] == pytest.approx(expect, rel=1e-9)


def two_class_model(apple_mean, bg_mean, spread=4.0):
    cov = np.eye(3) * spread
    return ColorModel([apple_mean, bg_mean], [cov, cov], [True, False])


def test_superpixel_equal_to_apple_class_is_apple(rng):
    # one region whose empirical Gaussian is the class Gaussian itself
    apple = rng.multivariate_normal([50, 60, 40], np.eye(3) * 4, size=(20, 20))
    lab = np.clip(apple, [0, -128, -128], [100, 127, 127])
    sp = SuperpixelMap(np.zeros((20, 20), np.int32), 1)
    flat = lab.reshape(-1, 3)
    mean = flat.mean(axis=0)
    cov = np.cov(flat.T, bias=True) + 1e-3 * np.eye(3)
    model = ColorModel([mean, [80, -40, 40]], [cov, np.eye(3) * 4], [True, False])
    div, _ = superpixel_divergences(lab, sp, model)
    assert div[0, 0] < 1e-9
    assert classify_superpixels(lab, sp, model).all()


def test_far_background_superpixel_is_background(rng):
    model = two_class_model([50, 60, 40], [60, -40, 30])
    bg = rng.multivariate_normal([60, -40, 30], np.eye(3) * 4, size=(10, 10))
    sp = SuperpixelMap(np.zeros((10, 10), np.int32), 1)
    assert not classify_superpixels(bg, sp, model).any()


def test_tiny_superpixels_use_mahalanobis(caplog):
    model = two_class_model([50, 60, 40], [60, -40, 30])
    lab = np.zeros((2, 2, 3))
    lab[:] = [50, 60, 40]
    lab[1, 1] = [60, -40, 30]
    sp = SuperpixelMap(np.array([[0, 0], [0, 1]], np.int32), 2)
    with caplog.at_level("INFO"):
        mask = classify_superpixels(lab, sp, model)
    assert mask.tolist() == [[True, True], [True, False]]
    assert "Mahalanobis" in caplog.text


def test_classify_requires_apple_class():
    model = ColorModel([[50, 0, 0], [60, 0, 0]], [np.eye(3)] * 2, [False, False])
    with pytest.raises(NoAppleClassError):
        classify_superpixels(np.zeros((4, 4, 3)), SuperpixelMap(np.zeros((4, 4), np.int32), 1), model)


def test_classify_checks_map_shape():
    model = two_class_model([50, 60, 40], [60, -40, 30])
    with pytest.raises(InvalidInputError):
        classify_superpixels(np.zeros((4, 4, 3)), SuperpixelMap(np.zeros((5, 4), np.int32), 1), model)


def test_all_divergences_nonnegative_on_real_image(rng):
    img, _ = disk_image()
    lab = lab_of(img)
    model = fit_color_model([img, np.clip(img.astype(int) + 30, 0, 255).astype(np.uint8)], k=4, seed=0,
                            target_regions=60)
    div, _ = superpixel_divergences(lab, oversegment(lab, 60), model)
    assert np.all(div >= 0)


# --- proposals ------------------------------------------------------------------

def test_empty_mask_no_proposals():
    assert extract_proposals(np.zeros((50, 50), bool)) == []


def test_single_blob_box_arithmetic():
    mask = np.zeros((200, 200), bool)
    mask[80:120, 60:100] = True
    (p,) = extract_proposals(mask, min_area=100, margin=0.1)
    assert p.box == (56, 76, 48, 48)
    x, y, w, h = p.box
    assert (x + w / 2, y + h / 2) == (80, 100)
    assert p.apple_pixel_fraction == pytest.approx(1600 / 48 ** 2)


def test_boxes_clip_to_image():
    mask = np.zeros((30, 30), bool)
    mask[0:20, 0:20] = True
    (p,) = extract_proposals(mask, min_area=10, margin=0.5)
    assert p.box == (0, 0, 30, 30)


@given(arrays(bool, st.tuples(st.integers(8, 40), st.integers(8, 40)), elements=st.booleans()),
       st.integers(1, 30), st.sampled_from([0.0, 0.1, 0.15, 0.3]))
def test_proposals_match_flood_fill_oracle(mask, min_area, margin):
    got = sorted(p.box for p in extract_proposals(mask, min_area, margin, closing=False))
    assert got == oracle_boxes(mask, min_area, margin)


def test_hundred_random_masks_match_oracle():
    rng = np.random.default_rng(7)
    for _ in range(100):
        h, w = rng.integers(10, 60, size=2)
        mask = rng.random((h, w)) < rng.uniform(0.05, 0.5)
        min_area = int(rng.integers(1, 20))
        got = sorted(p.box for p in extract_proposals(mask, min_area, 0.15, closing=False))
        assert got == oracle_boxes(mask, min_area, 0.15)


@given(arrays(bool, (30, 30), elements=st.booleans()), st.integers(1, 20), st.integers(0, 20))
def test_min_area_monotone(mask, a, extra):
    assert len(extract_proposals(mask, a + extra)) <= len(extract_proposals(mask, a))


@given(arrays(bool, (30, 36), elements=st.booleans()))
def test_every_surviving_pixel_inside_its_box(mask):
    from scipy import ndimage

    props = extract_proposals(mask, min_area=5, margin=0.15, closing=False)
    labels, n = ndimage.label(mask, structure=np.ones((3, 3)))
    boxes = {p.box for p in props}
    for comp in range(1, n + 1):
        ys, xs = np.nonzero(labels == comp)
        if len(ys) < 5:
            continue
        own = [b for b in boxes
               if b[0] <= xs.min() and xs.max() < b[0] + b[2] and b[1] <= ys.min() and ys.max() < b[1] + b[3]]
        assert own


def test_closing_bridges_one_pixel_gap():
    mask = np.zeros((40, 60), bool)
    mask[10:30, 5:29] = True
    mask[10:30, 30:55] = True
    assert len(extract_proposals(mask, min_area=10, closing=False)) == 2
    assert len(extract_proposals(mask, min_area=10, closing=True)) == 1


# --- model file & estimator -------------------------------------------------------

def test_model_json_round_trip(tmp_path, rng):
    imgs = [rng.integers(0, 256, size=(40, 40, 3), dtype=np.uint8)]
    model = fit_color_model(imgs, k=5, seed=0, target_regions=50).with_apple_ids([1, 3])
    model.save(tmp_path / "m.json")
    again = ColorModel.load(tmp_path / "m.json")
    again.save(tmp_path / "m2.json")
    assert (tmp_path / "m.json").read_bytes() == (tmp_path / "m2.json").read_bytes()
    assert again.apple_ids == [1, 3]
    np.testing.assert_array_equal(again.covariances, model.covariances)


def test_model_rejects_other_colorspace():
    with pytest.raises(InvalidInputError):
        ColorModel.from_dict({"version": 1, "colorspace": "RGB", "classes": []})


def test_swatch_montage_layout():
    model = two_class_model([50, 60, 40], [60, -40, 30])
    img = swatch_montage(model, tile=16, columns=5)
    assert img.shape == (16, 80, 3) and img.dtype == np.uint8


def test_segmenter_finds_red_disk():
    img, disk = disk_image(size=100, r=25)
    seg = ColorSegmenter(n_classes=2, target_regions=60).fit([img], [disk])
    mask = seg.segment(img)
    assert (mask == disk).mean() > 0.97
    (p,) = seg.propose(img, source_image="disk")
    x, y, w, h = p.box
    assert x <= 25 and y <= 25 and x + w >= 75 and y + h >= 75
    assert p.source_image == "disk"


def test_segmenter_proposals_deterministic():
    img, disk = disk_image(size=100, r=25)
    a = ColorSegmenter(n_classes=2, target_regions=60).fit([img], [disk]).propose(img)
    b = ColorSegmenter(n_classes=2, target_regions=60).fit([img], [disk]).propose(img)
    assert a == b


def test_segmenter_unfitted():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        ColorSegmenter().segment(np.zeros((10, 10, 3), np.uint8))
