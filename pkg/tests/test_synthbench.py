import json

import numpy as np
import pytest

from applecount import formats
from applecount.synthbench.patches import render_corpus, render_patch, write_patch_corpus
from applecount.synthbench.render import APPLE_PALETTE
from applecount.synthbench.scene import SceneSpec, _place_clusters, camera_pose, render_row_scene
from applecount.yieldmerge import YieldConfig, backproject_detections, connected_components_3d, \
    project_component_patches


# --- patches --------------------------------------------------------------------------

def test_patch_determinism():
    a, b = render_patch(4, seed=12), render_patch(4, seed=12)
    np.testing.assert_array_equal(a.patch.pixels, b.patch.pixels)
    np.testing.assert_array_equal(a.mask, b.mask)
    assert not np.array_equal(a.patch.pixels, render_patch(4, seed=13).patch.pixels)


@pytest.mark.parametrize("seed", range(10))
def test_count_zero_has_no_apple_pixels(seed):
    r = render_patch(0, seed=seed)
    assert not r.mask.any() and r.instances == []
    assert r.patch.count_label == 0


def test_instance_ledger_agrees_with_labels():
    corpus = render_corpus(150)  # 1050 patches
    assert len(corpus) >= 1000
    for r in corpus:
        assert len(r.instances) == r.patch.count_label
        assert all(inst["visible_fraction"] >= 0.25 for inst in r.instances)


def test_patch_count_range():
    with pytest.raises(ValueError):
        render_patch(7)
    with pytest.raises(ValueError):
        render_patch(1.5)


def test_palette_has_three_varieties():
    assert set(APPLE_PALETTE) == {"red", "yellow", "green"}


def test_patch_corpus_files(tmp_path):
    m = write_patch_corpus(tmp_path, 3, seed=2)
    assert m.histogram("train").sum() + len(m.split("val")) + len(m.split("test")) == 21
    assert (tmp_path / "manifest.csv").exists()
    for row in m.rows:
        assert (tmp_path / row.path).exists()
        assert (tmp_path / row.path.replace("patches/", "masks/")).exists()


# --- scene placement ------------------------------------------------------------------------

def test_zero_trees_empty_ledger():
    sc = render_row_scene(SceneSpec(n_trees=0, seed=3))
    assert sc.ledger["clusters"] == [] and sc.ledger["total_apples"] == 0
    assert all(d == [] for d in sc.detections.values())


def test_spec_normalizes_distributions():
    spec = SceneSpec(clusters_per_tree={2: 1, 4: 3})
    assert spec.clusters_per_tree == {2: 0.25, 4: 0.75}
    with pytest.raises(ValueError):
        SceneSpec(cluster_size={7: 1.0})
    with pytest.raises(ValueError):
        SceneSpec(palette=("blue",))


def test_cluster_placement_statistics():
    spec = SceneSpec(seed=1)
    clusters = _place_clusters(spec, np.random.default_rng([1, 424242]))
    ground = [c for c in clusters if c["ground"]]
    assert len(ground) == 4 and len(clusters) == 40
    assert all(np.allclose(c["apples"][:, 2], spec.apple_radius) for c in ground)
    assert all(1 <= c["size"] <= 6 for c in clusters)


def test_camera_pose_is_rotation_facing_row():
    R, t = camera_pose("front", 1.0, SceneSpec().cameras)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)
    center = -R.T @ t
    np.testing.assert_allclose(center, [1.0, -2.0, 0.85])
    assert R[2, 1] > 0.99  # optical axis points toward +y


# --- rendered scene ---------------------------------------------------------------------------

def test_ledger_conservation(row_scene):
    L = row_scene.ledger
    assert L["total_apples"] == sum(c["size"] for c in L["clusters"]) == 147
    assert L["yield_total"] == sum(c["size"] for c in L["clusters"] if not c["ground"])
    assert L["ground_clusters"] == 4
    for c in L["clusters"]:
        assert len(c["cloud_indices"]) == c["size"] == len(c["apples"])


def test_every_apple_center_is_in_cloud(row_scene):
    for c in row_scene.ledger["clusters"]:
        for idx, apple in zip(c["cloud_indices"], c["apples"]):
            np.testing.assert_array_equal(row_scene.cloud[idx], apple["center"])


def test_projection_lands_in_rendered_footprint(row_scene):
    frames = {f.frame_id: f for side in row_scene.frames.values() for f in side}
    R = row_scene.ledger["apple_radius"]
    checked = 0
    for c in row_scene.ledger["clusters"]:
        for apple in c["apples"]:
            for view in apple["views"]:
                fr = frames[view["frame_id"]]
                ids = row_scene.id_maps[fr.frame_id.split("_")[0]][fr.frame_id]
                uv, z = fr.project(np.array([apple["center"]]))
                (u, v), z = uv[0], z[0]
                ys, xs = np.nonzero(ids == view["render_id"])
                assert len(ys) > 0
                # apples are drawn as ellipses with aspect at most 1.08
                r_px = 1.08 * fr.fx * R / z
                assert np.max(np.hypot(xs + 0.5 - u, ys + 0.5 - v)) <= r_px + 1.0
                checked += 1
    assert checked > 100


def test_clusters_drawn_only_on_their_sides(row_scene):
    for c in row_scene.ledger["clusters"]:
        for apple in c["apples"]:
            assert {v["frame_id"].split("_")[0] for v in apple["views"]} <= set(c["sides"])


def test_backprojected_points_reproject_into_boxes(row_scene):
    inside = total = 0
    for side in ("front", "back"):
        frames = {f.frame_id: f for f in row_scene.frames[side]}
        dets = row_scene.detections[side]
        bp = backproject_detections(dets, frames, row_scene.cloud)
        for det, idx in zip(dets, bp.point_index):
            if idx < 0:
                continue
            (u, v), = frames[det.frame_id].project(row_scene.cloud[idx:idx + 1])[0]
            total += 1
            inside += det.x <= u <= det.x + det.w and det.y <= v <= det.y + det.h
    assert total > 0 and inside / total >= 0.95


def test_component_boxes_contain_member_projections(row_scene):
    cfg = YieldConfig()
    side = "front"
    frames = row_scene.frames[side]
    bp = backproject_detections(row_scene.detections[side], frames, row_scene.cloud)
    idx = bp.unique_points()
    comps = connected_components_3d(row_scene.cloud[idx], cfg.linking_radius, idx)
    by_id = {f.frame_id: f for f in frames}
    for comp in comps:
        for fid, (x, y, w, h) in project_component_patches(comp, frames):
            fr = by_id[fid]
            uv, z = fr.project(comp.points)
            vis = fr.in_image(uv, z)
            assert np.all((uv[vis, 0] >= x) & (uv[vis, 0] <= x + w) & (uv[vis, 1] >= y) & (uv[vis, 1] <= y + h))


def test_scene_outputs_byte_identical(tmp_path):
    spec = SceneSpec(n_trees=2, seed=7)
    a = render_row_scene(spec).write(tmp_path / "a")
    b = render_row_scene(spec).write(tmp_path / "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert len(files) > 10
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()
    ledger = json.loads((a / "ledger.json").read_text())
    assert ledger["seed"] == 7
    pts, cols = formats.read_ply(a / "cloud.ply")
    assert pts.shape[1] == 3 and cols.shape == pts.shape
