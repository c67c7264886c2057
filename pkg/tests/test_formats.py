import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from applecount import formats
from applecount._validation import InvalidInputError
from applecount.cnncount import CountNetwork, load_checkpoint, save_checkpoint
from applecount.synthbench.scene import SceneSpec, camera_pose
from applecount.yieldmerge import CameraFrame, Detection

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def some_frames(n=3):
    path = SceneSpec().cameras
    out = []
    for i in range(n):
        R, t = camera_pose("back", 0.4 * i, path)
        out.append(CameraFrame(f"back_{i:03d}", 700.0, 700.0, 640.0, 480.0, np.column_stack([R, t]), 1280, 960))
    return out


@given(arrays(np.float64, st.tuples(st.integers(0, 30), st.just(3)), elements=finite))
def test_ply_round_trip(tmp_path_factory, pts):
    d = tmp_path_factory.mktemp("ply")
    formats.write_ply(d / "a.ply", pts)
    back, colors = formats.read_ply(d / "a.ply")
    assert colors is None
    np.testing.assert_array_equal(back, pts)
    formats.write_ply(d / "b.ply", back)
    assert (d / "a.ply").read_bytes() == (d / "b.ply").read_bytes()


def test_ply_with_colors(tmp_path, rng):
    pts = rng.normal(size=(20, 3))
    cols = rng.integers(0, 256, size=(20, 3)).astype(np.uint8)
    formats.write_ply(tmp_path / "a.ply", pts, cols)
    p, c = formats.read_ply(tmp_path / "a.ply")
    np.testing.assert_array_equal(c, cols)
    formats.write_ply(tmp_path / "b.ply", p, c)
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()


def test_ply_skips_other_elements(tmp_path):
    (tmp_path / "f.ply").write_text(
        "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\n"
        "element face 0\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 2 3\n")
    pts, cols = formats.read_ply(tmp_path / "f.ply")
    assert pts.tolist() == [[0, 0, 0], [1, 2, 3]] and cols is None


@pytest.mark.parametrize("text", ["hello\n", "ply\nformat binary_little_endian 1.0\nend_header\n",
                                  "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
                                  "property float z\nend_header\n0 0 0\n"])
def test_ply_rejects_bad_files(tmp_path, text):
    (tmp_path / "bad.ply").write_text(text)
    with pytest.raises(InvalidInputError):
        formats.read_ply(tmp_path / "bad.ply")


def test_poses_round_trip(tmp_path):
    frames = some_frames()
    formats.write_poses(tmp_path / "a.json", frames)
    back = formats.read_poses(tmp_path / "a.json")
    for f, g in zip(frames, back):
        np.testing.assert_array_equal(f.extrinsic, g.extrinsic)
        assert (f.frame_id, f.fx, f.width) == (g.frame_id, g.fx, g.width)
    formats.write_poses(tmp_path / "b.json", back)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_pose_missing_field(tmp_path):
    (tmp_path / "p.json").write_text('[{"frame_id": "a", "fx": 1}]')
    with pytest.raises(InvalidInputError, match="lacks"):
        formats.read_poses(tmp_path / "p.json")


@given(st.lists(st.tuples(st.text("abc_0123", min_size=1, max_size=6), finite, finite,
                          st.floats(0.01, 500), st.floats(0.01, 500)), max_size=20))
def test_detections_round_trip(tmp_path_factory, rows):
    d = tmp_path_factory.mktemp("det")
    dets = [Detection(*r) for r in rows]
    formats.write_detections(d / "a.csv", dets)
    back = formats.read_detections(d / "a.csv")
    assert back == dets
    formats.write_detections(d / "b.csv", back)
    assert (d / "a.csv").read_bytes() == (d / "b.csv").read_bytes()


def test_detections_bad_header(tmp_path):
    (tmp_path / "d.csv").write_text("frame,x,y,w,h\n")
    with pytest.raises(InvalidInputError):
        formats.read_detections(tmp_path / "d.csv")


def test_ledger_round_trip(tmp_path):
    ledger = {"seed": 3, "clusters": [{"id": 0, "size": 2, "apples": [{"center": [0.1, 0.2, 1.0]}]}],
              "total_apples": 2}
    formats.write_ledger(tmp_path / "a.json", ledger)
    assert formats.read_ledger(tmp_path / "a.json") == ledger
    formats.write_ledger(tmp_path / "b.json", formats.read_ledger(tmp_path / "a.json"))
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_checkpoint_byte_stable(tmp_path):
    torch.manual_seed(0)
    save_checkpoint(CountNetwork(), tmp_path / "a.pt", {"seed": 0})
    net, meta = load_checkpoint(tmp_path / "a.pt")
    save_checkpoint(net, tmp_path / "b.pt", meta)
    assert (tmp_path / "a.pt").read_bytes() == (tmp_path / "b.pt").read_bytes()
