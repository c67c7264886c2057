"""Readers and writers for the scene exchange formats.

Floats are written with ``repr`` (shortest round-trip form), so a file read
back and written again is byte-identical.
"""
import csv
import json
from pathlib import Path

import numpy as np

from ._validation import InvalidInputError
from .yieldmerge import CameraFrame, Detection

DETECTION_FIELDS = ["frame_id", "x", "y", "w", "h"]


def _f(v):
    return repr(float(v))


def write_ply(path, points, colors=None):
    """ASCII PLY with x, y, z and optional uchar red, green, blue."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
             "property double x", "property double y", "property double z"]
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
        if len(colors) != len(points):
            raise InvalidInputError("colors and points differ in length")
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    for i, p in enumerate(points):
        row = [_f(v) for v in p]
        if colors is not None:
            row += [str(int(c)) for c in colors[i]]
        lines.append(" ".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path):
    """(points (n, 3) float64, colors (n, 3) uint8 or None)."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise InvalidInputError(f"{path}: not a PLY file")
    n, props, in_vertex, i = None, [], False, 1
    while i < len(text) and text[i].strip() != "end_header":
        tok = text[i].split()
        if tok[:1] == ["format"] and tok[1] != "ascii":
            raise InvalidInputError(f"{path}: only ASCII PLY is supported")
        if tok[:1] == ["element"]:
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n = int(tok[2])
        elif tok[:1] == ["property"] and in_vertex:
            props.append(tok[-1])
        i += 1
    if n is None or props[:3] != ["x", "y", "z"]:
        raise InvalidInputError(f"{path}: need a vertex element with x, y, z")
    rows = [line.split() for line in text[i + 1:i + 1 + n]]
    if len(rows) != n:
        raise InvalidInputError(f"{path}: expected {n} vertices, found {len(rows)}")
    data = np.array(rows, dtype=np.float64).reshape(n, len(props))
    colors = None
    if {"red", "green", "blue"} <= set(props):
        colors = data[:, [props.index(c) for c in ("red", "green", "blue")]].astype(np.uint8)
    return data[:, :3].copy(), colors


def frame_to_dict(frame):
    return {"frame_id": frame.frame_id, "fx": float(frame.fx), "fy": float(frame.fy), "cx": float(frame.cx),
            "cy": float(frame.cy), "width": int(frame.width), "height": int(frame.height),
            "extrinsic": [float(v) for v in frame.extrinsic.ravel()]}


def frame_from_dict(d):
    try:
        return CameraFrame(d["frame_id"], float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                           np.asarray(d["extrinsic"], dtype=np.float64).reshape(3, 4),
                           int(d["width"]), int(d["height"]))
    except KeyError as exc:
        raise InvalidInputError(f"pose record lacks field {exc.args[0]!r}") from None


def write_poses(path, frames):
    """JSON list of camera records; ``extrinsic`` is world-to-camera, row-major 3x4."""
    Path(path).write_text(json.dumps([frame_to_dict(f) for f in frames], indent=1) + "\n")


def read_poses(path):
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, list):
        raise InvalidInputError(f"{path}: expected a JSON list of frames")
    return [frame_from_dict(d) for d in doc]


def write_detections(path, detections):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DETECTION_FIELDS)
        for d in detections:
            w.writerow([d.frame_id, _f(d.x), _f(d.y), _f(d.w), _f(d.h)])


def read_detections(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != DETECTION_FIELDS:
            raise InvalidInputError(f"{path}: header must be {','.join(DETECTION_FIELDS)}")
        out = []
        for line, row in enumerate(reader, start=2):
            try:
                out.append(Detection(row["frame_id"], float(row["x"]), float(row["y"]), float(row["w"]),
                                     float(row["h"])))
            except (TypeError, ValueError):
                raise InvalidInputError(f"{path}:{line}: malformed detection row") from None
    return out


def write_ledger(path, ledger):
    Path(path).write_text(json.dumps(ledger, indent=1, sort_keys=True) + "\n")


def read_ledger(path):
    return json.loads(Path(path).read_text())
