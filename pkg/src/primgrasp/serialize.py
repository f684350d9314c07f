"""JSON and PLY encodings for the core value types.

Floats are written with Python's shortest round-trip representation, so
decoding an encoded value reproduces it bit for bit.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import BundleError
from .geometry import PointCloud, Pose
from .gripper import GripperModel, ScoringWeights
from .shapes import PARAM_NAMES, PrimitiveShape, ShapeClass


def _floats(values):
    return [float(v) for v in values]


def pose_to_dict(pose: Pose) -> dict:
    return {"quat": _floats(pose.rotation), "trans": _floats(pose.translation),
            "frame": pose.frame, "child": pose.child}


def pose_from_dict(data: dict) -> Pose:
    return Pose(tuple(data["quat"]), tuple(data["trans"]),
                data.get("frame", "world"), data.get("child", "world"))


def shape_to_dict(shape: PrimitiveShape) -> dict:
    return {"class": shape.kind.value,
            "params": {k: float(shape.params[k]) for k in PARAM_NAMES[shape.kind]},
            "pose": pose_to_dict(shape.pose)}


def shape_from_dict(data: dict) -> PrimitiveShape:
    return PrimitiveShape(ShapeClass.parse(data["class"]), dict(data["params"]),
                          pose_from_dict(data["pose"]))


def gripper_to_dict(g: GripperModel) -> dict:
    return {"max_opening": g.max_opening, "finger_length": g.finger_length,
            "finger_thickness": g.finger_thickness, "jaw_width": g.jaw_width,
            "opening_levels": list(g.opening_levels)}


def gripper_from_dict(data: dict) -> GripperModel:
    return GripperModel(**{k: (tuple(v) if k == "opening_levels" else float(v))
                           for k, v in data.items()})


def weights_to_dict(w: ScoringWeights) -> dict:
    return {"lambda_r": w.lambda_r, "lambda_t": w.lambda_t, "lambda_o": w.lambda_o,
            "omega": list(w.omega)}


def weights_from_dict(data: dict) -> ScoringWeights:
    return ScoringWeights(float(data["lambda_r"]), float(data["lambda_t"]),
                          float(data["lambda_o"]), tuple(data["omega"]))


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj))


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise BundleError(f"cannot read {path}: {exc}") from exc


def write_ply(path, cloud: PointCloud) -> None:
    """ASCII PLY with one ``x y z`` vertex per line."""
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
             "property float x", "property float y", "property float z", "end_header"]
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in cloud.points.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path, frame: str = "world") -> PointCloud:
    """Read the x, y, z vertex properties of an ASCII PLY file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise BundleError(f"cannot read {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise BundleError(f"{path} is not a PLY file")
    count = None
    props = []
    in_vertex = False
    body = None
    for i, line in enumerate(lines[1:], start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise BundleError("only ASCII PLY is supported")
        if parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            props.append(parts[-1])
        elif parts[0] == "end_header":
            body = i + 1
            break
    if count is None or body is None or not {"x", "y", "z"} <= set(props):
        raise BundleError(f"{path} lacks a vertex element with x, y, z")
    cols = [props.index(c) for c in ("x", "y", "z")]
    rows = [ln.split() for ln in lines[body:body + count]]
    if len(rows) != count:
        raise BundleError(f"{path} is truncated")
    try:
        data = np.array([[float(r[c]) for c in cols] for r in rows], dtype=float).reshape(-1, 3)
    except (ValueError, IndexError) as exc:
        raise BundleError(f"{path}: bad vertex line ({exc})") from exc
    return PointCloud(data, frame)
