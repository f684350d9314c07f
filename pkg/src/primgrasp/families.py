"""Grasp families of the primitive shapes and their discretization.

Each family is a set of gripper poses parametrized by the shape's symmetry.
A candidate is placed by a grasp point ``p`` (where the jaws close), an
approach direction ``a`` (gripper ``-z``) and a jaw axis (gripper ``x``).
The fingertips advance past ``p`` by at most half the finger length and
never beyond the far side of the shape along ``a``.  Shapes shallower than
``small_object`` beyond ``p`` are backed off by ``standoff`` along the body
``z`` axis, keeping at least half of that depth inside the fingers.
The advance is further limited so the palm stays ``PALM_CLEARANCE`` clear
of the shape behind ``p``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FamilyDroppedError
from .geometry import Pose, frame_from_axes
from .gripper import GripperModel
from .shapes import PrimitiveShape, ShapeClass

SMALL_OBJECT = 0.04
STANDOFF = 0.015
PALM_CLEARANCE = 0.005
ORIENTS = ("vertical", "horizontal")
_UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class Family:
    """One grasp family member of a shape class."""

    kind: ShapeClass
    member: str  # top, bottom, side or face
    face: int | None = None  # cuboid face 1..6: +x, -x, +y, -y, +z, -z
    orient: str | None = None  # cuboid jaw orientation

    @property
    def tag(self) -> str:
        if self.member == "face":
            return f"CuboidFace({self.face},{self.orient})"
        return self.kind.title + self.member.capitalize()


_MEMBERS = {
    ShapeClass.CYLINDER: ("top", "bottom", "side"),
    ShapeClass.RING: ("top", "bottom", "side"),
    ShapeClass.STICK: ("side",),
    ShapeClass.SPHERE: ("top", "side"),
    ShapeClass.SEMISPHERE: ("top",),
}


def enumerate_families(shape: PrimitiveShape) -> list:
    kind = shape.kind
    if kind == ShapeClass.CUBOID:
        return [Family(kind, "face", face, orient) for face in range(1, 7) for orient in ORIENTS]
    return [Family(kind, m) for m in _MEMBERS[kind]]


def family_from_tag(tag: str) -> Family:
    if tag.startswith("CuboidFace(") and tag.endswith(")"):
        face, orient = tag[len("CuboidFace("):-1].split(",")
        fam = Family(ShapeClass.CUBOID, "face", int(face), orient.strip())
        if fam.face not in range(1, 7) or fam.orient not in ORIENTS:
            raise ValueError(f"bad cuboid family tag {tag!r}")
        return fam
    for kind, members in _MEMBERS.items():
        for m in members:
            if tag == kind.title + m.capitalize():
                return Family(kind, m)
    raise ValueError(f"unknown grasp family {tag!r}")


@dataclass(frozen=True, eq=False)
class GraspCandidate:
    """Gripper pose in the world plus its opening width and family.

    ``closing_dim`` is the shape width the jaws close across, kept so a
    candidate can be gated without its shape.
    """

    pose: Pose
    opening_width: float
    family: str
    free_params: dict = field(default_factory=dict)
    shape_id: int = 0
    closing_dim: float = 0.0

    @property
    def approach(self) -> np.ndarray:
        return -self.pose.matrix[:, 2]

    @property
    def jaw_axis(self) -> np.ndarray:
        return self.pose.matrix[:, 0]

    def __eq__(self, other):
        return (isinstance(other, GraspCandidate) and self.pose == other.pose
                and self.opening_width == other.opening_width and self.family == other.family
                and self.free_params == other.free_params and self.shape_id == other.shape_id
                and self.closing_dim == other.closing_dim)


# family geometry -------------------------------------------------------------

def _cuboid_axes(face: int, orient: str):
    """Local (normal axis, sign, jaw axis, free axis) of a cuboid face member.

    The jaw closes along the in-face axis with the higher index for
    ``vertical`` and the lower index for ``horizontal``; the free
    translation runs along the remaining in-face axis.
    """
    k = (face - 1) // 2
    sign = 1.0 if face % 2 == 1 else -1.0
    a1, a2 = [i for i in range(3) if i != k]
    jaw, free = (a2, a1) if orient == "vertical" else (a1, a2)
    return k, sign, jaw, free


_CUBOID_DIMS = ("w", "d", "h")  # local x, y, z


def closing_dimension(shape: PrimitiveShape, family: Family) -> float:
    """Width of the shape across the jaws for a family member."""
    p = shape.params
    kind = shape.kind
    if kind in (ShapeClass.SPHERE, ShapeClass.SEMISPHERE):
        return 2.0 * p["r"]
    if kind.tubular:
        if family.member == "side":
            return 2.0 * p["r_out"]
        return p["r_out"] - p["r_in"]
    _, _, jaw, _ = _cuboid_axes(family.face, family.orient)
    return p[_CUBOID_DIMS[jaw]]


def rotation_steps(radius: float, jaw_width: float) -> int:
    """Steps over a full turn so the surface arc per step is about one jaw width."""
    return max(8, int(math.ceil(2.0 * math.pi * radius / jaw_width)))


def translation_grid(length: float, step: float) -> np.ndarray:
    """Offsets spanning ``[-length/2, length/2]`` at about ``step`` spacing."""
    n = max(1, int(round(length / step))) + 1
    return np.linspace(-0.5 * length, 0.5 * length, n)


def _depth_past(shape: PrimitiveShape, p, a) -> float:
    """Extent of the shape beyond ``p`` along direction ``a``."""
    return max(shape.support(a) - float(np.dot(a, p)), 0.0)


def _place(shape, gripper: GripperModel, p, a, jaw, small_object, standoff) -> Pose:
    """Gripper pose closing at ``p``, approaching along ``a``, jaws along ``jaw``."""
    a = np.asarray(a, dtype=float) / np.linalg.norm(a)
    depth = _depth_past(shape, p, a)
    half = 0.5 * gripper.finger_length
    if depth < small_object:
        tips = max(depth - standoff, 0.5 * depth)
    else:
        tips = min(half, depth)
    back = max(shape.support(-a) + float(np.dot(a, p)), 0.0)
    tips = max(min(tips, half, 2.0 * half - back - PALM_CLEARANCE), 0.0)
    origin = np.asarray(p, dtype=float) + a * (tips - half)
    R = frame_from_axes(jaw, -a)
    return Pose.from_matrix(R, origin, "world", "gripper")


def _members(shape: PrimitiveShape, family: Family, gripper: GripperModel):
    """Yield (grasp point, approach, jaw axis, free params) for a family."""
    kind = shape.kind
    P = shape.pose.matrix
    c = shape.center
    prm = shape.params
    jw = gripper.jaw_width
    step = gripper.finger_thickness
    if kind in (ShapeClass.SPHERE, ShapeClass.SEMISPHERE):
        r = prm["r"]
        if kind == ShapeClass.SPHERE:
            up, e1, e2 = _UP, np.array([1.0, 0, 0]), np.array([0, 1.0, 0])
            p = c
        else:
            up, e1, e2 = P[:, 2], P[:, 0], P[:, 1]
            p = c + 0.5 * r * up
        n = rotation_steps(r, jw)
        for k in range(n):
            th = 2.0 * np.pi * k / n
            u = np.cos(th) * e1 + np.sin(th) * e2
            if family.member == "top":
                yield p, -up, u, {"theta": th}
            else:
                yield p, -u, np.cross(up, u), {"theta": th}
        return
    if kind.tubular:
        axis, e1, e2 = P[:, 2], P[:, 0], P[:, 1]
        h = prm["h"]
        if family.member == "side":
            n = rotation_steps(prm["r_out"], jw)
            for s in translation_grid(h, step):
                for k in range(n):
                    th = 2.0 * np.pi * k / n
                    u = np.cos(th) * e1 + np.sin(th) * e2
                    yield c + s * axis, -u, np.cross(axis, u), {"theta": th, "s": float(s)}
            return
        # top and bottom pinch the wall at a rim point
        sgn = 1.0 if family.member == "top" else -1.0
        r_mid = 0.5 * (prm["r_in"] + prm["r_out"])
        n = rotation_steps(r_mid, jw)
        for k in range(n):
            th = 2.0 * np.pi * k / n
            u = np.cos(th) * e1 + np.sin(th) * e2
            yield c + sgn * 0.5 * h * axis + r_mid * u, -sgn * axis, u, {"theta": th}
        return
    k, sign, jaw, free = _cuboid_axes(family.face, family.orient)
    length = prm[_CUBOID_DIMS[free]]
    for s in translation_grid(length, step):
        yield c + s * P[:, free], -sign * P[:, k], P[:, jaw], {"s": float(s)}


def discretize(shape: PrimitiveShape, family: Family, gripper: GripperModel = GripperModel(),
               shape_id: int = 0, small_object: float = SMALL_OBJECT,
               standoff: float = STANDOFF) -> list:
    """Concrete candidates of one family member.

    Raises ``FamilyDroppedError`` when the shape is wider across the jaws
    than the gripper's maximal opening.
    """
    if family.kind != shape.kind:
        raise ValueError(f"family {family.tag} does not belong to a {shape.kind.value}")
    dim = closing_dimension(shape, family)
    if dim > gripper.max_opening:
        raise FamilyDroppedError(
            f"{family.tag}: closing dimension {dim:.4f} m exceeds max opening {gripper.max_opening} m")
    width = gripper.width_for(dim)
    out = []
    for p, a, jaw, free in _members(shape, family, gripper):
        pose = _place(shape, gripper, p, a, jaw, small_object, standoff)
        out.append(GraspCandidate(pose, width, family.tag, free, shape_id, float(dim)))
    return out


def candidates_for(shape: PrimitiveShape, gripper: GripperModel = GripperModel(), shape_id: int = 0,
                   small_object: float = SMALL_OBJECT, standoff: float = STANDOFF):
    """All candidates of a shape plus the tags of dropped families."""
    out, dropped = [], []
    for fam in enumerate_families(shape):
        try:
            out.extend(discretize(shape, fam, gripper, shape_id, small_object, standoff))
        except FamilyDroppedError:
            dropped.append(fam.tag)
    return out, dropped


# checks ------------------------------------------------------------------------

def antipodal_ok(candidate: GraspCandidate, shape: PrimitiveShape,
                 gripper: GripperModel = GripperModel(), samples: int = 9, tol: float = 1e-6) -> bool:
    """Sampled antipodal containment check.

    Both jaw faces at the candidate's opening width must stay outside the
    shape, and the closing region between them must contain part of it.
    """
    w = candidate.opening_width
    L = gripper.finger_length
    ys = np.linspace(-0.5 * gripper.jaw_width, 0.5 * gripper.jaw_width, samples)
    zs = np.linspace(-0.5 * L, 0.5 * L, 4 * samples)
    Y, Z = np.meshgrid(ys, zs, indexing="ij")
    faces = []
    for x in (-0.5 * w, 0.5 * w):
        faces.append(np.column_stack([np.full(Y.size, x), Y.ravel(), Z.ravel()]))
    world = candidate.pose.apply(np.vstack(faces))
    if np.any(shape.signed_distance(world) < -tol):
        return False
    xs = np.linspace(-0.5 * w, 0.5 * w, 8 * samples)
    X, Y2, Z2 = np.meshgrid(xs, ys, zs, indexing="ij")
    inside = candidate.pose.apply(np.column_stack([X.ravel(), Y2.ravel(), Z2.ravel()]))
    return bool(np.any(shape.signed_distance(inside) < 0.0))


# serialization ---------------------------------------------------------------

def candidate_to_dict(c: GraspCandidate) -> dict:
    from .serialize import pose_to_dict

    return {"pose": pose_to_dict(c.pose), "width": float(c.opening_width), "family": c.family,
            "free_params": {k: float(v) for k, v in c.free_params.items()},
            "shape_id": int(c.shape_id), "closing_dim": float(c.closing_dim)}


def candidate_from_dict(data: dict) -> GraspCandidate:
    from .serialize import pose_from_dict

    family_from_tag(data["family"])
    return GraspCandidate(pose_from_dict(data["pose"]), float(data["width"]), data["family"],
                          dict(data.get("free_params", {})), int(data.get("shape_id", 0)),
                          float(data.get("closing_dim", 0.0)))
