"""Rigid transforms and point clouds.

Quaternions are stored scalar-first, ``(w, x, y, z)``, and kept in the
``w >= 0`` hemisphere so that equal rotations have equal coefficients.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import FrameMismatchError

FRAMES = ("world", "camera", "shape", "gripper")

_UNIT_TOL = 1e-6


def canonical_quat(q):
    """Flip ``q`` into the ``w >= 0`` hemisphere (first nonzero entry positive)."""
    q = np.asarray(q, dtype=float)
    for v in q:
        if v > 0:
            return q
        if v < 0:
            return -q
    return q


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    x, y, z, w = Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat()
    q = np.array([w, x, y, z])
    return canonical_quat(q / np.linalg.norm(q))


def axis_angle_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_angle(q) -> float:
    """Rotation angle of ``q`` in radians, in [0, pi]."""
    w = min(1.0, abs(float(q[0])))
    return 2.0 * np.arccos(w)


def orthonormal_basis(axis):
    """Two unit vectors completing ``axis`` to a right-handed frame."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    helper = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(helper, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(a, e1)
    return e1, e2


def frame_from_axes(x_axis, z_axis) -> np.ndarray:
    """Rotation matrix whose columns are (x, y, z) with z exact and x orthogonalised."""
    z = np.asarray(z_axis, dtype=float)
    z = z / np.linalg.norm(z)
    x = np.asarray(x_axis, dtype=float)
    x = x - np.dot(x, z) * z
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.column_stack([x, y, z])


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping coordinates in ``child`` into ``frame``.

    ``frame`` is the frame the pose is expressed in (usually ``world``);
    ``child`` names the frame being placed.
    """

    rotation: tuple = (1.0, 0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)
    frame: str = "world"
    child: str = "world"

    def __post_init__(self):
        rot = tuple(float(v) for v in self.rotation)
        trans = tuple(float(v) for v in self.translation)
        if len(rot) != 4 or len(trans) != 3:
            raise ValueError("rotation needs 4 and translation 3 components")
        if not all(np.isfinite(rot + trans)):
            raise ValueError("pose contains non-finite values")
        norm = float(np.sqrt(sum(v * v for v in rot)))
        if abs(norm - 1.0) > _UNIT_TOL:
            raise ValueError(f"rotation quaternion is not unit (norm {norm})")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls, frame="world", child=None) -> Pose:
        return cls(frame=frame, child=frame if child is None else child)

    @classmethod
    def from_matrix(cls, R, t, frame="world", child="world") -> Pose:
        q = matrix_to_quat(R)
        return cls(tuple(q), tuple(np.asarray(t, dtype=float)), frame, child)

    @classmethod
    def from_homogeneous(cls, T, frame="world", child="world") -> Pose:
        T = np.asarray(T, dtype=float)
        return cls.from_matrix(T[:3, :3], T[:3, 3], frame, child)

    @property
    def quat(self) -> np.ndarray:
        return np.array(self.rotation)

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def t(self) -> np.ndarray:
        return np.array(self.translation)

    def homogeneous(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.matrix
        T[:3, 3] = self.translation
        return T

    def apply(self, points) -> np.ndarray:
        """Map ``(N, 3)`` points from ``child`` into ``frame`` coordinates."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.matrix.T + self.t

    def apply_inverse(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return (pts - self.t) @ self.matrix

    def inverse(self) -> Pose:
        R = self.matrix
        q = self.quat
        q_inv = canonical_quat(np.array([q[0], -q[1], -q[2], -q[3]]))
        t = -R.T @ self.t
        return Pose(tuple(q_inv), tuple(t), self.child, self.frame)

    def with_frames(self, frame: str, child: str) -> Pose:
        return Pose(self.rotation, self.translation, frame, child)


def compose(a: Pose, b: Pose) -> Pose:
    """Return ``a * b``: first apply ``b`` (child_b -> frame_b = child_a), then ``a``."""
    if a.child != b.frame:
        raise FrameMismatchError(
            f"cannot compose {a.frame}<-{a.child} with {b.frame}<-{b.child}")
    q = quat_multiply(a.quat, b.quat)
    q = canonical_quat(q / np.linalg.norm(q))
    t = a.matrix @ b.t + a.t
    return Pose(tuple(q), tuple(t), a.frame, b.child)


def look_at(eye, target, up=(0.0, 0.0, 1.0), frame="world", child="camera") -> Pose:
    """Camera pose with optical axis (+z) toward ``target``, +x right, +y down."""
    eye = np.asarray(eye, dtype=float)
    fwd = np.asarray(target, dtype=float) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=float))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.column_stack([right, down, fwd])
    return Pose.from_matrix(R, eye, frame, child)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered 3D points (metres) in a named frame.

    ``labels`` optionally tags each point with an instance id and
    ``viewpoint`` records the sensor origin in the same frame.
    """

    points: np.ndarray
    frame: str = "world"
    labels: np.ndarray | None = None
    viewpoint: np.ndarray | None = field(default=None)

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.int64).reshape(-1)
            if labels.shape[0] != pts.shape[0]:
                raise ValueError("labels must match the number of points")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)
        if self.viewpoint is not None:
            vp = np.array(self.viewpoint, dtype=float).reshape(3)
            vp.setflags(write=False)
            object.__setattr__(self, "viewpoint", vp)

    def __len__(self):
        return self.points.shape[0]

    def transformed(self, pose: Pose) -> PointCloud:
        """Express the cloud in ``pose.frame`` (``pose.child`` must match)."""
        if pose.child != self.frame:
            raise FrameMismatchError(f"cloud in {self.frame}, pose maps {pose.child}")
        vp = None if self.viewpoint is None else pose.apply(self.viewpoint[None])[0]
        return PointCloud(pose.apply(self.points), pose.frame, self.labels, vp)

    def subset(self, mask) -> PointCloud:
        labels = None if self.labels is None else self.labels[mask]
        return PointCloud(self.points[mask], self.frame, labels, self.viewpoint)

    @staticmethod
    def concatenate(clouds) -> PointCloud:
        clouds = list(clouds)
        if not clouds:
            return PointCloud(np.zeros((0, 3)))
        frames = {c.frame for c in clouds}
        if len(frames) != 1:
            raise FrameMismatchError(f"mixed frames {sorted(frames)}")
        pts = np.concatenate([c.points for c in clouds])
        labels = None
        if all(c.labels is not None for c in clouds):
            labels = np.concatenate([c.labels for c in clouds])
        return PointCloud(pts, clouds[0].frame, labels, clouds[0].viewpoint)
