import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from primgrasp.errors import FrameMismatchError
from primgrasp.geometry import (PointCloud, Pose, axis_angle_quat, canonical_quat, compose, look_at,
                                matrix_to_quat, quat_angle, quat_multiply, quat_to_matrix)

finite = st.floats(-1.0, 1.0, allow_nan=False)
quats = st.tuples(finite, finite, finite, finite).filter(
    lambda q: np.linalg.norm(q) > 0.1).map(lambda q: tuple(np.asarray(q) / np.linalg.norm(q)))
vecs = st.tuples(finite, finite, finite)


def poses(frame, child):
    return st.builds(lambda q, t: Pose(q, t, frame, child), quats, vecs)


def _close_pose(a, b, tol=1e-9):
    assert np.allclose(a.matrix, b.matrix, atol=tol)
    assert np.allclose(a.t, b.t, atol=tol)


def test_identity_compose_identity():
    i = Pose.identity()
    _close_pose(compose(i, i), i)


def test_quarter_turn_twice_is_half_turn():
    q = Pose(tuple(axis_angle_quat((0, 0, 1), math.pi / 2)))
    half = compose(q, q)
    assert np.allclose(half.apply([[1.0, 0.0, 0.0]]), [[-1.0, 0.0, 0.0]], atol=1e-12)
    assert quat_angle(half.quat) == pytest.approx(math.pi, abs=1e-9)


@given(poses("world", "shape"))
def test_pose_times_inverse_is_identity(p):
    _close_pose(compose(p, p.inverse()), Pose.identity("world"))
    assert abs(np.linalg.norm(p.quat) - 1.0) < 1e-9


@given(poses("a", "b"), poses("b", "c"), poses("c", "d"))
def test_compose_associative(a, b, c):
    _close_pose(compose(compose(a, b), c), compose(a, compose(b, c)))


@given(quats)
def test_quat_matrix_matches_scipy(q):
    w, x, y, z = q
    ref = Rotation.from_quat([x, y, z, w]).as_matrix()
    assert np.allclose(quat_to_matrix(q), ref, atol=1e-12)
    back = matrix_to_quat(ref)
    # q and -q are the same rotation
    assert min(np.abs(back - q).max(), np.abs(back + q).max()) < 1e-9
    assert back[0] >= 0


@given(quats, quats)
def test_quat_multiply_matches_matrix_product(a, b):
    assert np.allclose(quat_to_matrix(quat_multiply(a, b)), quat_to_matrix(a) @ quat_to_matrix(b), atol=1e-12)


def test_canonical_quat_hemisphere():
    assert tuple(canonical_quat([-1.0, 0, 0, 0])) == (1.0, 0.0, 0.0, 0.0)
    assert tuple(canonical_quat([0.0, -1.0, 0, 0])) == (0.0, 1.0, 0.0, 0.0)


def test_pose_rejects_non_unit_quaternion():
    with pytest.raises(ValueError):
        Pose((1.0, 1.0, 0.0, 0.0))


def test_compose_checks_frames():
    with pytest.raises(FrameMismatchError):
        compose(Pose.identity("world", "camera"), Pose.identity("shape", "gripper"))


def test_look_at_points_optical_axis_at_target():
    cam = look_at((1.0, 0.0, 1.0), (0.0, 0.0, 0.0))
    z = cam.matrix[:, 2]
    assert np.allclose(z, np.array([-1.0, 0.0, -1.0]) / math.sqrt(2))
    # image y points downward in the world
    assert cam.matrix[2, 1] < 0


def test_cloud_transform_and_frames():
    cloud = PointCloud([[0.0, 0.0, 1.0]], "camera", viewpoint=(0, 0, 0))
    pose = Pose((1.0, 0, 0, 0), (0.5, 0.0, 0.0), "world", "camera")
    moved = cloud.transformed(pose)
    assert moved.frame == "world"
    assert np.allclose(moved.points, [[0.5, 0.0, 1.0]])
    assert np.allclose(moved.viewpoint, [0.5, 0.0, 0.0])
    with pytest.raises(FrameMismatchError):
        cloud.transformed(Pose.identity("world", "shape"))


def test_cloud_rejects_non_finite():
    with pytest.raises(ValueError):
        PointCloud([[0.0, np.nan, 0.0]])
