import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from primgrasp.geometry import Pose
from primgrasp.gripper import GripperModel, points_in_box
from primgrasp.shapes import OUTER_RATIO, PrimitiveShape, ShapeClass, shape_surface_sample

SHAPES = [
    PrimitiveShape("sphere", {"r": 0.03}),
    PrimitiveShape("semisphere", {"r": 0.04}),
    PrimitiveShape("cylinder", {"r_in": 0.04, "h": 0.08}),
    PrimitiveShape("ring", {"r_in": 0.03, "h": 0.015}),
    PrimitiveShape("stick", {"r_in": 0.01, "h": 0.08}),
    PrimitiveShape("cuboid", {"w": 0.04, "d": 0.06, "h": 0.08}),
]


def test_sphere_samples_on_radius():
    s = PrimitiveShape("sphere", {"r": 0.03})
    pts = shape_surface_sample(s, 1000, seed=1).points
    assert np.allclose(np.linalg.norm(pts, axis=1), 0.03, atol=1e-9)


def test_cuboid_samples_on_exactly_one_face():
    s = PrimitiveShape("cuboid", {"w": 0.04, "d": 0.06, "h": 0.08})
    pts = shape_surface_sample(s, 1000, seed=2).points
    half = np.array([0.02, 0.03, 0.04])
    on_face = np.abs(np.abs(pts) - half) < 1e-9
    assert np.all(on_face.sum(axis=1) >= 1)
    # edges have measure zero; a random sample lands on one face only
    assert np.all(on_face.sum(axis=1) == 1)


def test_stick_samples_within_wall():
    s = PrimitiveShape("stick", {"r_in": 0.01, "h": 0.08})
    pts = shape_surface_sample(s, 1000, seed=3).points
    rho = np.hypot(pts[:, 0], pts[:, 1])
    assert rho.min() >= 0.01 - 1e-12
    assert rho.max() <= 0.0115 + 1e-12


@pytest.mark.parametrize("shape", SHAPES, ids=lambda s: s.kind.value)
def test_surface_samples_have_zero_signed_distance(shape):
    pose = Pose((0.5, 0.5, 0.5, 0.5), (0.1, -0.2, 0.3), "world", "shape")
    moved = shape.with_pose(pose)
    local = shape_surface_sample(moved, 500, seed=4).points
    assert np.abs(moved.signed_distance(pose.apply(local))).max() < 1e-9


@pytest.mark.parametrize("shape", SHAPES, ids=lambda s: s.kind.value)
def test_support_bounds_samples(shape):
    pts = shape_surface_sample(shape, 2000, seed=5).points
    rng = np.random.default_rng(0)
    for d in rng.normal(size=(10, 3)):
        d /= np.linalg.norm(d)
        assert (pts @ d).max() <= shape.support(d) + 1e-12


@pytest.mark.parametrize("shape", SHAPES, ids=lambda s: s.kind.value)
def test_ray_hit_lands_on_surface(shape):
    rng = np.random.default_rng(6)
    origins = rng.normal(size=(300, 3))
    origins = 0.5 * origins / np.linalg.norm(origins, axis=1, keepdims=True)
    targets = rng.uniform(-0.01, 0.01, (300, 3))
    dirs = targets - origins
    t = shape.ray_hit(origins, dirs)
    hit = np.isfinite(t)
    assert hit.sum() > 50
    p = origins[hit] + t[hit, None] * dirs[hit]
    assert np.abs(shape.signed_distance(p)).max() < 1e-9
    # nothing along the ray before the hit is inside the solid
    for frac in (0.25, 0.5, 0.9, 0.999):
        q = origins[hit] + (frac * t[hit])[:, None] * dirs[hit]
        assert shape.signed_distance(q).min() > -1e-9


def test_visible_sample_faces_viewpoint():
    s = PrimitiveShape("sphere", {"r": 0.03})
    cloud = shape_surface_sample(s, 400, seed=7, viewpoint=(0.0, 0.0, 1.0))
    assert len(cloud) == 400
    assert cloud.points[:, 2].min() > -1e-9


def test_tubular_default_outer_radius():
    s = PrimitiveShape("cylinder", {"r_in": 0.04, "h": 0.06})
    assert s.params["r_out"] == pytest.approx(OUTER_RATIO * 0.04, abs=1e-15)


def test_invalid_params_rejected():
    with pytest.raises(ValueError):
        PrimitiveShape("sphere", {"r": -0.01})
    with pytest.raises(ValueError):
        PrimitiveShape("ring", {"r_in": 0.03, "r_out": 0.02, "h": 0.01})
    with pytest.raises(ValueError):
        PrimitiveShape("cuboid", {"w": 0.1, "d": 0.1})


def test_class_labels_round_trip():
    for k in ShapeClass:
        assert ShapeClass.from_label(k.label) is k
        assert ShapeClass.parse(k.title) is k
    assert ShapeClass.parse("semi-sphere") is ShapeClass.SEMISPHERE


def test_opening_levels_invariant():
    with pytest.raises(ValueError):
        GripperModel(opening_levels=(0.03, 0.02, 0.09))
    with pytest.raises(ValueError):
        GripperModel(max_opening=0.08)


@given(st.floats(0.001, 0.1), st.integers(0, 2**31 - 1))
def test_closing_region_inside_open_volume(width, seed):
    g = GripperModel()
    rng = np.random.default_rng(seed)
    q = rng.normal(size=4)
    pose = Pose(tuple(q / np.linalg.norm(q)), tuple(rng.uniform(-1, 1, 3)), "world", "gripper")
    local = 0.999 * rng.uniform(-1, 1, (200, 3)) * g.closing_half_extents(width)
    world = pose.apply(local)
    assert points_in_box(world, pose, g.closing_half_extents(width)).all()
    assert points_in_box(world, pose, g.open_half_extents()).all()


def test_width_lookup():
    g = GripperModel()
    assert g.width_for(0.02) == 0.03  # 0.024 -> small
    assert g.width_for(0.025) == 0.03
    assert g.width_for(0.026) == 0.06
    assert g.width_for(0.08) == 0.10  # beyond the large level
