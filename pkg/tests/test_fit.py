import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from primgrasp.errors import DegenerateGeometryError, FitFailedError, InsufficientPointsError
from primgrasp.fit import (RansacParams, axial_extent, classify_and_fit, count_inliers, estimate_normals,
                           pca_axis, ransac_fit)
from primgrasp.geometry import PointCloud, Pose, axis_angle_quat
from primgrasp.metrics import shape_errors
from primgrasp.shapes import PrimitiveShape, ShapeClass, shape_surface_sample
from primgrasp.synth import partial_cloud

FAST = RansacParams(iterations=600)


def world_cloud(shape, n, seed, viewpoint=None, noise=0.0, outliers=0.0):
    local = shape_surface_sample(shape, n, seed=seed, viewpoint=viewpoint)
    pts = shape.pose.apply(local.points)
    rng = np.random.default_rng(seed + 1)
    if noise:
        pts = pts + rng.normal(0.0, noise, pts.shape)
    if outliers:
        k = int(round(outliers * len(pts) / (1 - outliers)))
        pts = np.vstack([pts, shape.center + rng.uniform(-0.1, 0.1, (k, 3))])
    return PointCloud(pts, "world", viewpoint=viewpoint)


def test_pca_line_along_z():
    pts = np.column_stack([np.zeros(20), np.zeros(20), np.linspace(0, 1, 20)])
    _, axes, _ = pca_axis(pts)
    assert abs(abs(axes[0] @ [0, 0, 1]) - 1) < 1e-12


def test_pca_cylinder_axis():
    q = axis_angle_quat((1.0, 1.0, 0.0), 0.7)
    s = PrimitiveShape("cylinder", {"r_in": 0.01, "h": 0.2}, Pose(tuple(q), (0, 0, 0), "world", "shape"))
    _, axes, _ = pca_axis(world_cloud(s, 2000, 1))
    assert np.degrees(np.arccos(min(1.0, abs(axes[0] @ s.axis)))) < 5


def test_pca_sphere_isotropic():
    s = PrimitiveShape("sphere", {"r": 0.03})
    _, axes, ext = pca_axis(world_cloud(s, 3000, 2))
    assert ext.max() / ext.min() < 1.1
    assert np.allclose(axes @ axes.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(axes) == pytest.approx(1.0)


def test_pca_degenerate():
    with pytest.raises(DegenerateGeometryError):
        pca_axis(np.ones((10, 3)))
    with pytest.raises(InsufficientPointsError):
        pca_axis(np.zeros((3, 3)))


def test_normals_face_viewpoint():
    s = PrimitiveShape("sphere", {"r": 0.05})
    cloud = world_cloud(s, 800, 3, viewpoint=(0, 0, 1))
    n = estimate_normals(cloud.points, 16, cloud.viewpoint)
    radial = cloud.points / np.linalg.norm(cloud.points, axis=1, keepdims=True)
    assert np.median(np.einsum("ij,ij->i", n, radial)) > 0.99


def test_sphere_noise_free():
    s = PrimitiveShape("sphere", {"r": 0.03}, Pose((1, 0, 0, 0), (0.5, 0.1, 0.2), "world", "shape"))
    fit = ransac_fit(world_cloud(s, 1000, 4), "sphere", FAST)
    assert abs(fit.shape.params["r"] - 0.03) < 1e-3
    assert np.linalg.norm(fit.shape.center - s.center) < 1e-3
    assert fit.inlier_fraction == pytest.approx(1.0)


def test_sphere_with_outliers():
    s = PrimitiveShape("sphere", {"r": 0.03}, Pose((1, 0, 0, 0), (0.5, 0.1, 0.2), "world", "shape"))
    fit = ransac_fit(world_cloud(s, 1000, 5, outliers=0.2), "sphere", FAST)
    assert abs(fit.shape.params["r"] - 0.03) < 1e-3
    assert np.linalg.norm(fit.shape.center - s.center) < 1e-3
    assert 0.75 < fit.inlier_fraction < 0.85


def test_too_few_points():
    with pytest.raises(InsufficientPointsError):
        ransac_fit(PointCloud(np.eye(3)), "sphere")


@pytest.mark.parametrize("kind", [k.value for k in ShapeClass])
def test_visible_clouds_recovered(kind):
    for seed in range(3):
        truth, cloud = partial_cloud(kind, 100 + seed, noise=0.0, outlier_fraction=0.0)
        fit = ransac_fit(cloud, kind, FAST)
        perr, aerr = shape_errors(truth, fit.shape)
        assert perr < 0.05 and aerr < 5.0, (seed, perr, aerr)


@pytest.mark.parametrize("kind", ["cylinder", "semisphere", "cuboid"])
def test_rigid_invariance(kind):
    truth, cloud = partial_cloud(kind, 7, noise=0.001, outlier_fraction=0.0)
    a = ransac_fit(cloud, kind, FAST)
    move = Pose(tuple(axis_angle_quat((0.3, -0.2, 1.0), 1.1)), (0.2, -0.1, 0.05), "world", "world")
    moved = PointCloud(move.apply(cloud.points), "world", viewpoint=move.apply(cloud.viewpoint[None])[0])
    b = ransac_fit(moved, kind, FAST)
    pa, pb = a.shape.local_param_array(), b.shape.local_param_array()
    if kind == "cuboid":
        pa, pb = np.sort(pa), np.sort(pb)
    # the same random draws see rotated points, so agreement is to
    # numerical precision of the refinement, not bitwise
    assert np.allclose(pa, pb, atol=2e-4)
    assert np.linalg.norm(move.apply(a.shape.center[None])[0] - b.shape.center) < 1e-3


@settings(max_examples=20)
@given(st.floats(0.0005, 0.01), st.floats(0.0005, 0.01))
def test_inlier_count_monotone_in_threshold(t1, t2):
    s = PrimitiveShape("cylinder", {"r_in": 0.03, "h": 0.06})
    cloud = world_cloud(s, 500, 9, noise=0.003)
    lo, hi = sorted((t1, t2))
    assert count_inliers(s, cloud, lo) <= count_inliers(s, cloud, hi)


def test_semisphere_labelled_correctly():
    truth, cloud = partial_cloud("semisphere", 3, noise=0.0, outlier_fraction=0.0)
    fit = classify_and_fit(cloud, "semisphere", FAST)
    assert fit.shape.kind == ShapeClass.SEMISPHERE
    assert fit.inlier_fraction > 0.9


def test_semisphere_mislabelled_cuboid_falls_back():
    truth, cloud = partial_cloud("semisphere", 3, noise=0.0, outlier_fraction=0.0)
    with pytest.raises(FitFailedError):
        ransac_fit(cloud, "cuboid", FAST)
    fit = classify_and_fit(cloud, "cuboid", FAST)
    assert fit.shape.kind == ShapeClass.SEMISPHERE


def test_classify_empty_cloud():
    with pytest.raises(InsufficientPointsError):
        classify_and_fit(PointCloud(np.zeros((0, 3))), "sphere")


def test_fit_is_seed_deterministic():
    truth, cloud = partial_cloud("ring", 12)
    a = ransac_fit(cloud, "ring", FAST)
    b = ransac_fit(cloud, "ring", FAST)
    assert a.shape == b.shape and a.inlier_count == b.inlier_count


def test_axial_extent_recovers_blurred_wall():
    rng = np.random.default_rng(0)
    s = np.concatenate([rng.uniform(-0.03, 0.05, 4000) + rng.normal(0, 0.003, 4000),
                        rng.uniform(-0.1, 0.1, 400)])
    a, b = axial_extent(s, 0.003, cap_end=None)
    assert abs(a + 0.03) < 1.5e-3 and abs(b - 0.05) < 1.5e-3


def test_ransac_params_validation():
    with pytest.raises(ValueError):
        RansacParams(threshold=0)
    with pytest.raises(ValueError):
        RansacParams(confidence=1.0)
