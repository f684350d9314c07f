import itertools

import numpy as np
import pytest

from primgrasp.depth import backproject
from primgrasp.geometry import Pose, look_at
from primgrasp.shapes import PrimitiveShape, ShapeClass, grid_values
from primgrasp.synth import (SceneConfig, camera_rays, generate_scene, load_scene, partial_cloud, render,
                             sample_shape, save_scene)

SMALL = dict(width=80, height=60, intrinsics=(71.25, 71.25, 39.5, 29.5))


def down_camera(height):
    return Pose((0.0, 1.0, 0.0, 0.0), (0.0, 0.0, height), "world", "camera")


def test_sphere_grid_exact(rng):
    allowed = {round(0.020 + 0.002 * k, 6) for k in range(16)}
    for _ in range(200):
        r = sample_shape("sphere", rng).params["r"]
        assert round(r, 6) in allowed
        assert abs(r - round(r, 6)) < 1e-12


def test_ring_height_grid(rng):
    allowed = {round(0.008 + 0.001 * k, 6) for k in range(17)}
    for _ in range(200):
        assert round(sample_shape("ring", rng).params["h"], 6) in allowed


def test_cylinder_outer_ratio(rng):
    for _ in range(50):
        p = sample_shape("cylinder", rng).params
        assert p["r_out"] / p["r_in"] == pytest.approx(1.15, abs=1e-12)


def test_sphere_grid_coverage():
    rng = np.random.default_rng(7)
    seen = {round(sample_shape("sphere", rng).params["r"], 6) for _ in range(10_000)}
    assert seen == {round(v, 6) for v in grid_values(ShapeClass.SPHERE, "r")}
    assert len(seen) == 16


def test_sampled_params_inside_table(rng):
    for kind in ShapeClass:
        for _ in range(20):
            assert sample_shape(kind, rng).in_table_range() == []


def test_empty_table_from_one_metre():
    scene = render([], down_camera(1.0), dims=(32, 24), intrinsics=(30.0, 30.0, 15.5, 11.5))
    assert np.all(scene.depth.data == 1000)
    assert not scene.class_labels.any() and not scene.instance_labels.any()


def test_sphere_centre_pixel_depth():
    s = PrimitiveShape("sphere", {"r": 0.05}, Pose((1, 0, 0, 0), (0, 0, 0.5), "world", "shape"))
    cam = Pose.identity("world", "camera")
    scene = render([s], cam, (100.0, 100.0, 16.0, 12.0), (33, 25), table_height=None)
    assert scene.depth.data[12, 16] == 450
    assert scene.class_labels[12, 16] == ShapeClass.SPHERE.label
    assert scene.instance_labels[12, 16] == 1


def test_overlapping_shapes_nearest_hit_oracle():
    a = PrimitiveShape("cuboid", {"w": 0.1, "d": 0.08, "h": 0.06},
                       Pose((1, 0, 0, 0), (0.0, 0.0, 0.03), "world", "shape"))
    b = PrimitiveShape("cylinder", {"r_in": 0.03, "h": 0.1},
                       Pose((0.9238795325112867, 0.3826834323650898, 0, 0), (0.02, 0.01, 0.06),
                            "world", "shape"))
    cam = look_at((0.4, 0.1, 0.5), (0.0, 0.0, 0.03))
    intr, dims = (60.0, 60.0, 23.5, 17.5), (48, 36)
    scene = render([a, b], cam, intr, dims, table_height=0.0)
    origin, dirs = camera_rays(intr, dims, cam)
    for k, (u, v) in enumerate(itertools.product(range(dims[0]), range(dims[1]))):
        i = v * dims[0] + u
        d = dirs[i][None]
        o = origin[None]
        hits = [a.ray_hit(o, d)[0], b.ray_hit(o, d)[0]]
        t_table = -origin[2] / d[0, 2] if d[0, 2] < 0 else np.inf
        best = min(hits + [t_table])
        label = 0 if best == t_table or not np.isfinite(best) else int(np.argmin(hits)) + 1
        assert scene.instance_labels[v, u] == label
        expect = int(np.rint(best * 1000)) if np.isfinite(best) else 0
        assert scene.depth.data[v, u] == expect


def test_label_geometry_consistency():
    scene = generate_scene(SceneConfig(), np.random.default_rng(3))
    cloud = backproject(scene.depth, scene.camera_pose, labels=scene.instance_labels)
    for i, shape in scene.shapes:
        pts = cloud.points[cloud.labels == i]
        if len(pts):
            assert np.abs(shape.signed_distance(pts)).max() < 0.002
    # class raster agrees with the instance's class everywhere
    for i, shape in scene.shapes:
        assert np.all(scene.class_labels[scene.instance_labels == i] == shape.kind.label)
    assert set(np.unique(scene.instance_labels)) - {0} <= {i for i, _ in scene.shapes}


def test_generate_scene_deterministic():
    cfg = SceneConfig(**SMALL)
    a = generate_scene(cfg, np.random.default_rng(11))
    b = generate_scene(cfg, np.random.default_rng(11))
    assert a.depth == b.depth
    assert np.array_equal(a.instance_labels, b.instance_labels)
    assert a.shapes == b.shapes and a.camera_pose == b.camera_pose


def test_scene_has_one_shape_per_class():
    scene = generate_scene(SceneConfig(**SMALL), np.random.default_rng(0))
    assert sorted(s.kind.label for _, s in scene.shapes) == list(range(1, 7))


def test_scatter_respects_minimum_distance():
    cfg = SceneConfig(placement="scatter", **SMALL)
    for seed in range(100):
        scene = generate_scene(cfg, np.random.default_rng(seed))
        xy = np.array([s.center[:2] for _, s in scene.shapes])
        d = np.linalg.norm(xy[:, None] - xy[None], axis=-1)
        assert d[np.triu_indices(len(xy), 1)].min() >= cfg.scatter_min_distance - 1e-12


def test_cluster_flag_recorded():
    cfg = SceneConfig(placement="cluster", **SMALL)
    scene = generate_scene(cfg, np.random.default_rng(2))
    assert scene.config["placement_used"] == "cluster"


def test_resting_shapes_touch_table():
    cfg = SceneConfig(modes=("free_fall", "upright_on_table"), **SMALL)
    for seed in range(5):
        for _, s in generate_scene(cfg, np.random.default_rng(seed)).shapes:
            assert s.support((0.0, 0.0, -1.0)) == pytest.approx(-cfg.table_height, abs=1e-9)


def test_floating_shapes_above_table():
    cfg = SceneConfig(modes=("floating",), **SMALL)
    for _, s in generate_scene(cfg, np.random.default_rng(1)).shapes:
        assert -s.support((0.0, 0.0, -1.0)) >= cfg.table_height + cfg.floating_lift[0] - 1e-9


def test_scene_bundle_round_trip(tmp_path):
    scene = generate_scene(SceneConfig(**SMALL), np.random.default_rng(4))
    save_scene(tmp_path / "s", scene)
    back = load_scene(tmp_path / "s")
    assert back.depth == scene.depth
    assert np.array_equal(back.class_labels, scene.class_labels)
    assert back.shapes == scene.shapes and back.camera_pose == scene.camera_pose


def test_config_invariants():
    with pytest.raises(ValueError):
        SceneConfig(placement_sigma=0.0)
    with pytest.raises(ValueError):
        SceneConfig(cluster_ratio=(4, 0))
    assert SceneConfig.from_dict(SceneConfig().to_dict()) == SceneConfig()


def test_partial_cloud_shape_and_outliers():
    shape, cloud = partial_cloud("cylinder", 5, n_points=600, noise=0.0, outlier_fraction=0.0)
    assert len(cloud) == 600
    assert np.abs(shape.signed_distance(cloud.points)).max() < 1e-9
    assert shape.support((0, 0, -1)) == pytest.approx(0.0, abs=1e-9)
    shape, cloud = partial_cloud("cylinder", 5, n_points=600, outlier_fraction=0.1)
    far = np.abs(shape.signed_distance(cloud.points)) > 0.015
    assert 0.02 < far.mean() < 0.12
