"""Domain-randomized tabletop scenes rendered by analytic ray casting.

World frame: origin at the robot base, z up, table top at ``table_height``.
Shapes are placed around ``scene_center`` and rendered into 16-bit depth
plus per-pixel class and instance labels.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .depth import DEFAULT_DIMS, DEFAULT_INTRINSICS, DepthImage, load_depth, load_labels, save_depth, save_labels
from .errors import BundleError, PlacementError
from .geometry import PointCloud, Pose, axis_angle_quat, look_at
from .serialize import pose_from_dict, pose_to_dict, read_json, shape_from_dict, shape_to_dict, write_json
from .shapes import OUTER_RATIO, PARAM_GRID_MM, PrimitiveShape, ShapeClass, grid_values, shape_surface_sample

MODES = ("free_fall", "upright_on_table", "floating")


@dataclass(frozen=True)
class SceneConfig:
    elevation_deg: float = 42.3
    camera_distance: float = 0.9
    scene_center: tuple = (0.55, 0.0, 0.0)
    assistant_count: int = 4
    assistant_jitter_deg: float = 10.0
    assistant_jitter_m: float = 0.1
    camera: str = "random"  # random | principal
    table_height: float = 0.0
    placement_half_extent: float = 0.25
    placement_sigma: float = 0.15
    cluster_ratio: tuple = (4, 1)
    placement: str = "random"  # random | cluster | scatter
    scatter_min_distance: float = 0.10
    footprint_gap: float = 0.005
    modes: tuple = MODES
    floating_lift: tuple = (0.02, 0.10)
    classes: tuple = tuple(c.value for c in ShapeClass)
    width: int = DEFAULT_DIMS[0]
    height: int = DEFAULT_DIMS[1]
    intrinsics: tuple = DEFAULT_INTRINSICS
    max_retries: int = 200
    seed: int = 0

    def __post_init__(self):
        if not self.placement_sigma > 0:
            raise ValueError("placement_sigma must be positive")
        if len(self.cluster_ratio) != 2 or min(self.cluster_ratio) <= 0:
            raise ValueError("cluster_ratio needs two positive components")
        if not set(self.modes) <= set(MODES) or not self.modes:
            raise ValueError(f"modes must be drawn from {MODES}")
        if self.placement not in ("random", "cluster", "scatter"):
            raise ValueError("placement must be random, cluster or scatter")
        if self.camera not in ("random", "principal"):
            raise ValueError("camera must be random or principal")
        object.__setattr__(self, "classes", tuple(ShapeClass.parse(c).value for c in self.classes))
        for name in ("scene_center", "cluster_ratio", "modes", "floating_lift", "intrinsics"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def principal_camera(self) -> Pose:
        e = np.radians(self.elevation_deg)
        c = np.asarray(self.scene_center, dtype=float)
        eye = c + self.camera_distance * np.array([np.cos(e), 0.0, np.sin(e)])
        return look_at(eye, c)

    def assistant_camera(self, index: int, rng) -> Pose:
        """Principal camera swung about the scene's vertical, then jittered."""
        c = np.asarray(self.scene_center, dtype=float)
        az = 2.0 * np.pi * index / (self.assistant_count + 1)
        base = self.principal_camera()
        swing = axis_angle_quat((0.0, 0.0, 1.0), az)
        Rs = Rotation.from_quat(np.roll(swing, -1)).as_matrix()
        eye = c + Rs @ (base.t - c)
        eye = eye + rng.uniform(-self.assistant_jitter_m, self.assistant_jitter_m, 3)
        eye[2] = max(eye[2], self.table_height + 0.2)
        cam = look_at(eye, c)
        j = np.radians(self.assistant_jitter_deg)
        jitter = Rotation.from_euler("xyz", rng.uniform(-j, j, 3)).as_matrix()
        return Pose.from_matrix(cam.matrix @ jitter, cam.t, "world", "camera")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> SceneConfig:
        return cls(**data)


@dataclass(frozen=True, eq=False)
class LabeledScene:
    depth: DepthImage
    class_labels: np.ndarray
    instance_labels: np.ndarray
    shapes: list
    camera_pose: Pose
    config: dict = field(default_factory=dict)

    def shape_by_id(self, instance_id: int) -> PrimitiveShape:
        for i, s in self.shapes:
            if i == instance_id:
                return s
        raise KeyError(instance_id)

    def truth_dict(self) -> dict:
        return {"shapes": [{"id": int(i), "shape": shape_to_dict(s)} for i, s in self.shapes],
                "camera_pose": pose_to_dict(self.camera_pose), "config": self.config}


def sample_shape(kind, rng) -> PrimitiveShape:
    """Draw parameters uniformly from the class's grid; pose is identity."""
    kind = ShapeClass.parse(kind)
    params = {}
    for name in PARAM_GRID_MM[kind]:
        vals = grid_values(kind, name)
        params[name] = float(vals[rng.integers(len(vals))])
    if kind.tubular:
        params["r_out"] = OUTER_RATIO * params["r_in"]
    return PrimitiveShape(kind, params, Pose.identity("world", "shape"))


def _yaw(rng) -> np.ndarray:
    return Rotation.from_euler("z", rng.uniform(0.0, 2.0 * np.pi)).as_matrix()


def rest_orientation(shape: PrimitiveShape, mode: str, rng) -> np.ndarray:
    """Rotation of the shape frame for a drop mode, before translation."""
    if mode == "floating":
        return Rotation.random(random_state=rng).as_matrix()
    kind = shape.kind
    if kind == ShapeClass.SPHERE:
        return Rotation.random(random_state=rng).as_matrix()
    if kind == ShapeClass.SEMISPHERE:
        return _yaw(rng)
    if kind == ShapeClass.CUBOID:
        dims = [shape.params["w"], shape.params["d"], shape.params["h"]]
        low = int(np.argmin(dims))
        perm = {0: np.array([[0, 0, 1], [0, 1, 0], [-1, 0, 0]]),
                1: np.array([[1, 0, 0], [0, 0, 1], [0, -1, 0]]),
                2: np.eye(3)}[low]
        # perm maps the smallest local axis onto world z
        return _yaw(rng) @ perm.astype(float)
    if rng.random() < 0.5:  # end down
        return _yaw(rng)
    side = np.array([[1.0, 0, 0], [0, 0, 1], [0, -1, 0]])  # local z -> world +y
    return _yaw(rng) @ side


def _centered_support(shape: PrimitiveShape, R, direction) -> float:
    return float(shape.with_pose(Pose.from_matrix(R, (0, 0, 0), "world", "shape")).support(direction))


def _footprint(shape, R):
    """Axis-aligned xy footprint (-x, +x, -y, +y reach) of the oriented shape."""
    return np.array([_centered_support(shape, R, d) for d in
                     ((-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0))])


def _place_once(config: SceneConfig, kinds, rng):
    center = np.asarray(config.scene_center, dtype=float)
    half = config.placement_half_extent
    mode_flag = config.placement
    if mode_flag == "random":
        a, b = config.cluster_ratio
        mode_flag = "cluster" if rng.random() < a / (a + b) else "scatter"
    n = len(kinds)
    if mode_flag == "cluster":
        means = np.repeat(center[None, :2] + rng.uniform(-0.5 * half, 0.5 * half, 2), n, axis=0)
    else:
        means = center[None, :2] + rng.uniform(-half, half, (n, 2))
    shapes, boxes, centers = [], [], []
    for k, kind in enumerate(kinds):
        shape = sample_shape(kind, rng)
        mode = config.modes[rng.integers(len(config.modes))]
        R = rest_orientation(shape, mode, rng)
        reach = _footprint(shape, R)
        lowest = _centered_support(shape, R, (0, 0, -1))
        z = config.table_height + lowest
        if mode == "floating":
            z += rng.uniform(*config.floating_lift)
        lo_xy = center[:2] - half + reach[[0, 2]]
        hi_xy = center[:2] + half - reach[[1, 3]]
        if np.any(lo_xy > hi_xy):
            return None, mode_flag
        for _ in range(config.max_retries):
            xy = np.clip(rng.normal(means[k], config.placement_sigma), lo_xy, hi_xy)
            box = np.array([xy[0] - reach[0], xy[0] + reach[1], xy[1] - reach[2], xy[1] + reach[3]])
            gap = config.footprint_gap
            clash = any(box[0] < b[1] + gap and b[0] < box[1] + gap and
                        box[2] < b[3] + gap and b[2] < box[3] + gap for b in boxes)
            if mode_flag == "scatter":
                clash = clash or any(np.hypot(*(xy - c)) < config.scatter_min_distance for c in centers)
            if not clash:
                break
        else:
            return None, mode_flag
        boxes.append(box)
        centers.append(xy)
        pose = Pose.from_matrix(R, (xy[0], xy[1], z), "world", "shape")
        shapes.append(shape.with_pose(pose))
    return shapes, mode_flag


def generate_scene(config: SceneConfig, rng) -> LabeledScene:
    """One scene: each configured class once, in random order, placed and rendered."""
    kinds = [ShapeClass.parse(c) for c in config.classes]
    order = rng.permutation(len(kinds))
    kinds = [kinds[i] for i in order]
    for _ in range(20):
        shapes, flag = _place_once(config, kinds, rng)
        if shapes is not None:
            break
    else:
        raise PlacementError("could not place all shapes inside the workspace")
    cam_index = 0 if config.camera == "principal" else int(rng.integers(config.assistant_count + 1))
    camera = config.principal_camera() if cam_index == 0 else config.assistant_camera(cam_index, rng)
    scene = render(shapes, camera, config.intrinsics, (config.width, config.height),
                   table_height=config.table_height)
    echo = config.to_dict()
    echo["placement_used"] = flag
    echo["camera_index"] = cam_index
    return replace(scene, config=echo)


def camera_rays(intrinsics, dims, camera: Pose):
    """World origins and directions (camera-z component 1) for every pixel."""
    fx, fy, cx, cy = intrinsics
    w, h = dims
    v, u = np.mgrid[0:h, 0:w]
    d_cam = np.stack([(u - cx) / fx, (v - cy) / fy, np.ones((h, w))], axis=-1).reshape(-1, 3)
    return camera.t, d_cam @ camera.matrix.T


def render(shapes, camera: Pose, intrinsics=DEFAULT_INTRINSICS, dims=DEFAULT_DIMS,
           table_height=0.0, ids=None) -> LabeledScene:
    """Nearest-hit ray cast of the shapes and the table plane.

    ``table_height=None`` renders without a table.  Instance ids default to
    1..n in list order.
    """
    shapes = list(shapes)
    ids = list(range(1, len(shapes) + 1)) if ids is None else [int(i) for i in ids]
    w, h = dims
    origin, dirs = camera_rays(intrinsics, dims, camera)
    n = dirs.shape[0]
    best = np.full(n, np.inf)
    inst = np.zeros(n, dtype=np.int64)
    cls = np.zeros(n, dtype=np.int64)
    if table_height is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (table_height - origin[2]) / dirs[:, 2]
        best = np.where((t > 0) & np.isfinite(t), t, np.inf)
    to_c = origin - np.array([s.center for s in shapes]).reshape(-1, 3) if shapes else None
    for k, (sid, shape) in enumerate(zip(ids, shapes)):
        # cheap bounding-sphere cull before the exact test
        rad = shape.bounding_radius()
        oc = to_c[k]
        b = dirs @ oc
        a = np.einsum("ij,ij->i", dirs, dirs)
        near = b * b - a * (oc @ oc - rad * rad) >= 0
        if not near.any():
            continue
        t = np.full(n, np.inf)
        t[near] = shape.ray_hit(np.broadcast_to(origin, (int(near.sum()), 3)), dirs[near])
        closer = t < best
        best = np.where(closer, t, best)
        inst = np.where(closer, sid, inst)
        cls = np.where(closer, shape.kind.label, cls)
    mm = np.where(np.isfinite(best), np.rint(best * 1000.0), 0)
    mm = np.where(mm > 65535, 0, mm)
    depth = DepthImage(mm.reshape(h, w).astype(np.uint16), intrinsics)
    return LabeledScene(depth, cls.reshape(h, w), inst.reshape(h, w),
                        list(zip(ids, shapes)), camera)


def generate_scenes(config: SceneConfig, count: int, seed=None):
    """Independent scenes from child seeds of one root seed."""
    root = np.random.SeedSequence(config.seed if seed is None else seed)
    for child in root.spawn(count):
        yield generate_scene(config, np.random.default_rng(child))


def save_scene(directory, scene: LabeledScene) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_depth(d / "depth.pgm", scene.depth)
    save_labels(d / "class.pgm", scene.class_labels)
    save_labels(d / "instance.pgm", scene.instance_labels)
    write_json(d / "truth.json", scene.truth_dict())
    return d


def load_scene(directory) -> LabeledScene:
    d = Path(directory)
    for name in ("depth.pgm", "class.pgm", "instance.pgm"):
        if not (d / name).exists():
            raise BundleError(f"scene bundle {d} lacks {name}")
    depth = load_depth(d / "depth.pgm")
    cls = load_labels(d / "class.pgm")
    inst = load_labels(d / "instance.pgm")
    if cls.shape != depth.data.shape or inst.shape != depth.data.shape:
        raise BundleError(f"scene bundle {d}: raster sizes differ")
    shapes, camera, config = [], None, {}
    if (d / "truth.json").exists():
        truth = read_json(d / "truth.json")
        try:
            shapes = [(int(e["id"]), shape_from_dict(e["shape"])) for e in truth.get("shapes", [])]
            camera = pose_from_dict(truth["camera_pose"])
        except (KeyError, TypeError, ValueError) as exc:
            raise BundleError(f"scene bundle {d}: bad truth.json ({exc})") from exc
        config = truth.get("config", {})
    if camera is None:
        raise BundleError(f"scene bundle {d}: camera pose unavailable")
    return LabeledScene(depth, cls, inst, shapes, camera, config)


__all__ = ["SceneConfig", "LabeledScene", "sample_shape", "generate_scene", "render",
           "generate_scenes", "save_scene", "load_scene", "MODES"]


def partial_cloud(kind, seed, n_points: int = 1500, noise: float = 0.003,
                  outlier_fraction: float = 0.1, config: SceneConfig | None = None):
    """One resting shape seen from the principal camera, as a noisy point cloud.

    Surface points visible from the camera get Gaussian noise of std
    ``noise`` along their viewing ray; ``outlier_fraction`` of the cloud is
    drawn uniformly from a 0.2 m cube around the shape.  Returns
    ``(truth_shape, cloud)`` with the camera position as the viewpoint.
    """
    if not 0.0 <= outlier_fraction < 1.0:
        raise ValueError("outlier fraction must lie in [0, 1)")
    config = config or SceneConfig()
    rng = np.random.default_rng(seed)
    shape = sample_shape(kind, rng)
    R = rest_orientation(shape, "free_fall", rng)
    lift = _centered_support(shape, R, (0, 0, -1))
    cx, cy, _ = config.scene_center
    shape = shape.with_pose(Pose.from_matrix(R, (cx, cy, config.table_height + lift), "world", "shape"))
    eye = config.principal_camera().t
    n_in = int(round(n_points * (1.0 - outlier_fraction)))
    pts = shape.pose.apply(shape_surface_sample(shape, n_in, seed=seed, viewpoint=eye).points)
    rays = pts - eye
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    pts = pts + rays * rng.normal(0.0, noise, (len(pts), 1))
    outliers = shape.center + rng.uniform(-0.1, 0.1, (n_points - n_in, 3))
    return shape, PointCloud(np.vstack([pts, outliers]), "world", viewpoint=eye)
