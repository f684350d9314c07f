"""Parametric primitive shapes.

Canonical local frames:

* Cylinder / Ring / Stick: hollow tube, symmetry axis = local z, centred at
  the origin, ``|z| <= h/2`` and ``r_in <= rho <= r_out``.
* Sphere: ball of radius ``r`` at the origin.
* SemiSphere: the ``z >= 0`` half ball; the flat face lies in the xy-plane.
* Cuboid: axis-aligned box with extents ``w`` (x), ``d`` (y), ``h`` (z).

All per-point helpers work on ``(..., 3)`` arrays in the local frame and take
parameters that broadcast against the leading dimensions, so the same code
serves the renderer, the fitter's batched hypotheses and the grasp generator.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import PointCloud, Pose

OUTER_RATIO = 1.15  # r_out / r_in for the cylinder-like classes


class ShapeClass(str, Enum):
    CYLINDER = "cylinder"
    RING = "ring"
    STICK = "stick"
    SPHERE = "sphere"
    SEMISPHERE = "semisphere"
    CUBOID = "cuboid"

    @property
    def label(self) -> int:
        return _ORDER.index(self) + 1

    @classmethod
    def from_label(cls, label: int) -> ShapeClass:
        return _ORDER[int(label) - 1]

    @classmethod
    def parse(cls, value) -> ShapeClass:
        if isinstance(value, ShapeClass):
            return value
        key = str(value).strip().lower().replace("-", "").replace("_", "")
        for member in cls:
            if member.value == key:
                return member
        raise ValueError(f"unknown shape class {value!r}")

    @property
    def tubular(self) -> bool:
        return self in (ShapeClass.CYLINDER, ShapeClass.RING, ShapeClass.STICK)

    @property
    def title(self) -> str:
        return _TITLES[self]


_ORDER = (ShapeClass.CYLINDER, ShapeClass.RING, ShapeClass.STICK,
          ShapeClass.SPHERE, ShapeClass.SEMISPHERE, ShapeClass.CUBOID)
_TITLES = {
    ShapeClass.CYLINDER: "Cylinder", ShapeClass.RING: "Ring",
    ShapeClass.STICK: "Stick", ShapeClass.SPHERE: "Sphere",
    ShapeClass.SEMISPHERE: "SemiSphere", ShapeClass.CUBOID: "Cuboid",
}

PARAM_NAMES = {
    ShapeClass.CYLINDER: ("r_in", "r_out", "h"),
    ShapeClass.RING: ("r_in", "r_out", "h"),
    ShapeClass.STICK: ("r_in", "r_out", "h"),
    ShapeClass.SPHERE: ("r",),
    ShapeClass.SEMISPHERE: ("r",),
    ShapeClass.CUBOID: ("h", "w", "d"),
}

# Table of sampling grids in millimetres: (min, max, step).
PARAM_GRID_MM = {
    ShapeClass.CYLINDER: {"r_in": (30, 70, 3), "h": (50, 100, 5)},
    ShapeClass.RING: {"r_in": (14, 40, 2), "h": (8, 24, 1)},
    ShapeClass.STICK: {"r_in": (8, 15, 1), "h": (40, 100, 5)},
    ShapeClass.SPHERE: {"r": (20, 50, 2)},
    ShapeClass.SEMISPHERE: {"r": (20, 50, 2)},
    ShapeClass.CUBOID: {"h": (20, 120, 5), "w": (20, 120, 5), "d": (20, 120, 5)},
}


def grid_values(kind: ShapeClass, name: str) -> np.ndarray:
    """Grid vertices (metres) of one sampled parameter."""
    lo, hi, step = PARAM_GRID_MM[kind][name]
    count = (hi - lo) // step + 1
    return np.array([(lo + k * step) / 1000.0 for k in range(count)])


@dataclass(frozen=True, eq=False)
class PrimitiveShape:
    kind: ShapeClass
    params: dict
    pose: Pose = field(default_factory=lambda: Pose.identity("world", "shape"))

    def __post_init__(self):
        kind = ShapeClass.parse(self.kind)
        object.__setattr__(self, "kind", kind)
        names = PARAM_NAMES[kind]
        params = dict(self.params)
        if kind.tubular and "r_out" not in params and "r_in" in params:
            params["r_out"] = OUTER_RATIO * float(params["r_in"])
        if set(params) != set(names):
            raise ValueError(f"{kind.value} needs parameters {names}, got {sorted(params)}")
        params = {k: float(params[k]) for k in names}
        for k, v in params.items():
            if not np.isfinite(v) or v <= 0:
                raise ValueError(f"{kind.value}.{k} must be positive, got {v}")
        if kind.tubular and params["r_out"] <= params["r_in"]:
            raise ValueError("r_out must exceed r_in")
        object.__setattr__(self, "params", params)

    def __eq__(self, other):
        return (isinstance(other, PrimitiveShape) and self.kind == other.kind
                and self.params == other.params and self.pose == other.pose)

    def __repr__(self):
        p = ", ".join(f"{k}={v:.4f}" for k, v in self.params.items())
        return f"PrimitiveShape({self.kind.value}, {p}, t={self.pose.translation})"

    @property
    def center(self) -> np.ndarray:
        return self.pose.t

    @property
    def axis(self) -> np.ndarray:
        """World direction of the local z axis."""
        return self.pose.matrix[:, 2]

    def local_param_array(self) -> np.ndarray:
        return np.array([self.params[k] for k in PARAM_NAMES[self.kind]])

    def to_local(self, points) -> np.ndarray:
        return self.pose.apply_inverse(points)

    def signed_distance(self, points) -> np.ndarray:
        """Signed distance (negative inside) of world points to the solid."""
        return sdf_local(self.kind, self.params, self.to_local(points))

    def support(self, direction) -> float:
        """max over solid points x of ``direction . x`` (world frame)."""
        d_local = self.pose.matrix.T @ np.asarray(direction, dtype=float)
        return float(support_local(self.kind, self.params, d_local) + np.dot(direction, self.center))

    def bounding_radius(self) -> float:
        p = self.params
        if self.kind in (ShapeClass.SPHERE, ShapeClass.SEMISPHERE):
            return p["r"]
        if self.kind.tubular:
            return float(np.hypot(p["r_out"], 0.5 * p["h"]))
        return 0.5 * float(np.linalg.norm([p["w"], p["d"], p["h"]]))

    def ray_hit(self, origins, directions) -> np.ndarray:
        """Ray parameter of the first hit (``inf`` on miss) for world rays."""
        R = self.pose.matrix
        o = (np.asarray(origins, dtype=float) - self.center) @ R
        d = np.asarray(directions, dtype=float) @ R
        return ray_hit_local(self.kind, self.params, o, d)

    def with_pose(self, pose: Pose) -> PrimitiveShape:
        return PrimitiveShape(self.kind, self.params, pose)

    def in_table_range(self) -> list[str]:
        """Names of parameters lying outside the sampling range."""
        out = []
        for name, (lo, hi, _) in PARAM_GRID_MM[self.kind].items():
            v = self.params[name] * 1000.0
            if v < lo - 1e-6 or v > hi + 1e-6:
                out.append(name)
        return out


def _param(params, name):
    return np.asarray(params[name], dtype=float)


def sdf_local(kind: ShapeClass, params, q) -> np.ndarray:
    """Exact signed distance of local points ``q`` (..., 3) to the solid."""
    q = np.asarray(q, dtype=float)
    x, y, z = q[..., 0], q[..., 1], q[..., 2]
    if kind == ShapeClass.SPHERE:
        return np.sqrt(x * x + y * y + z * z) - _param(params, "r")
    if kind == ShapeClass.SEMISPHERE:
        r = _param(params, "r")
        rho = np.sqrt(x * x + y * y)
        n = np.sqrt(rho * rho + z * z)
        above = z >= 0
        out_above = n - r
        below = np.sqrt(np.maximum(rho - r, 0.0) ** 2 + z * z)
        inside = -np.minimum(r - n, z)
        return np.where(above, np.where(n >= r, out_above, inside), below)
    if kind.tubular:
        r_in, r_out, h = _param(params, "r_in"), _param(params, "r_out"), _param(params, "h")
        rho = np.sqrt(x * x + y * y)
        dr = np.abs(rho - 0.5 * (r_in + r_out)) - 0.5 * (r_out - r_in)
        dz = np.abs(z) - 0.5 * h
        outside = np.hypot(np.maximum(dr, 0.0), np.maximum(dz, 0.0))
        return outside + np.minimum(np.maximum(dr, dz), 0.0)
    if kind == ShapeClass.CUBOID:
        half = np.stack([_param(params, "w"), _param(params, "d"), _param(params, "h")], -1) * 0.5
        qd = np.abs(q) - half
        outside = np.linalg.norm(np.maximum(qd, 0.0), axis=-1)
        return outside + np.minimum(np.max(qd, axis=-1), 0.0)
    raise ValueError(kind)


def support_local(kind: ShapeClass, params, d) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]
    if kind == ShapeClass.SPHERE:
        return _param(params, "r") * np.sqrt(dx * dx + dy * dy + dz * dz)
    if kind == ShapeClass.SEMISPHERE:
        r = _param(params, "r")
        return np.where(dz >= 0, r * np.sqrt(dx * dx + dy * dy + dz * dz),
                        r * np.sqrt(dx * dx + dy * dy))
    if kind.tubular:
        return 0.5 * _param(params, "h") * np.abs(dz) + _param(params, "r_out") * np.hypot(dx, dy)
    if kind == ShapeClass.CUBOID:
        return 0.5 * (_param(params, "w") * np.abs(dx) + _param(params, "d") * np.abs(dy)
                      + _param(params, "h") * np.abs(dz))
    raise ValueError(kind)


_T_MIN = 1e-9


def _quadratic_roots(a, b, c):
    disc = b * b - 4.0 * a * c
    ok = (disc >= 0) & (a > 1e-300)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    denom = np.where(ok, 2.0 * a, 1.0)
    t1 = np.where(ok, (-b - sq) / denom, np.inf)
    t2 = np.where(ok, (-b + sq) / denom, np.inf)
    return t1, t2


def _keep(t, valid):
    return np.where(valid & (t > _T_MIN), t, np.inf)


def ray_hit_local(kind: ShapeClass, params, o, d) -> np.ndarray:
    """First positive intersection of rays ``o + t d`` with the solid boundary."""
    o = np.asarray(o, dtype=float)
    d = np.asarray(d, dtype=float)
    ox, oy, oz = o[..., 0], o[..., 1], o[..., 2]
    dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        if kind in (ShapeClass.SPHERE, ShapeClass.SEMISPHERE):
            r = _param(params, "r")
            a = dx * dx + dy * dy + dz * dz
            b = 2.0 * (ox * dx + oy * dy + oz * dz)
            c = ox * ox + oy * oy + oz * oz - r * r
            t1, t2 = _quadratic_roots(a, b, c)
            if kind == ShapeClass.SPHERE:
                return np.minimum(_keep(t1, True), _keep(t2, True))
            z1 = oz + t1 * dz
            z2 = oz + t2 * dz
            tp = np.where(np.abs(dz) > 1e-300, -oz / dz, np.inf)
            px, py = ox + tp * dx, oy + tp * dy
            disk = np.isfinite(tp) & (px * px + py * py <= r * r)
            return np.minimum.reduce([_keep(t1, z1 >= 0), _keep(t2, z2 >= 0), _keep(tp, disk)])
        if kind.tubular:
            r_in, r_out, h = _param(params, "r_in"), _param(params, "r_out"), _param(params, "h")
            a = dx * dx + dy * dy
            b = 2.0 * (ox * dx + oy * dy)
            best = np.full(np.broadcast_shapes(ox.shape, r_in.shape), np.inf)
            for rad in (r_out, r_in):
                c = ox * ox + oy * oy - rad * rad
                for t in _quadratic_roots(a, b, c):
                    zt = oz + t * dz
                    best = np.minimum(best, _keep(t, np.abs(zt) <= 0.5 * h))
            for zc in (0.5 * h, -0.5 * h):
                tp = np.where(np.abs(dz) > 1e-300, (zc - oz) / dz, np.inf)
                px, py = ox + tp * dx, oy + tp * dy
                rr = px * px + py * py
                best = np.minimum(best, _keep(tp, np.isfinite(tp) & (rr <= r_out * r_out) & (rr >= r_in * r_in)))
            return best
        if kind == ShapeClass.CUBOID:
            half = np.stack([_param(params, "w"), _param(params, "d"), _param(params, "h")], -1) * 0.5
            inv = 1.0 / d
            t_lo = (-half - o) * inv
            t_hi = (half - o) * inv
            t_lo = np.where(np.isnan(t_lo), -np.inf, t_lo)
            t_hi = np.where(np.isnan(t_hi), np.inf, t_hi)
            tn = np.max(np.minimum(t_lo, t_hi), axis=-1)
            tf = np.min(np.maximum(t_lo, t_hi), axis=-1)
            hit = (tn <= tf) & (tf > _T_MIN)
            t = np.where(tn > _T_MIN, tn, tf)
            return np.where(hit, t, np.inf)
    raise ValueError(kind)


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_local(kind: ShapeClass, params, n: int, rng) -> np.ndarray:
    """Area-uniform samples on the full boundary of the solid (local frame)."""
    p = params
    if kind == ShapeClass.SPHERE:
        return p["r"] * _unit_vectors(rng, n)
    if kind == ShapeClass.SEMISPHERE:
        r = p["r"]
        areas = np.array([2.0, 1.0])  # dome 2 pi r^2, disk pi r^2
        piece = rng.choice(2, size=n, p=areas / areas.sum())
        dome = r * _unit_vectors(rng, n)
        dome[:, 2] = np.abs(dome[:, 2])
        rho = r * np.sqrt(rng.random(n))
        ang = rng.random(n) * 2.0 * np.pi
        disk = np.column_stack([rho * np.cos(ang), rho * np.sin(ang), np.zeros(n)])
        return np.where((piece == 0)[:, None], dome, disk)
    if kind.tubular:
        r_in, r_out, h = p["r_in"], p["r_out"], p["h"]
        ring_area = np.pi * (r_out ** 2 - r_in ** 2)
        areas = np.array([2 * np.pi * r_out * h, 2 * np.pi * r_in * h, ring_area, ring_area])
        piece = rng.choice(4, size=n, p=areas / areas.sum())
        ang = rng.random(n) * 2.0 * np.pi
        u = rng.random(n)
        zw = (u - 0.5) * h
        rho_cap = np.sqrt(u * (r_out ** 2 - r_in ** 2) + r_in ** 2)
        rho = np.select([piece == 0, piece == 1], [np.full(n, r_out), np.full(n, r_in)], rho_cap)
        z = np.select([piece <= 1, piece == 2], [zw, np.full(n, 0.5 * h)], np.full(n, -0.5 * h))
        return np.column_stack([rho * np.cos(ang), rho * np.sin(ang), z])
    if kind == ShapeClass.CUBOID:
        half = 0.5 * np.array([p["w"], p["d"], p["h"]])
        face_area = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
        areas = np.repeat(face_area, 2)
        face = rng.choice(6, size=n, p=areas / areas.sum())
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        pts = (rng.random((n, 3)) * 2.0 - 1.0) * half
        pts[np.arange(n), axis] = sign * half[axis]
        return pts
    raise ValueError(kind)


def shape_surface_sample(shape: PrimitiveShape, n: int, seed: int = 0,
                         viewpoint=None) -> PointCloud:
    """``n`` boundary points of ``shape`` expressed in the shape frame.

    Without ``viewpoint`` the whole boundary is sampled uniformly by area.
    With a world ``viewpoint`` only points visible from it are kept, which
    gives the partial view a depth sensor would see (self-occlusion only).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if viewpoint is None:
        return PointCloud(_sample_local(shape.kind, shape.params, n, rng), "shape")
    eye = np.asarray(viewpoint, dtype=float)
    kept = []
    total = 0
    for _ in range(50):
        local = _sample_local(shape.kind, shape.params, max(4 * n, 256), rng)
        world = shape.pose.apply(local)
        t = shape.ray_hit(np.broadcast_to(eye, world.shape), world - eye)
        vis = t >= 1.0 - 1e-7
        kept.append(local[vis])
        total += int(vis.sum())
        if total >= n:
            break
    pts = np.concatenate(kept)[:n]
    vp_local = shape.pose.apply_inverse(eye[None])[0]
    return PointCloud(pts, "shape", viewpoint=vp_local)
