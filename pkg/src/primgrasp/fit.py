"""Shape fitting on partial point clouds: PCA initialisation, batched RANSAC,
damped Gauss-Newton refinement.

Every class is scored with the exact signed distance of its solid, so one
inlier test (``|sdf| < threshold``) serves all six models.  Hypotheses are
drawn in fixed-size batches whose random streams derive from
``(seed, batch index)``, which makes a fit reproducible however the caller
schedules it.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DegenerateGeometryError, FitFailedError, InsufficientPointsError
from .geometry import PointCloud, Pose, frame_from_axes, orthonormal_basis
from .shapes import OUTER_RATIO, PrimitiveShape, ShapeClass, sdf_local, shape_surface_sample

log = logging.getLogger(__name__)

MIN_SAMPLE = {
    ShapeClass.SPHERE: 4, ShapeClass.SEMISPHERE: 4,
    ShapeClass.CYLINDER: 6, ShapeClass.RING: 6, ShapeClass.STICK: 6,
    ShapeClass.CUBOID: 9,
}
_MAX_SIZE = 0.5  # hypotheses larger than this (m) are discarded


@dataclass(frozen=True)
class RansacParams:
    threshold: float = 0.003
    iterations: int = 2000
    min_inlier_fraction: float = 0.5
    refine_steps: int = 10
    confidence: float = 0.999
    batch: int = 100
    max_points: int = 800
    refine_points: int = 3000
    normal_neighbors: int = 16
    seed: int = 0

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if self.iterations < 1 or self.batch < 1:
            raise ValueError("iterations and batch must be >= 1")
        if not 0 <= self.min_inlier_fraction <= 1:
            raise ValueError("min_inlier_fraction must lie in [0, 1]")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")


@dataclass(frozen=True)
class FitResult:
    shape: PrimitiveShape
    inlier_count: int
    inlier_fraction: float
    rms_residual: float
    warnings: tuple = field(default=())
    hypotheses: int = 0


def pca_axis(cloud):
    """Centroid, principal axes (rows, descending variance, right-handed) and extents."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    if len(pts) < 4:
        raise InsufficientPointsError("PCA needs at least 4 points")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    cov = centered.T @ centered / len(pts)
    vals, vecs = np.linalg.eigh(cov)
    if vals[-1] <= 1e-12 * max(1.0, float(np.abs(pts).max()) ** 2):
        raise DegenerateGeometryError("point covariance has rank 0")
    order = np.argsort(vals)[::-1]
    axes = vecs[:, order].T.copy()
    axes[2] = np.cross(axes[0], axes[1])
    proj = centered @ axes.T
    extents = proj.max(axis=0) - proj.min(axis=0)
    return centroid, axes, extents


def estimate_normals(points, k: int = 16, viewpoint=None) -> np.ndarray:
    """Unit normals from the smallest principal direction of k-neighbourhoods."""
    pts = np.asarray(points, dtype=float)
    k = int(min(max(k, 3), len(pts)))
    _, idx = cKDTree(pts).query(pts, k)
    nb = pts[idx] - pts[idx].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    if viewpoint is not None:
        flip = np.einsum("ij,ij->i", normals, np.asarray(viewpoint) - pts) < 0
        normals[flip] *= -1
    return normals


def count_inliers(shape: PrimitiveShape, cloud, threshold: float) -> int:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    return int(np.count_nonzero(np.abs(shape.signed_distance(pts)) < threshold))


# batched hypothesis helpers -------------------------------------------------

def _batch_sdf(kind, R, t, params, pts):
    """Signed distances (B, N) of ``pts`` to B hypotheses."""
    local = (pts[None, :, :] - t[:, None, :]) @ R
    return sdf_local(kind, {k: np.asarray(v)[:, None] for k, v in params.items()}, local)


def _batch_basis(axes):
    helper = np.where(np.abs(axes[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    e1 = np.cross(helper, axes)
    e1 /= np.maximum(np.linalg.norm(e1, axis=1, keepdims=True), 1e-12)  # zero axes are masked by callers
    e2 = np.cross(axes, e1)
    return e1, e2


def _row_quantiles(values, mask, qs):
    """Per-row quantiles of the masked entries (nearest rank); NaN when empty."""
    v = np.where(mask, values, np.inf)
    v.sort(axis=1)
    count = mask.sum(axis=1)
    out = []
    rows = np.arange(v.shape[0])
    for q in qs:
        i = np.clip(np.floor(q * (count - 1) + 0.5).astype(int), 0, v.shape[1] - 1)
        out.append(np.where(count > 0, v[rows, i], np.nan))
    return out, count


def _hyp_sphere(pts, normals, pca, rng, B, thr):
    idx = rng.integers(len(pts), size=(B, 4))
    p = pts[idx]
    A = 2.0 * (p[:, 1:] - p[:, :1])
    b = (p[:, 1:] ** 2).sum(-1) - (p[:, :1] ** 2).sum(-1)
    ok = np.abs(np.linalg.det(A)) > 1e-12
    A[~ok] = np.eye(3)
    c = np.linalg.solve(A, b[..., None])[..., 0]
    r = np.linalg.norm(p[:, 0] - c, axis=1)
    ok &= (r > 0.002) & (r < _MAX_SIZE)
    R = np.broadcast_to(np.eye(3), (B, 3, 3)).copy()
    return R[ok], c[ok], {"r": r[ok]}


def _hyp_tube(pts, normals, pca, rng, B, thr):
    n = len(pts)
    third = B // 3
    idx = rng.integers(n, size=(B, 3))
    pca_pick = rng.integers(3, size=third)
    axes_pca = pca[1][pca_pick]
    na, nb = normals[idx[third:2 * third, 0]], normals[idx[third:2 * third, 1]]
    axes_cross = np.cross(na, nb)
    axes_norm = normals[idx[2 * third:, 0]]
    axes = np.concatenate([axes_pca, axes_cross, axes_norm])
    length = np.linalg.norm(axes, axis=1)
    ok = length > 0.3
    axes = axes / np.maximum(length, 1e-12)[:, None]
    e1, e2 = _batch_basis(axes)
    p = pts[idx]
    u = np.einsum("bki,bi->bk", p, e1)
    v = np.einsum("bki,bi->bk", p, e2)
    ax, ay = u[:, 0], v[:, 0]
    bx, by = u[:, 1], v[:, 1]
    cx, cy = u[:, 2], v[:, 2]
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    ok &= np.abs(d) > 1e-12
    d = np.where(ok, d, 1.0)
    a2, b2, c2 = ax * ax + ay * ay, bx * bx + by * by, cx * cx + cy * cy
    ux = (a2 * (by - cy) + b2 * (cy - ay) + c2 * (ay - by)) / d
    uy = (a2 * (cx - bx) + b2 * (ax - cx) + c2 * (bx - ax)) / d
    rc = np.hypot(ax - ux, ay - uy)
    ok &= (rc > 0.002) & (rc < _MAX_SIZE)
    c0 = ux[:, None] * e1 + uy[:, None] * e2
    # the sampled wall may be the outer or the inner one
    axes2 = np.concatenate([axes, axes])
    c02 = np.concatenate([c0, c0])
    r_in = np.concatenate([rc / OUTER_RATIO, rc])
    ok2 = np.concatenate([ok, ok])
    axes2, c02, r_in = axes2[ok2], c02[ok2], r_in[ok2]
    r_out = OUTER_RATIO * r_in
    rel = pts[None] - c02[:, None]
    s = rel @ axes2[..., None]
    s = s[..., 0]
    rho = np.linalg.norm(rel - s[..., None] * axes2[:, None], axis=-1)
    band = (rho > r_in[:, None] - 2 * thr) & (rho < r_out[:, None] + 2 * thr)
    # inner quantiles of a uniform wall, scaled to its full length, are
    # less inflated by noise and outliers than the extremes
    (lo, hi), count = _row_quantiles(s, band, (0.1, 0.9))
    ok = (count >= 6) & np.isfinite(lo) & (hi - lo > 0.002)
    h = np.where(ok, (hi - lo) / 0.8, 1.0)
    center = c02 + (0.5 * np.nan_to_num(lo + hi))[:, None] * axes2
    e1, e2 = _batch_basis(axes2)
    R = np.stack([e1, e2, axes2], axis=-1)
    return R[ok], center[ok], {"r_in": r_in[ok], "r_out": r_out[ok], "h": h[ok]}


def _hyp_cuboid(pts, normals, pca, rng, B, thr):
    n = len(pts)
    idx = rng.integers(n, size=(B, 3))
    n1 = normals[idx[:, 0]].copy()
    nb = normals[idx[:, 1]]
    n2 = nb - np.einsum("bi,bi->b", nb, n1)[:, None] * n1
    ok = np.linalg.norm(n2, axis=1) > 0.5
    use_pca = np.zeros(B, dtype=bool)
    use_pca[: max(1, B // 10)] = True
    n1[use_pca] = pca[1][0]
    n2[use_pca] = pca[1][1]
    ok |= use_pca
    n2 = n2 / np.maximum(np.linalg.norm(n2, axis=1, keepdims=True), 1e-12)
    n3 = np.cross(n1, n2)
    R = np.stack([n1, n2, n3], axis=-1)
    offsets = np.stack([np.einsum("bi,bi->b", pts[idx[:, k]], R[:, :, k]) for k in range(3)], -1)
    X = pts[None] @ R  # (B, N, 3)
    near = np.min(np.abs(X - offsets[:, None, :]), axis=-1) < 2 * thr
    lo = np.empty((B, 3))
    hi = np.empty((B, 3))
    for k in range(3):
        (l, h), _ = _row_quantiles(X[..., k], near, (0.025, 0.975))
        lo[:, k], hi[:, k] = l, h
    ok &= np.all(np.isfinite(lo), axis=1) & (near.sum(axis=1) >= 9)
    lo = np.nan_to_num(lo)
    hi = np.nan_to_num(hi)
    # the face through each sampled point bounds its axis
    snap_lo = np.abs(offsets - lo) < np.abs(offsets - hi)
    lo = np.where(snap_lo, np.minimum(lo, offsets), lo)
    hi = np.where(~snap_lo, np.maximum(hi, offsets), hi)
    dims = hi - lo
    ok &= np.all(dims > 0.002, axis=1) & np.all(dims < _MAX_SIZE, axis=1)
    center = np.einsum("bij,bj->bi", R, 0.5 * (lo + hi))
    return R[ok], center[ok], {"w": dims[ok, 0], "d": dims[ok, 1], "h": dims[ok, 2]}


_GENERATORS = {
    ShapeClass.SPHERE: _hyp_sphere, ShapeClass.SEMISPHERE: _hyp_sphere,
    ShapeClass.CYLINDER: _hyp_tube, ShapeClass.RING: _hyp_tube, ShapeClass.STICK: _hyp_tube,
    ShapeClass.CUBOID: _hyp_cuboid,
}


# refinement -----------------------------------------------------------------

def _rodrigues(w):
    """Rotation matrices for a batch of rotation vectors (B, 3)."""
    theta = np.linalg.norm(w, axis=1)
    k = w / np.maximum(theta, 1e-300)[:, None]
    K = np.zeros((len(w), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -k[:, 2], k[:, 1]
    K[:, 1, 0], K[:, 1, 2] = k[:, 2], -k[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -k[:, 1], k[:, 0]
    s = np.sin(theta)[:, None, None]
    c = np.cos(theta)[:, None, None]
    return np.eye(3) + s * K + (1 - c) * (K @ K)


_FREE_PARAMS = {
    ShapeClass.SPHERE: ("r",), ShapeClass.SEMISPHERE: ("r",),
    ShapeClass.CYLINDER: ("r_in", "h"), ShapeClass.RING: ("r_in", "h"),
    ShapeClass.STICK: ("r_in", "h"), ShapeClass.CUBOID: ("w", "d", "h"),
}


def _unpack(kind, R0, t0, theta, trans_axes, rot_axes, names):
    """Poses and parameter dicts for a batch of parameter vectors."""
    B = theta.shape[0]
    nt, nr = len(trans_axes), len(rot_axes)
    dt = np.zeros((B, 3))
    for j, ax in enumerate(trans_axes):
        dt[:, ax] = theta[:, j]
    w = np.zeros((B, 3))
    for j, ax in enumerate(rot_axes):
        w[:, ax] = theta[:, nt + j]
    R = R0[None] @ _rodrigues(w)
    t = t0[None] + dt @ R0.T
    params = {name: theta[:, nt + nr + j] for j, name in enumerate(names)}
    return R, t, params


def refine(kind, R0, t0, params0, pts, steps=10, rot_axes=(0, 1, 2),
           trans_axes=(0, 1, 2), free=None, residual_fn=None):
    """Damped Gauss-Newton (Levenberg-Marquardt) on signed distances.

    Translation moves along the listed local axes, the orientation turns
    about ``rot_axes`` and only the parameters named in ``free`` change.
    ``residual_fn(R, t, params, pts)`` replaces the signed distance when
    given.  Returns ``(R, t, params)``.
    """
    names = _FREE_PARAMS[kind] if free is None else tuple(free)
    fixed = {k: v for k, v in params0.items() if k not in names}
    nt, nr = len(trans_axes), len(rot_axes)
    theta = np.concatenate([np.zeros(nt + nr), [params0[n] for n in names]])
    p = len(theta)
    mu = 1e-3
    scale = np.full(p, 1e-5)
    R0 = np.asarray(R0, dtype=float)
    t0 = np.asarray(t0, dtype=float)

    def build(th):
        R, t, prm = _unpack(kind, R0, t0, th, trans_axes, rot_axes, names)
        for k, v in fixed.items():
            prm[k] = np.full(len(th), v)
        if kind.tubular:
            prm["r_out"] = OUTER_RATIO * prm["r_in"]
        return R, t, prm

    def residual(th):
        if residual_fn is not None:
            return residual_fn(*build(th), pts)
        return _batch_sdf(kind, *build(th), pts)

    r0 = residual(theta[None])[0]
    cost = float(r0 @ r0)
    for _ in range(steps if p else 0):
        probe = theta[None] + np.diag(scale)
        J = ((residual(probe) - r0[None]) / scale[:, None]).T
        g = J.T @ r0
        H = J.T @ J
        improved = False
        for _ in range(6):
            A = H + mu * np.diag(np.diag(H) + 1e-12)
            try:
                step = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                mu *= 10
                continue
            cand = theta + step
            cand[nt + nr:] = np.maximum(cand[nt + nr:], 5e-4)
            rc = residual(cand[None])[0]
            c = float(rc @ rc)
            if c < cost:
                theta, r0, cost = cand, rc, c
                mu = max(mu / 3, 1e-9)
                improved = True
                break
            mu *= 4
        if not improved:
            break
    R, t, prm = build(theta[None])
    return R[0], t[0], {k: float(v[0]) for k, v in prm.items()}


# extent along a tube axis ---------------------------------------------------

_SQRT2PI = np.sqrt(2.0 * np.pi)


def _blurred_uniform_cdf(x, a, b, sig):
    """CDF of U[a, b] convolved with N(0, sig^2)."""
    from scipy.special import ndtr

    def ramp(z):
        return z * ndtr(z) + np.exp(-0.5 * z * z) / _SQRT2PI

    return sig * (ramp((x - a) / sig) - ramp((x - b) / sig)) / (b - a)


XATOL = 2e-5
# log sigma is scaled so the simplex tolerance means about 0.02 in log sigma
_LOG_SIGMA_SCALE = 1e-3


def axial_extent(s, thr, cap_end=1, init=None):
    """Robust ends ``(a, b)`` of a wall observed as axial coordinates ``s``.

    The histogram of ``s`` is modelled as a uniform wall on ``[a, b]`` plus
    a cap at the end facing the sensor (``cap_end``: +1 upper, -1 lower,
    0 both, None neither), blurred by Gaussian noise, over a flat background
    of outliers.
    Component weights are solved by non-negative least squares inside a
    Nelder-Mead search over ``(a, b, log sigma)``, started from ``init``
    when given and from a quantile guess when there is no ``init``, it
    overshoots the data or its search collapses; the lower cost wins.
    """
    from scipy.optimize import minimize, nnls
    from scipy.special import ndtr

    s = np.asarray(s, dtype=float)
    lo0, hi0 = (float(v) for v in np.quantile(s, [0.02, 0.98]))
    length = max(hi0 - lo0, 1e-3)
    margin = 0.02
    keep = (s > lo0 - margin) & (s < hi0 + margin)
    s = s[keep]
    width = float(np.clip(length / 120.0, 5e-5, 5e-4))
    edges = np.arange(lo0 - margin, hi0 + margin + width, width)
    counts, _ = np.histogram(s, edges)
    # Pearson-style weights from smoothed counts; raw counts bias the edges inward
    wts = 1.0 / np.sqrt(np.maximum(ndimage.gaussian_filter1d(counts.astype(float), 2.0), 1.0))
    ends = [] if cap_end is None else [e for e, on in ((-1, cap_end <= 0), (1, cap_end >= 0)) if on]

    # sigma is clamped rather than walled off: on clean data the cost keeps
    # falling as sigma shrinks, and a hard wall stalls the simplex there
    ls_lo, ls_hi = np.log(max(2e-5, 0.25 * width)), np.log(0.02)

    def design(x):
        a, b, ls = x
        sig = np.exp(np.clip(ls / _LOG_SIGMA_SCALE, ls_lo, ls_hi))
        cols = [np.diff(_blurred_uniform_cdf(edges, a, b, sig))]
        for e in ends:
            cols.append(np.diff(ndtr((edges - (b if e > 0 else a)) / sig)))
        cols.append(np.full(len(counts), width))
        return np.column_stack(cols)

    def cost(x):
        if x[1] - x[0] < 2e-4:
            return 1e18
        M = design(x) * wts[:, None]
        _, rnorm = nnls(M, counts * wts)
        return rnorm

    step = min(2e-3, 0.1 * length)

    def search(a0, b0):
        x0 = np.array([a0, b0, _LOG_SIGMA_SCALE * np.log(0.5 * thr)])
        return minimize(cost, x0, method="Nelder-Mead",
                        options={"xatol": XATOL, "fatol": 1e-4, "maxiter": 600,
                                 "initial_simplex": np.vstack([x0, x0 + np.diag([step, step, 0.5 * _LOG_SIGMA_SCALE])])})

    best = None
    if init is not None:
        best = search(float(init[0]), float(init[1]))
    # a warm start overshooting the data can stall on the flat background,
    # and a stale one can collapse inside the wall
    if (init is None or init[0] < lo0 - 2 * thr or init[1] > hi0 + 2 * thr
            or best.x[1] - best.x[0] < 0.5 * (init[1] - init[0])):
        res = search(lo0, hi0)
        if best is None or res.fun < best.fun:
            best = res
    return float(best.x[0]), float(best.x[1])


def _facing(local, vp_local):
    """Points whose radial direction faces the sensor (outer wall side)."""
    return np.einsum("...i,...i->...", local[..., :2], vp_local[..., None, :2] - local[..., :2]) > 0


def _tube_view_residual(vp):
    """Residual that measures outer-wall points against ``r_out`` and
    inner-wall points against ``r_in``, choosing the wall by which way the
    point faces the sensor, plus the cap at the sensor-facing end."""
    vp = np.asarray(vp, dtype=float)

    def fn(R, t, prm, pts):
        local = (pts[None] - t[:, None]) @ R
        vp_local = np.einsum("bi,bij->bj", vp - t, R)
        rho = np.linalg.norm(local[..., :2], axis=-1)
        r_in = prm["r_in"][:, None]
        r_out = prm["r_out"][:, None]
        wall = rho - np.where(_facing(local, vp_local), r_out, r_in)
        end = np.where(vp_local[:, 2] >= 0, 1.0, -1.0)[:, None]
        radial_out = np.maximum(np.maximum(rho - r_out, r_in - rho), 0.0)
        cap = np.hypot(end * local[..., 2] - 0.5 * prm["h"][:, None], radial_out)
        cap = np.where(end * local[..., 2] >= 0.5 * prm["h"][:, None], cap, -cap)
        return np.where(np.abs(cap) < np.abs(wall), cap, wall)

    return fn


def _tube_ends(kind, R, t, prm, pts, thr, vp=None, warm=False):
    """Re-estimate height and axial centre of a tube from its wall points.

    ``warm`` starts the profile fit from the current ends only.
    """
    axis = R[:, 2]
    rel = pts - t
    local = rel @ R
    rho = np.linalg.norm(local[:, :2], axis=1)
    s = local[:, 2]
    rm = 0.5 * (prm["r_in"] + prm["r_out"])
    hw = 0.5 * (prm["r_out"] - prm["r_in"])
    band = np.abs(rho - rm) - hw < 2.0 * thr
    cap_end = 0
    if vp is not None:
        vp_local = (np.asarray(vp) - t) @ R
        cap_end = 1 if vp_local[2] >= 0 else -1
        # The inner wall shows to a depth of 2 r_in |cot(theta)| below the
        # open end.  When that falls short of h, only the sensor-facing
        # wall has uniform density along the axis.
        view = vp_local / max(np.linalg.norm(vp_local), 1e-12)
        cos_t = abs(view[2])
        depth = 2.0 * prm["r_in"] * cos_t / max(np.sqrt(1.0 - cos_t ** 2), 1e-12)
        facing = band & _facing(local, vp_local)
        if depth < prm["h"] and facing.sum() >= 20:
            band = facing
    if band.sum() < 6:
        return t, prm
    init = (-0.5 * prm["h"], 0.5 * prm["h"]) if warm else None
    a, b = axial_extent(s[band], thr, cap_end, init=init)
    prm = dict(prm, h=max(b - a, 1e-3))
    return t + 0.5 * (a + b) * axis, prm


# semi-sphere orientation ----------------------------------------------------

def _fibonacci(n):
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    phi = np.pi * (1 + 5 ** 0.5) * i
    rr = np.sqrt(1 - z * z)
    return np.column_stack([rr * np.cos(phi), rr * np.sin(phi), z])


def _plane_ransac(pts, rng, thr, trials=64):
    idx = rng.integers(len(pts), size=(trials, 3))
    p = pts[idx]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    ln = np.linalg.norm(n, axis=1)
    ok = ln > 1e-9
    n = n[ok] / ln[ok, None]
    d = np.einsum("bi,bi->b", n, p[ok, 0])
    dist = np.abs(pts @ n.T - d[None])
    counts = (dist < thr).sum(axis=0)
    best = int(np.argmax(counts))
    mask = dist[:, best] < thr
    sel = pts[mask]
    c = sel.mean(axis=0)
    _, _, vt = np.linalg.svd(sel - c)
    return vt[2], c, mask


def _dome_axis(pts, center, r, viewpoint, thr):
    """Dome direction of a semi-sphere whose flat face is out of view.

    The visible part of the sphere is a cap around the viewpoint direction;
    the dome covers the half of it on the positive side of the axis.  The
    axis maximises the likelihood of the observed directions under a
    uniform density over that region with a noise-smoothed rim.
    """
    from scipy.optimize import minimize
    from scipy.special import log_ndtr, ndtr

    u = pts - center
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    mean_u = u.mean(axis=0)
    mean_u /= np.linalg.norm(mean_u)
    if viewpoint is None:
        return mean_u
    to_v = np.asarray(viewpoint) - center
    dist = np.linalg.norm(to_v)
    v = to_v / dist
    ref = mean_u - (mean_u @ v) * v
    if np.linalg.norm(ref) < 1e-9:
        ref = orthonormal_basis(v)[0]
    frame = frame_from_axes(ref, v)
    grid = _fibonacci(3000) @ frame.T
    grid = grid[grid @ v > min(r / dist, 0.999)]
    if len(grid) < 10:
        return mean_u
    e1, e2 = orthonormal_basis(mean_u)

    def axis_of(x):
        a = mean_u + x[0] * e1 + x[1] * e2
        return a / np.linalg.norm(a)

    def nll(x):
        a = axis_of(x)
        sig = np.exp(x[2])
        log_in = log_ndtr((u @ a) / sig)
        norm = np.mean(ndtr((grid @ a) / sig))
        return -(log_in.sum() - len(u) * np.log(norm + 1e-300))

    # start from the best of a ring of tilts to avoid the centroid's bias
    # toward the sensor
    ls0 = np.log(max(thr / r, 0.02))
    starts = [np.array([dx, dy, ls0]) for dx, dy in
              ((0.0, 0.0), (0.3, 0.0), (-0.3, 0.0), (0.0, 0.3), (0.0, -0.3))]
    starts.sort(key=nll)
    best = None
    for start in starts[:2]:
        res = minimize(nll, start, method="Nelder-Mead",
                       options={"xatol": 1e-4, "fatol": 1e-4, "maxiter": 400})
        if best is None or res.fun < best.fun:
            best = res
    return axis_of(best.x)


# canonical frames -----------------------------------------------------------

_UP = np.array([0.0, 0.0, 1.0])


def _tube_frame(axis, viewpoint=None, center=None):
    a = np.asarray(axis, dtype=float) / np.linalg.norm(axis)
    if abs(a[2]) > 1e-9:
        a = a if a[2] > 0 else -a
    elif viewpoint is not None and center is not None and np.dot(a, viewpoint - center) < 0:
        a = -a
    ref = _UP - (_UP @ a) * a
    if np.linalg.norm(ref) < 1e-6:
        ref = np.array([1.0, 0.0, 0.0])
    return frame_from_axes(ref, a)


def _axis_frame(axis):
    a = np.asarray(axis, dtype=float) / np.linalg.norm(axis)
    ref = _UP - (_UP @ a) * a
    if np.linalg.norm(ref) < 1e-6:
        ref = np.array([1.0, 0.0, 0.0])
    return frame_from_axes(ref, a)


def _canonical_cuboid(R, dims):
    """Reorder box axes so local z is the most vertical (pointing up)."""
    k = int(np.argmax(np.abs(R[2])))
    others = [i for i in range(3) if i != k]
    z = R[:, k] * (1 if R[2, k] >= 0 else -1)
    x = R[:, others[0]]
    Rn = np.column_stack([x, np.cross(z, x), z])
    w, d, h = dims[others[0]], dims[others[1]], dims[k]
    return Rn, {"w": w, "d": d, "h": h}


def _make_shape(kind, R, t, params, frame):
    pose = Pose.from_matrix(R, t, frame, "shape")
    return PrimitiveShape(kind, params, pose)


# main entry points ----------------------------------------------------------

def _subsample(pts, limit, rng):
    if len(pts) <= limit:
        return pts
    return pts[np.sort(rng.choice(len(pts), limit, replace=False))]


def ransac_fit(cloud: PointCloud, kind, params: RansacParams = RansacParams()) -> FitResult:
    """Fit one shape class to ``cloud`` (world frame result).

    Raises ``FitFailedError`` carrying the best result when its inlier
    fraction falls below ``params.min_inlier_fraction``.
    """
    kind = ShapeClass.parse(kind)
    pts_all = cloud.points
    n_all = len(pts_all)
    if n_all < MIN_SAMPLE[kind]:
        raise InsufficientPointsError(f"{kind.value} needs >= {MIN_SAMPLE[kind]} points, got {n_all}")
    thr = params.threshold
    vp = cloud.viewpoint
    pts = _subsample(pts_all, params.max_points, np.random.default_rng([params.seed, 7919]))
    normals = estimate_normals(pts, params.normal_neighbors, vp)
    try:
        pca = pca_axis(pts)
    except DegenerateGeometryError:
        pca = (pts.mean(axis=0), np.eye(3), np.zeros(3))
    gen = _GENERATORS[kind]
    score_kind = ShapeClass.SPHERE if kind == ShapeClass.SEMISPHERE else kind
    best = None
    # tubes keep runners-up: a hypothesis that swaps inner and outer wall
    # can outscore the right one before refinement
    keep = 4 if kind.tubular else 1
    top = []
    done = 0
    needed = params.iterations
    batch = 0
    m = MIN_SAMPLE[kind] if kind != ShapeClass.CUBOID else 3
    while done < min(params.iterations, needed):
        rng = np.random.default_rng([params.seed, batch])
        size = min(params.batch, params.iterations - done)
        R, t, prm = gen(pts, normals, pca, rng, size, thr)
        done += size
        batch += 1
        if len(t):
            d = np.abs(_batch_sdf(score_kind, R, t, prm, pts))
            inl = d < thr
            counts = inl.sum(axis=1)
            rms = np.sqrt((np.where(inl, d, 0.0) ** 2).sum(axis=1) / np.maximum(counts, 1))
            order = np.lexsort((rms, -counts))
            for i in order[:keep]:
                i = int(i)
                top.append(((int(counts[i]), -float(rms[i]), -len(top)), R[i], t[i],
                            {k: float(v[i]) for k, v in prm.items()}))
            top = sorted(top, key=lambda c: c[0], reverse=True)[:keep]
            best = top[0]
        if best is not None and best[0][0] > 0:
            w = best[0][0] / len(pts)
            pw = w ** m
            needed = 0 if pw >= 1 else int(np.ceil(np.log(1 - params.confidence) / np.log1p(-pw)))
            needed = max(needed, 2 * params.batch)
    if best is None:
        raise FitFailedError(f"no valid {kind.value} hypothesis")
    _, R, t, prm = best
    ref_rng = np.random.default_rng([params.seed, 104729])
    rpts = _subsample(pts_all, params.refine_points, ref_rng)
    if kind.tubular:
        # principal axes of the leading inlier set as extra axis guesses
        inl = np.abs(_batch_sdf(kind, R[None], t[None], {k: np.array([v]) for k, v in prm.items()},
                                pts))[0] < thr
        if inl.sum() >= 4:
            centroid, axes, _ = pca_axis(pts[inl])
            top = top + [(None, frame_from_axes(orthonormal_basis(a)[0], a), t, prm) for a in axes]
        R, t, prm = _pick_tube(kind, top, pts, vp, params)
    R, t, prm = _finish(kind, R, t, prm, rpts, vp, params, ref_rng)
    shape = _make_shape(kind, R, t, prm, cloud.frame)
    d = np.abs(shape.signed_distance(pts_all))
    inl = d < thr
    count = int(inl.sum())
    rms = float(np.sqrt(np.mean(d[inl] ** 2))) if count else 0.0
    warns = tuple(f"{kind.value}.{name} outside sampling range" for name in shape.in_table_range())
    for w_ in warns:
        log.warning(w_)
    result = FitResult(shape, count, count / n_all, rms, warns, done)
    if result.inlier_fraction < params.min_inlier_fraction:
        raise FitFailedError(
            f"{kind.value} fit reached inlier fraction {result.inlier_fraction:.3f}", result)
    return result


_EXTENT_REACH = 0.03


def _cuboid_extents(R, t, prm, pts, thr, vp):
    """Re-estimate each box dimension from the axial profile of its surface.

    Along any box axis at most one of the two faces is in view; the faces
    parallel to the axis cover it uniformly.
    """
    local = (pts - t) @ R
    band = np.abs(sdf_local(ShapeClass.CUBOID, prm, local)) < 2.0 * thr
    if band.sum() < 20:
        return t, prm
    names = ("w", "d", "h")
    vp_local = None if vp is None else (np.asarray(vp) - t) @ R
    shift = np.zeros(3)
    out = dict(prm)
    for i, name in enumerate(names):
        half = 0.5 * prm[name]
        if vp_local is None:
            cap = 0
        elif abs(vp_local[i]) > half:
            cap = 1 if vp_local[i] > 0 else -1
        else:
            cap = None
        # the hypothesis may cut a side face short; look past its ends
        longer = dict(prm, **{name: prm[name] + 2.0 * _EXTENT_REACH})
        sel = band | (np.abs(sdf_local(ShapeClass.CUBOID, longer, local)) < 2.0 * thr)
        a, b = axial_extent(local[sel, i], thr, cap, init=(-half, half))
        out[name] = max(b - a, 1e-3)
        shift[i] = 0.5 * (a + b)
    return t + R @ shift, out


def _pick_tube(kind, top, pts, vp, params):
    """Refine the radial geometry of each candidate; keep the most inliers."""
    thr = params.threshold
    best = None
    for _, R, t, prm in top:
        R = _tube_frame(R[:, 2], vp, t)
        sel = np.abs(sdf_local(kind, prm, (pts - t) @ R)) < 2.0 * thr
        if sel.sum() >= MIN_SAMPLE[kind]:
            R, t, prm = refine(kind, R, t, prm, pts[sel], params.refine_steps // 2 or 1,
                               rot_axes=(0, 1), trans_axes=(0, 1), free=("r_in",))
        count = int((np.abs(sdf_local(kind, prm, (pts - t) @ R)) < thr).sum())
        if best is None or count > best[0]:
            best = (count, R, t, prm)
    return best[1:]


def _finish(kind, R, t, prm, pts, vp, params, rng):
    """Orientation resolution, refinement and canonical framing of the best hypothesis."""
    thr = params.threshold
    band = 2.0 * thr
    steps = params.refine_steps
    if kind == ShapeClass.SPHERE:
        sel = np.abs(sdf_local(kind, prm, pts - t)) < band
        _, t, prm = refine(kind, np.eye(3), t, prm, pts[sel], steps, rot_axes=())
        return np.eye(3), t, prm
    if kind == ShapeClass.SEMISPHERE:
        return _finish_semisphere(t, prm, pts, vp, params, rng)
    if kind.tubular:
        R = _tube_frame(R[:, 2], vp, t)
        for rnd in range(2):
            # a wide first band lets the walls move off a rough hypothesis
            sel = np.abs(sdf_local(kind, prm, (pts - t) @ R)) < (2.0 if rnd == 0 else 1.0) * band
            if sel.sum() < MIN_SAMPLE[kind]:
                break
            # radial geometry first; the ends come from the axial profile.
            # A wall thinner than the inlier threshold leaves the hollow
            # distance flat across both walls, so pick the wall by view side.
            # On wide tubes a shrunken off-centre circle can straddle both
            # walls, so the last round tries both residuals.
            thin = prm["r_out"] - prm["r_in"] < thr
            fns = [_tube_view_residual(vp) if thin and vp is not None else None]
            if rnd > 0 and not thin and vp is not None:
                fns.append(_tube_view_residual(vp))
            best = None
            for fn in fns:
                cand = refine(kind, R, t, prm, pts[sel], steps // 2 or 1, rot_axes=(0, 1),
                              trans_axes=(0, 1), free=("r_in",), residual_fn=fn)
                count = int((np.abs(sdf_local(kind, cand[2], (pts - cand[1]) @ cand[0])) < thr).sum())
                if best is None or count > best[0]:
                    best = (count, cand)
            R, t, prm = best[1]
            t, prm = _tube_ends(kind, R, t, prm, pts, thr, vp, warm=rnd > 0)
        R = _tube_frame(R[:, 2], vp, t)
        return R, t, {"r_in": prm["r_in"], "r_out": OUTER_RATIO * prm["r_in"], "h": prm["h"]}
    for _ in range(2):
        sel = np.abs(sdf_local(kind, prm, (pts - t) @ R)) < band
        if sel.sum() < MIN_SAMPLE[kind]:
            break
        R, t, prm = refine(kind, R, t, prm, pts[sel], steps // 2 or 1)
    t, prm = _cuboid_extents(R, t, prm, pts, thr, vp)
    R, prm = _canonical_cuboid(R, [prm["w"], prm["d"], prm["h"]])
    return R, t, prm


def _finish_semisphere(t, prm, pts, vp, params, rng):
    thr = params.threshold
    band = 2.0 * thr
    steps = params.refine_steps
    sphere = {"r": prm["r"]}
    sd = sdf_local(ShapeClass.SPHERE, sphere, pts - t)
    shell = np.abs(sd) < band
    _, t, sphere = refine(ShapeClass.SPHERE, np.eye(3), t, sphere, pts[shell], steps, rot_axes=())
    sd = sdf_local(ShapeClass.SPHERE, sphere, pts - t)
    shell = np.abs(sd) < band
    inside = pts[sd < -band]
    if len(inside) >= max(10, 0.1 * shell.sum()):
        n, c_plane, mask = _plane_ransac(inside, rng, thr)
        if mask.sum() >= 0.6 * len(inside):
            # flat face in view: its plane fixes the axis and the centre
            axis = n if np.mean((pts[shell] - t) @ n) > 0 else -n
            t = t - ((t - c_plane) @ axis) * axis
            R = _axis_frame(axis)
            kind = ShapeClass.SEMISPHERE
            sel = np.abs(sdf_local(kind, sphere, (pts - t) @ R)) < band
            R, t, sphere = refine(kind, R, t, sphere, pts[sel], steps, rot_axes=(0, 1))
            return _axis_frame(R[:, 2]), t, sphere
    axis = _dome_axis(pts[shell], t, sphere["r"], vp, thr)
    return _axis_frame(axis), t, sphere


def _coverage(shape: PrimitiveShape, cloud: PointCloud, thr: float) -> float:
    """Fraction of the model's sensor-visible surface backed by cloud points."""
    if cloud.viewpoint is None:
        return 0.0
    local = shape_surface_sample(shape, 300, seed=0, viewpoint=cloud.viewpoint).points
    world = shape.pose.apply(local)
    tree = cKDTree(cloud.points)
    spacing = np.median(tree.query(cloud.points[:500], 2)[0][:, 1])
    d, _ = tree.query(world)
    return float(np.mean(d < max(2 * thr, 3 * spacing)))


def classify_and_fit(cloud: PointCloud, hypothesized_class,
                     params: RansacParams = RansacParams(), tie_margin: float = 0.05) -> FitResult:
    """Fit the labelled class; on failure try every class and keep the best.

    Fallback candidates within ``tie_margin`` of the best inlier fraction are
    separated by how much of their visible surface the cloud covers, then by
    sampling-range membership, then by class order.
    """
    if len(cloud) == 0:
        raise InsufficientPointsError("empty cloud")
    kind = ShapeClass.parse(hypothesized_class)
    try:
        return ransac_fit(cloud, kind, params)
    except (FitFailedError, InsufficientPointsError) as exc:
        log.info("fit as %s failed (%s); trying all classes", kind.value, exc)
    results = []
    for other in ShapeClass:
        try:
            results.append(ransac_fit(cloud, other, params))
        except FitFailedError as exc:
            if exc.result is not None:
                results.append(exc.result)
        except (InsufficientPointsError, DegenerateGeometryError):
            continue
    if not results:
        raise FitFailedError("no class produced a hypothesis")
    top = max(r.inlier_fraction for r in results)
    close = [r for r in results if r.inlier_fraction >= top - tie_margin]

    def key(r):
        return (-round(_coverage(r.shape, cloud, params.threshold), 2),
                len(r.shape.in_table_range()), r.shape.kind.label)

    best = min(close, key=key)
    if best.inlier_fraction < params.min_inlier_fraction:
        raise FitFailedError(f"best class {best.shape.kind.value} reached "
                             f"{best.inlier_fraction:.3f}", best)
    return best
