"""Grasp scoring, gating, ranking and feasibility-driven selection.

Each candidate gets a rotation cost (weighted L1 norm of the quaternion
vector part), a translation cost (distance from the robot base), an
occupancy count (target points between the jaws) and two binary gates for
dimension and collision.  Rotation and translation costs are normalized to
scores over the whole request, then combined as

    gamma = (lambda_r * s_rot + lambda_t * s_trans + lambda_o * s_occ) * s_dim * s_col
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import NoFeasibleGraspError
from .families import GraspCandidate
from .geometry import PointCloud, quat_multiply
from .gripper import GripperModel, ScoringWeights, points_in_box

_UNIT_TOL = 1e-6
IDENTITY_QUAT = (1.0, 0.0, 0.0, 0.0)
TIE_TOLERANCE = 1e-12  # relative spread below which costs count as equal


def rotation_cost(q, omega=(1.0, 1.0, 1.0)) -> float:
    """``sum_i omega_i |q_i|`` over the vector part of a unit quaternion ``(w, x, y, z)``."""
    q = np.asarray(q, dtype=float)
    if q.shape != (4,) or abs(float(np.linalg.norm(q)) - 1.0) > _UNIT_TOL:
        raise ValueError("rotation cost needs a unit quaternion (w, x, y, z)")
    w = (0.0,) + tuple(float(v) for v in omega)
    return float(sum(abs(wi * qi) for wi, qi in zip(w, q)))


def translation_cost(t) -> float:
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)):
        raise ValueError("translation must be finite")
    return float(np.linalg.norm(t))


def normalize_scores(costs) -> np.ndarray:
    """Map costs onto [0, 1] with the cheapest at 1; equal costs all score 1.

    Costs closer than ``TIE_TOLERANCE`` relative to their magnitude count as
    equal, so rounding noise between symmetric candidates cannot split them.
    """
    c = np.asarray(costs, dtype=float)
    if c.size == 0:
        raise ValueError("normalization needs at least one cost")
    lo, hi = c.min(), c.max()
    if hi - lo <= TIE_TOLERANCE * max(1.0, abs(lo), abs(hi)):
        return np.ones_like(c)
    return 1.0 - (c - lo) / (hi - lo)


def _points(cloud):
    if cloud is None:
        return np.empty((0, 3))
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float).reshape(-1, 3)


def occupancy(candidate: GraspCandidate, cloud, gripper: GripperModel = GripperModel()) -> int:
    """Number of cloud points inside the closing region at the assigned width."""
    pts = _points(cloud)
    if not len(pts):
        return 0
    half = gripper.closing_half_extents(candidate.opening_width)
    return int(points_in_box(pts, candidate.pose, half).sum())


def _box_below(pose, half, center, height) -> bool:
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    corners = pose.apply(np.asarray(center) + signs * half)
    return bool(corners[:, 2].min() < height)


def gate(candidate: GraspCandidate, shape, scene_cloud, gripper: GripperModel = GripperModel(),
         target_cloud=None, table_height: float = 0.0, _tree=None):
    """``(s_dim, s_col)`` of a candidate.

    ``s_dim`` is 0 when the closing dimension (from ``shape`` or else the
    candidate's own record) exceeds the maximal opening.  ``s_col`` is 0
    when a scene point other than the target's closing-region points, or
    the half-space below the table, meets the open gripper volume.
    """
    if shape is not None:
        from .families import closing_dimension, family_from_tag

        dim = closing_dimension(shape, family_from_tag(candidate.family))
    else:
        dim = candidate.closing_dim
    s_dim = 0 if dim > gripper.max_opening else 1
    half = gripper.open_half_extents()
    if _box_below(candidate.pose, half, (0.0, 0.0, 0.0), table_height):
        return s_dim, 0
    pts = _points(scene_cloud)
    if len(pts):
        if _tree is not None:
            idx = _tree.query_ball_point(candidate.pose.t, float(np.linalg.norm(half)))
            pts = pts[np.sort(np.asarray(idx, dtype=int))]
        hit = points_in_box(pts, candidate.pose, half)
        if hit.any():
            own = _points(target_cloud)
            if len(own):
                inside = own[points_in_box(own, candidate.pose,
                                           gripper.closing_half_extents(candidate.opening_width))]
                if len(inside):
                    # drop scene points that coincide with the target's own
                    # closing-region points
                    d, _ = cKDTree(inside).query(pts[hit], distance_upper_bound=1e-9)
                    if np.all(np.isfinite(d)):
                        return s_dim, 1
            return s_dim, 0
    return s_dim, 1


@dataclass(frozen=True)
class Workspace:
    """Axis-aligned reachable box for grasp origins plus approach corridor length."""

    lo: tuple = (0.15, -0.45, 0.0)
    hi: tuple = (1.0, 0.45, 0.6)
    corridor: float = 0.10

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))
        if len(self.lo) != 3 or len(self.hi) != 3 or not all(a < b for a, b in zip(self.lo, self.hi)):
            raise ValueError("workspace needs lo < hi in every axis")
        if self.corridor < 0:
            raise ValueError("corridor length must be >= 0")

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.lo) and np.all(p <= self.hi))


def feasible(candidate: GraspCandidate, scene_cloud, gripper: GripperModel = GripperModel(),
             workspace: Workspace = Workspace(), table_height: float = 0.0, _tree=None) -> bool:
    """Stand-in for a motion plan: origin inside the workspace and a clear
    straight approach corridor behind the open gripper."""
    if not workspace.contains(candidate.pose.t):
        return False
    if workspace.corridor <= 0:
        return True
    half = gripper.corridor_half_extents(workspace.corridor)
    center = (0.0, 0.0, 0.5 * gripper.finger_length + 0.5 * workspace.corridor)
    if _box_below(candidate.pose, half, center, table_height):
        return False
    pts = _points(scene_cloud)
    if not len(pts):
        return True
    if _tree is not None:
        mid = candidate.pose.apply(np.asarray(center)[None])[0]
        pts = pts[np.asarray(_tree.query_ball_point(mid, float(np.linalg.norm(half))), dtype=int)]
    return not bool(points_in_box(pts, candidate.pose, half, center).any())


@dataclass(frozen=True)
class ScoredGrasp:
    candidate: GraspCandidate
    c_rot: float
    c_trans: float
    s_rot: float
    s_trans: float
    s_occ: int
    s_dim: int
    s_col: int
    gamma: float
    rank: int = 0


def composite_score(s_rot, s_trans, s_occ, s_dim, s_col, weights: ScoringWeights) -> float:
    return (weights.lambda_r * s_rot + weights.lambda_t * s_trans + weights.lambda_o * s_occ) * s_dim * s_col


@dataclass(frozen=True)
class RankResult:
    ranked: tuple
    selected: int | None  # index into ``ranked``

    @property
    def best(self) -> ScoredGrasp:
        if self.selected is None:
            raise NoFeasibleGraspError("no candidate passed gating and feasibility")
        return self.ranked[self.selected]


def _relative_quat(q, reference):
    ref = np.asarray(reference, dtype=float)
    conj = np.array([ref[0], -ref[1], -ref[2], -ref[3]])
    out = quat_multiply(conj, q)
    return out / np.linalg.norm(out)


def rank_and_select(candidates, clouds, scene_cloud, gripper: GripperModel = GripperModel(),
                    weights: ScoringWeights = ScoringWeights(), workspace: Workspace = Workspace(),
                    shapes=None, table_height: float = 0.0, reference=IDENTITY_QUAT,
                    threads: int = 1, pool: str = "request") -> RankResult:
    """Score, sort and select.

    ``clouds`` maps shape ids to their own point clouds (a single cloud is
    used for every id); ``shapes`` optionally maps ids to fitted shapes for
    the dimension gate.  Ties in gamma fall back to lower translation cost,
    then lower rotation cost, then input order.  The selected grasp is the
    first ranked one with nonzero gamma that passes ``feasible``.
    ``pool="shape"`` normalizes costs within each shape id instead of over
    the whole request.
    """
    if pool not in ("request", "shape"):
        raise ValueError("pool must be request or shape")
    cands = list(candidates)
    if not cands:
        raise ValueError("rank_and_select needs at least one candidate")
    scene_pts = _points(scene_cloud)
    tree = cKDTree(scene_pts) if len(scene_pts) else None

    def own(c):
        if isinstance(clouds, dict):
            return clouds.get(c.shape_id)
        return clouds

    def shape_of(c):
        return None if shapes is None else shapes.get(c.shape_id)

    def score(c):
        s_dim, s_col = gate(c, shape_of(c), scene_pts, gripper, own(c), table_height, tree)
        return occupancy(c, own(c), gripper), s_dim, s_col

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(score, cands))
    else:
        parts = [score(c) for c in cands]
    c_rot = np.array([rotation_cost(_relative_quat(c.pose.quat, reference), weights.omega) for c in cands])
    c_trans = np.array([translation_cost(c.pose.t) for c in cands])
    if pool == "request":
        s_rot = normalize_scores(c_rot)
        s_trans = normalize_scores(c_trans)
    else:
        s_rot, s_trans = np.empty_like(c_rot), np.empty_like(c_trans)
        ids = np.array([c.shape_id for c in cands])
        for sid in np.unique(ids):
            m = ids == sid
            s_rot[m] = normalize_scores(c_rot[m])
            s_trans[m] = normalize_scores(c_trans[m])
    scored = []
    for i, c in enumerate(cands):
        occ, s_dim, s_col = parts[i]
        g = composite_score(float(s_rot[i]), float(s_trans[i]), occ, s_dim, s_col, weights)
        scored.append(ScoredGrasp(c, float(c_rot[i]), float(c_trans[i]), float(s_rot[i]),
                                  float(s_trans[i]), occ, s_dim, s_col, g))
    order = sorted(range(len(scored)), key=lambda i: (-scored[i].gamma, scored[i].c_trans,
                                                      scored[i].c_rot, i))
    ranked = tuple(ScoredGrasp(**{**scored[i].__dict__, "rank": r + 1}) for r, i in enumerate(order))
    selected = None
    for r, sg in enumerate(ranked):
        if sg.gamma <= 0:
            break
        if feasible(sg.candidate, scene_pts, gripper, workspace, table_height, tree):
            selected = r
            break
    return RankResult(ranked, selected)


def scored_to_dict(sg: ScoredGrasp) -> dict:
    from .families import candidate_to_dict

    return {"candidate": candidate_to_dict(sg.candidate), "c_rot": sg.c_rot, "c_trans": sg.c_trans,
            "s_rot": sg.s_rot, "s_trans": sg.s_trans, "s_occ": int(sg.s_occ), "s_dim": int(sg.s_dim),
            "s_col": int(sg.s_col), "gamma": sg.gamma, "rank": int(sg.rank)}


def result_to_dict(result: RankResult) -> dict:
    return {"ranked": [scored_to_dict(sg) for sg in result.ranked], "selected": result.selected}
