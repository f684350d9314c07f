"""Parallel-jaw gripper geometry and scoring weights.

Gripper frame convention: the gripper approaches along its ``-z`` axis, the
jaws close along ``x`` and ``y = z cross x`` spans the finger width.  The
frame origin sits at the centre of the closing region, so a pose with
identity rotation grasps top-down.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Pose


@dataclass(frozen=True)
class GripperModel:
    max_opening: float = 0.10
    finger_length: float = 0.06
    finger_thickness: float = 0.01
    jaw_width: float = 0.02
    opening_levels: tuple = (0.03, 0.06, 0.09)

    def __post_init__(self):
        levels = tuple(float(v) for v in self.opening_levels)
        object.__setattr__(self, "opening_levels", levels)
        for name in ("max_opening", "finger_length", "finger_thickness", "jaw_width"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if len(levels) != 3 or not 0 < levels[0] < levels[1] < levels[2] <= self.max_opening:
            raise ValueError("opening levels must satisfy 0 < small < medium < large <= max_opening")

    def width_for(self, closing_dim: float, margin: float = 1.2) -> float:
        """Smallest opening level >= ``margin * closing_dim``, else max opening."""
        need = margin * closing_dim
        for level in self.opening_levels:
            if level >= need:
                return level
        return self.max_opening

    def closing_half_extents(self, width: float) -> np.ndarray:
        """Half extents of C(G): the box swept between the fingers."""
        return np.array([0.5 * width, 0.5 * self.jaw_width, 0.5 * self.finger_length])

    def open_half_extents(self) -> np.ndarray:
        """Half extents of B(G): both fully open fingers and the gap between them."""
        return np.array([0.5 * self.max_opening + self.finger_thickness,
                         0.5 * self.jaw_width, 0.5 * self.finger_length])

    def finger_boxes(self, width: float):
        """(centre_x, half extents) of the two finger pads at ``width``."""
        half = np.array([0.5 * self.finger_thickness, 0.5 * self.jaw_width, 0.5 * self.finger_length])
        off = 0.5 * width + 0.5 * self.finger_thickness
        return [(-off, half), (off, half)]

    def corridor_half_extents(self, length: float) -> np.ndarray:
        return np.array([0.5 * self.max_opening + self.finger_thickness,
                         0.5 * self.jaw_width, 0.5 * length])


def points_in_box(points, pose: Pose, half_extents, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Boolean mask of world points inside a box given in the gripper frame."""
    local = pose.apply_inverse(np.asarray(points, dtype=float).reshape(-1, 3))
    local = local - np.asarray(center, dtype=float)
    return np.all(np.abs(local) <= np.asarray(half_extents), axis=1)


@dataclass(frozen=True)
class ScoringWeights:
    lambda_r: float = 0.5
    lambda_t: float = 0.5
    lambda_o: float = 0.0025
    omega: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        omega = tuple(float(v) for v in self.omega)
        object.__setattr__(self, "omega", omega)
        if len(omega) != 3:
            raise ValueError("omega needs three components")
        if not all(v > 0 for v in (self.lambda_r, self.lambda_t, self.lambda_o) + omega):
            raise ValueError("scoring weights must be positive")
