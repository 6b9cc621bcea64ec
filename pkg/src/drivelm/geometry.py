"""Planar rigid-body (SE(2)) pose algebra.

Relative actions are frame-to-frame motions ``(dx, dy, dtheta)`` expressed in
the body frame of the earlier frame: ``dx`` is longitudinal, ``dy`` lateral
(positive to the left) and ``dtheta`` the yaw change. Poses are 3x3
homogeneous matrices in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class GeometryError(ValueError):
    """Invalid argument to a geometry operation."""


@dataclass(frozen=True)
class RelativeAction:
    dx: float
    dy: float
    dtheta: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.dx, self.dy, self.dtheta)):
            raise GeometryError(f"non-finite action {self!r}")
        if abs(self.dtheta) >= math.pi:
            raise GeometryError(f"|dtheta| must be < pi, got {self.dtheta}")

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dtheta], dtype=np.float64)

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "RelativeAction":
        return cls(float(a[0]), float(a[1]), float(a[2]))


def pose_from_action(a: RelativeAction) -> np.ndarray:
    """Homogeneous transform of a single relative action."""
    if not all(math.isfinite(v) for v in (a.dx, a.dy, a.dtheta)):
        raise GeometryError(f"non-finite action {a!r}")
    return make_pose(a.dx, a.dy, a.dtheta)


def make_pose(x: float, y: float, theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, x], [s, c, y], [0.0, 0.0, 1.0]], dtype=np.float64)


def pose_to_xyt(T: np.ndarray) -> tuple[float, float, float]:
    """(x, y, heading) of a transform; heading via atan2 on the rotation block."""
    return float(T[0, 2]), float(T[1, 2]), math.atan2(T[1, 0], T[0, 0])


def check_pose(T: np.ndarray, tol: float = 1e-9) -> None:
    T = np.asarray(T)
    if T.shape != (3, 3):
        raise GeometryError(f"expected 3x3 transform, got shape {T.shape}")
    if not np.all(np.isfinite(T)):
        raise GeometryError("non-finite transform")
    if T[2, 0] != 0.0 or T[2, 1] != 0.0 or T[2, 2] != 1.0:
        raise GeometryError("bottom row must be (0, 0, 1)")
    R = T[:2, :2]
    if abs(np.linalg.det(R) - 1.0) > tol or np.max(np.abs(R @ R.T - np.eye(2))) > tol:
        raise GeometryError("upper-left block is not a rotation")


def compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b


def inverse(T: np.ndarray) -> np.ndarray:
    R = T[:2, :2]
    out = np.eye(3)
    out[:2, :2] = R.T
    out[:2, 2] = -R.T @ T[:2, 2]
    return out


def integrate(actions: Iterable[RelativeAction]) -> list[np.ndarray]:
    """Chain relative actions into poses relative to the starting frame.

    The k-th output is the product of the first k+1 action transforms, i.e.
    the pose of frame t+k+1 expressed in frame t.
    """
    actions = list(actions)
    if not actions:
        raise GeometryError("integrate needs at least one action")
    out = []
    acc = np.eye(3)
    for a in actions:
        acc = acc @ pose_from_action(a)
        out.append(acc)
    return out


def relativize(poses: Sequence[np.ndarray]) -> list[RelativeAction]:
    """Frame-to-frame actions between consecutive absolute poses."""
    if len(poses) < 2:
        raise GeometryError("relativize needs at least two poses")
    out = []
    for prev, cur in zip(poses[:-1], poses[1:]):
        rel = inverse(prev) @ cur
        out.append(RelativeAction(*pose_to_xyt(rel)))
    return out


def integrate_array(actions: np.ndarray) -> np.ndarray:
    """Vectorised form of :func:`integrate` for an (N, 3) action array.

    Returns (N, 3) rows of (x, y, heading) in the starting frame. Heading is
    accumulated unwrapped.
    """
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim != 2 or actions.shape[1] != 3 or len(actions) == 0:
        raise GeometryError("expected a non-empty (N, 3) action array")
    out = np.empty_like(actions)
    x = y = th = 0.0
    for i, (dx, dy, dth) in enumerate(actions):
        c, s = math.cos(th), math.sin(th)
        x, y = x + c * dx - s * dy, y + s * dx + c * dy
        th = th + dth
        out[i] = (x, y, th)
    return out


def relativize_xyt(xyt: np.ndarray) -> np.ndarray:
    """Actions between consecutive (x, y, heading) rows; inverse of integration."""
    xyt = np.asarray(xyt, dtype=np.float64)
    if xyt.ndim != 2 or xyt.shape[1] != 3 or len(xyt) < 2:
        raise GeometryError("expected at least two (x, y, heading) rows")
    d = np.diff(xyt[:, :2], axis=0)
    th = xyt[:-1, 2]
    c, s = np.cos(th), np.sin(th)
    dx = c * d[:, 0] + s * d[:, 1]
    dy = -s * d[:, 0] + c * d[:, 1]
    dth = np.diff(xyt[:, 2])
    dth = np.arctan2(np.sin(dth), np.cos(dth))
    return np.stack([dx, dy, dth], axis=1)


def wrap_angle(theta):
    return np.arctan2(np.sin(theta), np.cos(theta))
