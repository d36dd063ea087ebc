"""Pose mathematics: pinhole back-projection, Rodrigues rotation, normal
calibration, rotation assembly and symmetry-aware pose errors.

Everything here is plain float64 numpy and side-effect free.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SYMMETRY_KINDS = ("none", "reflectional", "rotational")


class GeometryError(ValueError):
    """Invalid input to a pose-math routine."""


class DegenerateNormalsError(GeometryError):
    """The two predicted normals are (numerically) parallel."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Pose:
    """Rotation (3x3), translation (m) and per-axis bounding box size (m)."""

    R: np.ndarray
    t: np.ndarray
    s: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))
        object.__setattr__(self, "s", np.asarray(self.s, dtype=np.float64).reshape(3))

    def validate(self, tol: float = 1e-6) -> None:
        if not is_rotation(self.R, tol):
            raise GeometryError("R is not a proper rotation")
        if np.any(self.s <= 0):
            raise GeometryError(f"scale must be positive, got {self.s}")

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map canonical-frame points into the camera frame."""
        return points @ self.R.T + self.t

    def inverse_apply(self, points: np.ndarray) -> np.ndarray:
        return (points - self.t) @ self.R


@dataclass(frozen=True)
class RotationNormals:
    r_x: np.ndarray
    r_y: np.ndarray
    c_x: float = 1.0
    c_y: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "r_x", _unit(self.r_x))
        object.__setattr__(self, "r_y", _unit(self.r_y))
        if not (self.c_x > 0 and self.c_y > 0):
            raise GeometryError(f"confidences must be positive, got {self.c_x}, {self.c_y}")


@dataclass(frozen=True)
class SymmetrySpec:
    """Object symmetry in the canonical frame.

    For ``rotational`` the axis is the spin axis; for ``reflectional`` it is
    the normal of the mirror plane.
    """

    kind: str = "none"
    axis: tuple = (0.0, 1.0, 0.0)

    def __post_init__(self):
        if self.kind not in SYMMETRY_KINDS:
            raise GeometryError(f"unknown symmetry kind {self.kind!r}")
        a = np.asarray(self.axis, dtype=np.float64)
        if self.kind != "none" and abs(np.linalg.norm(a) - 1.0) > 1e-6:
            raise GeometryError("symmetry axis must be unit length")
        object.__setattr__(self, "axis", tuple(float(x) for x in a))

    @property
    def axis_vec(self) -> np.ndarray:
        return np.asarray(self.axis, dtype=np.float64)


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(3)
    n = np.linalg.norm(v)
    if n == 0:
        raise GeometryError("zero-length vector")
    return v / n


def is_rotation(R: np.ndarray, tol: float = 1e-6) -> bool:
    R = np.asarray(R, dtype=np.float64)
    return bool(
        np.allclose(R.T @ R, np.eye(3), atol=tol, rtol=0) and abs(np.linalg.det(R) - 1.0) <= tol
    )


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=np.float64).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rotation matrix for a rotation of ``angle`` radians about unit ``axis``."""
    k = skew(_unit(axis))
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def backproject(u, v, Z, C: CameraIntrinsics) -> np.ndarray:
    """Lift pixel(s) (u, v) at depth Z to camera-frame 3D point(s)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    if np.any(~(Z > 0)):
        raise GeometryError("depth must be positive")
    X = (u - C.cx) * Z / C.fx
    Y = (v - C.cy) * Z / C.fy
    return np.stack(np.broadcast_arrays(X, Y, Z), axis=-1)


def project(points, C: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of camera-frame points (..., 3) to pixels (..., 2)."""
    p = np.asarray(points, dtype=np.float64)
    Z = p[..., 2]
    if np.any(~(Z > 0)):
        raise GeometryError("points must lie in front of the camera")
    u = C.fx * p[..., 0] / Z + C.cx
    v = C.fy * p[..., 1] / Z + C.cy
    return np.stack([u, v], axis=-1)


def rodrigues_rotate(v, axis, angle: float) -> np.ndarray:
    """Rotate vector(s) ``v`` about unit ``axis`` by ``angle`` radians."""
    axis = np.asarray(axis, dtype=np.float64).reshape(3)
    n = np.linalg.norm(axis)
    if n == 0:
        raise GeometryError("rotation axis has zero length")
    if abs(n - 1.0) > 1e-6:
        raise GeometryError(f"rotation axis must be unit length (norm={n:.8f})")
    k = axis / n
    v = np.asarray(v, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    return v * c + np.cross(k, v) * s + np.outer(v @ k, k).reshape(v.shape) * (1.0 - c)


def calibration_angles(theta: float, c_x: float, c_y: float) -> tuple[float, float]:
    """Confidence-weighted split of the perpendicularity defect ``theta - pi/2``.

    Returns ``(theta1, theta2)``; theta1 (weight c_x) corrects r_y and
    theta2 (weight c_y) corrects r_x, so the more confident normal moves less.
    """
    excess = theta - np.pi / 2
    w = c_x + c_y
    return c_x / w * excess, c_y / w * excess


def calibrate_normals(n: RotationNormals) -> tuple[np.ndarray, np.ndarray]:
    r_x, r_y = n.r_x, n.r_y
    cos_t = float(np.clip(r_x @ r_y, -1.0, 1.0))
    if abs(cos_t) >= 1.0 - 1e-9:
        raise DegenerateNormalsError("normals are parallel; calibration undefined")
    theta = float(np.arccos(cos_t))
    theta1, theta2 = calibration_angles(theta, n.c_x, n.c_y)
    axis = np.cross(r_x, r_y)
    axis /= np.linalg.norm(axis)
    # positive rotation about r_x x r_y turns r_x towards r_y
    rx_star = rodrigues_rotate(r_x, axis, theta2)
    ry_star = rodrigues_rotate(r_y, axis, -theta1)
    return rx_star / np.linalg.norm(rx_star), ry_star / np.linalg.norm(ry_star)


def assemble_rotation(rx_star, ry_star, tol: float = 1e-6) -> np.ndarray:
    rx = np.asarray(rx_star, dtype=np.float64).reshape(3)
    ry = np.asarray(ry_star, dtype=np.float64).reshape(3)
    if abs(rx @ ry) > tol:
        raise GeometryError(f"normals are not perpendicular (dot={rx @ ry:.3e})")
    if abs(np.linalg.norm(rx) - 1) > tol or abs(np.linalg.norm(ry) - 1) > tol:
        raise GeometryError("normals must be unit length")
    return np.stack([rx, ry, np.cross(rx, ry)], axis=1)


def gram_schmidt_rotation(r_x, r_y) -> np.ndarray:
    """Fallback rotation from raw normals: keep r_x, orthogonalise r_y."""
    rx = _unit(r_x)
    ry = np.asarray(r_y, dtype=np.float64) - (rx @ r_y) * rx
    if np.linalg.norm(ry) < 1e-9:
        # pick any perpendicular direction
        helper = np.eye(3)[np.argmin(np.abs(rx))]
        ry = helper - (rx @ helper) * rx
    ry = ry / np.linalg.norm(ry)
    return np.stack([rx, ry, np.cross(rx, ry)], axis=1)


def geodesic_deg(R1, R2) -> float:
    # atan2 of (sin, cos) stays accurate near 0 and 180 degrees, unlike arccos of the trace
    M = np.asarray(R1, dtype=np.float64).T @ np.asarray(R2, dtype=np.float64)
    sin = 0.5 * np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    cos = (np.trace(M) - 1.0) / 2.0
    return float(np.degrees(np.arctan2(sin, cos)))


def rotation_error_deg(R_pred, R_gt, sym: SymmetrySpec = SymmetrySpec()) -> float:
    R_pred = np.asarray(R_pred, dtype=np.float64)
    R_gt = np.asarray(R_gt, dtype=np.float64)
    if sym.kind == "rotational":
        a = sym.axis_vec
        u, v = R_pred @ a, R_gt @ a
        return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(u, v)), u @ v)))
    if sym.kind == "reflectional":
        flip = axis_angle_matrix(sym.axis_vec, np.pi)
        return min(geodesic_deg(R_pred, R_gt), geodesic_deg(R_pred, R_gt @ flip))
    return geodesic_deg(R_pred, R_gt)


def translation_error_cm(t_pred, t_gt) -> float:
    d = np.asarray(t_pred, dtype=np.float64) - np.asarray(t_gt, dtype=np.float64)
    return float(100.0 * np.linalg.norm(d))
