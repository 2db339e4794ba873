"""Weak-perspective camera: quaternion rotation and projection to normalized image coordinates.

Image frame: x rightward, y upward, both in [-1, 1]. The viewer looks along +z,
so a smaller depth is nearer.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from latent_meshfit.tensorcore import Tensor

logger = logging.getLogger(__name__)

MIN_QUAT_NORM = 1e-8
IDENTITY_QUAT = (1.0, 0.0, 0.0, 0.0)


class CameraError(Exception):
    """Invalid camera pose."""

    pass


@dataclass
class CameraPose:
    """Weak-perspective pose: scale s, translation t and quaternion r = (w, x, y, z)."""

    scale: float = 1.0
    translation: Tensor = field(default_factory=lambda: np.zeros(2))
    quat: Tensor = field(default_factory=lambda: np.array(IDENTITY_QUAT))

    def __post_init__(self) -> None:
        self.scale = float(self.scale)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(2)
        self.quat = np.asarray(self.quat, dtype=np.float64).reshape(4)

    @classmethod
    def identity(cls) -> CameraPose:
        return cls()

    def to_vector(self) -> Tensor:
        """Flat optimization vector (s, tx, ty, qw, qx, qy, qz)."""
        return np.concatenate([[self.scale], self.translation, self.quat])

    @classmethod
    def from_vector(cls, vec: Tensor) -> CameraPose:
        vec = np.asarray(vec, dtype=np.float64).reshape(7)
        return cls(scale=vec[0], translation=vec[1:3].copy(), quat=vec[3:7].copy())

    def validate(self) -> None:
        if not np.all(np.isfinite(self.to_vector())):
            raise CameraError("camera pose has non-finite parameters")
        if self.scale <= 0:
            raise CameraError(f"camera scale must be positive, got {self.scale}")
        if np.linalg.norm(self.quat) <= MIN_QUAT_NORM:
            raise CameraError("camera quaternion is near zero")

    def to_dict(self) -> dict:
        """Config-file representation (keys under ``camera.``)."""
        return {
            "scale": self.scale,
            "tx": float(self.translation[0]),
            "ty": float(self.translation[1]),
            "quat": [float(q) for q in self.quat],
        }

    @classmethod
    def from_dict(cls, data: dict) -> CameraPose:
        return cls(
            scale=data.get("scale", 1.0),
            translation=np.array([data.get("tx", 0.0), data.get("ty", 0.0)]),
            quat=np.array(data.get("quat", IDENTITY_QUAT)),
        )


def normalize_quat(r: Tensor) -> tuple[Tensor, float]:
    """Return (r / |r|, |r|)."""
    r = np.asarray(r, dtype=np.float64)
    norm = float(np.linalg.norm(r))
    if norm <= MIN_QUAT_NORM:
        raise CameraError(f"quaternion norm {norm:.3e} is too small to normalize")
    return r / norm, norm


def quat_to_matrix(r: Tensor) -> Tensor:
    """Rotation matrix of the normalized quaternion r."""
    (w, x, y, z), _ = normalize_quat(r)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_to_matrix_backward(r: Tensor, grad_matrix: Tensor) -> Tensor:
    """Gradient w.r.t. the raw quaternion r given dL/dR, including normalization."""
    q, norm = normalize_quat(r)
    w, x, y, z = q
    d_w = 2 * np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    d_x = 2 * np.array([[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    d_y = 2 * np.array([[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]])
    d_z = 2 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]])
    g_unit = np.array([np.sum(grad_matrix * d) for d in (d_w, d_x, d_y, d_z)])
    return (g_unit - q * np.dot(q, g_unit)) / norm


def quat_multiply(a: Tensor, b: Tensor) -> Tensor:
    """Hamilton product a * b (apply b first, then a)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_from_axis_angle(axis: Tensor, angle: float) -> Tensor:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[math.cos(half)], math.sin(half) * axis])


def quat_rotate(r: Tensor, vertices: Tensor) -> Tensor:
    """Rotate N x 3 vertices by the rotation of r / |r|."""
    return np.asarray(vertices, dtype=np.float64) @ quat_to_matrix(r).T


def project_weak_perspective(pose: CameraPose, vertices: Tensor) -> tuple[Tensor, Tensor]:
    """Project N x 3 vertices to the image plane.

    Returns:
        Tuple of (points, depth): points are s * (R v).xy + t, depth is (R v).z
    """
    pose.validate()
    rotated = quat_rotate(pose.quat, vertices)
    points = pose.scale * rotated[:, :2] + pose.translation
    return points, rotated[:, 2].copy()


def project_backward(
    pose: CameraPose, vertices: Tensor, grad_points: Tensor
) -> tuple[Tensor, Tensor]:
    """Backward of ``project_weak_perspective`` for the projected points.

    Returns:
        Tuple of (grad_vertices N x 3, grad_pose 7-vector in ``to_vector`` order)
    """
    rot = quat_to_matrix(pose.quat)
    rotated = np.asarray(vertices, dtype=np.float64) @ rot.T
    grad_rotated = np.zeros_like(rotated)
    grad_rotated[:, :2] = pose.scale * grad_points
    grad_scale = float(np.sum(grad_points * rotated[:, :2]))
    grad_translation = grad_points.sum(axis=0)
    grad_vertices = grad_rotated @ rot
    grad_quat = quat_to_matrix_backward(pose.quat, grad_rotated.T @ vertices)
    return grad_vertices, np.concatenate([[grad_scale], grad_translation, grad_quat])


def orbit_pose(pose: CameraPose, azimuth_deg: float) -> CameraPose:
    """Pose viewing the object rotated by azimuth about its model up axis (+Y)."""
    spin = quat_from_axis_angle(np.array([0.0, 1.0, 0.0]), math.radians(azimuth_deg))
    q, _ = normalize_quat(pose.quat)
    return CameraPose(
        scale=pose.scale,
        translation=pose.translation.copy(),
        quat=quat_multiply(q, spin),
    )
