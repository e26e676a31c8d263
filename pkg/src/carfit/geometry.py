"""Pose, camera, and projection primitives.

Conventions used throughout the package:

* Camera frame: x right, y down, z forward (optical axis). Depth is the
  camera-frame z coordinate.
* Euler angles are extrinsic X-then-Y-then-Z, i.e. the rotation matrix is
  composed as ``R = Rz(rz) @ Ry(ry) @ Rx(rx)``. All pose I/O uses this
  convention; each angle is kept in ``[-pi, pi]``.
* All distances are meters, all image coordinates are pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import NonPositiveDepth

TWO_PI = 2.0 * math.pi


def normalize_angle(theta):
    """Wrap an angle (scalar or array) into [-pi, pi].

    The result differs from the input by an exact multiple of 2*pi. The
    boundary is tie-broken by round-half-even on theta/(2*pi), so +pi stays
    +pi and -pi stays -pi.
    """
    theta = np.asarray(theta, dtype=float)
    wrapped = theta - TWO_PI * np.round(theta / TWO_PI)
    if wrapped.ndim == 0:
        return float(wrapped)
    return wrapped


@dataclass
class Pose6DoF:
    """Rigid pose of one vehicle: object frame -> camera frame.

    Attributes:
        translation: (3,) object center in the camera frame, meters.
        rotation: (3,) extrinsic XYZ Euler angles, radians.
    """

    translation: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=float).reshape(3).copy()
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3).copy()

    def normalized(self) -> "Pose6DoF":
        """Copy with every Euler angle wrapped into [-pi, pi]."""
        return Pose6DoF(self.translation, normalize_angle(self.rotation))

    @property
    def matrix(self) -> np.ndarray:
        return euler_to_matrix(self.rotation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map (N, 3) object-frame points into the camera frame."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.matrix.T + self.translation


@dataclass
class CameraIntrinsics:
    """Pinhole camera: focal lengths and principal point, pixel units."""

    fx: float
    fy: float
    px: float
    py: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.px], [0.0, self.fy, self.py], [0.0, 0.0, 1.0]]
        )


@dataclass
class BoundingBox2D:
    """Axis-aligned 2D detection box, pixel units (center + size)."""

    bx: float
    by: float
    bw: float
    bh: float

    def __post_init__(self):
        if not (self.bw > 0 and self.bh > 0):
            raise ValueError(f"box size must be positive, got {self.bw}x{self.bh}")


@dataclass
class Keypoint2D:
    """One semantic keypoint observation: pixel position + visibility."""

    x: float
    y: float
    visible: bool = True


def _axis_rotations(rotation):
    rx, ry, rz = float(rotation[0]), float(rotation[1]), float(rotation[2])
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    Rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    Ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    Rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    return Rx, Ry, Rz


def euler_to_matrix(rotation) -> np.ndarray:
    """Rotation matrix for extrinsic XYZ Euler angles: R = Rz @ Ry @ Rx."""
    Rx, Ry, Rz = _axis_rotations(rotation)
    return Rz @ Ry @ Rx


def euler_to_matrix_derivatives(rotation):
    """R plus its partial derivatives w.r.t. each Euler angle.

    Returns:
        (R, [dR/drx, dR/dry, dR/drz]) with each entry a (3, 3) array.
    """
    rx, ry, rz = float(rotation[0]), float(rotation[1]), float(rotation[2])
    Rx, Ry, Rz = _axis_rotations(rotation)
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    dRx = np.array([[0.0, 0.0, 0.0], [0.0, -sx, -cx], [0.0, cx, -sx]])
    dRy = np.array([[-sy, 0.0, cy], [0.0, 0.0, 0.0], [-cy, 0.0, -sy]])
    dRz = np.array([[-sz, -cz, 0.0], [cz, -sz, 0.0], [0.0, 0.0, 0.0]])
    R = Rz @ Ry @ Rx
    return R, [Rz @ Ry @ dRx, Rz @ dRy @ Rx, dRz @ Ry @ Rx]


def project_point(point, pose: Pose6DoF, cam: CameraIntrinsics):
    """Project one object-frame 3D point through a pinhole camera.

    Implements s * [u, v, 1]^T = K [R|T] p: the point is moved into the
    camera frame and divided by its depth s.

    Returns:
        (pixel, s) where pixel is a (2,) array and s the camera-frame depth.

    Raises:
        NonPositiveDepth: if the transformed point has depth s <= 0. Loss
            code treats such keypoints as invisible; the error forces the
            caller to make that choice explicitly.
    """
    p = np.asarray(point, dtype=float).reshape(3)
    x = pose.matrix @ p + pose.translation
    s = float(x[2])
    if s <= 0.0:
        raise NonPositiveDepth(f"point projects behind the camera (s={s:g})")
    u = cam.fx * x[0] / s + cam.px
    v = cam.fy * x[1] / s + cam.py
    return np.array([u, v]), s


def project_points(points, pose: Pose6DoF, cam: CameraIntrinsics):
    """Vectorized projection of (N, 3) object-frame points.

    Unlike :func:`project_point` this does not raise on non-positive depth;
    it reports validity per point instead.

    Returns:
        (pixels, depths, in_front): (N, 2), (N,), boolean (N,). Pixel rows
        with ``in_front == False`` are filled with NaN.
    """
    cam_pts = pose.transform(points)
    depths = cam_pts[:, 2]
    in_front = depths > 0.0
    safe = np.where(in_front, depths, 1.0)
    pixels = np.empty((cam_pts.shape[0], 2))
    pixels[:, 0] = cam.fx * cam_pts[:, 0] / safe + cam.px
    pixels[:, 1] = cam.fy * cam_pts[:, 1] / safe + cam.py
    pixels[~in_front] = np.nan
    return pixels, depths, in_front


def pixel_jacobian(cam_point, cam: CameraIntrinsics) -> np.ndarray:
    """d(pixel)/d(camera-frame point), a (2, 3) matrix."""
    x, y, z = float(cam_point[0]), float(cam_point[1]), float(cam_point[2])
    return np.array(
        [
            [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
            [0.0, cam.fy / z, -cam.fy * y / (z * z)],
        ]
    )


def box_to_world(box: BoundingBox2D, cam: CameraIntrinsics, z: float = 1.0):
    """Lift a pixel-space detection box to world-scaled coordinates.

    The scale factor z is a free configuration parameter (default 1.0).

    Returns:
        (ux, uy, uw, uh) tuple of floats.
    """
    if z <= 0:
        raise ValueError(f"scale factor must be positive, got {z}")
    ux = (box.bx - cam.px) * z / cam.fx
    uy = (box.by - cam.py) * z / cam.fy
    return ux, uy, box.bw / cam.fx, box.bh / cam.fy


def rotation_geodesic_distance(a, b) -> float:
    """Angle of the relative rotation between two Euler-angle triples.

    Computed as arccos((trace(Ra^T Rb) - 1) / 2), clamped against
    floating-point drift; lies in [0, pi] and is symmetric.
    """
    Ra = euler_to_matrix(np.asarray(a, dtype=float).reshape(3))
    Rb = euler_to_matrix(np.asarray(b, dtype=float).reshape(3))
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(math.acos(min(1.0, max(-1.0, c))))


@dataclass
class RigidTransform:
    """World-frame rigid transform used to move cameras and objects together."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    def apply_pose(self, pose: Pose6DoF) -> Pose6DoF:
        """Compose self with an object pose: new object->world map."""
        R = self.rotation @ pose.matrix
        t = self.rotation @ pose.translation + self.translation
        return Pose6DoF(t, matrix_to_euler(R))


def matrix_to_euler(R) -> np.ndarray:
    """Extrinsic XYZ Euler angles of a rotation matrix (inverse of euler_to_matrix).

    At the ry = +-pi/2 singularity rz is set to 0 and the remaining angle is
    absorbed into rx.
    """
    R = np.asarray(R, dtype=float)
    sy = -R[2, 0]
    sy = min(1.0, max(-1.0, sy))
    ry = math.asin(sy)
    if abs(sy) < 1.0 - 1e-12:
        rx = math.atan2(R[2, 1], R[2, 2])
        rz = math.atan2(R[1, 0], R[0, 0])
    else:
        rx = math.atan2(-R[1, 2], R[1, 1])
        rz = 0.0
    return np.array([rx, ry, rz])
