"""Probe poses, rotations, and the pixel-to-world mapping of image planes.

Conventions used everywhere in this package:
  * positions are millimeters in the world frame,
  * rotations are ZYX Euler angles (rz, ry, rx) composed as Rz @ Ry @ Rx,
  * the probe's local +z axis points into the scanned medium (depth),
    local +x spans the image width, pixel (u, v) = (column, row).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = (a + math.pi) % TWO_PI - math.pi
    if w == -math.pi:
        w = math.pi
    return w


@dataclass(frozen=True)
class Pose:
    """6-DoF probe pose: position in mm, ZYX Euler rotation in radians."""

    position: np.ndarray
    euler_zyx: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).reshape(3).copy()
        eul = np.asarray(self.euler_zyx, dtype=np.float64).reshape(3).copy()
        for i in range(3):
            eul[i] = wrap_angle(float(eul[i]))
        pos.setflags(write=False)
        eul.setflags(write=False)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "euler_zyx", eul)

    def as_params(self) -> np.ndarray:
        """(px, py, pz, rz, ry, rx) as a flat vector."""
        return np.concatenate([self.position, self.euler_zyx])

    @staticmethod
    def from_params(p) -> "Pose":
        p = np.asarray(p, dtype=np.float64).reshape(6)
        return Pose(p[:3], p[3:])

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), np.zeros(3))


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_zyx_to_matrix(euler_zyx) -> np.ndarray:
    rz, ry, rx = (float(x) for x in np.asarray(euler_zyx).reshape(3))
    return rot_z(rz) @ rot_y(ry) @ rot_x(rx)


def matrix_to_euler_zyx(R) -> np.ndarray:
    """Extract ZYX Euler angles; at gimbal lock (ry = +/-pi/2) returns rz = 0."""
    R = np.asarray(R, dtype=np.float64)
    sy = math.hypot(R[0, 0], R[1, 0])
    if sy > 1e-9:
        rx = math.atan2(R[2, 1], R[2, 2])
        ry = math.atan2(-R[2, 0], sy)
        rz = math.atan2(R[1, 0], R[0, 0])
    else:
        rx = math.atan2(-R[1, 2], R[1, 1])
        ry = math.atan2(-R[2, 0], sy)
        rz = 0.0
    return np.array([rz, ry, rx])


def pose_to_matrix(pose: Pose) -> np.ndarray:
    """4x4 rigid transform mapping probe-local coordinates to world mm."""
    T = np.eye(4)
    T[:3, :3] = euler_zyx_to_matrix(pose.euler_zyx)
    T[:3, 3] = pose.position
    return T


def matrix_to_pose(T) -> Pose:
    T = np.asarray(T, dtype=np.float64)
    return Pose(T[:3, 3], matrix_to_euler_zyx(T[:3, :3]))


def check_rotation(R, tol: float = 1e-6) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape == (4, 4):
        R = R[:3, :3]
    if R.shape != (3, 3):
        raise ContractError(f"rotation must be 3x3 or 4x4, got {R.shape}")
    err = np.abs(R.T @ R - np.eye(3)).max()
    if err > tol or np.linalg.det(R) < 0.0:
        raise ContractError(f"matrix is not a proper rotation (|R^T R - I|_inf = {err:.3g})")
    return R


def angular_error_deg(R_q, R_r) -> float:
    """Geodesic angle between two rotations, degrees in [0, 180]."""
    R_q = check_rotation(R_q)
    R_r = check_rotation(R_r)
    c = (np.trace(R_q.T @ R_r) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def pose_angular_error_deg(a: Pose, b: Pose) -> float:
    return angular_error_deg(euler_zyx_to_matrix(a.euler_zyx), euler_zyx_to_matrix(b.euler_zyx))


@dataclass(frozen=True)
class ProbeGeometry:
    """Image-plane geometry of a probe.

    linear: the plane is a width_mm x depth_mm rectangle; all wave directions
    equal the probe's local +z. convex: columns fan out from an apex located
    apex_offset_mm behind the probe surface; the fan angle spans
    width_mm / apex_offset_mm radians of arc at the surface.
    """

    kind: str = "linear"
    width_mm: float = 40.0
    depth_mm: float = 48.0
    image_w: int = 128
    image_h: int = 96
    apex_offset_mm: float = 0.0

    def __post_init__(self):
        if self.kind not in ("linear", "convex"):
            raise ContractError(f"unknown probe kind {self.kind!r}")
        if self.width_mm <= 0 or self.depth_mm <= 0:
            raise ContractError("probe extents must be positive")
        if self.image_w < 2 or self.image_h < 2:
            raise ContractError("image must be at least 2x2 pixels")
        if self.kind == "convex" and self.apex_offset_mm <= 0:
            raise ContractError("convex probe requires apex_offset_mm > 0")


def _local_rays(geom: ProbeGeometry, us: np.ndarray, vs: np.ndarray):
    """Probe-local points and unit wave directions for pixel arrays."""
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    depth = vs / (geom.image_h - 1) * geom.depth_mm
    pts = np.empty(us.shape + (3,))
    dirs = np.empty_like(pts)
    if geom.kind == "linear":
        pts[..., 0] = (us / (geom.image_w - 1) - 0.5) * geom.width_mm
        pts[..., 1] = 0.0
        pts[..., 2] = depth
        dirs[..., 0] = 0.0
        dirs[..., 1] = 0.0
        dirs[..., 2] = 1.0
    else:
        span = geom.width_mm / geom.apex_offset_mm
        theta = (us / (geom.image_w - 1) - 0.5) * span
        st, ct = np.sin(theta), np.cos(theta)
        dirs[..., 0] = st
        dirs[..., 1] = 0.0
        dirs[..., 2] = ct
        radius = geom.apex_offset_mm + depth
        pts[..., 0] = radius * st
        pts[..., 1] = 0.0
        pts[..., 2] = radius * ct - geom.apex_offset_mm
    return pts, dirs


def pixel_rays(pose: Pose, geom: ProbeGeometry, us, vs):
    """World points (mm) and unit wave directions for arrays of pixel coords."""
    us = np.asarray(us)
    vs = np.asarray(vs)
    if np.any(us < 0) or np.any(us >= geom.image_w) or np.any(vs < 0) or np.any(vs >= geom.image_h):
        raise ContractError("pixel coordinates out of image bounds")
    pts_l, dirs_l = _local_rays(geom, us, vs)
    R = euler_zyx_to_matrix(pose.euler_zyx)
    pts = pts_l @ R.T + pose.position
    dirs = dirs_l @ R.T
    return pts, dirs


def pixel_to_world(pose: Pose, geom: ProbeGeometry, u: int, v: int):
    """Single-pixel pixel_rays; returns (point, wave_dir)."""
    pts, dirs = pixel_rays(pose, geom, np.array([u]), np.array([v]))
    return pts[0], dirs[0]


def image_plane_rays(pose: Pose, geom: ProbeGeometry):
    """Rays for every pixel of the plane, row-major (H*W, 3) arrays."""
    vs, us = np.meshgrid(np.arange(geom.image_h), np.arange(geom.image_w), indexing="ij")
    pts, dirs = pixel_rays(pose, geom, us.ravel(), vs.ravel())
    return pts, dirs
