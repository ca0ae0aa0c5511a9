"""Cameras, poses, rays and the pixel/projection conventions.

Conventions used across the package:

- World and camera frames are right handed.  The camera looks down its
  local +z axis, x points right in the image and y points down.
- A pose stores the world-to-camera map: ``x_cam = R @ x_world + t``.
- ``depth`` always means camera-space z, not distance along the ray.
- Pixel ``(i, j)`` covers the half-open square ``[i, i+1) x [j, j+1)``;
  its center is ``(i + 0.5, j + 0.5)``.  Continuous image coordinates are
  mapped to a pixel index with ``floor``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Projected points with camera z at or below this are treated as behind
# the camera and unusable for reprojection.
BEHIND_DEPTH_EPS = 1e-9

_ORTHONORMAL_TOL = 1e-6


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics for an image of integer size width x height."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if self.width != int(self.width) or self.height != int(self.height):
            raise ValueError("image size must be integral")


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform: x_cam = rotation @ x_world + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        r = _readonly(self.rotation)
        t = _readonly(self.translation)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation 3-vector")
        err = np.abs(r.T @ r - np.eye(3)).max()
        if err >= _ORTHONORMAL_TOL:
            raise ValueError(f"rotation is not orthonormal (max deviation {err:.3g})")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation must be proper (det +1)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def camera_center(self) -> np.ndarray:
        """World-space position of the camera origin."""
        return -self.rotation.T @ self.translation

    def to_camera_to_world(self) -> np.ndarray:
        """Return the 4x4 camera-to-world matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation.T
        m[:3, 3] = self.camera_center()
        return m

    @staticmethod
    def from_camera_to_world(m: np.ndarray) -> "Pose":
        """Build a pose from a 4x4 camera-to-world matrix."""
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError("expected a 4x4 matrix")
        r_c2w = m[:3, :3]
        center = m[:3, 3]
        return Pose(rotation=r_c2w.T, translation=-r_c2w.T @ center)


@dataclass(frozen=True)
class Ray:
    """A ray with unit direction, marched over t in [t_near, t_far)."""

    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self) -> None:
        o = _readonly(self.origin)
        d = _readonly(self.direction)
        if o.shape != (3,) or d.shape != (3,):
            raise ValueError("origin and direction must be 3-vectors")
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("direction must be unit length")
        if not (0.0 <= self.t_near < self.t_far):
            raise ValueError("require 0 <= t_near < t_far")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


def camera_dirs(intr: CameraIntrinsics, uv: np.ndarray) -> np.ndarray:
    """Unnormalized camera-space directions [(u-cx)/fx, (v-cy)/fy, 1] for (..., 2) coords."""
    uv = np.asarray(uv, dtype=np.float64)
    x = (uv[..., 0] - intr.cx) / intr.fx
    y = (uv[..., 1] - intr.cy) / intr.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def camera_z_factor(intr: CameraIntrinsics, uv: np.ndarray) -> np.ndarray:
    """Ratio depth/t for the ray through ``uv``: camera z advanced per unit ray length."""
    d = camera_dirs(intr, uv)
    return 1.0 / np.linalg.norm(d, axis=-1)


def generate_ray(
    intr: CameraIntrinsics, pose: Pose, uv: np.ndarray, t_near: float, t_far: float
) -> Ray:
    """Ray through continuous image coordinates ``uv`` = (u, v).

    The direction is unit length in world space; the origin is the camera
    center.  Pixel (i, j) is sampled through its center (i + 0.5, j + 0.5).
    """
    d_cam = camera_dirs(intr, np.asarray(uv, dtype=np.float64))
    d_cam = d_cam / np.linalg.norm(d_cam)
    d_world = pose.rotation.T @ d_cam
    return Ray(origin=pose.camera_center(), direction=d_world, t_near=t_near, t_far=t_far)


def generate_rays(
    intr: CameraIntrinsics, pose: Pose, uv: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ray origins/directions for (..., 2) continuous coordinates.

    Returns:
        (origins, directions) with shapes (..., 3); directions are unit length.
    """
    d_cam = camera_dirs(intr, uv)
    d_cam = d_cam / np.linalg.norm(d_cam, axis=-1, keepdims=True)
    d_world = d_cam @ pose.rotation  # row-vector convention: R^T @ d per point
    origin = np.broadcast_to(pose.camera_center(), d_world.shape)
    return np.ascontiguousarray(origin), d_world


def pixel_centers(intr: CameraIntrinsics) -> np.ndarray:
    """(height, width, 2) array of pixel-center coordinates (i + 0.5, j + 0.5)."""
    u = np.arange(intr.width, dtype=np.float64) + 0.5
    v = np.arange(intr.height, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


def unproject(
    intr: CameraIntrinsics, pose: Pose, uv: np.ndarray, depth: np.ndarray
) -> np.ndarray:
    """World points for image coordinates ``uv`` (..., 2) at camera-space z ``depth``.

    The returned points have camera-space z exactly equal to ``depth``.
    """
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    p_cam = camera_dirs(intr, uv) * depth[..., None]
    return (p_cam - pose.translation) @ pose.rotation  # R^T @ (p_cam - t) per point


def project(
    intr: CameraIntrinsics, pose: Pose, points: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Project world points (..., 3) into the image.

    Returns:
        (uv, depth): continuous image coordinates (..., 2) and camera-space
        z (...,).  Entries with depth <= BEHIND_DEPTH_EPS are behind the
        camera; their uv values are meaningless and must be discarded.
    """
    points = np.asarray(points, dtype=np.float64)
    p_cam = points @ pose.rotation.T + pose.translation
    z = p_cam[..., 2]
    safe_z = np.where(np.abs(z) > BEHIND_DEPTH_EPS, z, 1.0)
    u = intr.cx + intr.fx * p_cam[..., 0] / safe_z
    v = intr.cy + intr.fy * p_cam[..., 1] / safe_z
    return np.stack([u, v], axis=-1), z


def scale_intrinsics(intr: CameraIntrinsics, s: float) -> CameraIntrinsics:
    """Rescale intrinsics by factor ``s``; the scaled size must be integral.

    Continuous image coordinates scale multiplicatively: a point projecting
    to (u, v) projects to (s*u, s*v) under the scaled intrinsics.
    """
    if s <= 0:
        raise ValueError("scale must be positive")
    w = intr.width * s
    h = intr.height * s
    if abs(w - round(w)) > 1e-9 or abs(h - round(h)) > 1e-9:
        raise ValueError(f"scaled size {w}x{h} is not integral")
    return CameraIntrinsics(
        fx=intr.fx * s,
        fy=intr.fy * s,
        cx=intr.cx * s,
        cy=intr.cy * s,
        width=int(round(w)),
        height=int(round(h)),
    )


def rotation_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues exponential: axis-angle 3-vector to rotation matrix."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3)
    k = w / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * (kx @ kx)


def rotation_log(r: np.ndarray) -> np.ndarray:
    """Inverse of rotation_exp; returns the axis-angle 3-vector."""
    r = np.asarray(r, dtype=np.float64)
    cos_theta = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-12:
        return np.zeros(3)
    if abs(np.pi - theta) < 1e-6:
        # Near a half turn the antisymmetric part degenerates; recover the
        # axis from the symmetric part instead.
        m = (r + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diagonal(m), 0.0))
        axis = axis / np.linalg.norm(axis)
        # Fix signs using off-diagonal entries.
        if m[0, 1] < 0:
            axis[1] = -axis[1]
        if m[0, 2] < 0:
            axis[2] = -axis[2]
        return axis * theta
    axis = (
        np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
        / (2.0 * np.sin(theta))
    )
    return axis * theta


def interpolate_pose(a: Pose, b: Pose, alpha: float) -> Pose:
    """Geodesic rotation interpolation plus linear camera-center interpolation.

    alpha = 0 returns ``a``, alpha = 1 returns ``b``.
    """
    ra = a.rotation.T  # camera-to-world rotations
    rb = b.rotation.T
    rel = rotation_log(ra.T @ rb)
    r = ra @ rotation_exp(alpha * rel)
    center = (1.0 - alpha) * a.camera_center() + alpha * b.camera_center()
    return Pose(rotation=r.T, translation=-r.T @ center)


def look_at_pose(eye: np.ndarray, target: np.ndarray, up: np.ndarray) -> Pose:
    """World-to-camera pose for a camera at ``eye`` looking at ``target``.

    ``up`` is the world up hint; it must not be parallel to the view axis.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    fwd = target - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("eye and target coincide")
    fwd = fwd / n
    right = np.cross(fwd, up / np.linalg.norm(up))
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        raise ValueError("view axis is parallel to the up hint")
    right = right / rn
    down = np.cross(fwd, right)  # camera y points down in image space
    r_c2w = np.stack([right, down, fwd], axis=1)
    return Pose(rotation=r_c2w.T, translation=-r_c2w.T @ eye)
