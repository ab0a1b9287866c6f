"""Camera model, rigid poses, ray generation, and pixel (un)projection.

Conventions used throughout the package:

* right-handed camera frame, +z forward, image u to the right, v down;
* poses are stored camera-to-world as a unit quaternion plus translation;
* integer pixel (u, v) addresses the center of its cell, i.e. the
  continuous image coordinate (u + 0.5, v + 0.5);
* pose text form is the TUM trajectory ordering "tx ty tz qx qy qz qw".

Scalar operations work on numpy arrays; the ``*_torch`` helpers provide
batched, differentiable counterparts used by rendering and the warping
loss (gradients flow through rotation matrices and translations).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch

__all__ = [
    "CameraIntrinsics",
    "Pose",
    "Ray",
    "Projection",
    "ray_for_pixel",
    "unproject",
    "project",
    "pose_compose",
    "pose_inverse",
    "parse_pose_line",
    "format_pose_line",
    "so3_exp",
    "so3_log",
    "quat_to_axis_angle",
    "rays_through_pixels",
    "world_to_camera",
    "camera_to_pixel",
    "ray_aabb_range",
]

_QUAT_NORM_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image "
                f"{self.width}x{self.height}"
            )


def _quat_to_matrix(q):
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def _matrix_to_quat(R):
    # Shepperd's method; stable for all rotation matrices.
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    q = np.array([x, y, z, w])
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform.

    quat is (qx, qy, qz, qw) with unit norm; trans is the camera center
    in world coordinates, meters.
    """

    quat: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=np.float64)
        t = np.asarray(self.trans, dtype=np.float64)
        if q.shape != (4,) or t.shape != (3,):
            raise ValueError("quat must be (4,), trans must be (3,)")
        n = np.linalg.norm(q)
        if abs(n - 1.0) > _QUAT_NORM_TOL:
            raise ValueError(f"quaternion norm {n} deviates from 1 by more than {_QUAT_NORM_TOL}")
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "trans", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_quat(quat, trans, *, renormalize: bool = False) -> "Pose":
        q = np.asarray(quat, dtype=np.float64)
        if renormalize:
            q = q / np.linalg.norm(q)
        return Pose(q, np.asarray(trans, dtype=np.float64))

    @staticmethod
    def from_matrix(R, t) -> "Pose":
        return Pose(_matrix_to_quat(np.asarray(R, dtype=np.float64)), t)

    def rotation_matrix(self) -> np.ndarray:
        return _quat_to_matrix(self.quat)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous camera-to-world matrix."""
        M = np.eye(4)
        M[:3, :3] = self.rotation_matrix()
        M[:3, 3] = self.trans
        return M


@dataclass(frozen=True)
class Ray:
    """origin + t * direction, direction unit-norm, t in meters."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > _QUAT_NORM_TOL:
            raise ValueError("ray direction must be unit norm")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


class Projection(NamedTuple):
    """Result of projecting a world point into a camera."""

    pixel: np.ndarray  # (u, v) continuous image coordinates
    depth: float  # z in camera frame, meters
    valid: bool  # False when behind the camera or outside the image


def ray_for_pixel(intr: CameraIntrinsics, pose: Pose, px) -> Ray:
    """Ray through a (possibly sub-pixel) image coordinate.

    px is the continuous coordinate; pass (u + 0.5, v + 0.5) for the
    center of integer pixel (u, v).
    """
    u, v = float(px[0]), float(px[1])
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        raise ValueError(f"pixel ({u}, {v}) outside image {intr.width}x{intr.height}")
    d_cam = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
    d_world = pose.rotation_matrix() @ d_cam
    return Ray(pose.trans.copy(), d_world / np.linalg.norm(d_world))


def unproject(intr: CameraIntrinsics, pose: Pose, px, depth: float) -> np.ndarray:
    """Lift an image coordinate at a given camera z-depth to a world point."""
    if depth <= 0:
        raise ValueError(f"depth must be positive, got {depth}")
    u, v = float(px[0]), float(px[1])
    p_cam = np.array([(u - intr.cx) / intr.fx * depth, (v - intr.cy) / intr.fy * depth, depth])
    return pose.rotation_matrix() @ p_cam + pose.trans


def project(intr: CameraIntrinsics, pose: Pose, point) -> Projection:
    """Project a world point; never raises, invalid results are flagged."""
    p = np.asarray(point, dtype=np.float64)
    R = pose.rotation_matrix()
    p_cam = R.T @ (p - pose.trans)
    z = float(p_cam[2])
    if z <= 0:
        return Projection(np.array([np.nan, np.nan]), z, False)
    u = intr.fx * p_cam[0] / z + intr.cx
    v = intr.fy * p_cam[1] / z + intr.cy
    inside = (0 <= u < intr.width) and (0 <= v < intr.height)
    return Projection(np.array([u, v]), z, bool(inside))


def _quat_mul(a, b):
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def pose_compose(a: Pose, b: Pose) -> Pose:
    """a then b applied in a's frame: world <- a <- b."""
    q = _quat_mul(a.quat, b.quat)
    q = q / np.linalg.norm(q)
    t = a.rotation_matrix() @ b.trans + a.trans
    return Pose(q, t)


def pose_inverse(a: Pose) -> Pose:
    q_inv = np.array([-a.quat[0], -a.quat[1], -a.quat[2], a.quat[3]])
    t_inv = -(_quat_to_matrix(q_inv) @ a.trans)
    return Pose(q_inv, t_inv)


def parse_pose_line(line: str) -> Pose:
    """Parse "tx ty tz qx qy qz qw"; renormalizes mildly off-unit quaternions."""
    parts = line.split()
    if len(parts) != 7:
        raise ValueError(f"expected 7 fields 'tx ty tz qx qy qz qw', got {len(parts)}")
    vals = [float(p) for p in parts]
    trans = np.array(vals[0:3])
    quat = np.array(vals[3:7])
    return Pose.from_quat(quat, trans, renormalize=True)


def format_pose_line(pose: Pose) -> str:
    vals = list(pose.trans) + list(pose.quat)
    return " ".join(f"{v:.9f}" for v in vals)


# --- torch helpers (batched, differentiable) ---------------------------------


def so3_exp(w: torch.Tensor) -> torch.Tensor:
    """Rodrigues map from axis-angle (..., 3) to rotation matrices (..., 3, 3)."""
    theta = w.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    small = theta < 1e-6
    axis = w / theta
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = torch.zeros_like(x)
    K = torch.stack(
        [zero, -z, y, z, zero, -x, -y, x, zero], dim=-1
    ).reshape(*w.shape[:-1], 3, 3)
    th = theta[..., None]
    eye = torch.eye(3, dtype=w.dtype, device=w.device).expand(K.shape)
    R = eye + torch.sin(th) * K + (1 - torch.cos(th)) * (K @ K)
    # first-order fallback keeps gradients finite at w = 0
    K_raw = torch.stack(
        [zero, -w[..., 2], w[..., 1], w[..., 2], zero, -w[..., 0], -w[..., 1], w[..., 0], zero],
        dim=-1,
    ).reshape(*w.shape[:-1], 3, 3)
    return torch.where(small[..., None], eye + K_raw, R)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix (numpy, used for pose init)."""
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    if theta < 1e-8:
        return np.zeros(3)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return w * theta / (2.0 * np.sin(theta))


def quat_to_axis_angle(quat: np.ndarray) -> np.ndarray:
    return so3_log(_quat_to_matrix(quat))


def rays_through_pixels(
    intr: CameraIntrinsics, rot: torch.Tensor, trans: torch.Tensor, uv: torch.Tensor
):
    """Batched ray generation; differentiable w.r.t. rot and trans.

    rot (3, 3), trans (3,), uv (N, 2) continuous pixel coordinates.
    Returns origins (N, 3) and unit directions (N, 3).
    """
    d_cam = torch.stack(
        [
            (uv[:, 0] - intr.cx) / intr.fx,
            (uv[:, 1] - intr.cy) / intr.fy,
            torch.ones_like(uv[:, 0]),
        ],
        dim=-1,
    )
    d_world = d_cam @ rot.transpose(0, 1)
    d_world = d_world / d_world.norm(dim=-1, keepdim=True)
    origins = trans.expand_as(d_world)
    return origins, d_world


def world_to_camera(rot: torch.Tensor, trans: torch.Tensor, points: torch.Tensor):
    """Map world points (..., 3) into camera frames.

    rot (F, 3, 3) and trans (F, 3) camera-to-world; points (N, 3).
    Returns (F, N, 3) camera-frame coordinates.
    """
    rel = points[None, :, :] - trans[:, None, :]
    return torch.einsum("fij,fnj->fni", rot.transpose(1, 2), rel)


def camera_to_pixel(intr: CameraIntrinsics, p_cam: torch.Tensor):
    """Pinhole projection of camera-frame points (..., 3) -> uv (..., 2), z (...)."""
    z = p_cam[..., 2]
    safe_z = torch.where(z.abs() < 1e-12, torch.full_like(z, 1e-12), z)
    u = intr.fx * p_cam[..., 0] / safe_z + intr.cx
    v = intr.fy * p_cam[..., 1] / safe_z + intr.cy
    return torch.stack([u, v], dim=-1), z


def ray_aabb_range(origins, dirs, box_min, box_max, *, min_near=1e-3):
    """Entry/exit distances of rays against an axis-aligned box (numpy).

    Returns (near, far) arrays; rays that miss the box get near >= far.
    near is clamped to min_near so samples never start at the camera center.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    # nudge axis-parallel components so the slab test stays NaN-free
    safe = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    inv = 1.0 / safe
    t0 = (np.asarray(box_min) - origins) * inv
    t1 = (np.asarray(box_max) - origins) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    near = np.max(tmin, axis=-1)
    far = np.min(tmax, axis=-1)
    near = np.maximum(near, min_near)
    return near, far
