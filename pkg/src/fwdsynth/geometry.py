"""Pinhole camera model, poses, and view-direction features.

Conventions used everywhere in the package:
  - poses are camera-from-world: X_cam = R @ X_world + T
  - pixel (row i, col j) has its center at continuous coords (x=j, y=i)
  - camera axes: x right, y down, z forward; depth is camera-space z
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DomainError, ShapeError

# Points closer than this to the camera plane are culled everywhere.
Z_NEAR = 1e-4

_DEG_EPS = 1e-8


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise DomainError("image size must be positive")

    def scaled(self, sx: float, sy: float) -> "Intrinsics":
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy,
                          int(round(self.width * sx)), int(round(self.height * sy)))


@dataclass
class Pose:
    """Camera-from-world rigid transform."""

    R: np.ndarray
    T: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.T = np.asarray(self.T, dtype=np.float64).reshape(3)
        if self.R.shape != (3, 3):
            raise ShapeError(f"rotation must be 3x3, got {self.R.shape}")

    def compose_world_transform(self, R_w: np.ndarray, t_w: np.ndarray) -> "Pose":
        """Pose seeing the same scene after world points move by X' = R_w X + t_w."""
        R_w = np.asarray(R_w, dtype=np.float64)
        t_w = np.asarray(t_w, dtype=np.float64).reshape(3)
        return Pose(self.R @ R_w.T, self.T - self.R @ R_w.T @ t_w)


def rotation_residual(R: np.ndarray) -> float:
    """Max-abs deviation of R^T R from identity."""
    R = np.asarray(R, dtype=np.float64)
    return float(np.abs(R.T @ R - np.eye(3)).max())


def check_rotation(R: np.ndarray, tol: float = 1e-6) -> None:
    if rotation_residual(R) > tol:
        raise DomainError(f"rotation not orthonormal within {tol}")


def camera_center(pose: Pose) -> np.ndarray:
    """World-space camera origin: the c with R c + T = 0."""
    return -pose.R.T @ pose.T


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=np.float64).reshape(3)
    n = np.linalg.norm(a)
    if n == 0:
        raise DomainError("zero rotation axis")
    a = a / n
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def look_at(eye, target, *, world_down=(0.0, 1.0, 0.0)) -> Pose:
    """Camera-from-world pose with the camera at eye looking toward target."""
    eye = np.asarray(eye, dtype=np.float64).reshape(3)
    target = np.asarray(target, dtype=np.float64).reshape(3)
    z = target - eye
    n = np.linalg.norm(z)
    if n < _DEG_EPS:
        raise DomainError("look_at eye and target coincide")
    z = z / n
    down = np.asarray(world_down, dtype=np.float64)
    x = np.cross(down, z)
    nx = np.linalg.norm(x)
    if nx < _DEG_EPS:
        raise DomainError("view direction parallel to the down axis")
    x = x / nx
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=0)
    return Pose(R, -R @ eye)


# -- pixel grids --------------------------------------------------------


def pixel_grid(intr: Intrinsics):
    """Flattened (H*W,) arrays of pixel-center x and y coordinates."""
    xs = np.arange(intr.width, dtype=np.float64)
    ys = np.arange(intr.height, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)
    return gx.ravel(), gy.ravel()


# -- numpy-space transforms ---------------------------------------------


def unproject(depth: np.ndarray, intr: Intrinsics, pose: Pose) -> np.ndarray:
    """Lift a depth map to world-space points, one per pixel, row-major.

    Zero-depth pixels produce points at the camera plane; callers mask them
    with ``depth > 0`` (or a validity mask) before use.
    """
    depth = np.asarray(depth)
    if depth.shape != (intr.height, intr.width):
        raise ShapeError(f"depth shape {depth.shape} != image size {(intr.height, intr.width)}")
    if np.any(depth < 0):
        raise DomainError("negative depth")
    gx, gy = pixel_grid(intr)
    d = depth.ravel().astype(np.float64)
    xc = (gx - intr.cx) / intr.fx * d
    yc = (gy - intr.cy) / intr.fy * d
    cam = np.stack([xc, yc, d], axis=1)
    return (cam - pose.T) @ pose.R


def project(points: np.ndarray, intr: Intrinsics, pose: Pose):
    """World points -> (x_px, y_px, z_cam, in_front) with z_near culling."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ShapeError(f"points must be (P, 3), got {points.shape}")
    cam = points @ pose.R.T + pose.T
    z = cam[:, 2]
    in_front = z > Z_NEAR
    safe_z = np.where(in_front, z, 1.0)
    x = intr.fx * cam[:, 0] / safe_z + intr.cx
    y = intr.fy * cam[:, 1] / safe_z + intr.cy
    return x, y, z, in_front


def view_delta(points: np.ndarray, src_center: np.ndarray, tgt_center: np.ndarray) -> np.ndarray:
    """Relative view-direction feature per point: [unit(v_s - v_t), v_s . v_t].

    v_s and v_t are unit vectors from the point toward the source and target
    camera centers. When the two directions coincide the feature is the
    canonical (0, 0, 0, 1).
    """
    points = np.asarray(points, dtype=np.float64)
    vs = np.asarray(src_center, dtype=np.float64) - points
    vt = np.asarray(tgt_center, dtype=np.float64) - points
    ns = np.linalg.norm(vs, axis=1, keepdims=True)
    nt = np.linalg.norm(vt, axis=1, keepdims=True)
    if np.any(ns < _DEG_EPS) or np.any(nt < _DEG_EPS):
        raise DomainError("point coincides with a camera center")
    vs = vs / ns
    vt = vt / nt
    d = vs - vt
    nd = np.linalg.norm(d, axis=1, keepdims=True)
    ok = nd[:, 0] > _DEG_EPS
    direction = np.where(ok[:, None], d / np.where(ok[:, None], nd, 1.0), 0.0)
    dot = np.clip((vs * vt).sum(axis=1), -1.0, 1.0)
    dot = np.where(ok, dot, 1.0)
    return np.concatenate([direction, dot[:, None]], axis=1)


# -- tape-differentiable variants ----------------------------------------


def unproject_t(depth: "ad.Tensor", intr: Intrinsics, pose: Pose) -> "ad.Tensor":
    """Differentiable unprojection of a flat (H*W,) depth tensor."""
    if depth.data.shape != (intr.height * intr.width,):
        raise ShapeError(f"expected flat depth of {intr.height * intr.width}, got {depth.data.shape}")
    gx, gy = pixel_grid(intr)
    ax = ((gx - intr.cx) / intr.fx)[:, None]
    ay = ((gy - intr.cy) / intr.fy)[:, None]
    d = ad.reshape(depth, (-1, 1))
    cam = ad.concat([d * ad.constant(ax, dtype=depth.dtype),
                     d * ad.constant(ay, dtype=depth.dtype),
                     d], axis=1)
    shifted = cam - ad.constant(pose.T[None, :], dtype=depth.dtype)
    return ad.matmul(shifted, ad.constant(pose.R, dtype=depth.dtype))


def view_delta_t(points: "ad.Tensor", src_center: np.ndarray, tgt_center: np.ndarray) -> "ad.Tensor":
    """Differentiable view_delta for a (P, 3) point tensor."""
    cs = ad.constant(np.asarray(src_center, dtype=np.float64)[None, :], dtype=points.dtype)
    ct = ad.constant(np.asarray(tgt_center, dtype=np.float64)[None, :], dtype=points.dtype)
    vs = cs - points
    vt = ct - points
    ns = ad.sqrt(ad.tsum(vs * vs, axis=1, keepdims=True))
    nt = ad.sqrt(ad.tsum(vt * vt, axis=1, keepdims=True))
    vs = vs / ns
    vt = vt / nt
    d = vs - vt
    nd2 = ad.tsum(d * d, axis=1, keepdims=True)
    ok = (nd2.data[:, 0] > _DEG_EPS * _DEG_EPS)
    mask = ad.constant(ok[:, None].astype(points.dtype.type))
    # Guard the norm so masked-out rows do not divide by ~0.
    nd = ad.sqrt(nd2 + ad.constant((~ok)[:, None].astype(points.dtype.type)))
    direction = d / nd * mask
    dot = ad.tsum(vs * vt, axis=1, keepdims=True)
    dot = dot * mask + (1.0 - mask)
    return ad.concat([direction, dot], axis=1)
