"""Pinhole camera model, rigid motions and differentiable inverse warping.

Pixel convention: pixel ``(u, v)`` is the sample located exactly at integer
column ``u`` and row ``v``; there is no half-pixel offset anywhere in the
package. Camera frame axes are X right, Y down, Z forward.

All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .exceptions import ParameterError
from .validation import check_depth, check_image, check_points

__all__ = [
    "CameraIntrinsics",
    "Pose",
    "so3_exp",
    "so3_exp_derivatives",
    "backproject",
    "project",
    "bilinear_sample",
    "warp_image",
    "warp_jacobian",
]


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (np.isfinite(self.fx) and self.fx > 0 and np.isfinite(self.fy) and self.fy > 0):
            raise ParameterError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (np.isfinite(self.cx) and np.isfinite(self.cy)):
            raise ParameterError("principal point must be finite")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, sx: float, sy: float | None = None) -> "CameraIntrinsics":
        """Intrinsics for an image resized by ``sx`` horizontally and ``sy`` vertically."""
        sy = sx if sy is None else sy
        return CameraIntrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy)


def _skew(w):
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def _rodrigues_coeffs(theta):
    # A = sin(t)/t, B = (1-cos t)/t^2 and their derivatives divided by t.
    if theta < 1e-4:
        t2 = theta * theta
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        da = -1.0 / 3.0 + t2 / 30.0
        db = -1.0 / 12.0 + t2 / 180.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        a = s / theta
        b = (1.0 - c) / theta**2
        da = (theta * c - s) / theta**3
        db = (theta * s - 2.0 * (1.0 - c)) / theta**4
    return a, b, da, db


def so3_exp(rotvec) -> np.ndarray:
    """Rotation matrix for an axis-angle vector (radians)."""
    w = np.asarray(rotvec, dtype=np.float64)
    a, b, _, _ = _rodrigues_coeffs(float(np.linalg.norm(w)))
    k = _skew(w)
    return np.eye(3) + a * k + b * (k @ k)


def so3_exp_derivatives(rotvec) -> np.ndarray:
    """Partial derivatives of :func:`so3_exp`, shape (3, 3, 3) indexed ``[i]`` for ``d/dw_i``."""
    w = np.asarray(rotvec, dtype=np.float64)
    a, b, da, db = _rodrigues_coeffs(float(np.linalg.norm(w)))
    k = _skew(w)
    k2 = k @ k
    out = np.empty((3, 3, 3))
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        ki = _skew(e)
        out[i] = a * ki + b * (ki @ k + k @ ki) + w[i] * (da * k + db * k2)
    return out


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R x + t`` (rotation matrix + translation in meters)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ParameterError("pose contains non-finite values")
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ParameterError("rotation must be orthonormal with determinant +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_vector(cls, vec) -> "Pose":
        """Build from a 6-vector ``(rx, ry, rz, tx, ty, tz)``: axis-angle then translation."""
        vec = np.asarray(vec, dtype=np.float64).reshape(6)
        return cls(so3_exp(vec[:3]), vec[3:])

    @classmethod
    def from_matrix(cls, mat) -> "Pose":
        mat = np.asarray(mat, dtype=np.float64)
        return cls(mat[:3, :3], mat[:3, 3])

    def to_vector(self) -> np.ndarray:
        rotvec = Rotation.from_matrix(self.rotation).as_rotvec()
        return np.concatenate([rotvec, self.translation])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


def _pixel_grid(height, width):
    v, u = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return u, v


def _rays(intrinsics, height, width):
    u, v = _pixel_grid(height, width)
    return np.stack([(u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy, np.ones_like(u)], axis=-1)


def backproject(depth, intrinsics: CameraIntrinsics):
    """Lift every pixel of a depth map to camera-frame 3D coordinates.

    Parameters
    ----------
    depth : array_like, shape (H, W)
        Metric depth; zero marks pixels without depth.
    intrinsics : CameraIntrinsics

    Returns
    -------
    xyz : ndarray, shape (H, W, 3)
        ``((u - cx) d / fx, (v - cy) d / fy, d)``; invalid pixels are (0, 0, 0).
    valid : ndarray of bool, shape (H, W)
    """
    depth = check_depth(depth)
    valid = depth > 0
    xyz = _rays(intrinsics, *depth.shape) * depth[..., None]
    xyz[~valid] = 0.0
    return xyz, valid


def project(points, intrinsics: CameraIntrinsics, return_mask=False):
    """Project camera-frame points to continuous pixel coordinates.

    Points with ``Z <= 0`` are dropped. Returns an (M, 3) array of
    ``(u, v, Z)``; with ``return_mask=True`` also the boolean mask of kept
    input points.
    """
    pts = check_points(points)
    keep = pts[:, 2] > 0
    p = pts[keep]
    uvz = np.empty((p.shape[0], 3))
    uvz[:, 0] = intrinsics.fx * p[:, 0] / p[:, 2] + intrinsics.cx
    uvz[:, 1] = intrinsics.fy * p[:, 1] / p[:, 2] + intrinsics.cy
    uvz[:, 2] = p[:, 2]
    if return_mask:
        return uvz, keep
    return uvz


def bilinear_sample(image, u, v, return_grad=False):
    """Sample an (H, W, C) image at continuous coordinates.

    Taps are clamped to the image; ``inside`` is False wherever any of the
    four taps falls outside. Coordinates within ``1e-10`` px of an integer
    are snapped to it, so projection round-off cannot flip border pixels to
    invalid. With ``return_grad`` the partial derivatives of the sample
    w.r.t. ``u`` and ``v`` are returned as well.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    h, w = img.shape[:2]
    finite = np.isfinite(u) & np.isfinite(v)
    u = np.where(finite, u, -2.0)
    v = np.where(finite, v, -2.0)
    ru, rv = np.rint(u), np.rint(v)
    u = np.where(np.abs(u - ru) < 1e-10, ru, u)
    v = np.where(np.abs(v - rv) < 1e-10, rv, v)
    x0 = np.floor(u)
    y0 = np.floor(v)
    a = (u - x0)[..., None]
    b = (v - y0)[..., None]
    inside = finite & (x0 >= 0) & (x0 + 1 <= w - 1) & (y0 >= 0) & (y0 + 1 <= h - 1)
    xi0 = np.clip(x0, 0, w - 1).astype(np.intp)
    xi1 = np.clip(x0 + 1, 0, w - 1).astype(np.intp)
    yi0 = np.clip(y0, 0, h - 1).astype(np.intp)
    yi1 = np.clip(y0 + 1, 0, h - 1).astype(np.intp)
    i00 = img[yi0, xi0]
    i10 = img[yi0, xi1]
    i01 = img[yi1, xi0]
    i11 = img[yi1, xi1]
    out = (1 - a) * (1 - b) * i00 + a * (1 - b) * i10 + (1 - a) * b * i01 + a * b * i11
    if not return_grad:
        return out, inside
    du = (1 - b) * (i10 - i00) + b * (i11 - i01)
    dv = (1 - a) * (i01 - i00) + a * (i11 - i10)
    return out, inside, du, dv


def _warp(src, depth, pose, intrinsics, jacobian):
    src = check_image(src, "src")
    depth = check_depth(depth, "depth_t")
    h, w = depth.shape
    if src.shape[:2] != (h, w):
        raise ParameterError(f"src {src.shape[:2]} and depth {depth.shape} differ in size")
    rays = _rays(intrinsics, h, w)
    pts = rays * depth[..., None]
    q = pts @ pose.rotation.T + pose.translation
    qz = q[..., 2]
    front = qz > 1e-9
    safe_z = np.where(front, qz, 1.0)
    u = intrinsics.fx * q[..., 0] / safe_z + intrinsics.cx
    v = intrinsics.fy * q[..., 1] / safe_z + intrinsics.cy
    u = np.where(front, u, np.nan)
    v = np.where(front, v, np.nan)
    if not jacobian:
        warped, inside = bilinear_sample(src, u, v)
        return warped, inside & front & (depth > 0)
    warped, inside, di_du, di_dv = bilinear_sample(src, u, v, return_grad=True)
    mask = inside & front & (depth > 0)
    inv_z = 1.0 / safe_z
    # d(u, v)/dQ, each (H, W, 3)
    du_dq = np.stack([intrinsics.fx * inv_z, np.zeros_like(qz), -intrinsics.fx * q[..., 0] * inv_z**2], axis=-1)
    dv_dq = np.stack([np.zeros_like(qz), intrinsics.fy * inv_z, -intrinsics.fy * q[..., 1] * inv_z**2], axis=-1)
    # dI/dQ, (H, W, C, 3)
    di_dq = di_du[..., None] * du_dq[:, :, None, :] + di_dv[..., None] * dv_dq[:, :, None, :]
    dq_dd = rays @ pose.rotation.T
    d_depth = np.einsum("hwck,hwk->hwc", di_dq, dq_dd)
    dr = so3_exp_derivatives(pose.to_vector()[:3])
    dq_dw = np.einsum("ijk,hwk->hwji", dr, pts)  # (H, W, 3, 3): dQ_j / dw_i
    d_pose = np.concatenate([np.einsum("hwcj,hwji->hwci", di_dq, dq_dw), di_dq], axis=-1)
    d_depth[~mask] = 0.0
    d_pose[~mask] = 0.0
    return warped, mask, d_depth, d_pose


def warp_image(src, depth_t, pose_t_to_s: Pose, intrinsics: CameraIntrinsics):
    """Inverse-warp a source view into the target view.

    Each target pixel is lifted with its depth, moved into the source camera
    by ``pose_t_to_s``, reprojected and bilinearly sampled from ``src``.

    Returns
    -------
    warped : ndarray, shape (H, W, 3)
    valid : ndarray of bool, shape (H, W)
        False where the target depth is zero, the point lands behind the
        source camera, or any bilinear tap is outside the source image.
    """
    return _warp(src, depth_t, pose_t_to_s, intrinsics, jacobian=False)


def warp_jacobian(src, depth_t, pose: Pose, intrinsics: CameraIntrinsics):
    """Warp plus analytic derivatives.

    Returns ``(warped, valid, d_depth, d_pose)`` where ``d_depth`` has shape
    (H, W, 3) holding the derivative of each warped channel w.r.t. the
    pixel's own depth, and ``d_pose`` has shape (H, W, 3, 6) w.r.t. the pose
    vector of :meth:`Pose.to_vector`. Both are zero on invalid pixels.
    """
    return _warp(src, depth_t, pose, intrinsics, jacobian=True)
