"""Pseudo dense representation (PDR) of sparse LiDAR.

Each LiDAR point is projected into the image and dilated into a disc of
radius ``R`` pixels. Pixels inside a disc receive the point's depth and a
confidence that decays as the inverse of the distance to the disc centre.
Where discs overlap, depth and confidence contributions are averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ParameterError
from .geometry import CameraIntrinsics, Pose, project
from .validation import check_points

__all__ = [
    "PointCloud",
    "PDR",
    "default_radius",
    "generate_pdr",
    "coverage_fraction",
    "elevation_angles",
    "subsample_beams",
    "PDRTransformer",
]


@dataclass(frozen=True)
class PointCloud:
    """Unordered 3D points with optional per-point attributes.

    ``points`` are camera-frame meters (X right, Y down, Z forward) unless
    the cloud was just read from a velodyne file, in which case they stay in
    the LiDAR frame until :meth:`transformed` is applied.
    """

    points: np.ndarray
    reflectance: np.ndarray | None = None
    beam: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "points", check_points(self.points))
        n = self.points.shape[0]
        for name in ("reflectance", "beam"):
            attr = getattr(self, name)
            if attr is not None:
                attr = np.asarray(attr).reshape(-1)
                if attr.shape[0] != n:
                    raise ParameterError(f"{name} has {attr.shape[0]} entries for {n} points")
                object.__setattr__(self, name, attr)

    def __len__(self):
        return self.points.shape[0]

    def subset(self, mask) -> "PointCloud":
        pick = lambda a: None if a is None else a[mask]  # noqa: E731
        return PointCloud(self.points[mask], pick(self.reflectance), pick(self.beam))

    def transformed(self, pose: Pose) -> "PointCloud":
        return PointCloud(pose.apply(self.points), self.reflectance, self.beam)


@dataclass(frozen=True)
class PDR:
    """Two-channel pseudo dense representation: depth (m) and confidence in [0, 1]."""

    depth: np.ndarray
    confidence: np.ndarray

    def to_array(self) -> np.ndarray:
        return np.stack([self.depth, self.confidence], axis=-1)


def _as_points(points):
    if isinstance(points, PointCloud):
        return points.points
    return check_points(points)


def default_radius(width: int) -> float:
    """4 px at 640 columns, scaled linearly with the image width (never below 1)."""
    return max(1.0, 4.0 * width / 640.0)


def _projected_inside(points, intrinsics, width, height):
    uvz = project(_as_points(points), intrinsics)
    col = np.floor(uvz[:, 0] + 0.5)
    row = np.floor(uvz[:, 1] + 0.5)
    keep = (col >= 0) & (col <= width - 1) & (row >= 0) & (row <= height - 1)
    return uvz[keep], col[keep].astype(np.intp), row[keep].astype(np.intp)


def _disc_contributions(uvz, width, height, radius):
    """Flat pixel index, depth and confidence of every (point, pixel) pair inside a disc."""
    reach = int(np.ceil(radius))
    oy, ox = np.mgrid[-reach : reach + 1, -reach : reach + 1]
    ox = ox.ravel().astype(np.float64)
    oy = oy.ravel().astype(np.float64)
    u, v, z = uvz[:, 0:1], uvz[:, 1:2], uvz[:, 2:3]
    xs = np.floor(u) + ox
    ys = np.floor(v) + oy
    r = np.sqrt((u - xs) ** 2 + (v - ys) ** 2)
    hit = (r < radius) & (xs >= 0) & (xs <= width - 1) & (ys >= 0) & (ys <= height - 1)
    with np.errstate(divide="ignore"):
        conf = np.minimum(1.0, 1.0 / r)
    flat = (ys * width + xs)[hit].astype(np.intp)
    depth = np.broadcast_to(z, r.shape)[hit]
    return flat, depth, conf[hit]


def _ordered_mean(flat, values, size):
    # sum each pixel's contributions in ascending value order so the result is
    # a function of the contribution multiset alone
    order = np.lexsort((values, flat))
    total = np.bincount(flat[order], weights=values[order], minlength=size)
    count = np.bincount(flat, minlength=size)
    out = np.zeros(size)
    hit = count > 0
    out[hit] = total[hit] / count[hit]
    return out


def generate_pdr(points, intrinsics: CameraIntrinsics, width: int, height: int, radius: float | None = None) -> PDR:
    """Dilate projected LiDAR points into a depth/confidence pair of (H, W) maps.

    Parameters
    ----------
    points : PointCloud or array_like (N, 3)
        Camera-frame points in meters.
    intrinsics : CameraIntrinsics
    width, height : int
        Output size in pixels.
    radius : float, optional
        Disc radius ``R`` in pixels (``R >= 1``). Pixels with distance
        ``r < R`` to a projected point are filled; confidence is
        ``min(1, 1/r)``. Defaults to :func:`default_radius`.

    Returns
    -------
    PDR
    """
    if radius is None:
        radius = default_radius(width)
    radius = float(radius)
    if not np.isfinite(radius) or radius < 1.0:
        raise ParameterError(f"radius must be >= 1 pixel, got {radius}")
    width, height = int(width), int(height)
    if width < 1 or height < 1:
        raise ParameterError(f"image size must be positive, got {width}x{height}")
    uvz, _, _ = _projected_inside(points, intrinsics, width, height)
    size = width * height
    if uvz.shape[0] == 0:
        zero = np.zeros((height, width))
        return PDR(zero, zero.copy())
    flat, depth, conf = _disc_contributions(uvz, width, height, radius)
    d = _ordered_mean(flat, depth, size).reshape(height, width)
    c = _ordered_mean(flat, conf, size).reshape(height, width)
    return PDR(d, c)


def coverage_fraction(points, intrinsics: CameraIntrinsics, width: int, height: int) -> float:
    """Fraction of pixels whose nearest-pixel projection receives at least one point."""
    _, col, row = _projected_inside(points, intrinsics, width, height)
    if col.size == 0:
        return 0.0
    return np.unique(row * width + col).size / float(width * height)


def elevation_angles(points, frame="camera") -> np.ndarray:
    """Elevation of each point above the horizontal plane (radians).

    ``frame="camera"`` assumes Y down / Z forward, ``frame="lidar"`` assumes
    Z up.
    """
    p = _as_points(points)
    if frame == "camera":
        return np.arctan2(-p[:, 1], np.hypot(p[:, 0], p[:, 2]))
    if frame == "lidar":
        return np.arctan2(p[:, 2], np.hypot(p[:, 0], p[:, 1]))
    raise ParameterError(f"unknown frame {frame!r}")


def subsample_beams(cloud, keep: int, n_bins: int = 64, frame="camera") -> PointCloud:
    """Simulate a sparser LiDAR by keeping ``keep`` evenly spaced beams.

    If the cloud stores a beam index, bins are beam indices ``0..n_bins-1``.
    Otherwise points are split into ``n_bins`` equal-width elevation bins,
    bin 0 being the highest. The kept bins are
    ``round(linspace(0, n_bins - 1, keep))``; point order is preserved.
    """
    if not isinstance(cloud, PointCloud):
        cloud = PointCloud(cloud)
    keep = int(keep)
    if keep < 1:
        raise ParameterError(f"keep must be >= 1, got {keep}")
    if cloud.beam is not None:
        bins = cloud.beam.astype(np.intp)
        n_bins = max(n_bins, int(bins.max()) + 1) if bins.size else n_bins
    else:
        elev = elevation_angles(cloud, frame)
        if elev.size == 0:
            bins = np.zeros(0, dtype=np.intp)
        else:
            lo, hi = elev.min(), elev.max()
            span = hi - lo
            if span == 0:
                bins = np.zeros(elev.shape, dtype=np.intp)
            else:
                bins = np.clip(np.floor((hi - elev) / span * n_bins), 0, n_bins - 1).astype(np.intp)
    if keep > n_bins:
        raise ParameterError(f"cannot keep {keep} beams out of {n_bins}")
    chosen = np.unique(np.round(np.linspace(0, n_bins - 1, keep)).astype(np.intp))
    return cloud.subset(np.isin(bins, chosen))


class PDRTransformer(TransformerMixin, BaseEstimator):
    """Transformer mapping point clouds to stacked (H, W, 2) PDR arrays.

    Parameters
    ----------
    intrinsics : CameraIntrinsics
    width, height : int
    radius : float or None
        ``None`` uses :func:`default_radius`.

    Stateless: ``fit`` only validates parameters.
    """

    def __init__(self, intrinsics=None, width=640, height=192, radius=None):
        self.intrinsics = intrinsics
        self.width = width
        self.height = height
        self.radius = radius

    def fit(self, X=None, y=None):
        if not isinstance(self.intrinsics, CameraIntrinsics):
            raise ParameterError("intrinsics must be a CameraIntrinsics instance")
        self.radius_ = default_radius(self.width) if self.radius is None else float(self.radius)
        if self.radius_ < 1:
            raise ParameterError(f"radius must be >= 1 pixel, got {self.radius_}")
        return self

    def transform(self, X):
        if not hasattr(self, "radius_"):
            self.fit()
        if isinstance(X, PointCloud) or np.ndim(X) == 2 and not isinstance(X[0], PointCloud):
            X = [X]
        out = [generate_pdr(pc, self.intrinsics, self.width, self.height, self.radius_).to_array() for pc in X]
        return np.stack(out)
