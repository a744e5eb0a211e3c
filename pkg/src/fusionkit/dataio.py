"""KITTI-style file formats and a deterministic synthetic scene renderer.

File conventions
----------------
depth PNG
    16-bit single channel, ``meters = raw / 256``, raw 0 = no depth.
confidence PNG
    16-bit single channel, ``confidence = raw / 65535``.
velodyne bin
    little-endian float32 records ``(x, y, z, reflectance)``.
calib txt
    ``KEY: v1 v2 ...`` rows; ``P2`` (3x4), ``R0_rect`` (3x3) and
    ``Tr_velo_to_cam`` (3x4) are required.
PLY
    ASCII, one double-precision vertex per valid pixel, optional RGB.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .exceptions import FormatError, ParameterError, SceneError
from .geometry import CameraIntrinsics, Pose, backproject
from .pdr import PointCloud
from .validation import check_depth, check_image

__all__ = [
    "load_depth_png",
    "save_depth_png",
    "load_confidence_png",
    "save_confidence_png",
    "load_image",
    "save_image",
    "load_velodyne_bin",
    "save_velodyne_bin",
    "load_calib",
    "save_calib",
    "export_pseudolidar",
    "load_ply",
    "Box",
    "SceneSpec",
    "render_scene",
    "relative_pose",
    "textured_plane_scene",
    "kitti_like_scene",
]

_SIXTEEN_BIT_MODES = ("I;16", "I;16B", "I;16L")


def _read_16bit(path):
    with Image.open(path) as im:
        if im.format != "PNG":
            raise FormatError(f"{path}: expected a PNG file, got {im.format}")
        if im.mode not in _SIXTEEN_BIT_MODES:
            raise FormatError(f"{path}: expected 16-bit single-channel PNG, got mode {im.mode}")
        return np.asarray(im).astype(np.uint16)


def _write_16bit(raw, path):
    Image.fromarray(np.ascontiguousarray(raw, dtype=np.uint16)).save(path, format="PNG")


def load_depth_png(path) -> np.ndarray:
    """Read a KITTI depth PNG into float64 meters (0 = invalid)."""
    return _read_16bit(path).astype(np.float64) / 256.0


def save_depth_png(depth, path):
    """Write meters as ``round(depth * 256)``; depths above 255.996 m cannot be stored."""
    depth = check_depth(depth)
    raw = np.rint(depth * 256.0)
    if raw.max(initial=0) > 65535:
        raise ParameterError(f"depth {depth.max():.3f} m exceeds the 16-bit PNG range")
    _write_16bit(raw, path)


def load_confidence_png(path) -> np.ndarray:
    return _read_16bit(path).astype(np.float64) / 65535.0


def save_confidence_png(confidence, path):
    conf = np.asarray(confidence, dtype=np.float64)
    if conf.ndim != 2 or conf.min(initial=0) < 0 or conf.max(initial=0) > 1:
        raise ParameterError("confidence must be a 2-D map with values in [0, 1]")
    _write_16bit(np.rint(conf * 65535.0), path)


def load_image(path) -> np.ndarray:
    """Read an 8-bit image as float64 RGB in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_image(image, path):
    img = check_image(image)
    Image.fromarray(np.rint(img * 255.0).astype(np.uint8), mode="RGB").save(path, format="PNG")


def load_velodyne_bin(path) -> PointCloud:
    """Read float32 ``(x, y, z, reflectance)`` records; points stay in the LiDAR frame."""
    data = np.fromfile(path, dtype="<f4")
    size = data.size * 4
    if size % 16:
        offset = size - size % 16
        raise FormatError(f"{path}: truncated record at byte offset {offset} ({size % 16} trailing bytes)")
    rec = data.reshape(-1, 4)
    return PointCloud(rec[:, :3].astype(np.float64), reflectance=rec[:, 3].astype(np.float64))


def save_velodyne_bin(cloud, path):
    if not isinstance(cloud, PointCloud):
        cloud = PointCloud(cloud)
    refl = cloud.reflectance if cloud.reflectance is not None else np.zeros(len(cloud))
    rec = np.column_stack([cloud.points, refl]).astype("<f4")
    rec.tofile(path)


_CALIB_SHAPES = {"P2": (3, 4), "R0_rect": (3, 3), "Tr_velo_to_cam": (3, 4)}


def load_calib(path):
    """Parse a KITTI calibration file.

    Returns
    -------
    intrinsics : CameraIntrinsics
        From ``P2``.
    lidar_to_camera : Pose
        ``R0_rect @ Tr_velo_to_cam`` followed by the ``P2`` translation
        offset, so that points map directly into the frame of ``intrinsics``.
    """
    rows = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if ":" not in line:
                raise FormatError(f"{path}:{lineno}: expected 'KEY: values'")
            key, _, values = line.partition(":")
            try:
                rows[key.strip()] = np.array([float(x) for x in values.split()])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: row {key.strip()} has a non-numeric value") from exc
    mats = {}
    for key, shape in _CALIB_SHAPES.items():
        if key not in rows:
            raise FormatError(f"{path}: missing calibration key {key}")
        expected = shape[0] * shape[1]
        if rows[key].size != expected:
            raise FormatError(f"{path}: row {key} has {rows[key].size} values, expected {expected}")
        mats[key] = rows[key].reshape(shape)
    p2 = mats["P2"]
    intr = CameraIntrinsics(p2[0, 0], p2[1, 1], p2[0, 2], p2[1, 2])
    offset = np.linalg.solve(intr.matrix, p2[:, 3])
    r0 = mats["R0_rect"]
    tr = mats["Tr_velo_to_cam"]
    return intr, Pose(r0 @ tr[:, :3], r0 @ tr[:, 3] + offset)


def save_calib(path, intrinsics: CameraIntrinsics, lidar_to_camera: Pose | None = None):
    """Write a calib file with identity rectification; inverse of :func:`load_calib`."""
    pose = lidar_to_camera or Pose.identity()
    p2 = np.zeros((3, 4))
    p2[:, :3] = intrinsics.matrix
    tr = np.column_stack([pose.rotation, pose.translation])
    fmt = lambda m: " ".join(repr(float(x)) for x in np.ravel(m))  # noqa: E731
    with open(path, "w") as fh:
        fh.write(f"P2: {fmt(p2)}\n")
        fh.write(f"R0_rect: {fmt(np.eye(3))}\n")
        fh.write(f"Tr_velo_to_cam: {fmt(tr)}\n")


def export_pseudolidar(depth, intrinsics: CameraIntrinsics, path, image=None, fmt="ply", camera_to_lidar: Pose | None = None):
    """Lift every valid pixel to 3D and write it as a point cloud.

    ``fmt="ply"`` writes ASCII PLY (colour included when ``image`` is given);
    ``fmt="bin"`` writes velodyne records with reflectance 0. Points are in
    the camera frame unless ``camera_to_lidar`` is supplied.

    Returns the number of points written.
    """
    xyz, valid = backproject(depth, intrinsics)
    pts = xyz[valid]
    if camera_to_lidar is not None:
        pts = camera_to_lidar.apply(pts)
    try:
        if fmt == "bin":
            save_velodyne_bin(PointCloud(pts), path)
        elif fmt == "ply":
            colors = None
            if image is not None:
                img = check_image(image)
                if img.shape[:2] != valid.shape:
                    raise ParameterError("image and depth differ in size")
                colors = np.rint(img[valid] * 255).astype(np.uint8)
            _write_ply(path, pts, colors)
        else:
            raise ParameterError(f"unknown export format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return pts.shape[0]


def _write_ply(path, pts, colors):
    header = ["ply", "format ascii 1.0", f"element vertex {pts.shape[0]}"]
    header += [f"property double {c}" for c in "xyz"]
    if colors is not None:
        header += [f"property uchar {c}" for c in ("red", "green", "blue")]
    header.append("end_header")
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        for i in range(pts.shape[0]):
            line = " ".join(repr(float(x)) for x in pts[i])
            if colors is not None:
                line += " %d %d %d" % tuple(colors[i])
            fh.write(line + "\n")


def load_ply(path):
    """Read an ASCII PLY written by :func:`export_pseudolidar`; returns ``(points, colors or None)``."""
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise FormatError(f"{path}: missing 'ply' magic")
        count, props = None, []
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format" and tok[1] != "ascii":
                raise FormatError(f"{path}: only ASCII PLY is supported")
            if tok[0] == "element" and tok[1] == "vertex":
                count = int(tok[2])
            elif tok[0] == "property":
                props.append(tok[-1])
            elif tok[0] == "end_header":
                break
        if count is None:
            raise FormatError(f"{path}: no vertex element")
        body = np.loadtxt(fh, ndmin=2) if count else np.zeros((0, len(props)))
    if body.shape[0] != count:
        raise FormatError(f"{path}: header declares {count} vertices, found {body.shape[0]}")
    pts = body[:, :3]
    colors = body[:, 3:6].astype(np.uint8) if "red" in props else None
    return pts, colors


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in world coordinates."""

    lo: tuple
    hi: tuple


@dataclass(frozen=True)
class SceneSpec:
    """Deterministic synthetic scene.

    World coordinates coincide with the camera of frame 0 (X right, Y down,
    Z forward). ``frame_poses`` are camera-to-world transforms.

    layout
        ``"fronto"``: plane ``Z = plane_depth``.
        ``"slanted"``: plane ``n . X = plane_depth`` with
        ``n = (0, sin(slant), cos(slant))``.
        ``"boxes"``: ground plane ``Y = ground_height``, a back wall at
        ``Z = plane_depth`` and the boxes in ``boxes``.
    """

    layout: str = "fronto"
    width: int = 64
    height: int = 64
    intrinsics: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics(50.0, 50.0, 31.5, 31.5))
    frame_poses: tuple = field(default_factory=lambda: (Pose.identity(),))
    plane_depth: float = 10.0
    slant: float = 0.5
    ground_height: float = 1.65
    boxes: tuple = ()
    seed: int = 0
    texture_octaves: int = 3
    texture_frequency: float = 0.25
    lidar_beams: int = 64
    lidar_elevation: tuple = (2.0, -24.8)
    lidar_azimuth_step: float = 0.09

    def __post_init__(self):
        if self.layout not in ("fronto", "slanted", "boxes"):
            raise SceneError(f"unknown layout {self.layout!r}")
        if self.width < 2 or self.height < 2:
            raise SceneError("image must be at least 2x2")
        if self.plane_depth <= 0:
            raise SceneError("plane_depth must be positive")


def _texture_params(spec):
    rng = np.random.default_rng(spec.seed)
    params = []
    for octave in range(spec.texture_octaves):
        freq = spec.texture_frequency * 2.0**octave
        dirs = rng.normal(size=(3, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        params.append((0.5**octave, 2 * np.pi * freq * dirs, phase))
    norm = sum(p[0] for p in params)
    return [(0.45 * a / norm, f, ph) for a, f, ph in params]


def _texture(points, params):
    out = np.full(points.shape[:-1] + (3,), 0.5)
    for amp, freqs, phase in params:
        out += amp * np.sin(points @ freqs.T + phase)
    return out


def _surfaces(spec):
    if spec.layout == "fronto":
        return [(np.array([0.0, 0.0, 1.0]), spec.plane_depth)], []
    if spec.layout == "slanted":
        n = np.array([0.0, np.sin(spec.slant), np.cos(spec.slant)])
        return [(n, spec.plane_depth)], []
    planes = [(np.array([0.0, 1.0, 0.0]), spec.ground_height), (np.array([0.0, 0.0, 1.0]), spec.plane_depth)]
    return planes, [(np.asarray(b.lo, float), np.asarray(b.hi, float)) for b in spec.boxes]


def _intersect(origin, dirs, spec):
    """Ray parameter of the first hit (inf where nothing is hit)."""
    planes, boxes = _surfaces(spec)
    best = np.full(dirs.shape[:-1], np.inf)
    for n, c in planes:
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (c - origin @ n) / denom
        lam = np.where((np.abs(denom) > 1e-12) & (lam > 1e-9), lam, np.inf)
        best = np.minimum(best, lam)
    for lo, hi in boxes:
        if np.all(origin > lo) and np.all(origin < hi):
            raise SceneError("camera is inside a box")
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - origin) / dirs
            t2 = (hi - origin) / dirs
        t1 = np.where(np.isnan(t1), -np.inf, t1)
        t2 = np.where(np.isnan(t2), np.inf, t2)
        tnear = np.minimum(t1, t2).max(axis=-1)
        tfar = np.maximum(t1, t2).min(axis=-1)
        hit = (tnear <= tfar) & (tnear > 1e-9)
        best = np.where(hit, np.minimum(best, tnear), best)
    return best


def _lidar_directions(spec):
    hi, lo = spec.lidar_elevation
    elev = np.deg2rad(np.linspace(hi, lo, spec.lidar_beams))
    az = np.deg2rad(np.arange(-180.0, 180.0, spec.lidar_azimuth_step))
    e, a = np.meshgrid(elev, az, indexing="ij")
    dirs = np.stack([np.cos(e) * np.sin(a), -np.sin(e), np.cos(e) * np.cos(a)], axis=-1)
    beam = np.broadcast_to(np.arange(spec.lidar_beams)[:, None], e.shape)
    return dirs.reshape(-1, 3), beam.reshape(-1)


def render_scene(spec: SceneSpec, frame: int = 0, lidar: bool = True):
    """Render frame ``frame`` of a scene.

    Returns
    -------
    image : (H, W, 3) float64 in [0, 1]
    depth : (H, W) ground-truth depth (0 where no surface is hit)
    lidar : PointCloud or None
        Camera-frame returns of the simulated beam pattern, with beam index.
        None when ``lidar`` is False (skips the ray casting).
    """
    if not 0 <= frame < len(spec.frame_poses):
        raise SceneError(f"frame {frame} out of range")
    cam_to_world = spec.frame_poses[frame]
    intr = spec.intrinsics
    v, u = np.meshgrid(np.arange(spec.height, dtype=float), np.arange(spec.width, dtype=float), indexing="ij")
    rays = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)
    origin = cam_to_world.translation
    dirs = rays @ cam_to_world.rotation.T
    lam = _intersect(origin, dirs, spec)
    hit = np.isfinite(lam)
    depth = np.where(hit, lam, 0.0)
    world = origin + dirs * np.where(hit, lam, 0.0)[..., None]
    image = np.where(hit[..., None], _texture(world, _texture_params(spec)), 0.0)
    image = np.clip(image, 0.0, 1.0)
    if not lidar:
        return image, depth, None

    ldirs, beam = _lidar_directions(spec)
    wdirs = ldirs @ cam_to_world.rotation.T
    llam = _intersect(origin, wdirs, spec)
    ok = np.isfinite(llam)
    points = ldirs[ok] * llam[ok, None]
    return image, depth, PointCloud(points, beam=beam[ok])


def relative_pose(spec: SceneSpec, t: int, s: int) -> Pose:
    """Transform mapping camera-``t`` coordinates to camera-``s`` coordinates."""
    return spec.frame_poses[s].inverse() @ spec.frame_poses[t]


def textured_plane_scene(size=64, depth=10.0, baseline=None, seed=0, **overrides) -> SceneSpec:
    """Fronto-parallel textured plane seen from three cameras translated along X.

    Frames are ordered ``(t-1, t, t+1)`` at ``x = -baseline, 0, +baseline``.
    The default baseline gives a disparity of exactly 2 px, so warping with
    the true depth lands on integer pixels and bilinear sampling is exact.
    """
    f = 0.8 * size
    c = (size - 1) / 2.0
    if baseline is None:
        baseline = 2.0 * depth / f
    poses = tuple(Pose(np.eye(3), [x, 0.0, 0.0]) for x in (-baseline, 0.0, baseline))
    kwargs = dict(
        layout="fronto",
        width=size,
        height=size,
        intrinsics=CameraIntrinsics(f, f, c, c),
        frame_poses=poses,
        plane_depth=depth,
        seed=seed,
    )
    kwargs.update(overrides)
    return SceneSpec(**kwargs)


KITTI_FULL_INTRINSICS = CameraIntrinsics(721.5377, 721.5377, 609.5593, 172.854)
KITTI_FULL_SIZE = (1242, 375)


def kitti_like_scene(width=640, height=192, seed=0, speed=0.8) -> SceneSpec:
    """Street-like scene with KITTI camera geometry and an HDL-64 style beam pattern."""
    intr = KITTI_FULL_INTRINSICS.scaled(width / KITTI_FULL_SIZE[0], height / KITTI_FULL_SIZE[1])
    poses = tuple(Pose(np.eye(3), [0.0, 0.0, z]) for z in (-speed, 0.0, speed))
    boxes = (
        Box((-6.0, -0.2, 12.0), (-2.5, 1.65, 16.0)),
        Box((3.0, -0.5, 18.0), (6.0, 1.65, 22.0)),
    )
    return SceneSpec(
        layout="boxes",
        width=width,
        height=height,
        intrinsics=intr,
        frame_poses=poses,
        plane_depth=60.0,
        boxes=boxes,
        seed=seed,
        texture_frequency=0.3,
    )
