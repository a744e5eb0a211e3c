import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from fusionkit.dataio import (
    Box,
    SceneSpec,
    export_pseudolidar,
    kitti_like_scene,
    load_calib,
    load_confidence_png,
    load_depth_png,
    load_image,
    load_ply,
    load_velodyne_bin,
    relative_pose,
    render_scene,
    save_calib,
    save_confidence_png,
    save_depth_png,
    save_image,
    save_velodyne_bin,
    textured_plane_scene,
)
from fusionkit.exceptions import FormatError, ParameterError, SceneError
from fusionkit.geometry import CameraIntrinsics, Pose, project, warp_image

CALIB = """P2: 721.5377 0.0 609.5593 44.85728 0.0 721.5377 172.854 0.2163791 0.0 0.0 1.0 0.002745884
R0_rect: 1 0 0 0 1 0 0 0 1
Tr_velo_to_cam: 0 -1 0 0 0 0 -1 0 1 0 0 0
"""


# --------------------------------------------------------------------------
# depth and confidence PNG


def test_depth_png_raw_convention(tmp_path):
    raw = np.array([[25600, 0], [256, 65535]], dtype=np.uint16)
    Image.fromarray(raw).save(tmp_path / "d.png")
    d = load_depth_png(tmp_path / "d.png")
    assert d[0, 0] == 100.0 and d[0, 1] == 0.0 and d[1, 0] == 1.0
    assert d.dtype == np.float64


@given(arrays(np.uint16, (5, 7)))
def test_depth_png_round_trip_is_bitwise(tmp_path_factory, raw):
    path = tmp_path_factory.mktemp("png") / "d.png"
    Image.fromarray(raw).save(path)
    depth = load_depth_png(path)
    save_depth_png(depth, path)
    np.testing.assert_array_equal(np.asarray(Image.open(path)), raw)
    np.testing.assert_array_equal(load_depth_png(path), depth)


def test_depth_png_rounds_to_nearest(tmp_path):
    save_depth_png(np.array([[1.0 + 0.4 / 256, 2.0 + 0.6 / 256]]), tmp_path / "d.png")
    np.testing.assert_array_equal(np.asarray(Image.open(tmp_path / "d.png")), [[256, 513]])
    with pytest.raises(ParameterError):
        save_depth_png(np.array([[300.0]]), tmp_path / "big.png")


def test_wrong_bit_depth_is_rejected(tmp_path):
    Image.fromarray(np.zeros((3, 3), np.uint8)).save(tmp_path / "g8.png")
    Image.fromarray(np.zeros((3, 3, 3), np.uint8)).save(tmp_path / "rgb.png")
    with pytest.raises(FormatError, match="16-bit"):
        load_depth_png(tmp_path / "g8.png")
    with pytest.raises(FormatError, match="mode RGB"):
        load_depth_png(tmp_path / "rgb.png")
    Image.fromarray(np.zeros((3, 3), np.uint16)).save(tmp_path / "d.tiff")
    with pytest.raises(FormatError, match="PNG"):
        load_depth_png(tmp_path / "d.tiff")


def test_confidence_png(tmp_path, rng):
    conf = rng.uniform(0, 1, (4, 6))
    save_confidence_png(conf, tmp_path / "c.png")
    back = load_confidence_png(tmp_path / "c.png")
    assert np.abs(back - conf).max() <= 0.5 / 65535 + 1e-15
    with pytest.raises(ParameterError):
        save_confidence_png(conf + 1, tmp_path / "bad.png")


def test_image_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (5, 4, 3)) / 255.0
    save_image(img, tmp_path / "i.png")
    np.testing.assert_array_equal(load_image(tmp_path / "i.png"), img)


# --------------------------------------------------------------------------
# velodyne


def test_velodyne_single_record(tmp_path):
    (tmp_path / "one.bin").write_bytes(struct.pack("<4f", 1.0, 2.0, 3.0, 0.5))
    cloud = load_velodyne_bin(tmp_path / "one.bin")
    np.testing.assert_array_equal(cloud.points, [[1.0, 2.0, 3.0]])
    np.testing.assert_array_equal(cloud.reflectance, [0.5])


def test_velodyne_empty_and_truncated(tmp_path):
    (tmp_path / "empty.bin").write_bytes(b"")
    assert len(load_velodyne_bin(tmp_path / "empty.bin")) == 0
    (tmp_path / "cut.bin").write_bytes(struct.pack("<5f", 1, 2, 3, 4, 5))
    with pytest.raises(FormatError, match="byte offset 16"):
        load_velodyne_bin(tmp_path / "cut.bin")


@given(arrays(np.float32, st.tuples(st.integers(0, 40), st.just(4)), elements=st.floats(-100, 100, width=32)))
def test_velodyne_round_trip_is_bitwise(tmp_path_factory, rec):
    path = tmp_path_factory.mktemp("bin") / "v.bin"
    rec.astype("<f4").tofile(path)
    original = path.read_bytes()
    save_velodyne_bin(load_velodyne_bin(path), path)
    assert path.read_bytes() == original


def test_velodyne_without_reflectance(tmp_path):
    save_velodyne_bin(np.array([[1.0, 2.0, 3.0]]), tmp_path / "v.bin")
    assert load_velodyne_bin(tmp_path / "v.bin").reflectance[0] == 0.0


# --------------------------------------------------------------------------
# calibration


def test_calib_parse(tmp_path):
    (tmp_path / "calib.txt").write_text(CALIB)
    intr, pose = load_calib(tmp_path / "calib.txt")
    assert intr.fx == 721.5377 and intr.fy == 721.5377
    assert intr.cx == 609.5593 and intr.cy == 172.854
    # identity R0 and axis-swap Tr: LiDAR forward x maps to camera z
    np.testing.assert_allclose(pose.rotation @ [1.0, 0.0, 0.0], [0.0, 0.0, 1.0])
    np.testing.assert_allclose(pose.rotation @ [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0])
    # P2 translation becomes an offset in the camera frame
    np.testing.assert_allclose(intr.matrix @ pose.translation, [44.85728, 0.2163791, 0.002745884], rtol=1e-12)


def test_calib_errors(tmp_path):
    bad = CALIB.replace("0 -1 0 0 0 0 -1 0 1 0 0 0", "0 -1 0 0 0 0 -1 0")
    (tmp_path / "short.txt").write_text(bad)
    with pytest.raises(FormatError, match="Tr_velo_to_cam has 8 values"):
        load_calib(tmp_path / "short.txt")
    (tmp_path / "missing.txt").write_text("\n".join(CALIB.splitlines()[:2]))
    with pytest.raises(FormatError, match="missing calibration key Tr_velo_to_cam"):
        load_calib(tmp_path / "missing.txt")
    (tmp_path / "junk.txt").write_text(CALIB.replace("R0_rect: 1", "R0_rect: one"))
    with pytest.raises(FormatError, match="R0_rect"):
        load_calib(tmp_path / "junk.txt")


def test_calib_round_trip(tmp_path):
    intr = CameraIntrinsics(350.0, 351.0, 320.5, 96.25)
    pose = Pose.from_vector([0.01, -0.02, 0.03, 0.1, -0.2, 0.3])
    save_calib(tmp_path / "c.txt", intr, pose)
    back_intr, back_pose = load_calib(tmp_path / "c.txt")
    assert back_intr == intr
    np.testing.assert_allclose(back_pose.rotation, pose.rotation, atol=1e-15)
    np.testing.assert_allclose(back_pose.translation, pose.translation, atol=1e-15)


# --------------------------------------------------------------------------
# pseudo-LiDAR export


def test_export_single_pixel(tmp_path):
    intr = CameraIntrinsics(100.0, 100.0, 0.0, 0.0)
    assert export_pseudolidar(np.array([[3.0]]), intr, tmp_path / "p.ply") == 1
    pts, colors = load_ply(tmp_path / "p.ply")
    np.testing.assert_array_equal(pts, [[0.0, 0.0, 3.0]])
    assert colors is None


@given(arrays(np.float64, (6, 8), elements=st.one_of(st.just(0.0), st.floats(0.5, 80.0))))
def test_export_round_trips(tmp_path_factory, depth):
    tmp = tmp_path_factory.mktemp("export")
    intr = CameraIntrinsics(7.0, 6.5, 3.5, 2.5)
    n_valid = int((depth > 0).sum())
    for fmt in ("ply", "bin"):
        path = tmp / f"p.{fmt}"
        assert export_pseudolidar(depth, intr, path, fmt=fmt) == n_valid
        pts = load_ply(path)[0] if fmt == "ply" else load_velodyne_bin(path).points
        assert pts.shape == (n_valid, 3)
        if n_valid == 0:
            continue
        uvz = project(pts, intr)
        col = np.rint(uvz[:, 0]).astype(int)
        row = np.rint(uvz[:, 1]).astype(int)
        back = np.zeros_like(depth)
        back[row, col] = uvz[:, 2]
        assert np.abs(back - depth).max() <= 1e-5
        if fmt == "ply":
            np.testing.assert_array_equal(back, depth)


def test_export_colour_and_errors(tmp_path, rng):
    intr = CameraIntrinsics(5.0, 5.0, 1.0, 1.0)
    depth = np.full((3, 3), 2.0)
    depth[1, 1] = 0.0
    img = rng.integers(0, 256, (3, 3, 3)) / 255.0
    export_pseudolidar(depth, intr, tmp_path / "c.ply", image=img)
    _, colors = load_ply(tmp_path / "c.ply")
    np.testing.assert_array_equal(colors, np.rint(img[depth > 0] * 255))
    with pytest.raises(ParameterError):
        export_pseudolidar(depth, intr, tmp_path / "x.xyz", fmt="xyz")
    with pytest.raises(ParameterError):
        export_pseudolidar(depth, intr, tmp_path / "c.ply", image=img[:2])
    with pytest.raises(OSError, match="cannot write"):
        export_pseudolidar(depth, intr, tmp_path / "no" / "dir.ply")


def test_export_to_lidar_frame(tmp_path):
    intr = CameraIntrinsics(10.0, 10.0, 0.0, 0.0)
    to_lidar = Pose(np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]), [0.0, 0.0, 0.0])
    export_pseudolidar(np.array([[4.0]]), intr, tmp_path / "l.bin", fmt="bin", camera_to_lidar=to_lidar)
    np.testing.assert_allclose(load_velodyne_bin(tmp_path / "l.bin").points, [[4.0, 0.0, 0.0]])


def test_ply_format_errors(tmp_path):
    (tmp_path / "a.ply").write_text("plx\n")
    with pytest.raises(FormatError, match="magic"):
        load_ply(tmp_path / "a.ply")
    (tmp_path / "b.ply").write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\nproperty double y\nproperty double z\nend_header\n1 2 3\n")
    with pytest.raises(FormatError, match="declares 2"):
        load_ply(tmp_path / "b.ply")


# --------------------------------------------------------------------------
# synthetic scenes


def test_fronto_plane_depth_is_constant():
    _, depth, _ = render_scene(textured_plane_scene(size=32), 1)
    assert np.all(depth == 10.0)


@pytest.mark.parametrize("slant", [0.2, 0.5, -0.3])
def test_slanted_plane_matches_closed_form(slant):
    spec = textured_plane_scene(size=40, layout="slanted", slant=slant)
    _, depth, _ = render_scene(spec, 1)
    k = spec.intrinsics
    v = np.arange(40.0)[:, None]
    # n . (Z * ray) = c with n = (0, sin, cos)
    closed = spec.plane_depth / (np.sin(slant) * (v - k.cy) / k.fy + np.cos(slant))
    assert np.abs(depth - np.broadcast_to(closed, depth.shape)).max() <= 1e-9 * spec.plane_depth


@pytest.mark.parametrize("layout", ["fronto", "slanted"])
def test_lidar_points_lie_on_surface(layout):
    spec = textured_plane_scene(size=48, layout=layout, slant=0.4)
    _, _, cloud = render_scene(spec, 1)
    k = spec.intrinsics
    uvz = project(cloud.points, k)
    inside = (uvz[:, 0] >= 0) & (uvz[:, 0] <= 47) & (uvz[:, 1] >= 0) & (uvz[:, 1] <= 47)
    assert inside.sum() > 20
    s = np.sin(spec.slant) if layout == "slanted" else 0.0
    c = np.cos(spec.slant) if layout == "slanted" else 1.0
    surface = spec.plane_depth / (s * (uvz[inside, 1] - k.cy) / k.fy + c)
    assert np.abs(surface - uvz[inside, 2]).max() <= 1e-6
    # and on the rendered pixels they hit exactly
    _, depth, _ = render_scene(spec, 1, lidar=False)
    on_grid = inside & (np.abs(uvz[:, 1] - np.rint(uvz[:, 1])) < 1e-9)
    if on_grid.any():
        rows = np.rint(uvz[on_grid, 1]).astype(int)
        cols = np.clip(np.rint(uvz[on_grid, 0]).astype(int), 0, 47)
        assert np.abs(depth[rows, cols] - uvz[on_grid, 2]).max() <= 1e-6


def test_box_scene_lidar_consistency():
    spec = kitti_like_scene(width=160, height=48)
    _, depth, cloud = render_scene(spec, 1)
    assert cloud.beam is not None and cloud.beam.max() < 64
    assert np.all(depth > 0)
    # every return is in front of the camera and within the far wall
    assert np.all(cloud.points[:, 2] <= spec.plane_depth + 1e-9)


def test_render_is_deterministic():
    spec = textured_plane_scene(size=24, layout="slanted", seed=7)
    a = render_scene(spec, 2)
    b = render_scene(spec, 2)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    np.testing.assert_array_equal(a[2].points, b[2].points)
    other = render_scene(textured_plane_scene(size=24, layout="slanted", seed=8), 2)
    assert not np.array_equal(a[0], other[0])


def test_rendered_frames_are_warp_consistent():
    spec = textured_plane_scene(size=32)
    frames = [render_scene(spec, i, lidar=False) for i in range(3)]
    warped, valid = warp_image(frames[2][0], frames[1][1], relative_pose(spec, 1, 2), spec.intrinsics)
    assert valid[4:-4, 4:-4].all()
    assert np.abs(warped - frames[1][0])[valid].max() <= 1e-9


def test_degenerate_scenes():
    spec = SceneSpec(layout="boxes", boxes=(Box((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),))
    with pytest.raises(SceneError, match="inside a box"):
        render_scene(spec, 0)
    with pytest.raises(SceneError):
        SceneSpec(layout="sphere")
    with pytest.raises(SceneError):
        SceneSpec(plane_depth=-1.0)
    with pytest.raises(SceneError):
        render_scene(textured_plane_scene(size=16), 5)
