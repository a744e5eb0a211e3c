"""``fusionkit`` command-line interface.

Machine-readable results go to stdout as one JSON object per line; human
tables and diagnostics go to stderr.

Exit codes: 0 success, 2 usage or validation error, 3 numerical or domain
failure (unanchored graph, solver non-convergence, optimizer divergence).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataio
from .config import RunConfig, load_config
from .depthopt import median_scale, optimize_depth
from .exceptions import ConvergenceError, DivergenceError, FusionKitError, ParameterError, UnanchoredSystemError
from .gdc import build_graph, solve_correction
from .geometry import CameraIntrinsics, Pose
from .metrics import METRIC_NAMES, depth_metrics
from .pdr import coverage_fraction, generate_pdr, subsample_beams

__all__ = ["main", "build_parser"]

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

# axis swap between a KITTI-style LiDAR frame (x fwd, y left, z up) and the camera frame
LIDAR_TO_CAMERA_AXES = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


class UsageError(FusionKitError):
    """Bad command-line input detected after argument parsing."""


def _emit(record: dict):
    print(json.dumps(record, sort_keys=False), flush=True)


def _log(msg: str):
    print(msg, file=sys.stderr, flush=True)


def _parse_size(text):
    try:
        w, h = (int(x) for x in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from exc
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return w, h


def _parse_crop(text):
    if not isinstance(text, str):
        return text
    if text in ("none", "full"):
        return None
    if text == "eigen":
        return "eigen"
    try:
        vals = tuple(int(x) for x in text.split(","))
    except ValueError as exc:
        raise UsageError(f"--crop must be eigen, none or top,bottom,left,right; got {text!r}") from exc
    if len(vals) != 4:
        raise UsageError("--crop needs four values: top,bottom,left,right")
    return vals


def _intrinsics_for(calib_intr: CameraIntrinsics, size, calib_size):
    if calib_size is None:
        return calib_intr
    return calib_intr.scaled(size[0] / calib_size[0], size[1] / calib_size[1])


def _paired(a, b, names):
    if len(a) != len(b):
        raise UsageError(f"{names[0]} and {names[1]} need the same number of files ({len(a)} vs {len(b)})")
    return list(zip(a, b))


def _run_jobs(fn, tasks, jobs):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def _out_path(out, src, suffix, many):
    out = Path(out)
    if many or out.is_dir() or out.suffix == "":
        out.mkdir(parents=True, exist_ok=True)
        return out / f"{Path(src).stem}{suffix}"
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _load_camera_points(points_path, pose, beams):
    cloud = dataio.load_velodyne_bin(points_path).transformed(pose)
    if beams is not None:
        cloud = subsample_beams(cloud, beams)
    return cloud


# --------------------------------------------------------------------------
# pdr


def _pdr_one(task):
    points_path, intr, size, radius, beams, out, many = task
    intr, pose = intr
    cloud = _load_camera_points(points_path, pose, beams)
    w, h = size
    pdr = generate_pdr(cloud, intr, w, h, radius)
    depth_path = _out_path(out, points_path, "_pdr_depth.png", many)
    conf_path = depth_path.with_name(depth_path.stem.replace("_pdr_depth", "_pdr") + "_conf.png")
    dataio.save_depth_png(pdr.depth, depth_path)
    dataio.save_confidence_png(pdr.confidence, conf_path)
    return {
        "command": "pdr",
        "points": str(points_path),
        "n_points": len(cloud),
        "coverage_fraction": coverage_fraction(cloud, intr, w, h),
        "pdr_fraction": float(np.mean(pdr.confidence > 0)),
        "depth": str(depth_path),
        "confidence": str(conf_path),
    }


def cmd_pdr(args, cfg: RunConfig):
    radius = args.radius if args.radius is not None else cfg.pdr.radius
    if radius is not None and not radius >= 1:
        raise ParameterError(f"--radius must be >= 1 pixel, got {radius}")
    beams = args.beams if args.beams is not None else cfg.pdr.beams
    calib_intr, pose = dataio.load_calib(args.calib)
    intr = _intrinsics_for(calib_intr, args.size, args.calib_size)
    many = len(args.points) > 1
    tasks = [(p, (intr, pose), args.size, radius, beams, args.out, many) for p in args.points]
    for rec in _run_jobs(_pdr_one, tasks, args.jobs):
        _emit(rec)
        _log(f"pdr {rec['points']}: {rec['n_points']} points, coverage {100 * rec['coverage_fraction']:.3f}%")
    return EXIT_OK


# --------------------------------------------------------------------------
# refine


def _refine_one(task):
    depth_path, points_path, intr, pose, gdc, beams, out, many, timed = task
    depth = dataio.load_depth_png(depth_path)
    cloud = _load_camera_points(points_path, pose, beams)
    t0 = time.perf_counter()
    graph = build_graph(depth, intr, cloud, k=gdc.k, stride=gdc.stride, rcond=gdc.rcond)
    result = solve_correction(graph, gdc.anchor_strength, depth, tol=gdc.tol, max_iter=gdc.max_iter, ridge=gdc.ridge)
    elapsed = time.perf_counter() - t0
    out_path = _out_path(out, depth_path, "_refined.png", many)
    dataio.save_depth_png(result.depth, out_path)
    rec = {
        "command": "refine",
        "depth": str(depth_path),
        "points": str(points_path),
        "nodes": graph.n_nodes,
        "anchors": int(graph.anchors.size),
        "iterations": int(result.iterations),
        "residual": float(result.residual),
        "out": str(out_path),
    }
    if timed:
        rec["ms"] = 1000.0 * elapsed
        rec["fps"] = 1.0 / elapsed if elapsed > 0 else math.inf
        rec["size"] = [depth.shape[1], depth.shape[0]]
    return rec


def cmd_refine(args, cfg: RunConfig):
    gdc = cfg.gdc
    overrides = {}
    if args.gdc_k is not None:
        overrides["k"] = args.gdc_k
    if args.gdc_stride is not None:
        overrides["stride"] = args.gdc_stride
    if args.gdc_anchor_strength is not None:
        overrides["anchor_strength"] = args.gdc_anchor_strength
    gdc = replace(gdc, **overrides)
    beams = args.beams if args.beams is not None else cfg.pdr.beams
    calib_intr, pose = dataio.load_calib(args.calib)
    pairs = _paired(args.depth, args.points, ("--depth", "--points"))
    many = len(pairs) > 1
    tasks = []
    for d, p in pairs:
        h, w = dataio.load_depth_png(d).shape
        intr = _intrinsics_for(calib_intr, (w, h), args.calib_size)
        tasks.append((d, p, intr, pose, gdc, beams, args.out, many, args.time))
    for rec in _run_jobs(_refine_one, tasks, args.jobs):
        _emit(rec)
        line = f"refine {rec['depth']}: {rec['anchors']} anchors / {rec['nodes']} nodes, {rec['iterations']} CG iterations"
        if args.time:
            line += f", {rec['ms']:.1f} ms ({rec['fps']:.2f} FPS at {rec['size'][0]}x{rec['size'][1]})"
        _log(line)
    return EXIT_OK


# --------------------------------------------------------------------------
# optimize


def _load_poses(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
        return Pose.from_vector(data["prev"]), Pose.from_vector(data["next"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParameterError(f"--poses {path}: expected JSON with 6-vectors 'prev' and 'next' ({exc})") from exc


def _synthetic_problem(cfg: RunConfig, beams):
    spec = dataio.textured_plane_scene(size=cfg.synth.size, depth=cfg.synth.depth, seed=cfg.synth.seed)
    frames = [dataio.render_scene(spec, i) for i in range(3)]
    images = [f[0] for f in frames]
    gt = frames[1][1]
    cloud = frames[1][2]
    if beams is not None:
        cloud = subsample_beams(cloud, beams)
    poses = (dataio.relative_pose(spec, 1, 0), dataio.relative_pose(spec, 1, 2))
    return images, spec.intrinsics, poses, gt, cloud


def cmd_optimize(args, cfg: RunConfig):
    opt = cfg.optimizer_config()
    if args.iterations is not None:
        opt = replace(opt, iterations=args.iterations)
    if args.step is not None:
        opt = replace(opt, step=args.step)
    beams = args.beams if args.beams is not None else cfg.pdr.beams
    if args.synthetic:
        images, intr, poses, gt, cloud = _synthetic_problem(cfg, beams)
    else:
        missing = [f for f, v in (("--frames", args.frames), ("--calib", args.calib), ("--poses", args.poses)) if not v]
        if missing:
            raise UsageError(f"optimize needs {', '.join(missing)} (or --synthetic)")
        images = [dataio.load_image(p) for p in args.frames]
        intr, lidar_pose = dataio.load_calib(args.calib)
        if args.calib_size is not None:
            h, w = images[1].shape[:2]
            intr = _intrinsics_for(intr, (w, h), args.calib_size)
        poses = _load_poses(args.poses)
        gt = dataio.load_depth_png(args.gt) if args.gt else None
        cloud = _load_camera_points(args.points, lidar_pose, beams) if args.points else None

    shape = images[1].shape[:2]
    init = None
    if args.synthetic and args.init_scale is None and not args.init_depth:
        args.init_scale = 2.0
    if args.init_depth:
        init = dataio.load_depth_png(args.init_depth)
    elif args.init_scale is not None:
        if gt is None:
            raise UsageError("--init-scale needs ground truth (--gt or --synthetic)")
        init = args.init_scale * gt
    pdr = None
    if args.pdr:
        if cloud is None:
            raise UsageError("--pdr needs LiDAR points (--points or --synthetic)")
        pdr = generate_pdr(cloud, intr, shape[1], shape[0], cfg.pdr.radius)
    enhanced = dataio.load_depth_png(args.enhanced) if args.enhanced else None
    if args.gdc:
        if cloud is None:
            raise UsageError("--gdc needs LiDAR points (--points or --synthetic)")
        if init is None:
            raise UsageError("--gdc needs an initial depth (--init-depth or --init-scale)")
        g = cfg.gdc
        graph = build_graph(init, intr, cloud, k=g.k, stride=g.stride, rcond=g.rcond)
        enhanced = solve_correction(graph, g.anchor_strength, init, g.tol, g.max_iter, g.ridge).depth

    t0 = time.perf_counter()
    depth, state = optimize_depth(images, intr, poses, opt, pdr=pdr, enhanced=enhanced, init_depth=init)
    elapsed = time.perf_counter() - t0
    last = state.history[-1]
    rec = {
        "command": "optimize",
        "iterations": len(state.history),
        "initial_loss": state.history[0].total,
        "final_loss": last.total,
        "l_p": last.l_p,
        "l_smooth": last.l_smooth,
        "l_si": last.l_si,
        "masked_fraction": last.masked_fraction,
        "seconds": elapsed,
    }
    if gt is not None:
        start = init if init is not None else np.full(shape, opt.init_depth)
        rec["initial_abs_rel"] = depth_metrics(start, gt, cap=cfg.eval.cap).abs_rel
        rec["final_abs_rel"] = depth_metrics(depth, gt, cap=cfg.eval.cap).abs_rel
        rec["median_scaled_abs_rel"] = depth_metrics(median_scale(depth, gt), gt, cap=cfg.eval.cap).abs_rel
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        dataio.save_depth_png(depth, out)
        rec["out"] = str(out)
    _emit(rec)
    msg = f"optimize: {rec['iterations']} iterations, loss {rec['initial_loss']:.4g} -> {rec['final_loss']:.4g}"
    if "final_abs_rel" in rec:
        msg += f", abs_rel {rec['initial_abs_rel']:.4f} -> {rec['final_abs_rel']:.4f}"
    _log(msg)
    return EXIT_OK


# --------------------------------------------------------------------------
# eval


def _eval_one(task):
    pred_path, gt_path, cap, crop, scale = task
    pred = dataio.load_depth_png(pred_path)
    gt = dataio.load_depth_png(gt_path)
    if scale:
        pred = median_scale(pred, gt)
    report = depth_metrics(pred, gt, cap=cap, crop=crop)
    return str(pred_path), str(gt_path), report


def cmd_eval(args, cfg: RunConfig):
    cap = args.cap if args.cap is not None else cfg.eval.cap
    crop = cfg.eval.crop if args.crop is None else _parse_crop(args.crop)
    pairs = _paired(args.pred, args.gt, ("--pred", "--gt"))
    tasks = [(p, g, cap, crop, args.median_scale) for p, g in pairs]
    results = _run_jobs(_eval_one, tasks, args.jobs)
    if args.format == "csv":
        print("pred,gt," + ",".join(METRIC_NAMES), flush=True)
    for pred_path, gt_path, report in results:
        if args.format == "csv":
            print(f"{pred_path},{gt_path},{report.csv_row()}", flush=True)
        else:
            _emit({"command": "eval", "pred": pred_path, "gt": gt_path, **report.to_dict()})
        _log(f"{pred_path}\n{report.table()}")
    return EXIT_OK


# --------------------------------------------------------------------------
# export


def _export_one(task):
    depth_path, intr, to_lidar, image_path, fmt, out, many = task
    depth = dataio.load_depth_png(depth_path)
    image = dataio.load_image(image_path) if image_path else None
    out_path = _out_path(out, depth_path, f".{fmt}", many)
    n = dataio.export_pseudolidar(depth, intr, out_path, image=image, fmt=fmt, camera_to_lidar=to_lidar)
    return {"command": "export", "depth": str(depth_path), "points": n, "format": fmt, "out": str(out_path)}


def cmd_export(args, cfg: RunConfig):
    intr, lidar_pose = dataio.load_calib(args.calib)
    images = args.image or [None] * len(args.depth)
    pairs = _paired(args.depth, images, ("--depth", "--image"))
    many = len(pairs) > 1
    tasks = []
    for d, img in pairs:
        h, w = dataio.load_depth_png(d).shape
        k = _intrinsics_for(intr, (w, h), args.calib_size)
        to_lidar = lidar_pose.inverse() if args.lidar_frame else None
        tasks.append((d, k, to_lidar, img, args.format, args.out, many))
    for rec in _run_jobs(_export_one, tasks, args.jobs):
        _emit(rec)
        _log(f"export {rec['depth']}: {rec['points']} points -> {rec['out']}")
    return EXIT_OK


# --------------------------------------------------------------------------
# synth


def cmd_synth(args, cfg: RunConfig):
    seed = args.seed if args.seed is not None else cfg.synth.seed
    if args.layout == "kitti":
        w, h = args.size or (640, 192)
        spec = dataio.kitti_like_scene(w, h, seed=seed)
    else:
        size = args.size[0] if args.size else cfg.synth.size
        if args.size and args.size[0] != args.size[1]:
            raise UsageError(f"--layout {args.layout} renders square images; got --size {args.size[0]}x{args.size[1]}")
        spec = dataio.textured_plane_scene(size=size, depth=cfg.synth.depth, seed=seed)
        if args.layout == "slanted":
            spec = replace(spec, layout="slanted")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    to_lidar = Pose(LIDAR_TO_CAMERA_AXES.T, np.zeros(3))
    for i in range(len(spec.frame_poses)):
        image, depth, cloud = dataio.render_scene(spec, i)
        names = (f"image_{i}.png", f"depth_{i}.png", f"velodyne_{i}.bin")
        dataio.save_image(image, out / names[0])
        dataio.save_depth_png(depth, out / names[1])
        dataio.save_velodyne_bin(cloud.transformed(to_lidar), out / names[2])
        files.extend(names)
    dataio.save_calib(out / "calib.txt", spec.intrinsics, Pose(LIDAR_TO_CAMERA_AXES, np.zeros(3)))
    mid = len(spec.frame_poses) // 2
    poses = {
        "prev": dataio.relative_pose(spec, mid, mid - 1).to_vector().tolist(),
        "next": dataio.relative_pose(spec, mid, mid + 1).to_vector().tolist(),
    }
    with open(out / "poses.json", "w") as fh:
        json.dump(poses, fh, indent=2)
    files += ["calib.txt", "poses.json"]
    _emit({"command": "synth", "layout": args.layout, "seed": seed, "out": str(out), "files": files})
    _log(f"synth: wrote {len(files)} files to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (fallback: $FUSIONKIT_CONFIG)")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers over input files")

    parser = argparse.ArgumentParser(prog="fusionkit", description="Camera/LiDAR depth fusion tools.")
    parser.add_argument("--config", dest="root_config", help="JSON run configuration (fallback: $FUSIONKIT_CONFIG)")
    parser.add_argument("--dump-config", action="store_true", help="print the effective configuration and exit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("pdr", parents=[common], help="densify LiDAR into depth + confidence PNGs")
    p.add_argument("--points", nargs="+", required=True, help="velodyne .bin file(s)")
    p.add_argument("--calib", required=True, help="KITTI calibration file")
    p.add_argument("--size", type=_parse_size, required=True, help="output size WxH")
    p.add_argument("--calib-size", type=_parse_size, help="image size the calibration refers to (rescales intrinsics)")
    p.add_argument("--radius", type=float, help="disc radius in pixels (>= 1)")
    p.add_argument("--beams", type=int, help="keep this many evenly spaced beams")
    p.add_argument("--out", required=True, help="output directory or depth PNG path")
    p.set_defaults(func=cmd_pdr)

    p = sub.add_parser("refine", parents=[common], help="graph-based depth correction against LiDAR")
    p.add_argument("--depth", nargs="+", required=True, help="initial depth PNG(s)")
    p.add_argument("--points", nargs="+", required=True, help="velodyne .bin file(s), one per depth")
    p.add_argument("--calib", required=True)
    p.add_argument("--calib-size", type=_parse_size)
    p.add_argument("--beams", type=int)
    p.add_argument("--gdc-k", type=int, help="neighbours per node")
    p.add_argument("--gdc-stride", type=int, help="node grid stride in pixels")
    p.add_argument("--gdc-anchor-strength", type=float, help="anchor weight; inf pins anchors")
    p.add_argument("--out", required=True)
    p.add_argument("--time", action="store_true", help="report wall-clock ms and FPS")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("optimize", parents=[common], help="recover depth by direct optimisation")
    p.add_argument("--synthetic", action="store_true", help="use the bundled textured-plane scene")
    p.add_argument("--frames", nargs=3, metavar=("PREV", "CUR", "NEXT"))
    p.add_argument("--calib")
    p.add_argument("--calib-size", type=_parse_size)
    p.add_argument("--poses", help="JSON with 6-vectors 'prev' and 'next' (target to neighbour)")
    p.add_argument("--gt", help="ground-truth depth PNG for reporting")
    p.add_argument("--points", help="velodyne .bin for --pdr / --gdc")
    p.add_argument("--beams", type=int)
    p.add_argument("--init-depth", help="initial depth PNG")
    p.add_argument("--init-scale", type=float, help="start from this multiple of the ground truth (2 with --synthetic)")
    p.add_argument("--pdr", action="store_true", help="seed the initial depth from the PDR")
    p.add_argument("--enhanced", help="distillation target depth PNG")
    p.add_argument("--gdc", action="store_true", help="distil toward the graph-corrected initial depth")
    p.add_argument("--iterations", type=int)
    p.add_argument("--step", type=float)
    p.add_argument("--out", help="write the recovered depth PNG here")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("eval", parents=[common], help="depth metrics")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--gt", nargs="+", required=True)
    p.add_argument("--cap", type=float)
    p.add_argument("--crop", help="eigen, none, or top,bottom,left,right (default from config)")
    p.add_argument("--median-scale", action="store_true")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", parents=[common], help="write pseudo-LiDAR point clouds")
    p.add_argument("--depth", nargs="+", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--calib-size", type=_parse_size)
    p.add_argument("--image", nargs="+", help="colour images for PLY, one per depth")
    p.add_argument("--format", choices=("ply", "bin"), default="ply")
    p.add_argument("--lidar-frame", action="store_true", help="write points in the LiDAR frame")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic scene to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--layout", choices=("plane", "slanted", "kitti"), default="plane")
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=_parse_size)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    label = f"fusionkit {args.command}" if args.command else "fusionkit"
    try:
        cfg = load_config(getattr(args, "config", None) or args.root_config)
        if args.dump_config:
            print(cfg.dumps())
            return EXIT_OK
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        if args.jobs < 1:
            raise UsageError(f"--jobs must be >= 1, got {args.jobs}")
        return args.func(args, cfg)
    except (UnanchoredSystemError, ConvergenceError, DivergenceError) as exc:
        _log(f"{label}: error: {exc}")
        return EXIT_NUMERIC
    except (FusionKitError, ValueError, OSError) as exc:
        _log(f"{label}: error: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
