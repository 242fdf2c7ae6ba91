"""Command-line front end: map datasets, fuse meshes, evaluate results.

Subcommands
    run        full pipeline: trajectories, colored mesh, resource log
    slam       localisation only (no fusion, no mesh artifact)
    mesh       TSDF fusion and mesh extraction from a given trajectory
    colorize   per-scan colored point clouds written as PLY
    eval-traj  ATE / RPE / final drift between two trajectory files
    eval-mesh  point-to-surface distances between a mesh and a cloud
    synth      generate a synthetic courtyard dataset with ground truth

Any fatal stage failure prints ``[stage] message`` on stderr and exits
nonzero.
"""

import argparse
import os
import sys

import numpy as np

from . import dataset, synthworld
from .colorize import colorize_scan, undistort_image
from .config import resolve_config
from .errors import StageError
from .evaluation import (CloudDistanceParams, Trajectory, ate, cloud_distance,
                         final_drift, rpe_distance)
from .geometry import pose_interpolate
from .mesher import extract_mesh
from .pipeline import run
from .ply import read_ply, write_cloud, write_mesh
from .tsdf import TsdfVolume


def _add_common(parser, dataset_required=True, out_required=True):
    parser.add_argument("--dataset", required=dataset_required,
                        help="dataset root directory")
    parser.add_argument("--out", required=out_required,
                        help="output directory")
    parser.add_argument("--config", default=None,
                        help="config file path or preset name "
                             "(newer_college, summit, scout)")
    parser.add_argument("--seed", type=int, default=0,
                        help="seed for randomized steps (mapping itself "
                             "is deterministic)")


def _cmd_run(args, build_mesh=True):
    cfg = resolve_config(args.config)
    result = run(args.dataset, cfg, args.out,
                 loop_closure=not args.no_loop_closure,
                 build_mesh=build_mesh, prefetch=not args.no_prefetch,
                 export_every=args.export_every, seed=args.seed)
    with open(os.path.join(args.out, "run_summary.txt")) as f:
        sys.stdout.write(f.read())
    print(f"Artifacts written to {result.out_dir}")
    return 0


def _cmd_slam(args):
    args.export_every = None
    args.no_prefetch = getattr(args, "no_prefetch", False)
    return _cmd_run(args, build_mesh=False)


def _pose_at(stamps, poses, stamp):
    """Trajectory pose at `stamp`: exact when present, interpolated
    between neighbors otherwise; None outside the covered range."""
    idx = int(np.searchsorted(stamps, stamp))
    if idx < len(stamps) and abs(stamps[idx] - stamp) <= 1e-9:
        return poses[idx]
    if idx > 0 and abs(stamps[idx - 1] - stamp) <= 1e-9:
        return poses[idx - 1]
    if idx == 0 or idx >= len(stamps):
        return None
    alpha = (stamp - stamps[idx - 1]) / (stamps[idx] - stamps[idx - 1])
    return pose_interpolate(poses[idx - 1], poses[idx], alpha)


def _cmd_mesh(args):
    cfg = resolve_config(args.config)
    manifest = dataset.load_manifest(args.dataset)
    stamps, poses = dataset.read_trajectory(args.trajectory)
    if len(stamps) == 0:
        raise StageError("mesher", f"empty trajectory: {args.trajectory}")
    cam_models = [c.model for c in manifest.cameras]
    volume = TsdfVolume(cfg.tsdf)
    fused = skipped = 0
    for frame in dataset.frames(manifest):
        pose = _pose_at(stamps, poses, frame.scan.stamp)
        if pose is None:
            skipped += 1
            continue
        pairs = [(cam_models[ci], undistort_image(img.pixels, cam_models[ci]))
                 for ci, img in frame.images]
        volume.integrate_scan(colorize_scan(frame.scan, pairs), pose)
        fused += 1
    mesh = extract_mesh(volume)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "mesh.ply")
    write_mesh(path, mesh)
    note = f" ({skipped} scans outside the trajectory)" if skipped else ""
    print(f"Fused {fused} scans{note}; wrote {path} "
          f"({len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles)")
    return 0


def _cmd_colorize(args):
    manifest = dataset.load_manifest(args.dataset)
    cam_models = [c.model for c in manifest.cameras]
    os.makedirs(args.out, exist_ok=True)
    written = 0
    for frame in dataset.frames(manifest):
        pairs = [(cam_models[ci], undistort_image(img.pixels, cam_models[ci]))
                 for ci, img in frame.images]
        cloud = colorize_scan(frame.scan, pairs)
        name = f"cloud_{dataset.format_stamp(frame.scan.stamp)}.ply"
        write_cloud(os.path.join(args.out, name), cloud)
        written += 1
    print(f"Wrote {written} colored clouds to {args.out}")
    return 0


def _read_traj(path):
    try:
        stamps, poses = dataset.read_trajectory(path)
    except (OSError, ValueError) as e:
        raise StageError("eval", f"cannot read trajectory {path}: {e}")
    if len(stamps) == 0:
        raise StageError("eval", f"empty trajectory: {path}")
    return Trajectory(stamps, poses)


def _cmd_eval_traj(args):
    est = _read_traj(args.est)
    ref = _read_traj(args.ref)
    try:
        a = ate(est, ref, align=not args.no_align, max_gap=args.max_gap)
        print(f"ATE RMSE = {a.rmse:.9f} m "
              f"(mean = {a.mean:.9f} m, std = {a.std:.9f} m)")
        try:
            r = rpe_distance(est, ref, window=args.window,
                             max_gap=args.max_gap)
            yaw_rmse = float(np.sqrt(np.mean(r.yaw_errors ** 2)))
            print(f"RPE = {r.rmse:.9f} m over {args.window:g} m windows "
                  f"(yaw RMSE = {yaw_rmse:.9f} rad)")
        except ValueError as e:
            print(f"RPE unavailable: {e}")
        print(f"Final drift = {final_drift(est):.9f} m")
    except ValueError as e:
        raise StageError("eval", str(e))
    return 0


def _load_points(path):
    try:
        vertex, _ = read_ply(path)
    except (OSError, ValueError) as e:
        raise StageError("eval", f"cannot read PLY {path}: {e}")
    return np.stack([vertex["x"], vertex["y"], vertex["z"]],
                    axis=1).astype(float)


def _cmd_eval_mesh(args):
    pts = _load_points(args.mesh)
    ref = _load_points(args.ref)
    params = CloudDistanceParams(max_match=args.max_match)
    try:
        res = cloud_distance(pts, ref, params)
    except ValueError as e:
        raise StageError("eval", str(e))
    print(f"Mean = {res.mean:.3f} m, Std = {res.std:.3f} m")
    print(f"P90 = {res.p90:.3f} m "
          f"(matched {100.0 * res.matched_fraction:.1f} % of "
          f"{len(pts)} points)")
    return 0


def _cmd_synth(args):
    margin = 4.0
    a = args.length / 2.0 - margin
    b = args.width / 2.0 - margin
    if a <= 0 or b <= 0:
        raise StageError("synth", "courtyard too small for the default "
                                  f"loop: need length and width > "
                                  f"{2 * margin:g} m")
    waypoints = [(-a, -b), (a, -b), (a, b), (-a, b), (-a, -b)]
    path = synthworld.PolylinePath(waypoints, speed=args.speed)
    scene = synthworld.box_canyon(args.length, args.width,
                                  n_obstacles=args.obstacles, seed=args.seed,
                                  clear_path=waypoints)
    cams = [synthworld.camera_looking(yaw, distortion=(-0.05, 0, 0, 0, 0))
            for yaw in np.linspace(0.0, 2.0 * np.pi, args.cameras,
                                   endpoint=False)]
    spec = synthworld.TrajectorySpec(
        path=path, duration=args.duration or path.duration(),
        lidar_hz=args.lidar_hz, camera_hz=args.camera_hz,
        imu_hz=args.imu_hz, odom_hz=args.odom_hz,
        range_sigma=args.range_sigma, gyro_sigma=args.gyro_sigma,
        odom_sigma=args.odom_sigma, seed=args.seed)
    manifest = synthworld.generate_dataset(scene, spec, args.out,
                                           cameras=cams)
    print(f"Wrote {len(manifest.scan_stamps)} scans, "
          f"{len(manifest.cameras)} camera stream(s) to {args.out}")
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="lidarmesh",
        description="LiDAR mapping: NDT scan matching with loop closure "
                    "and colorized TSDF meshing.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="full mapping pipeline")
    _add_common(p)
    p.add_argument("--no-loop-closure", action="store_true",
                   help="skip loop detection and graph optimization")
    p.add_argument("--export-every", type=int, default=None, metavar="N",
                   help="also export the mesh every N frames")
    p.add_argument("--no-prefetch", action="store_true",
                   help="read frames on the processing thread")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("slam", help="localisation only, no mesh")
    _add_common(p)
    p.add_argument("--no-loop-closure", action="store_true")
    p.add_argument("--no-prefetch", action="store_true")
    p.set_defaults(func=_cmd_slam)

    p = sub.add_parser("mesh", help="fuse a mesh along a given trajectory")
    _add_common(p)
    p.add_argument("--trajectory", required=True,
                   help="trajectory file providing the fusion poses")
    p.set_defaults(func=_cmd_mesh)

    p = sub.add_parser("colorize", help="write per-scan colored clouds")
    _add_common(p)
    p.set_defaults(func=_cmd_colorize)

    p = sub.add_parser("eval-traj", help="trajectory metrics")
    p.add_argument("--est", required=True, help="estimated trajectory file")
    p.add_argument("--ref", required=True, help="reference trajectory file")
    p.add_argument("--window", type=float, default=10.0,
                   help="RPE window in meters of reference travel")
    p.add_argument("--max-gap", type=float, default=0.05,
                   help="max stamp gap for pose association, seconds")
    p.add_argument("--no-align", action="store_true",
                   help="skip rigid alignment before ATE")
    p.set_defaults(func=_cmd_eval_traj)

    p = sub.add_parser("eval-mesh", help="mesh-to-cloud distances")
    p.add_argument("--mesh", required=True,
                   help="PLY whose vertices are evaluated")
    p.add_argument("--ref", required=True, help="reference PLY cloud")
    p.add_argument("--max-match", type=float, default=2.0,
                   help="drop points with no reference within this distance")
    p.set_defaults(func=_cmd_eval_mesh)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="dataset root to create")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--length", type=float, default=40.0,
                   help="courtyard length, m")
    p.add_argument("--width", type=float, default=20.0,
                   help="courtyard width, m")
    p.add_argument("--obstacles", type=int, default=12)
    p.add_argument("--speed", type=float, default=1.0, help="m/s")
    p.add_argument("--duration", type=float, default=None,
                   help="seconds (default: one full loop)")
    p.add_argument("--cameras", type=int, default=1,
                   help="number of evenly-spread cameras (0 disables)")
    p.add_argument("--lidar-hz", type=float, default=10.0)
    p.add_argument("--camera-hz", type=float, default=10.0)
    p.add_argument("--imu-hz", type=float, default=100.0)
    p.add_argument("--odom-hz", type=float, default=50.0)
    p.add_argument("--range-sigma", type=float, default=0.0)
    p.add_argument("--gyro-sigma", type=float, default=0.0)
    p.add_argument("--odom-sigma", type=float, default=0.0)
    p.set_defaults(func=_cmd_synth)
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StageError as e:
        print(str(e), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
