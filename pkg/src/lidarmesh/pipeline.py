"""End-to-end mapping runs: dataset in, trajectories and mesh out.

One run threads four stages together. A light IMU/wheel filter turns
the sensor stream between consecutive sweeps into a relative motion
prior; NDT scan matching refines that prior against a rolling submap
and guards against implausible jumps; accepted sweeps drive keyframe
selection and loop detection, accumulating pose-graph constraints; and
the full-resolution sweep -- colorized from whatever cameras saw it --
is fused into a TSDF volume at the matched pose. When the stream ends,
the collected loop constraints are optimized once and the correction
is interpolated over the dense trajectory, producing a loop-closed
pose file alongside the online one. The mesh is extracted from the
blocks fusion touched, incrementally across exports.

Dataset decoding can run on a worker thread behind a bounded queue
(depth 2), overlapping disk and image decode with compute. All
state-bearing stages execute sequentially on the consumer thread, so
prefetched and fully sequential runs produce identical results.
"""

import os
import queue
import threading
import time
from dataclasses import dataclass

import numpy as np

from . import dataset
from .colorize import colorize_scan, undistort_image
from .config import PipelineConfig
from .ekf import PriorFilter, prior_delta
from .errors import StageError
from .evaluation import ResourceLogger, Trajectory, final_drift
from .geometry import Pose, range_filter
from .mesher import MeshCache
from .ply import write_mesh
from .pose_graph import PoseGraph, loop_edge, optimize, propagate_correction
from .scan_matcher import ScanMatcher
from .tsdf import TsdfVolume


class _Prefetcher:
    """Iterate a frame source on a worker thread via a bounded queue.

    The worker blocks once `depth` frames are waiting, the consumer
    blocks when none is ready; exceptions cross over and re-raise in
    the consumer. ``close()`` releases the worker early.
    """

    def __init__(self, iterable, depth=2):
        self._queue = queue.Queue(maxsize=depth)
        self._stop = False
        self._worker = threading.Thread(target=self._pump,
                                        args=(iter(iterable),), daemon=True)
        self._worker.start()

    def _put(self, item):
        while True:
            if self._stop:
                return False
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue

    def _pump(self, it):
        try:
            for frame in it:
                if not self._put(("frame", frame)):
                    return
            self._put(("done", None))
        except BaseException as exc:    # re-raised on the consumer side
            self._put(("raise", exc))

    def __iter__(self):
        return self

    def __next__(self):
        kind, payload = self._queue.get()
        if kind == "frame":
            return payload
        if kind == "raise":
            raise payload
        raise StopIteration

    def close(self):
        self._stop = True
        while True:
            try:
                self._queue.get_nowait()
            except queue.Empty:
                break
        self._worker.join()


@dataclass
class RunResult:
    """Everything one mapping run produces, in memory.

    ``poses_sm`` are the online scan-matcher poses, one per processed
    frame; ``poses_lc`` the loop-closed trajectory over the same stamps
    (equal to ``poses_sm`` when no loop constraint was found or loop
    closure was disabled). ``drift_sm``/``drift_lc`` measure how far
    each trajectory's endpoint lies from its start.
    """

    stamps: np.ndarray
    poses_sm: list
    poses_lc: list
    mesh: object                 # TriangleMesh, or None when fusion is off
    frames_processed: int
    guard_rejections: int
    keyframes: int
    loop_closures: int
    drift_sm: float
    drift_lc: float
    mean_frame_ms: float
    resource_summary: str
    out_dir: str = None


def _summary_text(result):
    lines = [
        f"Frames processed: {result.frames_processed}",
        f"Guard rejections: {result.guard_rejections}",
        f"Keyframes: {result.keyframes}",
        f"Loop closures: {result.loop_closures}",
        f"Scan matcher final APE {result.drift_sm:.3f} m",
        f"Loop closure final APE {result.drift_lc:.3f} m",
        f"Mean frame time: {result.mean_frame_ms:.1f} ms",
        result.resource_summary,
    ]
    return "\n".join(lines) + "\n"


def run(dataset_path, config=None, out_dir=None, *, loop_closure=True,
        build_mesh=True, prefetch=True, export_every=None,
        resource_logger=None, seed=None):
    """Map one dataset; returns a RunResult and, with out_dir set,
    writes trajectory_sm.txt, trajectory_lc.txt, mesh.ply,
    resources.csv and run_summary.txt there.

    export_every overrides the config's mesher setting: every N
    processed frames the current mesh is additionally written to
    mesh_<frame>.ply (0 means final export only). The pipeline itself
    is deterministic; ``seed`` is accepted for interface symmetry with
    dataset generation and ignored.
    """
    del seed
    cfg = config or PipelineConfig()
    if isinstance(dataset_path, dataset.DatasetManifest):
        manifest = dataset_path
    else:
        manifest = dataset.load_manifest(dataset_path)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    matcher = ScanMatcher(cfg.slam)
    graph = PoseGraph(cfg.loop)
    volume = TsdfVolume(cfg.tsdf) if build_mesh else None
    cache = MeshCache(volume) if build_mesh else None
    cam_models = [c.model for c in manifest.cameras]
    logger = resource_logger if resource_logger is not None \
        else ResourceLogger()
    every = cfg.mesher.export_every if export_every is None \
        else int(export_every)

    stamps = []
    poses_sm = []
    guard_rejections = 0
    loop_closures = 0
    prior_filter = None
    prev_state = None
    compute_seconds = 0.0

    frame_stream = dataset.frames(manifest)
    if prefetch:
        frame_stream = _Prefetcher(frame_stream)

    logger.start()
    try:
        for frame in frame_stream:
            t0 = time.perf_counter()
            scan = frame.scan

            if prior_filter is None:
                # The first pose anchors the world frame; the opening
                # sensor window only initializes the filter state.
                prior_filter = PriorFilter(cfg.ekf, scan.stamp)
                prev_state = prior_filter.process_window(
                    frame.imu, frame.odom, scan.stamp)
                prior = Pose.identity()
            else:
                state = prior_filter.process_window(
                    frame.imu, frame.odom, scan.stamp)
                prior = poses_sm[-1].compose(prior_delta(prev_state, state))
                prev_state = state

            result = matcher.process_scan(scan.cloud, prior)
            pose = result.pose
            stamps.append(scan.stamp)
            poses_sm.append(pose)

            if result.rejected_by_guard:
                guard_rejections += 1
            else:
                kept = range_filter(scan.cloud, cfg.slam.min_range,
                                    cfg.slam.max_range)
                kf = graph.maybe_add_keyframe(scan.stamp, pose, kept)
                if loop_closure and kf is not None:
                    cand = graph.detect_loop(kf)
                    if cand is not None:
                        graph.edges.append(loop_edge(cand, cfg.loop))
                        loop_closures += 1

            if volume is not None:
                pairs = [(cam_models[ci],
                          undistort_image(img.pixels, cam_models[ci]))
                         for ci, img in frame.images]
                colored = colorize_scan(scan, pairs)
                volume.integrate_scan(colored, pose)
                if out_dir is not None and every > 0 \
                        and len(stamps) % every == 0:
                    write_mesh(os.path.join(
                        out_dir, f"mesh_{len(stamps):06d}.ply"),
                        cache.update())

            compute_seconds += time.perf_counter() - t0
    finally:
        if logger.enabled:
            logger.sample()
        logger.stop()
        if prefetch:
            frame_stream.close()

    if not stamps:
        raise StageError("ingest", "dataset produced no frames")

    poses_lc = list(poses_sm)
    if loop_closure and loop_closures > 0:
        optimize(graph)
        poses_lc = propagate_correction(graph, stamps, poses_sm)

    mesh = cache.update() if build_mesh else None
    stamps = np.asarray(stamps, dtype=float)

    def drift(poses):
        if len(poses) < 2:
            return 0.0
        return final_drift(Trajectory(stamps, poses))

    result = RunResult(
        stamps=stamps,
        poses_sm=poses_sm,
        poses_lc=poses_lc,
        mesh=mesh,
        frames_processed=len(stamps),
        guard_rejections=guard_rejections,
        keyframes=len(graph.keyframes),
        loop_closures=loop_closures,
        drift_sm=drift(poses_sm),
        drift_lc=drift(poses_lc),
        mean_frame_ms=1000.0 * compute_seconds / len(stamps),
        resource_summary=logger.summary() or "resource logging disabled",
        out_dir=out_dir,
    )

    if out_dir is not None:
        dataset.write_trajectory(os.path.join(out_dir, "trajectory_sm.txt"),
                                 stamps, poses_sm)
        dataset.write_trajectory(os.path.join(out_dir, "trajectory_lc.txt"),
                                 stamps, poses_lc)
        if mesh is not None:
            write_mesh(os.path.join(out_dir, "mesh.ply"), mesh)
        logger.write_csv(os.path.join(out_dir, "resources.csv"))
        with open(os.path.join(out_dir, "run_summary.txt"), "w") as f:
            f.write(_summary_text(result))
    return result
