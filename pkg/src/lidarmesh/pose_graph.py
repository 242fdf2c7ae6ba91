"""Keyframe pose graph: loop-closure detection and SE(3) optimization.

The graph keeps sparse keyframes of the estimated trajectory, each
carrying a voxel-filtered sensor-frame cloud. Loop closures are found
by registering a query keyframe's cloud against an NDT grid fused from
a past keyframe's neighborhood, gated by search radius and by
accumulated travel so recent frames never count as loops. Optimization
is damped Gauss-Newton on relative-pose residuals in the direct-product
chart (rotation vector, translation) with the first node pinned; dense
trajectories are corrected afterwards by interpolating the keyframe
corrections.
"""

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import StageError
from .geometry import (PointCloud, Pose, pose_exp, pose_interpolate,
                       pose_log, voxel_downsample, yaw_of_quat)
from .ndt import ANNEAL_SCHEDULE, NdtGrid, fitness, register_cloud

KEYFRAME_SPACING = 1.0               # m of travel between keyframes
KEYFRAME_YAW = np.deg2rad(15.0)      # or this much turn, whichever first

# Odometry edges trust rotation to ~0.02 rad and translation to ~0.05 m.
ODOM_INFO = np.diag([1 / 0.02 ** 2] * 3 + [1 / 0.05 ** 2] * 3)


@dataclass(frozen=True)
class LoopParams:
    ndt_resolution: float = 1.0
    voxel_leaf_size: float = 0.1
    detection_period: float = 4000.0   # ms of data time between attempts
    threshold_loop_closure: float = 15.0
    distance_loop_closure: float = 50.0
    search_range: float = 50.0
    num_submap_searched: int = 10
    num_adjacent_pose_constraints: int = 10


@dataclass
class Keyframe:
    id: int
    stamp: float
    pose: Pose
    cloud: np.ndarray            # sensor frame, voxel-filtered
    accumulated_distance: float


@dataclass(frozen=True)
class GraphEdge:
    from_id: int
    to_id: int
    relative: Pose               # measured T_from->to
    information: np.ndarray      # 6x6 PSD, (rotation, translation) order

    def __post_init__(self):
        if self.from_id == self.to_id:
            raise ValueError("edge endpoints must differ")


@dataclass(frozen=True)
class LoopCandidate:
    query_id: int
    match_id: int
    fitness: float
    relative: Pose               # measured T_match->query


def loop_edge(candidate, params):
    """Graph edge for an accepted loop, information scaled down from
    the odometry model as the registration fitness worsens."""
    scale = params.threshold_loop_closure / (
        params.threshold_loop_closure + max(candidate.fitness, 0.0))
    return GraphEdge(candidate.match_id, candidate.query_id,
                     candidate.relative, scale * ODOM_INFO)


class PoseGraph:
    """Keyframe store plus loop detection state."""

    def __init__(self, params=None):
        self.params = params or LoopParams()
        self.keyframes = []
        self.edges = []
        self._travel = 0.0
        self._last_pose = None
        self._last_attempt = -np.inf   # stamp of last detection attempt

    def maybe_add_keyframe(self, stamp, pose, cloud,
                           spacing=KEYFRAME_SPACING,
                           yaw_threshold=KEYFRAME_YAW):
        """Track travel over every accepted frame; append a keyframe
        (plus an odometry edge to the previous one) when the robot has
        moved `spacing` or turned `yaw_threshold` since the last.

        Returns the new Keyframe, or None when none was due.
        """
        if self._last_pose is not None:
            self._travel += float(np.linalg.norm(pose.t - self._last_pose.t))
        self._last_pose = pose
        if self.keyframes:
            last = self.keyframes[-1]
            moved = np.linalg.norm(pose.t - last.pose.t)
            turn = yaw_of_quat(pose.q) - yaw_of_quat(last.pose.q)
            turn = abs((turn + np.pi) % (2.0 * np.pi) - np.pi)
            if moved < spacing and turn < yaw_threshold:
                return None
        if isinstance(cloud, PointCloud):
            cloud = cloud.points
        filtered = voxel_downsample(PointCloud(cloud),
                                    self.params.voxel_leaf_size).points
        kf = Keyframe(len(self.keyframes), stamp, pose, filtered,
                      self._travel)
        self.keyframes.append(kf)
        if kf.id > 0:
            prev = self.keyframes[-2]
            rel = prev.pose.inverse().compose(pose)
            self.edges.append(GraphEdge(prev.id, kf.id, rel, ODOM_INFO))
        return kf

    def _neighborhood_grid(self, center):
        """NDT grid fused from a keyframe and its trajectory neighbors
        (num_adjacent_pose_constraints of them), in the world frame."""
        span = self.params.num_adjacent_pose_constraints
        lo = max(0, center.id - span // 2)
        hi = min(len(self.keyframes) - 1, lo + span)
        lo = max(0, hi - span)
        grid = NdtGrid(self.params.ndt_resolution)
        for kf in self.keyframes[lo:hi + 1]:
            grid.add_points(kf.pose.apply(kf.cloud))
        grid.refresh()
        return grid

    def detect_loop(self, query):
        """Look for a past keyframe the query cloud registers against.

        Attempts are throttled to one per detection_period of data
        time. Candidates must lie within search_range of the query and
        be at least distance_loop_closure of travel older. The nearest
        num_submap_searched candidates are each refined by annealed NDT
        registration of the query cloud against the candidate's
        neighborhood grid; the best fitness wins if it clears the
        acceptance threshold.
        """
        p = self.params
        if (query.stamp - self._last_attempt) * 1000.0 < p.detection_period:
            return None
        self._last_attempt = query.stamp
        cands = [kf for kf in self.keyframes
                 if kf.id != query.id
                 and np.linalg.norm(kf.pose.t - query.pose.t) <= p.search_range
                 and (query.accumulated_distance - kf.accumulated_distance)
                 >= p.distance_loop_closure]
        if not cands:
            return None
        cands.sort(key=lambda kf: np.linalg.norm(kf.pose.t - query.pose.t))
        best = None
        for kf in cands[:p.num_submap_searched]:
            grid = self._neighborhood_grid(kf)
            pose, _, _, _ = register_cloud(grid, query.cloud, query.pose,
                                           schedule=ANNEAL_SCHEDULE)
            fit = fitness(grid, query.cloud, pose)
            if best is None or fit < best[0]:
                best = (fit, kf, pose)
        fit, match, refined = best
        if fit > p.threshold_loop_closure:
            return None
        rel = match.pose.inverse().compose(refined)
        return LoopCandidate(query.id, match.id, fit, rel)


def _edge_residual(edge, poses):
    err = edge.relative.inverse().compose(
        poses[edge.from_id].inverse().compose(poses[edge.to_id]))
    return pose_log(err)


def _total_cost(edges, poses):
    return sum(float(r @ e.information @ r)
               for e, r in ((e, _edge_residual(e, poses)) for e in edges))


def _edge_jacobians(edge, poses, eps=1e-6):
    """d residual / d right-perturbation of each endpoint, by central
    differences (the residual is cheap and the chart is exact)."""
    jacs = []
    for which in (edge.from_id, edge.to_id):
        J = np.empty((6, 6))
        base = poses[which]
        for k in range(6):
            delta = np.zeros(6)
            delta[k] = eps
            poses[which] = base.compose(pose_exp(delta))
            rp = _edge_residual(edge, poses)
            poses[which] = base.compose(pose_exp(-delta))
            rm = _edge_residual(edge, poses)
            J[:, k] = (rp - rm) / (2.0 * eps)
        poses[which] = base
        jacs.append(J)
    return jacs


def optimize(graph, fixed_id=0, max_iterations=50, min_decrease=1e-9):
    """Gauss-Newton over all keyframe poses with one node held fixed.

    Iterates until the total weighted squared residual decreases by
    less than min_decrease or max_iterations is hit; a step that would
    increase the cost is halved (up to 16 times) before giving up.
    Keyframe poses are updated in place; returns {id: Pose}.
    """
    kfs = graph.keyframes
    if not kfs:
        return {}
    ids = [kf.id for kf in kfs]
    if fixed_id not in set(ids):
        raise StageError("pose_graph", f"fixed keyframe {fixed_id} unknown")
    neighbors = {i: set() for i in ids}
    for e in graph.edges:
        neighbors[e.from_id].add(e.to_id)
        neighbors[e.to_id].add(e.from_id)
    seen = {fixed_id}
    frontier = deque([fixed_id])
    while frontier:
        for nxt in neighbors[frontier.popleft()]:
            if nxt not in seen:
                seen.add(nxt)
                frontier.append(nxt)
    for i in ids:
        if i not in seen:
            raise StageError(
                "pose_graph",
                f"keyframe {i} is not connected to fixed keyframe {fixed_id}")

    poses = {kf.id: kf.pose for kf in kfs}
    free = [i for i in ids if i != fixed_id]
    if not free:
        return poses
    col = {i: 6 * k for k, i in enumerate(free)}
    n = 6 * len(free)
    cost = _total_cost(graph.edges, poses)
    for _ in range(max_iterations):
        H = np.zeros((n, n))
        b = np.zeros(n)
        for e in graph.edges:
            r = _edge_residual(e, poses)
            Ji, Jj = _edge_jacobians(e, poses)
            for i, J in ((e.from_id, Ji), (e.to_id, Jj)):
                if i == fixed_id:
                    continue
                ci = col[i]
                b[ci:ci + 6] += J.T @ e.information @ r
                for j, Jo in ((e.from_id, Ji), (e.to_id, Jj)):
                    if j == fixed_id:
                        continue
                    cj = col[j]
                    H[ci:ci + 6, cj:cj + 6] += J.T @ e.information @ Jo
        damping = 1e-9 * (np.trace(H) / max(n, 1) + 1.0)
        try:
            step = np.linalg.solve(H + damping * np.eye(n), -b)
        except np.linalg.LinAlgError:
            break
        improved = False
        for _ in range(16):
            trial = dict(poses)
            for i in free:
                ci = col[i]
                trial[i] = poses[i].compose(pose_exp(step[ci:ci + 6]))
            trial_cost = _total_cost(graph.edges, trial)
            if trial_cost <= cost:
                improved = True
                break
            step = 0.5 * step
        if not improved:
            break
        decrease = cost - trial_cost
        poses, cost = trial, trial_cost
        if decrease < min_decrease:
            break
    for kf in kfs:
        kf.pose = poses[kf.id]
    return poses


def propagate_correction(graph, stamps, poses):
    """Carry optimized keyframe poses onto a dense trajectory.

    Each keyframe's correction is the world-frame update new*old^-1
    taken against the trajectory pose at that keyframe's stamp; between
    keyframes the correction is interpolated (slerp on rotation, lerp
    on translation), and before the first / after the last it applies
    unchanged. Returns the corrected pose list.
    """
    if not graph.keyframes:
        return list(poses)
    stamps = np.asarray(stamps, dtype=float)
    kf_stamps = []
    corrections = []
    for kf in graph.keyframes:
        idx = int(np.searchsorted(stamps, kf.stamp))
        idx = min(max(idx, 0), len(stamps) - 1)
        if abs(stamps[idx] - kf.stamp) > 1e-9:
            raise StageError(
                "pose_graph",
                f"keyframe stamp {kf.stamp} missing from trajectory")
        kf_stamps.append(kf.stamp)
        corrections.append(kf.pose.compose(poses[idx].inverse()))
    kf_stamps = np.asarray(kf_stamps)
    corrected = []
    for s, pose in zip(stamps, poses):
        k = int(np.searchsorted(kf_stamps, s, side="right")) - 1
        if k < 0:
            corr = corrections[0]
        elif k >= len(corrections) - 1:
            corr = corrections[-1]
        else:
            span = kf_stamps[k + 1] - kf_stamps[k]
            alpha = 0.0 if span <= 0 else (s - kf_stamps[k]) / span
            corr = pose_interpolate(corrections[k], corrections[k + 1],
                                    float(alpha))
        corrected.append(corr.compose(pose))
    return corrected
