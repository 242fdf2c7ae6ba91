"""Scan-to-submap NDT front end with a motion-prior guard.

Each incoming scan is range-gated, voxel-filtered and registered
against an NDT grid fused over the last K accepted scans, starting
from the motion prior. A registration whose translation lands more
than guard_threshold from the prior is discarded: the prior is kept
as the pose and the scan stays out of the map.
"""

from collections import deque
from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud, range_filter, voxel_downsample
from .ndt import NdtGrid, register_cloud


@dataclass(frozen=True)
class MatcherParams:
    ndt_resolution: float = 1.0
    vg_size_input: float = 0.1
    vg_size_map: float = 0.1
    min_range: float = 1.0
    max_range: float = 50.0
    num_targeted_cloud: int = 20
    guard_threshold: float = 0.5


@dataclass(frozen=True)
class RegistrationResult:
    pose: object
    converged: bool
    iterations: int
    score: float
    rejected_by_guard: bool = False


class Submap:
    """Ring buffer of the last `capacity` world-frame scans fused into
    one incrementally maintained NDT grid."""

    def __init__(self, resolution, capacity):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = int(capacity)
        self.grid = NdtGrid(resolution)
        self._scans = deque()

    def __len__(self):
        return len(self._scans)

    def insert(self, world_points):
        """Push a world-frame scan, evicting the oldest beyond capacity."""
        world_points = np.asarray(world_points, dtype=float).reshape(-1, 3)
        self._scans.append(world_points)
        self.grid.add_points(world_points)
        while len(self._scans) > self.capacity:
            self.grid.remove_points(self._scans.popleft())
        self.grid.refresh()

    def scans(self):
        return list(self._scans)


def preprocess_scan(cloud, params):
    """Range-gate then voxel-filter a sensor-frame cloud for matching."""
    gated = range_filter(cloud, params.min_range, params.max_range)
    return voxel_downsample(gated, params.vg_size_input)


def register(submap, points, prior, params):
    """Register a preprocessed sensor-frame cloud against the submap.

    An empty submap accepts the prior as-is (the scan will seed the
    map). Otherwise damped Gauss-Newton runs from the prior; if the
    result's translation moved more than guard_threshold away from
    the prior's, the result is rejected and the prior kept, exactly.
    """
    if len(submap) == 0:
        return RegistrationResult(prior, True, 0, 0.0, False)
    pose, converged, iterations, score = register_cloud(
        submap.grid, points, prior)
    if np.linalg.norm(pose.t - prior.t) > params.guard_threshold:
        return RegistrationResult(prior, converged, iterations, score, True)
    return RegistrationResult(pose, converged, iterations, score, False)


def insert_scan(submap, cloud, pose, vg_size_map):
    """Voxel-filter a sensor-frame cloud and push it in world frame."""
    filtered = voxel_downsample(cloud, vg_size_map)
    submap.insert(pose.apply(filtered.points))


class ScanMatcher:
    """Stateful front end: preprocess, register, guard, map update."""

    def __init__(self, params=None):
        self.params = params or MatcherParams()
        self.submap = Submap(self.params.ndt_resolution,
                             self.params.num_targeted_cloud)

    def process_scan(self, cloud, prior):
        """Register one sensor-frame scan from the prior pose and, when
        the guard accepts it, fuse it into the submap. Returns the
        RegistrationResult; rejected scans leave the submap untouched."""
        if not isinstance(cloud, PointCloud):
            cloud = PointCloud(np.asarray(cloud, dtype=float).reshape(-1, 3))
        gated = range_filter(cloud, self.params.min_range,
                             self.params.max_range)
        query = voxel_downsample(gated, self.params.vg_size_input)
        result = register(self.submap, query.points, prior, self.params)
        if not result.rejected_by_guard:
            insert_scan(self.submap, gated, result.pose,
                        self.params.vg_size_map)
        return result
