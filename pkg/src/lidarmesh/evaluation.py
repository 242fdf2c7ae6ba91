"""Trajectory and reconstruction metrics, plus resource logging.

Trajectory metrics pair estimate and reference by nearest timestamp,
then report absolute error after an optional rigid alignment (ATE),
relative error over a fixed traveled distance (RPE) with yaw errors,
and start-to-end drift. Cloud-to-cloud distance follows a normals-based
local-plane comparison: each evaluated point measures its offset to the
reference surface along the locally estimated reference normal, falling
back to plain nearest-neighbor distance where the neighborhood is too
thin, and dropping points with no reference match nearby.

``ResourceLogger`` samples process CPU and RAM at a fixed interval and
summarizes them, including a linear fit of RAM growth extrapolated to
exhaustion.
"""

import threading
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose, yaw_of_quat


@dataclass(frozen=True)
class Trajectory:
    """Time-ordered poses with strictly increasing stamps."""

    stamps: np.ndarray
    poses: list

    def __post_init__(self):
        stamps = np.asarray(self.stamps, dtype=float).reshape(-1)
        object.__setattr__(self, "stamps", stamps)
        if len(stamps) != len(self.poses):
            raise ValueError("stamps and poses lengths differ")
        if len(stamps) > 1 and not (np.diff(stamps) > 0).all():
            raise ValueError("stamps must be strictly increasing")

    def __len__(self):
        return len(self.stamps)


def associate(est, ref, max_gap=0.05):
    """Pair estimate and reference poses by nearest stamp.

    Candidate pairs are considered best-gap first; every pose is used
    at most once and pairs with a stamp gap above max_gap are dropped.
    Returns (est_index, ref_index) pairs sorted by estimate index, and
    raises ValueError when nothing overlaps.
    """
    if len(est) == 0 or len(ref) == 0:
        raise ValueError("no overlap between trajectories")
    candidates = []
    right = np.searchsorted(ref.stamps, est.stamps)
    for i in range(len(est)):
        for j in (right[i] - 1, right[i]):
            if 0 <= j < len(ref):
                gap = abs(est.stamps[i] - ref.stamps[j])
                if gap <= max_gap:
                    candidates.append((gap, i, int(j)))
    candidates.sort()
    used_est, used_ref, pairs = set(), set(), []
    for gap, i, j in candidates:
        if i in used_est or j in used_ref:
            continue
        used_est.add(i)
        used_ref.add(j)
        pairs.append((i, j))
    if not pairs:
        raise ValueError("no overlap between trajectories")
    pairs.sort()
    return pairs


def _rigid_alignment(src, dst):
    """Closed-form rigid transform minimizing sum |R src + t - dst|^2."""
    c_src = src.mean(axis=0)
    c_dst = dst.mean(axis=0)
    h = (src - c_src).T @ (dst - c_dst)
    u, s, vt = np.linalg.svd(h)
    if s[1] < 1e-9 * max(s[0], 1e-300):
        warnings.warn("degenerate geometry for trajectory alignment")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, c_dst - r @ c_src


@dataclass(frozen=True)
class AteResult:
    rmse: float
    mean: float
    std: float
    errors: np.ndarray
    alignment: Pose | None


def ate(est, ref, align=False, max_gap=0.05):
    """Absolute trajectory error over associated pose pairs.

    With align=True a closed-form rigid transform is fitted onto the
    estimate first (needs at least 3 pairs); the RMSE of the remaining
    translation residuals is reported either way.
    """
    pairs = associate(est, ref, max_gap)
    p = np.array([est.poses[i].t for i, _ in pairs])
    q = np.array([ref.poses[j].t for _, j in pairs])
    transform = None
    if align:
        if len(pairs) < 3:
            raise ValueError("alignment needs at least 3 pose pairs")
        r, t = _rigid_alignment(p, q)
        p = p @ r.T + t
        transform = Pose.from_matrix(
            np.block([[r, t[:, None]], [np.zeros((1, 3)), np.ones((1, 1))]]))
    errors = np.linalg.norm(p - q, axis=1)
    return AteResult(float(np.sqrt(np.mean(errors ** 2))),
                     float(errors.mean()), float(errors.std()),
                     errors, transform)


@dataclass(frozen=True)
class RpeResult:
    rmse: float
    trans_errors: np.ndarray
    yaw_errors: np.ndarray
    yaw_smoothed: np.ndarray


def rpe_distance(est, ref, window=10.0, smooth_window=50, max_gap=0.05):
    """Relative pose error over a fixed reference travel distance.

    For every associated pose, the first later pose at least ``window``
    meters of reference travel ahead closes an interval; the estimate's
    relative motion over that interval is compared to the reference's.
    Reports the translation-error RMSE plus absolute yaw errors, raw
    and moving-average smoothed.
    """
    pairs = associate(est, ref, max_gap)
    ref_t = np.array([ref.poses[j].t for _, j in pairs])
    travel = np.r_[0.0, np.cumsum(np.linalg.norm(np.diff(ref_t, axis=0),
                                                 axis=1))]
    if travel[-1] < window:
        raise ValueError(
            f"trajectory covers {travel[-1]:.2f} m, shorter than the "
            f"{window:.2f} m evaluation window")
    ends = np.searchsorted(travel, travel + window)
    trans, yaw = [], []
    for a, b in enumerate(ends):
        if b >= len(pairs):
            break
        ei, ri = pairs[a], pairs[b]
        rel_est = est.poses[ei[0]].inverse().compose(est.poses[ri[0]])
        rel_ref = ref.poses[ei[1]].inverse().compose(ref.poses[ri[1]])
        trans.append(np.linalg.norm(rel_est.t - rel_ref.t))
        delta = rel_ref.inverse().compose(rel_est)
        yaw.append(abs(yaw_of_quat(delta.q)))
    trans = np.asarray(trans)
    yaw = np.asarray(yaw)
    if len(trans) == 0:
        raise ValueError("no interval spans the evaluation window")
    k = min(smooth_window, len(yaw))
    smoothed = np.convolve(yaw, np.full(k, 1.0 / k), mode="valid")
    return RpeResult(float(np.sqrt(np.mean(trans ** 2))), trans, yaw,
                     smoothed)


def final_drift(traj):
    """Distance between the last and the first pose of a trajectory."""
    if len(traj) < 2:
        raise ValueError("final drift needs at least 2 poses")
    return float(np.linalg.norm(traj.poses[-1].t - traj.poses[0].t))


@dataclass(frozen=True)
class CloudDistanceParams:
    normal_scale: float = 0.5
    projection_scale: float = 0.5
    max_match: float = 2.0
    min_neighbors: int = 5


@dataclass(frozen=True)
class CloudDistanceResult:
    distances: np.ndarray
    mean: float
    std: float
    p90: float
    matched_fraction: float


def cloud_distance(eval_cloud, ref_cloud, params=None):
    """Distance of each evaluated point to the reference surface.

    The reference normal is estimated from reference points within
    ``normal_scale`` of the evaluated point; the distance is the offset
    along that normal to the centroid of reference points inside a
    cylinder of diameter ``projection_scale`` around the normal through
    the point. Points whose neighborhood has fewer than
    ``min_neighbors`` reference points fall back to nearest-neighbor
    distance; points with no reference point within ``max_match`` are
    dropped from the statistics.
    """
    params = params or CloudDistanceParams()
    pts = np.asarray(getattr(eval_cloud, "points", eval_cloud),
                     dtype=float).reshape(-1, 3)
    ref = np.asarray(getattr(ref_cloud, "points", ref_cloud),
                     dtype=float).reshape(-1, 3)
    if len(pts) == 0 or len(ref) == 0:
        raise ValueError("clouds must be non-empty")
    tree = cKDTree(ref)
    nn_dist, _ = tree.query(pts)
    normal_nbrs = tree.query_ball_point(pts, params.normal_scale)
    match_nbrs = tree.query_ball_point(pts, params.max_match)
    radius = params.projection_scale / 2.0
    distances = []
    for i, point in enumerate(pts):
        if nn_dist[i] > params.max_match:
            continue
        nbrs = normal_nbrs[i]
        if len(nbrs) < params.min_neighbors:
            distances.append(nn_dist[i])
            continue
        local = ref[nbrs] - point
        cov = local.T @ local / len(nbrs)
        cov -= np.outer(local.mean(axis=0), local.mean(axis=0))
        _, vecs = np.linalg.eigh(cov)
        normal = vecs[:, 0]
        rel = ref[match_nbrs[i]] - point
        axial = rel @ normal
        radial2 = np.einsum("ij,ij->i", rel, rel) - axial ** 2
        in_cyl = radial2 <= radius ** 2
        if not in_cyl.any():
            distances.append(nn_dist[i])
            continue
        distances.append(abs(float(axial[in_cyl].mean())))
    distances = np.asarray(distances)
    if len(distances) == 0:
        raise ValueError("no evaluated point matches the reference")
    return CloudDistanceResult(distances, float(distances.mean()),
                               float(distances.std()),
                               float(np.percentile(distances, 90)),
                               len(distances) / len(pts))


def _psutil_probe():
    """Process-wide (cpu %, ram %) closure, or None when unavailable."""
    try:
        import psutil

        proc = psutil.Process()
        total = psutil.virtual_memory().total
        proc.cpu_percent(interval=None)        # prime the cpu counter

        def probe():
            return (proc.cpu_percent(interval=None),
                    100.0 * proc.memory_info().rss / total)

        probe()
        return probe
    except Exception:                          # pragma: no cover
        return None


class ResourceLogger:
    """Periodic CPU/RAM sampler with a text summary.

    Rows are (elapsed seconds, cpu percent, ram percent); start()/stop()
    run sampling on a daemon thread every ``interval`` seconds, and
    sample() records one row on demand. When the platform counters are
    unavailable the logger disables itself with a warning and records
    nothing.
    """

    def __init__(self, interval=1.0, probe=None, clock=time.monotonic):
        self.interval = float(interval)
        self.rows = []
        self._clock = clock
        self._start_time = clock()
        self._probe = probe if probe is not None else _psutil_probe()
        self.enabled = self._probe is not None
        if not self.enabled:                   # pragma: no cover
            warnings.warn("resource counters unavailable; "
                          "resource logging disabled")
        self._stop = threading.Event()
        self._thread = None

    def sample(self):
        if not self.enabled:                   # pragma: no cover
            return None
        cpu, ram = self._probe()
        row = (self._clock() - self._start_time, float(cpu), float(ram))
        self.rows.append(row)
        return row

    def start(self):
        if not self.enabled or self._thread is not None:
            return

        def loop():
            while not self._stop.wait(self.interval):
                self.sample()

        self._thread = threading.Thread(target=loop, daemon=True)
        self._thread.start()

    def stop(self):
        if self._thread is not None:
            self._stop.set()
            self._thread.join()
            self._thread = None

    def ram_slope(self):
        """(percent-per-second RAM slope, seconds to projected
        exhaustion or None) from a linear fit of the samples."""
        if len(self.rows) < 2:
            return 0.0, None
        t = np.array([r[0] for r in self.rows])
        ram = np.array([r[2] for r in self.rows])
        if np.ptp(t) <= 0:
            return 0.0, None
        slope = float(np.polyfit(t, ram, 1)[0])
        if slope <= 1e-12:
            return slope, None
        return slope, float((100.0 - ram[-1]) / slope)

    def summary(self):
        if not self.rows:
            return None
        cpu = np.array([r[1] for r in self.rows])
        ram = np.array([r[2] for r in self.rows])
        text = (f"CPU (mean: {cpu.mean():.1f} %, std: {cpu.std():.1f} %) "
                f"and RAM (max: {ram.max():.1f} %)")
        slope, exhaustion = self.ram_slope()
        if exhaustion is None:
            return text + f"; RAM slope {slope:.5f} %/s, no exhaustion " \
                          f"projected"
        return text + f"; RAM slope {slope:.5f} %/s, estimated " \
                      f"exhaustion in {exhaustion:.0f} s"

    def write_csv(self, path):
        with open(path, "w") as f:
            f.write("time,cpu_percent,ram_percent\n")
            for t, cpu, ram in self.rows:
                f.write(f"{t:.3f},{cpu:.2f},{ram:.4f}\n")
