"""Synthetic box-world scenes, sensors and dataset generation.

Everything here is analytic and seeded so generated datasets come with
exact ground truth: axis-aligned colored boxes, a spinning-LiDAR ray
caster, a tiny flat-shaded camera renderer and parametric paths.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import dataset as ds
from .errors import StageError
from .geometry import (
    PointCloud,
    Pose,
    quat_from_rotvec,
    quat_multiply,
)
from .ply import write_cloud
from .sensors import CameraModel, ImuSample, LidarScan, WheelOdomSample

_GRAVITY = np.array([0.0, 0.0, -9.81])

_PALETTE = np.array([
    [220, 40, 40], [40, 180, 60], [50, 90, 220], [230, 200, 40],
    [200, 60, 200], [40, 200, 200], [240, 130, 30], [150, 150, 150],
], dtype=np.uint8)


class Scene:
    """Axis-aligned colored boxes stored as packed arrays for ray casting."""

    def __init__(self):
        self.lo = np.zeros((0, 3))
        self.hi = np.zeros((0, 3))
        self.color = np.zeros((0, 3), dtype=np.uint8)

    def add_box(self, lo, hi, color):
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if np.any(hi <= lo):
            raise ValueError("degenerate box")
        self.lo = np.vstack([self.lo, lo])
        self.hi = np.vstack([self.hi, hi])
        self.color = np.vstack([self.color,
                                np.asarray(color, dtype=np.uint8)])
        return self

    def num_boxes(self):
        return len(self.lo)

    def bounds(self):
        return self.lo.min(axis=0), self.hi.max(axis=0)

    def to_text(self):
        lines = []
        for lo, hi, c in zip(self.lo, self.hi, self.color):
            lines.append("box " + " ".join(f"{v:.6f}" for v in lo) + " "
                         + " ".join(f"{v:.6f}" for v in hi) + " "
                         + " ".join(str(int(v)) for v in c))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        scene = cls()
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] != "box" or len(parts) != 10:
                raise ValueError(f"line {lineno}: expected "
                                 "`box xlo ylo zlo xhi yhi zhi r g b`")
            v = [float(x) for x in parts[1:7]]
            c = [int(x) for x in parts[7:10]]
            scene.add_box(v[:3], v[3:], c)
        return scene

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_text(f.read())

    def raycast(self, origins, directions, eps=1e-9):
        """Nearest box hit per ray.

        Returns (t, box_index); misses get t = inf, index = -1. Rays
        starting inside a box hit its exit face.
        """
        origins = np.atleast_2d(np.asarray(origins, dtype=float))
        directions = np.atleast_2d(np.asarray(directions, dtype=float))
        n = len(origins)
        best_t = np.full(n, np.inf)
        best_i = np.full(n, -1, dtype=np.int64)
        if self.num_boxes() == 0:
            return best_t, best_i
        d = np.where(np.abs(directions) < 1e-300,
                     np.copysign(1e-300, directions), directions)
        inv = 1.0 / d
        chunk = 16384
        for s in range(0, n, chunk):
            o = origins[s:s + chunk, None, :]
            iv = inv[s:s + chunk, None, :]
            t1 = (self.lo[None, :, :] - o) * iv
            t2 = (self.hi[None, :, :] - o) * iv
            t_near = np.minimum(t1, t2).max(axis=2)
            t_far = np.maximum(t1, t2).min(axis=2)
            t_hit = np.where(t_near > eps, t_near, t_far)
            t_hit = np.where((t_near <= t_far) & (t_hit > eps), t_hit, np.inf)
            idx = np.argmin(t_hit, axis=1)
            rows = np.arange(len(idx))
            tmin = t_hit[rows, idx]
            hit = np.isfinite(tmin)
            best_t[s:s + chunk] = tmin
            best_i[s:s + chunk] = np.where(hit, idx, -1)
        return best_t, best_i


def box_canyon(length=30.0, width=14.0, wall_height=3.0, thickness=0.4,
               n_obstacles=10, seed=0, clear_path=None, clear_radius=2.0):
    """Rectangular courtyard: ground, four walls, seeded interior boxes.

    clear_path, when given, is a list of (x, y) waypoints; obstacles keep
    clear_radius distance from every segment so a robot can drive it.
    """
    hx, hy = length / 2.0, width / 2.0
    scene = Scene()
    scene.add_box([-hx - 1, -hy - 1, -0.2], [hx + 1, hy + 1, 0.0],
                  [105, 105, 105])
    scene.add_box([-hx - thickness, -hy - thickness, 0.0],
                  [hx + thickness, -hy, wall_height], _PALETTE[0])
    scene.add_box([-hx - thickness, hy, 0.0],
                  [hx + thickness, hy + thickness, wall_height], _PALETTE[1])
    scene.add_box([-hx - thickness, -hy, 0.0], [-hx, hy, wall_height],
                  _PALETTE[2])
    scene.add_box([hx, -hy, 0.0], [hx + thickness, hy, wall_height],
                  _PALETTE[3])

    rng = np.random.default_rng(seed)
    placed = 0
    attempts = 0
    while placed < n_obstacles and attempts < 1000 * max(1, n_obstacles):
        attempts += 1
        cx = rng.uniform(-hx + 1.5, hx - 1.5)
        cy = rng.uniform(-hy + 1.5, hy - 1.5)
        sx = rng.uniform(0.3, 0.9)
        sy = rng.uniform(0.3, 0.9)
        h = rng.uniform(0.6, 2.2)
        color = _PALETTE[int(rng.integers(len(_PALETTE)))]
        if clear_path is not None:
            r = max(sx, sy) + clear_radius
            if _point_polyline_distance(cx, cy, clear_path) < r:
                continue
        scene.add_box([cx - sx, cy - sy, 0.0], [cx + sx, cy + sy, h], color)
        placed += 1
    return scene


def _point_polyline_distance(x, y, waypoints):
    p = np.array([x, y])
    pts = np.asarray(waypoints, dtype=float)[:, :2]
    if len(pts) == 1:
        return np.linalg.norm(p - pts[0])
    a, b = pts[:-1], pts[1:]
    ab = b - a
    denom = (ab * ab).sum(axis=1)
    denom[denom == 0] = 1.0
    t = np.clip(((p - a) * ab).sum(axis=1) / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.sqrt(((p - closest) ** 2).sum(axis=1)).min()


@dataclass(frozen=True)
class LidarModel:
    beams: int = 16
    azimuth_steps: int = 900
    max_range: float = 100.0
    elevation_min: float = np.deg2rad(-15.0)
    elevation_max: float = np.deg2rad(15.0)


def lidar_directions(model):
    """Unit ray directions in the sensor frame, (beams*steps, 3)."""
    elev = np.linspace(model.elevation_min, model.elevation_max, model.beams)
    azim = np.arange(model.azimuth_steps) * (2 * np.pi / model.azimuth_steps)
    e, a = np.meshgrid(elev, azim, indexing="ij")
    ce = np.cos(e)
    return np.stack([ce * np.cos(a), ce * np.sin(a), np.sin(e)],
                    axis=-1).reshape(-1, 3)


def raycast_lidar(scene, pose, model=LidarModel(), range_sigma=0.0, rng=None,
                  stamp=0.0, with_color=False):
    """Simulate one sweep from `pose` (sensor in world); points are
    returned in the sensor frame, misses dropped."""
    if model.beams < 1:
        raise ValueError("beams must be >= 1")
    dirs_local = lidar_directions(model)
    R = pose.rotation_matrix()
    dirs_world = dirs_local @ R.T
    origins = np.broadcast_to(pose.t, dirs_world.shape)
    t, idx = scene.raycast(origins, dirs_world)
    if range_sigma > 0.0:
        if rng is None:
            raise ValueError("rng required when range_sigma > 0")
        t = t + rng.normal(0.0, range_sigma, len(t))
    keep = np.isfinite(t) & (t <= model.max_range) & (t > 0)
    pts = dirs_local[keep] * t[keep, None]
    colors = scene.color[idx[keep]] if with_color else None
    return LidarScan(stamp, PointCloud(pts, colors))


def render_camera(scene, T_world_camera, cam):
    """Flat-shaded render, (H,W,3) uint8, background black.

    Forward lens distortion is baked into the image: each raw pixel is
    undistorted to its ideal ray before casting.
    """
    v, u = np.mgrid[0:cam.height, 0:cam.width]
    xd, yd = cam.normalized_from_pixel(u.ravel(), v.ravel())
    xn, yn = cam.undistort_normalized(xd, yd)
    dirs_cam = np.stack([xn, yn, np.ones_like(xn)], axis=1)
    dirs_cam /= np.linalg.norm(dirs_cam, axis=1, keepdims=True)
    R = T_world_camera.rotation_matrix()
    dirs_world = dirs_cam @ R.T
    origins = np.broadcast_to(T_world_camera.t, dirs_world.shape)
    t, idx = scene.raycast(origins, dirs_world)
    img = np.zeros((cam.height * cam.width, 3), dtype=np.uint8)
    hit = idx >= 0
    img[hit] = scene.color[idx[hit]]
    return img.reshape(cam.height, cam.width, 3)


def sample_surface(scene, spacing):
    """Grid-sample every box face at the given spacing; colored points."""
    pts, cols = [], []
    for lo, hi, c in zip(scene.lo, scene.hi, scene.color):
        for axis in range(3):
            u_ax, v_ax = (axis + 1) % 3, (axis + 2) % 3
            nu = max(2, int(np.ceil((hi[u_ax] - lo[u_ax]) / spacing)) + 1)
            nv = max(2, int(np.ceil((hi[v_ax] - lo[v_ax]) / spacing)) + 1)
            us = np.linspace(lo[u_ax], hi[u_ax], nu)
            vs = np.linspace(lo[v_ax], hi[v_ax], nv)
            uu, vv = np.meshgrid(us, vs, indexing="ij")
            for plane in (lo[axis], hi[axis]):
                face = np.empty((nu * nv, 3))
                face[:, axis] = plane
                face[:, u_ax] = uu.ravel()
                face[:, v_ax] = vv.ravel()
                pts.append(face)
                cols.append(np.repeat(c[None, :], nu * nv, axis=0))
    return PointCloud(np.vstack(pts), np.vstack(cols).astype(np.uint8))


def camera_looking(yaw=0.0, mount=(0.0, 0.0, 0.0), width=160, height=120,
                   hfov=np.deg2rad(90.0), distortion=(0.0,) * 5):
    """Camera rigidly mounted on the sensor body, looking at body-frame
    yaw; optics z-forward / x-right / y-down."""
    fx = (width / 2.0) / np.tan(hfov / 2.0)
    base = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    cy_, sy_ = np.cos(yaw), np.sin(yaw)
    rz_inv = np.array([[cy_, sy_, 0.0], [-sy_, cy_, 0.0], [0.0, 0.0, 1.0]])
    R_lc = base @ rz_inv
    t_lc = -R_lc @ np.asarray(mount, dtype=float)
    pose = Pose.from_matrix(np.block([[R_lc, t_lc[:, None]],
                                      [np.zeros((1, 3)), np.ones((1, 1))]]))
    k1, k2, p1, p2, k3 = distortion
    return CameraModel(fx=fx, fy=fx, cx=(width - 1) / 2.0,
                       cy=(height - 1) / 2.0, width=width, height=height,
                       k1=k1, k2=k2, p1=p1, p2=p2, k3=k3,
                       T_lidar_camera=pose)


class CirclePath:
    """Constant-speed circle in the z=0 plane, body x tangent."""

    def __init__(self, radius, speed, center=(0.0, 0.0), z=0.0,
                 start_angle=0.0, ccw=True):
        if radius <= 0 or speed <= 0:
            raise ValueError("radius and speed must be positive")
        self.radius = radius
        self.speed = speed
        self.center = np.asarray(center, dtype=float)
        self.z = z
        self.start_angle = start_angle
        self.sign = 1.0 if ccw else -1.0
        self.omega = self.sign * speed / radius

    def duration(self):
        return 2 * np.pi * self.radius / self.speed

    def pose_at(self, t):
        a = self.start_angle + self.omega * t
        pos = np.array([self.center[0] + self.radius * np.cos(a),
                        self.center[1] + self.radius * np.sin(a), self.z])
        return Pose.from_yaw(a + self.sign * np.pi / 2.0, pos)

    def twist_at(self, t):
        return self.speed, np.array([0.0, 0.0, self.omega])


class PolylinePath:
    """Constant-speed straight segments joined by turns in place.

    Waypoints are (x, y) at fixed height; heading turns at turn_rate
    rad/s through the shorter direction at each corner.
    """

    def __init__(self, waypoints, speed, turn_rate=np.deg2rad(60.0), z=0.0):
        pts = np.asarray(waypoints, dtype=float)
        if len(pts) < 2:
            raise ValueError("need at least two waypoints")
        if speed <= 0 or turn_rate <= 0:
            raise ValueError("speed and turn_rate must be positive")
        self.speed = speed
        self.z = z
        self.phases = []   # (t0, t1, kind, data)
        t = 0.0
        heading = np.arctan2(pts[1, 1] - pts[0, 1], pts[1, 0] - pts[0, 0])
        for k in range(len(pts) - 1):
            seg = pts[k + 1] - pts[k]
            dist = np.hypot(seg[0], seg[1])
            if dist < 1e-12:
                continue
            want = np.arctan2(seg[1], seg[0])
            turn = np.arctan2(np.sin(want - heading), np.cos(want - heading))
            if abs(turn) > 1e-12:
                dt = abs(turn) / turn_rate
                self.phases.append((t, t + dt, "turn",
                                    (pts[k], heading, np.sign(turn) * turn_rate)))
                t += dt
                heading = want
            dt = dist / speed
            self.phases.append((t, t + dt, "move", (pts[k], heading)))
            t += dt
        self.total = t
        self.final_heading = heading
        self.final_pos = pts[-1]

    def duration(self):
        return self.total

    def _phase_at(self, t):
        for ph in self.phases:
            if t < ph[1]:
                return ph
        return None

    def pose_at(self, t):
        if t >= self.total:
            return Pose.from_yaw(self.final_heading,
                                 [*self.final_pos, self.z])
        ph = self._phase_at(max(t, 0.0))
        t0, _, kind, data = ph
        if kind == "turn":
            p, h0, rate = data
            return Pose.from_yaw(h0 + rate * (t - t0), [*p, self.z])
        p, h = data
        d = self.speed * (t - t0)
        return Pose.from_yaw(h, [p[0] + d * np.cos(h),
                                 p[1] + d * np.sin(h), self.z])

    def twist_at(self, t):
        if t >= self.total:
            return 0.0, np.zeros(3)
        ph = self._phase_at(max(t, 0.0))
        _, _, kind, data = ph
        if kind == "turn":
            return 0.0, np.array([0.0, 0.0, data[2]])
        return self.speed, np.zeros(3)


@dataclass
class TrajectorySpec:
    """Recipe for one generated dataset."""

    path: object
    duration: float
    lidar_hz: float = 10.0
    camera_hz: float = 10.0
    imu_hz: float = 400.0
    odom_hz: float = 100.0
    range_sigma: float = 0.0
    gyro_sigma: float = 0.0
    odom_sigma: float = 0.0
    att_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.lidar_hz <= 0 or self.imu_hz <= 0:
            raise ValueError("sensor rates must be positive")


def _world_accel(path, t, h=1e-4):
    def vel(tt):
        speed, _ = path.twist_at(tt)
        yaw = path.pose_at(tt).yaw()
        return speed * np.array([np.cos(yaw), np.sin(yaw), 0.0])
    return (vel(t + h) - vel(t - h)) / (2 * h)


def generate_dataset(scene, spec, out_path, cameras=(), lidar=None):
    """Write a complete dataset plus ground_truth.txt; returns a manifest.

    The sensor body frame coincides with the LiDAR frame; cameras hang
    off it through their T_lidar_camera extrinsics.
    """
    lidar = lidar or LidarModel()
    try:
        os.makedirs(out_path, exist_ok=True)
        os.makedirs(os.path.join(out_path, "lidar"), exist_ok=True)
    except OSError as e:
        raise StageError("synth", f"cannot create dataset dir: {e}")

    root_rng = np.random.default_rng(spec.seed)
    lidar_rng, imu_rng, odom_rng = root_rng.spawn(3)

    path, T = spec.path, spec.duration
    lidar_stamps = np.arange(1, int(np.floor(T * spec.lidar_hz)) + 1) \
        / spec.lidar_hz
    for t in lidar_stamps:
        scan = raycast_lidar(scene, path.pose_at(t), lidar,
                             spec.range_sigma, lidar_rng, stamp=t)
        write_cloud(os.path.join(out_path, "lidar",
                                 ds.format_stamp(t) + ".ply"), scan.cloud)

    imu_stamps = np.arange(1, int(np.floor(T * spec.imu_hz)) + 1) / spec.imu_hz
    imu = []
    for t in imu_stamps:
        pose = path.pose_at(t)
        _, omega = path.twist_at(t)
        q = pose.q
        if spec.att_sigma > 0:
            q = quat_multiply(q, quat_from_rotvec(
                imu_rng.normal(0.0, spec.att_sigma, 3)))
        gyro = omega + (imu_rng.normal(0.0, spec.gyro_sigma, 3)
                        if spec.gyro_sigma > 0 else 0.0)
        accel = pose.rotation_matrix().T @ (_world_accel(path, t) - _GRAVITY)
        imu.append(ImuSample(t, np.asarray(q), gyro, accel))
    ds.write_imu_csv(os.path.join(out_path, "imu.csv"), imu)

    if spec.odom_hz > 0:
        odom_stamps = np.arange(1, int(np.floor(T * spec.odom_hz)) + 1) \
            / spec.odom_hz
        odom = []
        for t in odom_stamps:
            speed, _ = path.twist_at(t)
            if spec.odom_sigma > 0:
                speed = speed + odom_rng.normal(0.0, spec.odom_sigma)
            odom.append(WheelOdomSample(t, speed))
        ds.write_odom_csv(os.path.join(out_path, "odom.csv"), odom)

    from PIL import Image as PILImage
    for ci, cam in enumerate(cameras):
        cam_dir = os.path.join(out_path, f"cam{ci}")
        os.makedirs(cam_dir, exist_ok=True)
        ds.write_calibration(os.path.join(cam_dir, "calibration.txt"), cam)
        if spec.camera_hz > 0:
            cam_stamps = np.arange(1, int(np.floor(T * spec.camera_hz)) + 1) \
                / spec.camera_hz
            for t in cam_stamps:
                T_wc = path.pose_at(t).compose(cam.T_lidar_camera.inverse())
                img = render_camera(scene, T_wc, cam)
                PILImage.fromarray(img).save(
                    os.path.join(cam_dir, ds.format_stamp(t) + ".png"))

    gt_stamps = list(lidar_stamps)
    if not gt_stamps or gt_stamps[-1] < T:
        gt_stamps.append(T)
    ds.write_trajectory(os.path.join(out_path, "ground_truth.txt"),
                        gt_stamps, [path.pose_at(t) for t in gt_stamps])
    return ds.load_manifest(out_path)
