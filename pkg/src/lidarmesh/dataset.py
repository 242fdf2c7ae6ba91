"""On-disk dataset layout: reading, writing and cross-sensor association.

Layout under the dataset root:
    lidar/<seconds>.<nanos>.ply       one binary PLY per sweep
    imu.csv                           stamp,qw,qx,qy,qz,wx,wy,wz,ax,ay,az
    odom.csv                          stamp,forward_velocity (optional)
    cam0/ cam1/ ...                   calibration.txt + <stamp>.png images
    ground_truth.txt                  optional reference trajectory
"""

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import StageError
from .geometry import Pose, stride_downsample
from .ply import read_cloud, write_cloud
from .sensors import CameraImage, CameraModel, ImuSample, LidarScan, WheelOdomSample

log = logging.getLogger(__name__)

IMU_HEADER = "stamp,qw,qx,qy,qz,wx,wy,wz,ax,ay,az"
ODOM_HEADER = "stamp,forward_velocity"


def format_stamp(t):
    """Seconds.nanoseconds with 9-digit zero-padded fraction."""
    nanos = int(round(t * 1e9))
    return f"{nanos // 10**9}.{nanos % 10**9:09d}"


def parse_stamp(text):
    sec, _, frac = text.partition(".")
    frac = (frac + "000000000")[:9]
    return int(sec) + int(frac) * 1e-9


def write_trajectory(path, stamps, poses):
    """Text trajectory: `stamp tx ty tz qw qx qy qz`, 9 decimals."""
    with open(path, "w") as f:
        for t, p in zip(stamps, poses):
            f.write(f"{t:.9f} {p.t[0]:.9f} {p.t[1]:.9f} {p.t[2]:.9f} "
                    f"{p.q[0]:.9f} {p.q[1]:.9f} {p.q[2]:.9f} {p.q[3]:.9f}\n")


def read_trajectory(path):
    """Returns (stamps array, list of Pose)."""
    stamps, poses = [], []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            v = [float(x) for x in line.split()]
            if len(v) != 8:
                raise StageError("ingest", f"bad trajectory line in {path}")
            stamps.append(v[0])
            poses.append(Pose([v[4], v[5], v[6], v[7]], v[1:4]))
    return np.array(stamps), poses


def write_imu_csv(path, samples):
    with open(path, "w") as f:
        f.write(IMU_HEADER + "\n")
        for s in samples:
            q, w, a = s.orientation, s.angular_velocity, s.linear_acceleration
            f.write(f"{s.stamp:.9f},{q[0]:.9f},{q[1]:.9f},{q[2]:.9f},{q[3]:.9f},"
                    f"{w[0]:.9f},{w[1]:.9f},{w[2]:.9f},"
                    f"{a[0]:.9f},{a[1]:.9f},{a[2]:.9f}\n")


def read_imu_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.size == 0:
        return []
    return [ImuSample(row[0], np.array(row[1:5]), np.array(row[5:8]),
                      np.array(row[8:11])) for row in data]


def write_odom_csv(path, samples):
    with open(path, "w") as f:
        f.write(ODOM_HEADER + "\n")
        for s in samples:
            f.write(f"{s.stamp:.9f},{s.forward_velocity:.9f}\n")


def read_odom_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.size == 0:
        return []
    return [WheelOdomSample(row[0], row[1]) for row in data]


def write_calibration(path, cam):
    T = cam.T_lidar_camera
    with open(path, "w") as f:
        for key in ("fx", "fy", "cx", "cy", "k1", "k2", "p1", "p2", "k3"):
            f.write(f"{key} = {getattr(cam, key):.9f}\n")
        f.write(f"width = {cam.width}\n")
        f.write(f"height = {cam.height}\n")
        f.write(f"T_lidar_camera = {T.t[0]:.9f} {T.t[1]:.9f} {T.t[2]:.9f} "
                f"{T.q[0]:.9f} {T.q[1]:.9f} {T.q[2]:.9f} {T.q[3]:.9f}\n")


def read_calibration(path):
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, eq, val = line.partition("=")
            if not eq:
                raise StageError(
                    "ingest", f"{path}:{lineno}: expected `key = value`")
            key = key.strip()
            try:
                parts = [float(x) for x in val.split()]
            except ValueError:
                raise StageError(
                    "ingest", f"{path}:{lineno}: non-numeric value for {key}")
            values[key] = parts[0] if len(parts) == 1 else parts
    required = ("fx", "fy", "cx", "cy", "width", "height")
    for key in required:
        if key not in values:
            raise StageError("ingest", f"{path}: missing key {key}")
    pose = Pose.identity()
    if "T_lidar_camera" in values:
        v = values["T_lidar_camera"]
        if not isinstance(v, list) or len(v) != 7:
            raise StageError(
                "ingest", f"{path}: T_lidar_camera needs 7 values")
        pose = Pose([v[3], v[4], v[5], v[6]], v[:3])
    return CameraModel(
        fx=values["fx"], fy=values["fy"], cx=values["cx"], cy=values["cy"],
        width=int(values["width"]), height=int(values["height"]),
        k1=values.get("k1", 0.0), k2=values.get("k2", 0.0),
        p1=values.get("p1", 0.0), p2=values.get("p2", 0.0),
        k3=values.get("k3", 0.0), T_lidar_camera=pose)


def _stamped_files(directory, suffix):
    entries = []
    for name in os.listdir(directory):
        if not name.endswith(suffix):
            continue
        try:
            stamp = parse_stamp(name[:-len(suffix)])
        except ValueError:
            continue
        entries.append((stamp, os.path.join(directory, name)))
    entries.sort()
    return entries


@dataclass
class CameraStream:
    model: CameraModel
    image_stamps: np.ndarray
    image_paths: list


@dataclass
class DatasetManifest:
    root: str
    scan_stamps: np.ndarray
    scan_paths: list
    imu: list
    odom: list
    cameras: list = field(default_factory=list)   # CameraStream
    ground_truth_path: str | None = None


@dataclass
class SyncedFrame:
    """One scan with its associated images and prior-input samples."""

    scan: LidarScan
    images: list          # (camera index, CameraImage)
    imu: list             # samples in (prev scan stamp, scan stamp]
    odom: list


def load_manifest(path):
    if not os.path.isdir(path):
        raise StageError("ingest", f"dataset root not found: {path}")
    lidar_dir = os.path.join(path, "lidar")
    if not os.path.isdir(lidar_dir):
        raise StageError("ingest", f"lidar stream not found: {lidar_dir}")
    scans = _stamped_files(lidar_dir, ".ply")
    if not scans:
        raise StageError("ingest", f"no scans in {lidar_dir}")
    imu_path = os.path.join(path, "imu.csv")
    if not os.path.isfile(imu_path):
        raise StageError("ingest", f"imu stream not found: {imu_path}")
    imu = read_imu_csv(imu_path)
    odom_path = os.path.join(path, "odom.csv")
    odom = read_odom_csv(odom_path) if os.path.isfile(odom_path) else []

    cameras = []
    for name in sorted(os.listdir(path)):
        cam_dir = os.path.join(path, name)
        if not (name.startswith("cam") and os.path.isdir(cam_dir)):
            continue
        calib = os.path.join(cam_dir, "calibration.txt")
        if not os.path.isfile(calib):
            raise StageError("ingest", f"calibration not found: {calib}")
        model = read_calibration(calib)
        images = _stamped_files(cam_dir, ".png")
        cameras.append(CameraStream(
            model, np.array([s for s, _ in images]),
            [p for _, p in images]))

    gt = os.path.join(path, "ground_truth.txt")
    return DatasetManifest(
        root=path,
        scan_stamps=np.array([s for s, _ in scans]),
        scan_paths=[p for _, p in scans],
        imu=imu, odom=odom, cameras=cameras,
        ground_truth_path=gt if os.path.isfile(gt) else None)


def _load_image(path, stamp):
    from PIL import Image as PILImage
    with PILImage.open(path) as im:
        return CameraImage(stamp, np.asarray(im.convert("RGB")))


def frames(manifest, max_skew=0.05):
    """Yield SyncedFrames in scan-stamp order.

    IMU/odom samples are windowed (previous scan stamp, scan stamp], the
    first window opening at -inf; for each camera the nearest image by
    stamp is attached when within max_skew. Unreadable scans are skipped
    with a warning.
    """
    imu_stamps = np.array([s.stamp for s in manifest.imu])
    odom_stamps = np.array([s.stamp for s in manifest.odom])
    prev = -np.inf
    for stamp, scan_path in zip(manifest.scan_stamps, manifest.scan_paths):
        try:
            cloud = read_cloud(scan_path)
        except (OSError, ValueError) as e:
            log.warning("skipping unreadable scan %s: %s", scan_path, e)
            prev = stamp
            continue
        lo = np.searchsorted(imu_stamps, prev, side="right")
        hi = np.searchsorted(imu_stamps, stamp, side="right")
        imu = manifest.imu[lo:hi]
        lo = np.searchsorted(odom_stamps, prev, side="right")
        hi = np.searchsorted(odom_stamps, stamp, side="right")
        odom = manifest.odom[lo:hi]
        images = []
        for ci, cam in enumerate(manifest.cameras):
            if len(cam.image_stamps) == 0:
                continue
            k = np.searchsorted(cam.image_stamps, stamp)
            best, gap = None, np.inf
            for j in (k - 1, k):
                if 0 <= j < len(cam.image_stamps):
                    d = abs(cam.image_stamps[j] - stamp)
                    if d < gap:
                        best, gap = j, d
            if best is not None and gap <= max_skew:
                images.append((ci, _load_image(cam.image_paths[best],
                                               cam.image_stamps[best])))
        yield SyncedFrame(LidarScan(stamp, cloud), images, imu, odom)
        prev = stamp


def downsample_cloud(cloud, every_n):
    """Count-reduction preprocessing: keep every n-th point."""
    return stride_downsample(cloud, every_n)
