"""Sensor sample containers and the pinhole camera model."""

from dataclasses import dataclass

import numpy as np

from .geometry import Pose, PointCloud


@dataclass(frozen=True)
class LidarScan:
    """One sweep in the sensor frame, stamped at end of sweep."""

    stamp: float
    cloud: PointCloud


@dataclass(frozen=True)
class ImuSample:
    stamp: float
    orientation: np.ndarray    # (w,x,y,z) of sensor in world
    angular_velocity: np.ndarray   # rad/s, body frame
    linear_acceleration: np.ndarray  # m/s^2, body frame, gravity included


@dataclass(frozen=True)
class WheelOdomSample:
    stamp: float
    forward_velocity: float    # m/s along body x


@dataclass(frozen=True)
class CameraImage:
    stamp: float
    pixels: np.ndarray         # (H,W,3) uint8


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics with radial-tangential distortion.

    T_lidar_camera maps LiDAR-frame points into the camera frame
    (z forward, x right, y down).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    k3: float = 0.0
    T_lidar_camera: Pose = None

    def __post_init__(self):
        if self.T_lidar_camera is None:
            object.__setattr__(self, "T_lidar_camera", Pose.identity())

    def distort_normalized(self, xn, yn):
        """Forward distortion on ideal normalized coordinates.

        Accepts scalars or arrays; returns distorted normalized coords.
        """
        xn = np.asarray(xn, dtype=float)
        yn = np.asarray(yn, dtype=float)
        r2 = xn * xn + yn * yn
        radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3))
        xd = xn * radial + 2.0 * self.p1 * xn * yn + self.p2 * (r2 + 2 * xn * xn)
        yd = yn * radial + self.p1 * (r2 + 2 * yn * yn) + 2.0 * self.p2 * xn * yn
        return xd, yd

    def undistort_normalized(self, xd, yd, iterations=8):
        """Inverse distortion by fixed-point iteration (vectorized)."""
        xd = np.asarray(xd, dtype=float)
        yd = np.asarray(yd, dtype=float)
        xn, yn = xd.copy(), yd.copy()
        for _ in range(iterations):
            r2 = xn * xn + yn * yn
            radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3))
            dx = 2.0 * self.p1 * xn * yn + self.p2 * (r2 + 2 * xn * xn)
            dy = self.p1 * (r2 + 2 * yn * yn) + 2.0 * self.p2 * xn * yn
            xn = (xd - dx) / radial
            yn = (yd - dy) / radial
        return xn, yn

    def pixel_from_normalized(self, xn, yn):
        return self.fx * xn + self.cx, self.fy * yn + self.cy

    def normalized_from_pixel(self, u, v):
        return ((np.asarray(u, dtype=float) - self.cx) / self.fx,
                (np.asarray(v, dtype=float) - self.cy) / self.fy)

    def has_distortion(self):
        return any(c != 0.0 for c in (self.k1, self.k2, self.p1,
                                      self.p2, self.k3))
