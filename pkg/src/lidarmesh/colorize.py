"""Camera-based point colorization.

Each LiDAR point is transformed into a camera frame with the rigid
camera extrinsics, depth-normalized, projected through the pinhole
intrinsics, and — when it lands inside the image — given that pixel's
RGB value. Images are expected to be undistorted once per frame with
``undistort_image`` so the projection itself stays an ideal pinhole.

With several cameras, the first one (in the given order) whose
projection is in bounds wins. Points no camera sees keep their
geometry but are flagged uncolored, so downstream fusion can skip them
when averaging colors. No visibility test is performed: a point
occluded from the camera still receives the color of whatever surface
hides it.
"""

import numpy as np

from .geometry import PointCloud

MIN_DEPTH = 0.1


class _Outcome:
    """Sentinel for the non-pixel projection outcomes."""

    __slots__ = ("_name",)

    def __init__(self, name):
        self._name = name

    def __repr__(self):
        return self._name


BEHIND_CAMERA = _Outcome("behind-camera")
OUT_OF_BOUNDS = _Outcome("out-of-bounds")


def undistort_image(image, cam):
    """Resample a raw camera image onto the ideal pinhole grid.

    Every output pixel is mapped through the forward lens model to its
    source location in the raw image and bilinearly sampled there;
    locations falling outside the source are black.
    """
    image = np.asarray(image)
    if not cam.has_distortion():
        return image.copy()
    v, u = np.mgrid[0:cam.height, 0:cam.width]
    xn, yn = cam.normalized_from_pixel(u.ravel(), v.ravel())
    xd, yd = cam.distort_normalized(xn, yn)
    us, vs = cam.pixel_from_normalized(xd, yd)

    u0 = np.floor(us).astype(np.int64)
    v0 = np.floor(vs).astype(np.int64)
    fu = (us - u0)[:, None]
    fv = (vs - v0)[:, None]

    src = image.astype(float)
    h, w = cam.height, cam.width

    def sample(vi, ui):
        inside = (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
        out = np.zeros((len(ui), image.shape[2]))
        out[inside] = src[vi[inside], ui[inside]]
        return out

    top = sample(v0, u0) * (1 - fu) + sample(v0, u0 + 1) * fu
    bottom = sample(v0 + 1, u0) * (1 - fu) + sample(v0 + 1, u0 + 1) * fu
    blended = top * (1 - fv) + bottom * fv
    return np.clip(np.floor(blended + 0.5), 0, 255) \
        .astype(np.uint8).reshape(cam.height, cam.width, image.shape[2])


def _project_points(points, cam):
    """Vectorized pinhole projection of LiDAR-frame points.

    Returns (u, v, in_front, in_bounds); u and v are only meaningful
    where in_front holds.
    """
    p_cam = cam.T_lidar_camera.apply(points)
    z = p_cam[:, 2]
    in_front = z > MIN_DEPTH
    safe_z = np.where(in_front, z, 1.0)
    u = cam.fx * (p_cam[:, 0] / safe_z) + cam.cx
    v = cam.fy * (p_cam[:, 1] / safe_z) + cam.cy
    in_bounds = in_front & (u >= 0.0) & (u < cam.width) \
        & (v >= 0.0) & (v < cam.height)
    return u, v, in_front, in_bounds


def project_point(p_lidar, cam):
    """Project one LiDAR-frame point into pixel coordinates.

    Returns the (u, v) pixel tuple, or ``BEHIND_CAMERA`` when the point
    sits at or behind the minimum depth, or ``OUT_OF_BOUNDS`` when the
    projection leaves [0, width) x [0, height).
    """
    pts = np.asarray(p_lidar, dtype=float).reshape(1, 3)
    u, v, in_front, in_bounds = _project_points(pts, cam)
    if not in_front[0]:
        return BEHIND_CAMERA
    if not in_bounds[0]:
        return OUT_OF_BOUNDS
    return float(u[0]), float(v[0])


def colorize_scan(scan, images):
    """Color a scan from a list of (camera, undistorted image) pairs.

    The cloud geometry is returned unchanged; each point takes the
    pixel color of the first camera that sees it, and points outside
    every image are flagged uncolored.
    """
    cloud = scan.cloud if hasattr(scan, "cloud") else scan
    points = np.array(cloud.points, dtype=float, copy=True).reshape(-1, 3)
    colors = np.zeros((len(points), 3), dtype=np.uint8)
    valid = np.zeros(len(points), dtype=bool)
    for cam, image in images:
        u, v, _, in_bounds = _project_points(points, cam)
        take = in_bounds & ~valid
        if not np.any(take):
            continue
        ui = np.clip(np.floor(u[take] + 0.5), 0, cam.width - 1) \
            .astype(np.int64)
        vi = np.clip(np.floor(v[take] + 0.5), 0, cam.height - 1) \
            .astype(np.int64)
        colors[take] = np.asarray(image)[vi, ui]
        valid |= take
    return PointCloud(points, colors, valid)
