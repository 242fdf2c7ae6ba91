"""SE(3) poses, point clouds and triangle meshes shared by every pipeline stage.

Conventions used throughout the package:
  - quaternions are stored (w, x, y, z), unit norm, canonicalized to w >= 0
  - angles in radians, distances in meters, timestamps in seconds (float)
  - 6-vectors over SE(3) are ordered [rotation vector (3), translation (3)]
"""

from dataclasses import dataclass, field

import numpy as np

_QUAT_EPS = 1e-12


def quat_multiply(a, b):
    """Hamilton product of two (w,x,y,z) quaternions."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_normalize(q):
    """Unit-norm quaternion with the canonical sign (w >= 0).

    When w == 0 the sign is fixed by the first nonzero vector component,
    so the angle-pi branch is deterministic.
    """
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < _QUAT_EPS:
        raise ValueError("zero-norm quaternion")
    q = q / n
    if q[0] < 0.0:
        q = -q
    elif q[0] == 0.0:
        for c in q[1:]:
            if c != 0.0:
                if c < 0.0:
                    q = -q
                break
    return q


def quat_rotate(q, v):
    """Rotate 3-vector(s) v by quaternion q. v may be (3,) or (N,3)."""
    return np.asarray(v, dtype=float) @ quat_to_matrix(q).T


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(m):
    """Quaternion from a rotation matrix (Shepperd's method, canonical sign)."""
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                      (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                      0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    return quat_normalize(q)


def quat_from_rotvec(rv):
    """Quaternion for a rotation vector (axis * angle)."""
    rv = np.asarray(rv, dtype=float)
    angle = np.linalg.norm(rv)
    if angle < 1e-10:
        # sin(a/2)/a ~ 1/2 - a^2/48
        f = 0.5 - angle * angle / 48.0
        return quat_normalize(np.array([1.0, f * rv[0], f * rv[1], f * rv[2]]))
    axis = rv / angle
    s = np.sin(0.5 * angle)
    return quat_normalize(np.array([np.cos(0.5 * angle),
                                    s * axis[0], s * axis[1], s * axis[2]]))


def quat_to_rotvec(q):
    """Rotation vector of a canonical (w >= 0) quaternion; angle in [0, pi]."""
    w, x, y, z = q
    s = np.sqrt(x * x + y * y + z * z)
    if s < 1e-10:
        # angle/s ~ 2/w * (1 - s^2 / (3 w^2))
        f = 2.0 / w * (1.0 - s * s / (3.0 * w * w))
    else:
        f = 2.0 * np.arctan2(s, w) / s
    return np.array([f * x, f * y, f * z])


def yaw_of_quat(q):
    """Z-axis Euler component (ZYX convention) of a quaternion."""
    w, x, y, z = q
    return np.arctan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))


def rotation_angle(q):
    """Rotation angle in [0, pi] of a canonical quaternion."""
    w = min(1.0, abs(q[0]))
    return 2.0 * np.arccos(w)


class Pose:
    """Rigid SE(3) transform: unit quaternion (w,x,y,z) plus translation.

    Immutable value type; all constructors normalize and canonicalize
    the quaternion so equal rotations compare equal component-wise.
    """

    __slots__ = ("q", "t")

    def __init__(self, q=(1.0, 0.0, 0.0, 0.0), t=(0.0, 0.0, 0.0)):
        object.__setattr__(self, "q", quat_normalize(np.asarray(q, dtype=float)))
        object.__setattr__(self, "t", np.array(t, dtype=float).reshape(3))
        self.q.setflags(write=False)
        self.t.setflags(write=False)

    def __setattr__(self, name, value):
        raise AttributeError("Pose is immutable")

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_rotvec(cls, rv, t=(0.0, 0.0, 0.0)):
        return cls(quat_from_rotvec(rv), t)

    @classmethod
    def from_yaw(cls, yaw, t=(0.0, 0.0, 0.0)):
        return cls.from_rotvec([0.0, 0.0, yaw], t)

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=float)
        return cls(quat_from_matrix(m[:3, :3]), m[:3, 3])

    def rotation_matrix(self):
        return quat_to_matrix(self.q)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.t
        return m

    def compose(self, other):
        """self applied after other: result maps p -> self(other(p))."""
        return Pose(quat_multiply(self.q, other.q),
                    quat_rotate(self.q, other.t) + self.t)

    def inverse(self):
        qc = quat_conjugate(self.q)
        return Pose(qc, -quat_rotate(qc, self.t))

    def apply(self, points):
        """Transform (3,) or (N,3) points."""
        return quat_rotate(self.q, points) + self.t

    def yaw(self):
        return yaw_of_quat(self.q)

    def __repr__(self):
        return f"Pose(q={self.q.tolist()}, t={self.t.tolist()})"


def pose_compose(a, b):
    return a.compose(b)


def pose_log(a):
    """Chart coordinates of a pose: [rotation vector, translation].

    This is the direct product chart on SO(3) x R^3 (the translation is
    taken as-is, not coupled through the twist exponential).
    """
    return np.concatenate([quat_to_rotvec(a.q), a.t])


def pose_exp(x):
    """Inverse of pose_log."""
    x = np.asarray(x, dtype=float)
    return Pose(quat_from_rotvec(x[:3]), x[3:6])


def pose_interpolate(a, b, alpha):
    """Interpolate between poses: slerp on rotation, lerp on translation."""
    rel_rv = quat_to_rotvec(quat_multiply(quat_conjugate(a.q), b.q))
    q = quat_multiply(a.q, quat_from_rotvec(alpha * rel_rv))
    t = (1.0 - alpha) * a.t + alpha * b.t
    return Pose(q, t)


@dataclass(frozen=True)
class PointCloud:
    """3D points with optional per-point RGB colors.

    colors, when present, is (N,3) uint8; color_valid marks points whose
    color was actually observed (uncolored points still carry geometry).
    """

    points: np.ndarray
    colors: np.ndarray | None = None
    color_valid: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if self.colors is not None:
            cols = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(cols) != len(pts):
                raise ValueError("colors length must match points length")
            object.__setattr__(self, "colors", cols)
            if self.color_valid is None:
                object.__setattr__(self, "color_valid",
                                   np.ones(len(pts), dtype=bool))
            else:
                cv = np.asarray(self.color_valid, dtype=bool).reshape(-1)
                if len(cv) != len(pts):
                    raise ValueError("color_valid length must match points")
                object.__setattr__(self, "color_valid", cv)

    def __len__(self):
        return len(self.points)

    def select(self, index):
        """Sub-cloud at the given indices/mask, colors kept aligned."""
        return PointCloud(
            self.points[index],
            self.colors[index] if self.colors is not None else None,
            self.color_valid[index] if self.color_valid is not None else None,
        )


def transform_cloud(pose, cloud):
    """Apply a rigid transform to every point; colors carried through."""
    return PointCloud(pose.apply(cloud.points), cloud.colors, cloud.color_valid)


def stride_downsample(cloud, every_n):
    """Keep every n-th point in index order (count reduction by n)."""
    if every_n < 1:
        raise ValueError("stride must be >= 1")
    if every_n == 1:
        return cloud
    return cloud.select(np.arange(0, len(cloud), every_n))


def range_filter(cloud, min_range, max_range):
    """Keep points whose sensor-frame range lies in [min_range, max_range]."""
    r = np.linalg.norm(cloud.points, axis=1)
    return cloud.select((r >= min_range) & (r <= max_range))


def voxel_keys(points, resolution):
    """Packed int64 voxel key per point (21 bits per signed axis)."""
    idx = np.floor(np.asarray(points) / resolution).astype(np.int64)
    if np.any(np.abs(idx) >= (1 << 20)):
        raise ValueError("points out of voxel-key range")
    return ((idx[:, 0] + (1 << 20)) << 42 | (idx[:, 1] + (1 << 20)) << 21
            | (idx[:, 2] + (1 << 20)))


def unpack_voxel_keys(keys):
    """Inverse of voxel_keys: (N,3) int64 voxel indices."""
    keys = np.asarray(keys, dtype=np.int64)
    i = (keys >> 42) - (1 << 20)
    j = ((keys >> 21) & ((1 << 21) - 1)) - (1 << 20)
    k = (keys & ((1 << 21) - 1)) - (1 << 20)
    return np.stack([i, j, k], axis=1)


def voxel_downsample(cloud, leaf_size):
    """Keep the first point (index order) in each occupied voxel.

    Deterministic, preserves original coordinates and colors.
    """
    if len(cloud) == 0:
        return cloud
    keys = voxel_keys(cloud.points, leaf_size)
    _, first = np.unique(keys, return_index=True)
    return cloud.select(np.sort(first))


@dataclass
class TriangleMesh:
    """Triangle mesh with one RGB color per vertex."""

    vertices: np.ndarray = field(
        default_factory=lambda: np.zeros((0, 3), dtype=float))
    vertex_colors: np.ndarray = field(
        default_factory=lambda: np.zeros((0, 3), dtype=np.uint8))
    triangles: np.ndarray = field(
        default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.vertex_colors = np.asarray(
            self.vertex_colors, dtype=np.uint8).reshape(-1, 3)
        self.triangles = np.asarray(
            self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.vertex_colors) != len(self.vertices):
            raise ValueError("one color per vertex required")
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")

    def num_vertices(self):
        return len(self.vertices)

    def num_triangles(self):
        return len(self.triangles)


# Batched quaternion helpers used by the pose-graph solver; arrays are
# (N,4) / (N,3) and follow the same (w,x,y,z), w >= 0 conventions.

def quat_multiply_batch(a, b):
    aw, ax, ay, az = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    bw, bx, by, bz = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=1)


def quat_conjugate_batch(q):
    out = q.copy()
    out[:, 1:] = -out[:, 1:]
    return out


def quat_rotate_batch(q, v):
    qv = q[:, 1:]
    w = q[:, :1]
    c = np.cross(qv, v)
    return v + 2.0 * (w * c + np.cross(qv, c))


def quat_canonicalize_batch(q):
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    flip = q[:, 0] < 0
    q[flip] = -q[flip]
    return q


def quat_to_rotvec_batch(q):
    q = quat_canonicalize_batch(q.copy())
    s = np.linalg.norm(q[:, 1:], axis=1)
    w = q[:, 0]
    f = np.empty_like(s)
    small = s < 1e-10
    f[small] = 2.0 / w[small]
    f[~small] = 2.0 * np.arctan2(s[~small], w[~small]) / s[~small]
    return q[:, 1:] * f[:, None]


def quat_from_rotvec_batch(rv):
    angle = np.linalg.norm(rv, axis=1)
    half = 0.5 * angle
    f = np.empty_like(angle)
    small = angle < 1e-10
    f[small] = 0.5 - angle[small] ** 2 / 48.0
    f[~small] = np.sin(half[~small]) / angle[~small]
    q = np.concatenate([np.cos(half)[:, None], rv * f[:, None]], axis=1)
    return quat_canonicalize_batch(q)
