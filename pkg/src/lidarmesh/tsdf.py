"""Truncated-signed-distance fusion into hashed voxel blocks.

Space is carved into cubic blocks of voxels_per_side^3 voxels,
allocated lazily in a hash map as rays touch them. Each voxel keeps a
weighted running average of the projective signed distance (positive
toward the sensor), its fusion weight, and an independently weighted
running RGB average fed only by colored points. Integration walks each
ray through the truncation band around the measured surface (and, with
carving on, through the free space from the sensor), sampling finely
enough that every voxel the segment crosses is visited.

The two integration methods differ in how coincident measurements are
merged before casting: "merged" fuses all points falling in one voxel
into a single weighted ray, "fast" keeps only the first point per
voxel and drops the rest of that bin for the scan.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import unpack_voxel_keys, voxel_keys

W_MAX = 1e4


@dataclass(frozen=True)
class TsdfParams:
    voxel_size: float = 0.2
    voxels_per_side: int = 8
    truncation: float = 0.0        # 0 means the 4 * voxel_size default
    method: str = "merged"
    carving: bool = False
    constant_weight: bool = False
    min_ray_length: float = 0.0
    max_ray_length: float = 200.0

    def __post_init__(self):
        if self.method not in ("merged", "fast"):
            raise ValueError(f"unknown integration method {self.method!r}")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.voxels_per_side < 1:
            raise ValueError("voxels_per_side must be at least 1")
        if self.truncation == 0.0:
            object.__setattr__(self, "truncation", 4.0 * self.voxel_size)


class VoxelBlock:
    """Dense voxels_per_side^3 arrays for one block."""

    __slots__ = ("distance", "weight", "color", "color_weight")

    def __init__(self, side):
        self.distance = np.zeros((side, side, side))
        self.weight = np.zeros((side, side, side))
        self.color = np.zeros((side, side, side, 3))
        self.color_weight = np.zeros((side, side, side))


class TsdfVolume:
    """Hash map of voxel blocks plus the integration configuration."""

    def __init__(self, params=None):
        self.params = params or TsdfParams()
        self.blocks = {}
        self._dirty = set()

    def num_blocks(self):
        return len(self.blocks)

    def block(self, index):
        blk = self.blocks.get(index)
        if blk is None:
            blk = VoxelBlock(self.params.voxels_per_side)
            self.blocks[index] = blk
        return blk

    def pop_dirty(self):
        """Block indices touched since the last call, then cleared."""
        dirty, self._dirty = self._dirty, set()
        return dirty

    def query(self, point):
        """(distance, weight, rounded color) at the voxel containing
        `point`, or None when the voxel was never observed."""
        side = self.params.voxels_per_side
        idx = np.floor(np.asarray(point, dtype=float)
                       / self.params.voxel_size).astype(np.int64)
        blk = self.blocks.get(tuple(idx // side))
        if blk is None:
            return None
        i, j, k = idx - (idx // side) * side
        if blk.weight[i, j, k] <= 0.0:
            return None
        color = np.floor(blk.color[i, j, k] + 0.5).astype(np.uint8)
        return float(blk.distance[i, j, k]), float(blk.weight[i, j, k]), color

    def integrate_scan(self, cloud, sensor_pose):
        integrate_scan(self, cloud, sensor_pose)


def _bin_endpoints(points_w, weights, colors, color_w, voxel_size, method):
    """Collapse surface points sharing a voxel into one ray endpoint.

    "merged" takes the weighted mean position and accumulates color,
    "fast" keeps the first point of each bin and drops the rest.
    Returns (position, weight, color sum, color weight) per bin, where
    the color sum is already weighted by the per-point color weight.
    """
    keys = voxel_keys(points_w, voxel_size)
    if method == "fast":
        _, first = np.unique(keys, return_index=True)
        return (points_w[first], weights[first],
                colors[first] * color_w[first, None], color_w[first])
    _, inv = np.unique(keys, return_inverse=True)
    wsum = np.bincount(inv, weights=weights)
    pos = np.stack([np.bincount(inv, weights=weights * points_w[:, a])
                    for a in range(3)], axis=1) / wsum[:, None]
    cw = np.bincount(inv, weights=color_w)
    csum = np.stack([np.bincount(inv, weights=color_w * colors[:, a])
                     for a in range(3)], axis=1)
    return pos, wsum, csum, cw


def _consecutive_unique(keys):
    """Mask keeping one sample per run of equal keys along each ray."""
    keep = np.ones(keys.shape, dtype=bool)
    keep[:, 1:] = keys[:, 1:] != keys[:, :-1]
    return keep


def integrate_scan(vol, cloud, sensor_pose):
    """Fuse one colorized sensor-frame scan taken at `sensor_pose`.

    Points outside [min_ray_length, max_ray_length] are dropped. Voxels
    crossed inside the truncation band receive the projective distance
    of their center; with carving on, free-space voxels between the
    sensor and the band start receive +truncation. Colors join the
    running average only where the scan marks them valid.
    """
    p = vol.params
    pts = np.asarray(cloud.points, dtype=float).reshape(-1, 3)
    ranges = np.linalg.norm(pts, axis=1)
    keep = (ranges >= max(p.min_ray_length, 1e-9)) & \
           (ranges <= p.max_ray_length)
    if not np.any(keep):
        return
    pts, ranges = pts[keep], ranges[keep]
    if cloud.colors is not None:
        colors = cloud.colors[keep].astype(float)
        color_w = cloud.color_valid[keep].astype(float)
    else:
        colors = np.zeros((len(pts), 3))
        color_w = np.zeros(len(pts))

    weights = np.ones(len(pts)) if p.constant_weight \
        else 1.0 / np.maximum(ranges, 1e-3) ** 2
    origin = np.asarray(sensor_pose.t, dtype=float)
    world = sensor_pose.apply(pts)

    end, w, csum, cw = _bin_endpoints(world, weights, colors,
                                      color_w * weights, p.voxel_size,
                                      p.method)
    rays = end - origin
    dist = np.linalg.norm(rays, axis=1)
    dirs = rays / dist[:, None]

    step = p.voxel_size / 4.0
    n_band = max(int(np.ceil(2.0 * p.truncation / step)) + 1, 2)
    offs = np.linspace(-p.truncation, p.truncation, n_band)
    samples = end[:, None, :] + dirs[:, None, :] * offs[None, :, None]
    keys = voxel_keys(samples.reshape(-1, 3), p.voxel_size)
    keys = keys.reshape(len(end), n_band)
    keep2 = _consecutive_unique(keys)
    ray_of = np.broadcast_to(np.arange(len(end))[:, None], keys.shape)
    vox_keys = [keys[keep2]]
    vox_ray = [ray_of[keep2]]
    vox_carve = [np.zeros(int(keep2.sum()), dtype=bool)]

    if p.carving:
        carve_step = p.voxel_size
        max_len = float(np.max(dist) - p.truncation)
        if max_len > carve_step:
            s = np.arange(carve_step / 2.0, max_len, carve_step)
            csam = origin[None, None, :] + dirs[:, None, :] * s[None, :, None]
            ckeys = voxel_keys(csam.reshape(-1, 3), p.voxel_size)
            ckeys = ckeys.reshape(len(end), len(s))
            valid = s[None, :] < (dist[:, None] - p.truncation)
            ckeep = _consecutive_unique(ckeys) & valid
            cray = np.broadcast_to(np.arange(len(end))[:, None], ckeys.shape)
            vox_keys.append(ckeys[ckeep])
            vox_ray.append(cray[ckeep])
            vox_carve.append(np.ones(int(ckeep.sum()), dtype=bool))

    all_keys = np.concatenate(vox_keys)
    all_ray = np.concatenate(vox_ray)
    all_carve = np.concatenate(vox_carve)

    centers = (unpack_voxel_keys(all_keys) + 0.5) * p.voxel_size
    proj = np.einsum("ni,ni->n", centers - origin, dirs[all_ray])
    d = np.clip(dist[all_ray] - proj, -p.truncation, p.truncation)
    d[all_carve] = p.truncation
    wv = w[all_ray]
    cwv = np.where(all_carve, 0.0, cw[all_ray])
    csv = csum[all_ray] * (~all_carve)[:, None]

    uniq, inv = np.unique(all_keys, return_inverse=True)
    W = np.bincount(inv, weights=wv)
    D = np.bincount(inv, weights=wv * d)
    CW = np.bincount(inv, weights=cwv)
    CS = np.stack([np.bincount(inv, weights=csv[:, a]) for a in range(3)],
                  axis=1)

    side = vol.params.voxels_per_side
    gidx = unpack_voxel_keys(uniq)
    bidx = gidx // side
    lidx = gidx - bidx * side
    flat = (lidx[:, 0] * side + lidx[:, 1]) * side + lidx[:, 2]
    bkeys = voxel_keys(bidx.astype(float) + 0.5, 1.0)
    order = np.argsort(bkeys, kind="stable")
    bounds = np.flatnonzero(np.r_[True, np.diff(bkeys[order]) != 0])
    bounds = np.r_[bounds, len(order)]
    for a, b in zip(bounds[:-1], bounds[1:]):
        rows = order[a:b]
        block_index = tuple(int(v) for v in bidx[rows[0]])
        blk = vol.block(block_index)
        vol._dirty.add(block_index)
        f = flat[rows]
        dist_f = blk.distance.reshape(-1)
        w_f = blk.weight.reshape(-1)
        tot = w_f[f] + W[rows]
        dist_f[f] = np.clip((w_f[f] * dist_f[f] + D[rows]) / tot,
                            -p.truncation, p.truncation)
        w_f[f] = np.minimum(tot, W_MAX)
        has_c = CW[rows] > 0
        if np.any(has_c):
            fc = f[has_c]
            rc = rows[has_c]
            col_f = blk.color.reshape(-1, 3)
            cw_f = blk.color_weight.reshape(-1)
            ctot = cw_f[fc] + CW[rc]
            col_f[fc] = (cw_f[fc, None] * col_f[fc] + CS[rc]) / ctot[:, None]
            cw_f[fc] = np.minimum(ctot, W_MAX)
