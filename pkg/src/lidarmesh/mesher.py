"""Triangle-mesh extraction from a fused voxel volume.

Marching cubes runs over the lattice of voxel centers: each cell takes
its eight corners from adjacent voxels, and is meshed only when all
eight carry observation weight, so the surface never extends into space
no ray has measured. Vertices sit on the interpolated zero crossing of
the signed distance along cell edges; vertex colors interpolate the
per-voxel running color averages with the same coefficient and are
rounded half-up to 8-bit at the end. Voxels that never received a
colored observation don't bleed black into the blend: a vertex takes
the one colored end when only one end has color, and neutral gray when
neither does.

Cells are owned by the block containing their anchor voxel, and each
block's surface patch depends only on that block and its seven upper
neighbors. ``extract_mesh`` rebuilds every patch; ``MeshCache`` keeps
patches between calls and re-meshes just the blocks touched since the
previous update (plus lower neighbors whose cells straddle the block
boundary), producing output identical to a full rebuild. Vertices are
deduplicated within a patch; duplicates on patch seams are retained.
"""

import itertools

import numpy as np

from .geometry import TriangleMesh
from .mc_tables import CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE

_SHIFTS = tuple(itertools.product((0, 1), repeat=3))

UNCOLORED_GRAY = np.array([128.0, 128.0, 128.0])


def _block_field(volume, key):
    """Corner fields (side+1)^3 for one block, from it and its upper
    neighbors; weight stays zero where no neighbor exists."""
    side = volume.params.voxels_per_side
    shape = (side + 1,) * 3
    dist = np.zeros(shape)
    weight = np.zeros(shape)
    color = np.zeros(shape + (3,))
    cweight = np.zeros(shape)
    for dx, dy, dz in _SHIFTS:
        nb = volume.blocks.get((key[0] + dx, key[1] + dy, key[2] + dz))
        if nb is None:
            continue
        src = tuple(slice(0, 1) if d else slice(None) for d in (dx, dy, dz))
        dst = tuple(slice(side, side + 1) if d else slice(0, side)
                    for d in (dx, dy, dz))
        dist[dst] = nb.distance[src]
        weight[dst] = nb.weight[src]
        color[dst] = nb.color[src]
        cweight[dst] = nb.color_weight[src]
    return dist, weight, color, cweight


def _mesh_block(volume, key):
    """Surface patch for one block: (vertices, colors, triangles)."""
    p = volume.params
    side = p.voxels_per_side
    dist, weight, color, cweight = _block_field(volume, key)

    observed = weight > 0.0
    negative = dist < 0.0
    full = np.ones((side,) * 3, dtype=bool)
    case = np.zeros((side,) * 3, dtype=np.int64)
    for dx, dy, dz in _SHIFTS:
        sl = (slice(dx, side + dx), slice(dy, side + dy),
              slice(dz, side + dz))
        full &= observed[sl]
        case |= negative[sl].astype(np.int64) << (dx + 2 * dy + 4 * dz)

    cells = np.argwhere(full & (case > 0) & (case < 255))
    vertices = []
    vertex_colors = []
    triangles = []
    seen = {}
    base = np.asarray(key, dtype=float) * side
    for i, j, k in cells:
        anchor = np.array((i, j, k), dtype=np.int64)
        for tri in TRI_TABLE[case[i, j, k]]:
            idx = []
            for e in tri:
                ca, cb = EDGE_CORNERS[e]
                oa = CORNER_OFFSETS[ca]
                ob = CORNER_OFFSETS[cb]
                fa = tuple(anchor + oa)
                fb = tuple(anchor + ob)
                d0 = dist[fa]
                d1 = dist[fb]
                t = d0 / (d0 - d1)
                pos = (base + anchor + oa + t * (ob - oa) + 0.5) \
                    * p.voxel_size
                vkey = (round(pos[0], 6), round(pos[1], 6), round(pos[2], 6))
                at = seen.get(vkey)
                if at is None:
                    at = len(vertices)
                    seen[vkey] = at
                    vertices.append(pos)
                    # vertices between color-carrying voxels blend
                    # them; a single colored end wins outright, and
                    # fully uncolored surface renders neutral gray
                    has_a = cweight[fa] > 0.0
                    has_b = cweight[fb] > 0.0
                    if has_a and has_b:
                        vc = color[fa] + t * (color[fb] - color[fa])
                    elif has_a:
                        vc = color[fa]
                    elif has_b:
                        vc = color[fb]
                    else:
                        vc = UNCOLORED_GRAY
                    vertex_colors.append(vc)
                idx.append(at)
            if len(set(idx)) == 3:
                triangles.append(idx)
    if not triangles:
        empty = np.zeros((0, 3))
        return empty, np.zeros((0, 3), dtype=np.uint8), \
            np.zeros((0, 3), dtype=np.int64)
    rgb = np.clip(np.floor(np.asarray(vertex_colors) + 0.5),
                  0, 255).astype(np.uint8)
    return (np.asarray(vertices), rgb,
            np.asarray(triangles, dtype=np.int64))


def _assemble(patches):
    """Concatenate per-block patches (in sorted key order) into a mesh."""
    verts, colors, tris = [], [], []
    offset = 0
    for key in sorted(patches):
        v, c, t = patches[key]
        if len(t) == 0:
            continue
        verts.append(v)
        colors.append(c)
        tris.append(t + offset)
        offset += len(v)
    if not verts:
        return TriangleMesh(np.zeros((0, 3)),
                            np.zeros((0, 3), dtype=np.uint8),
                            np.zeros((0, 3), dtype=np.int64))
    return TriangleMesh(np.vstack(verts), np.vstack(colors),
                        np.vstack(tris))


def extract_mesh(volume):
    """Mesh the whole volume from scratch."""
    return _assemble({key: _mesh_block(volume, key)
                      for key in volume.blocks})


class MeshCache:
    """Incremental mesher bound to one volume.

    Every ``update()`` consumes the volume's dirty-block set, re-meshes
    those blocks and the lower neighbors whose cells read them, and
    returns the full assembled mesh. The result matches
    ``extract_mesh`` on the same volume exactly.
    """

    def __init__(self, volume):
        self.volume = volume
        self._patches = {}

    def update(self):
        stale = set()
        for bx, by, bz in self.volume.pop_dirty():
            for dx, dy, dz in _SHIFTS:
                cand = (bx - dx, by - dy, bz - dz)
                if cand in self.volume.blocks:
                    stale.add(cand)
        for key in self.volume.blocks:
            if key not in self._patches:
                stale.add(key)
        for key in stale:
            self._patches[key] = _mesh_block(self.volume, key)
        return _assemble(self._patches)
