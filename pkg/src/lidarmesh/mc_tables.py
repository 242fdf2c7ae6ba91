"""Marching-cubes case tables, generated at import time.

Corner ``i`` of a unit cell sits at ``(i & 1, i >> 1 & 1, i >> 2 & 1)``
in cell coordinates, and the twelve cell edges join corner pairs that
differ in exactly one coordinate. For each of the 256 inside/outside
corner patterns (bit ``i`` set means corner ``i`` carries a negative
field value), ``TRI_TABLE`` lists triangles as triples of edge indices;
the zero crossing interpolated on each such edge becomes a mesh vertex.

The contour on each cell face connects the face's sign changes. A face
with four sign changes is ambiguous; it is always resolved by keeping
its two negative corners separated, a choice that depends only on the
face's own corner signs, so the two cells sharing any face trace the
same contour and the extracted surface is crack-free. Segments are
chained into closed loops, oriented so triangles wind counter-clockwise
seen from the positive side of the field, and fan-triangulated.
"""

import itertools

import numpy as np

CORNER_OFFSETS = np.array([(i & 1, i >> 1 & 1, i >> 2 & 1)
                           for i in range(8)], dtype=np.int64)

EDGE_CORNERS = tuple(
    (a, b) for a, b in itertools.combinations(range(8), 2)
    if bin(a ^ b).count("1") == 1
)

_EDGE_ID = {frozenset(pair): e for e, pair in enumerate(EDGE_CORNERS)}

# each face as its four corners in cyclic boundary order
_FACES = (
    (0, 2, 6, 4),   # x = 0
    (1, 5, 7, 3),   # x = 1
    (0, 4, 5, 1),   # y = 0
    (2, 3, 7, 6),   # y = 1
    (0, 1, 3, 2),   # z = 0
    (4, 6, 7, 5),   # z = 1
)


def _face_segments(mask, face):
    """Contour segments on one face, as pairs of crossing-edge ids."""
    inside = [(mask >> c) & 1 for c in face]

    def edge(k):
        return _EDGE_ID[frozenset((face[k], face[(k + 1) % 4]))]

    crossings = [k for k in range(4) if inside[k] != inside[(k + 1) % 4]]
    if not crossings:
        return []
    if len(crossings) == 2:
        return [(edge(crossings[0]), edge(crossings[1]))]
    # four crossings: wrap each of the two diagonal negative corners
    # with its own segment, keeping them separated across the face
    return [(edge((k - 1) % 4), edge(k)) for k in range(4) if inside[k]]


def _loops(mask):
    """Closed loops of crossing edges for one corner-sign pattern."""
    partners = {}
    for face in _FACES:
        for a, b in _face_segments(mask, face):
            partners.setdefault(a, []).append(b)
            partners.setdefault(b, []).append(a)
    loops = []
    for start in sorted(partners):
        if not partners[start]:
            continue
        loop = [start]
        current = start
        while True:
            nxt = partners[current].pop(0)
            partners[nxt].remove(current)
            if nxt == start:
                break
            loop.append(nxt)
            current = nxt
        loops.append(loop)
    return loops


def _oriented(loop, mask):
    """Loop ordered so its Newell normal points toward positive field."""
    mids = np.array([(CORNER_OFFSETS[EDGE_CORNERS[e][0]]
                      + CORNER_OFFSETS[EDGE_CORNERS[e][1]]) * 0.5
                     for e in loop])
    normal = np.sum(np.cross(mids, np.roll(mids, -1, axis=0)), axis=0)
    outward = np.zeros(3)
    for e in loop:
        a, b = EDGE_CORNERS[e]
        if (mask >> a) & 1:
            a, b = b, a               # now a is outside, b inside
        outward += CORNER_OFFSETS[a] - CORNER_OFFSETS[b]
    return loop if float(normal @ outward) > 0.0 else loop[::-1]


def _build_table():
    table = []
    for mask in range(256):
        triangles = []
        for loop in _loops(mask):
            loop = _oriented(loop, mask)
            for k in range(1, len(loop) - 1):
                triangles.append((loop[0], loop[k], loop[k + 1]))
        table.append(tuple(triangles))
    return tuple(table)


TRI_TABLE = _build_table()
