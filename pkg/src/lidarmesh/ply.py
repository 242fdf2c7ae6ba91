"""Minimal PLY reader/writer for point clouds and colored triangle meshes.

Supports the subset this package produces and consumes: binary little
endian or ascii, float32/float64 x,y,z, uchar red,green,blue, and a
face element with a (uchar count, int32 indices) vertex_indices list.
"""

import numpy as np

from .geometry import PointCloud, TriangleMesh

_DTYPES = {
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1",
    "char": "i1", "int8": "i1",
    "ushort": "<u2", "uint16": "<u2",
    "short": "<i2", "int16": "<i2",
    "uint": "<u4", "uint32": "<u4",
    "int": "<i4", "int32": "<i4",
}


def _parse_header(f):
    magic = f.readline().strip()
    if magic != b"ply":
        raise ValueError("not a PLY file")
    fmt = None
    elements = []  # (name, count, [(prop_name, type) or ('list', ...)])
    while True:
        line = f.readline()
        if not line:
            raise ValueError("unterminated PLY header")
        tokens = line.decode("ascii").strip().split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if tokens[1] == "list":
                elements[-1][2].append(("list", tokens[2], tokens[3], tokens[4]))
            else:
                elements[-1][2].append((tokens[2], tokens[1]))
        elif tokens[0] == "end_header":
            break
    if fmt not in ("binary_little_endian", "ascii"):
        raise ValueError(f"unsupported PLY format: {fmt}")
    return fmt, elements


def _read_vertex_block(f, fmt, count, props):
    names = [p[0] for p in props]
    dtype = np.dtype([(p[0], _DTYPES[p[1]]) for p in props])
    if fmt == "binary_little_endian":
        data = np.frombuffer(f.read(dtype.itemsize * count), dtype=dtype,
                             count=count)
    else:
        rows = [f.readline().split() for _ in range(count)]
        data = np.zeros(count, dtype=dtype)
        arr = np.array(rows, dtype=float)
        for i, n in enumerate(names):
            data[n] = arr[:, i].astype(dtype[n])
    return data


def _read_face_block(f, fmt, count, props):
    if len(props) != 1 or props[0][0] != "list":
        raise ValueError("unsupported face properties")
    _, cnt_t, idx_t, _ = props[0]
    if fmt == "binary_little_endian":
        cnt_dt = np.dtype(_DTYPES[cnt_t])
        idx_dt = np.dtype(_DTYPES[idx_t])
        faces = np.empty((count, 3), dtype=np.int64)
        raw = f.read()
        off = 0
        stride = cnt_dt.itemsize + 3 * idx_dt.itemsize
        # common case: every face is a triangle, read in one shot
        if len(raw) >= count * stride:
            rec = np.dtype([("n", cnt_dt), ("idx", idx_dt, (3,))])
            block = np.frombuffer(raw, dtype=rec, count=count)
            if np.all(block["n"] == 3):
                return block["idx"].astype(np.int64)
        for i in range(count):
            n = int(np.frombuffer(raw, dtype=cnt_dt, count=1, offset=off)[0])
            off += cnt_dt.itemsize
            if n != 3:
                raise ValueError("only triangle faces supported")
            faces[i] = np.frombuffer(raw, dtype=idx_dt, count=3, offset=off)
            off += 3 * idx_dt.itemsize
        return faces
    faces = np.empty((count, 3), dtype=np.int64)
    for i in range(count):
        vals = f.readline().split()
        if int(vals[0]) != 3:
            raise ValueError("only triangle faces supported")
        faces[i] = [int(v) for v in vals[1:4]]
    return faces


def read_ply(path):
    """Read a PLY file; returns (vertex record array, faces or None)."""
    with open(path, "rb") as f:
        fmt, elements = _parse_header(f)
        vertex = None
        faces = None
        for name, count, props in elements:
            if name == "vertex":
                vertex = _read_vertex_block(f, fmt, count, props)
            elif name == "face":
                faces = _read_face_block(f, fmt, count, props)
            else:
                raise ValueError(f"unsupported PLY element: {name}")
    if vertex is None:
        raise ValueError("PLY file has no vertex element")
    return vertex, faces


def read_cloud(path):
    """Load a PLY point cloud; colors picked up when present."""
    vertex, _ = read_ply(path)
    names = vertex.dtype.names
    pts = np.stack([vertex["x"], vertex["y"], vertex["z"]],
                   axis=1).astype(float)
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack([vertex["red"], vertex["green"], vertex["blue"]],
                          axis=1).astype(np.uint8)
    return PointCloud(pts, colors)


def read_mesh(path):
    vertex, faces = read_ply(path)
    if faces is None:
        faces = np.zeros((0, 3), dtype=np.int64)
    names = vertex.dtype.names
    pts = np.stack([vertex["x"], vertex["y"], vertex["z"]],
                   axis=1).astype(float)
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack([vertex["red"], vertex["green"], vertex["blue"]],
                          axis=1).astype(np.uint8)
    else:
        colors = np.zeros((len(pts), 3), dtype=np.uint8)
    return TriangleMesh(pts, colors, faces)


def _header_lines(fmt, n_vertex, with_color, n_face=None):
    lines = ["ply", f"format {fmt} 1.0", f"element vertex {n_vertex}",
             "property float x", "property float y", "property float z"]
    if with_color:
        lines += ["property uchar red", "property uchar green",
                  "property uchar blue"]
    if n_face is not None:
        lines += [f"element face {n_face}",
                  "property list uchar int vertex_indices"]
    lines.append("end_header")
    return "\n".join(lines) + "\n"


def write_cloud(path, cloud, binary=True):
    """Write a point cloud as PLY (float32 xyz, optional uchar rgb)."""
    with_color = cloud.colors is not None
    fmt = "binary_little_endian" if binary else "ascii"
    header = _header_lines(fmt, len(cloud), with_color)
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
            if with_color:
                fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
            rec = np.zeros(len(cloud), dtype=np.dtype(fields))
            rec["x"], rec["y"], rec["z"] = cloud.points.astype(np.float32).T
            if with_color:
                rec["red"], rec["green"], rec["blue"] = cloud.colors.T
            f.write(rec.tobytes())
        else:
            pts = cloud.points.astype(np.float32)
            for i in range(len(cloud)):
                row = f"{pts[i, 0]:.6f} {pts[i, 1]:.6f} {pts[i, 2]:.6f}"
                if with_color:
                    c = cloud.colors[i]
                    row += f" {c[0]} {c[1]} {c[2]}"
                f.write((row + "\n").encode("ascii"))


def write_mesh(path, mesh, binary=True):
    """Write a colored triangle mesh as PLY."""
    fmt = "binary_little_endian" if binary else "ascii"
    header = _header_lines(fmt, mesh.num_vertices(), True,
                           mesh.num_triangles())
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            rec = np.zeros(mesh.num_vertices(), dtype=np.dtype(
                [("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                 ("red", "u1"), ("green", "u1"), ("blue", "u1")]))
            rec["x"], rec["y"], rec["z"] = mesh.vertices.astype(np.float32).T
            rec["red"], rec["green"], rec["blue"] = mesh.vertex_colors.T
            f.write(rec.tobytes())
            face = np.zeros(mesh.num_triangles(), dtype=np.dtype(
                [("n", "u1"), ("idx", "<i4", (3,))]))
            face["n"] = 3
            face["idx"] = mesh.triangles.astype(np.int32)
            f.write(face.tobytes())
        else:
            v = mesh.vertices.astype(np.float32)
            c = mesh.vertex_colors
            for i in range(mesh.num_vertices()):
                f.write((f"{v[i, 0]:.6f} {v[i, 1]:.6f} {v[i, 2]:.6f} "
                         f"{c[i, 0]} {c[i, 1]} {c[i, 2]}\n").encode("ascii"))
            for t in mesh.triangles:
                f.write(f"3 {t[0]} {t[1]} {t[2]}\n".encode("ascii"))
