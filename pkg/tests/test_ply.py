import numpy as np
import pytest

from lidarmesh.geometry import PointCloud, TriangleMesh
from lidarmesh.ply import read_cloud, read_mesh, write_cloud, write_mesh


def test_cloud_roundtrip_binary(tmp_path):
    rng = np.random.default_rng(0)
    pts = rng.uniform(-10, 10, (500, 3))
    colors = rng.integers(0, 256, (500, 3), dtype=np.uint8)
    path = tmp_path / "c.ply"
    write_cloud(path, PointCloud(pts, colors))
    back = read_cloud(path)
    assert np.allclose(back.points, pts.astype(np.float32), atol=1e-6)
    assert np.array_equal(back.colors, colors)


def test_cloud_roundtrip_no_color(tmp_path):
    pts = np.array([[1.0, 2.0, 3.0], [-4.0, 5.5, -6.25]])
    path = tmp_path / "c.ply"
    write_cloud(path, PointCloud(pts))
    back = read_cloud(path)
    assert back.colors is None
    assert np.allclose(back.points, pts)


def test_cloud_roundtrip_ascii(tmp_path):
    pts = np.array([[0.125, -0.5, 2.0]])
    colors = np.array([[10, 20, 30]], dtype=np.uint8)
    path = tmp_path / "c.ply"
    write_cloud(path, PointCloud(pts, colors), binary=False)
    with open(path, "rb") as f:
        assert b"format ascii" in f.read(200)
    back = read_cloud(path)
    assert np.allclose(back.points, pts, atol=1e-6)
    assert np.array_equal(back.colors, colors)


def test_mesh_roundtrip(tmp_path):
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    colors = np.array([[255, 0, 0], [0, 255, 0], [0, 0, 255], [9, 9, 9]],
                      dtype=np.uint8)
    tris = np.array([[0, 1, 2], [0, 2, 3]])
    path = tmp_path / "m.ply"
    write_mesh(path, TriangleMesh(verts, colors, tris))
    back = read_mesh(path)
    assert np.allclose(back.vertices, verts)
    assert np.array_equal(back.vertex_colors, colors)
    assert np.array_equal(back.triangles, tris)


def test_mesh_header_binary_le(tmp_path):
    path = tmp_path / "m.ply"
    write_mesh(path, TriangleMesh(np.zeros((1, 3)),
                                  np.zeros((1, 3), dtype=np.uint8),
                                  np.zeros((0, 3), dtype=np.int64)))
    head = open(path, "rb").read(300).decode("ascii", "replace")
    assert "format binary_little_endian 1.0" in head
    assert "property uchar red" in head
    assert "property list uchar int vertex_indices" in head


def test_write_deterministic_bytes(tmp_path):
    rng = np.random.default_rng(3)
    pts = rng.uniform(-5, 5, (100, 3))
    colors = rng.integers(0, 256, (100, 3), dtype=np.uint8)
    a, b = tmp_path / "a.ply", tmp_path / "b.ply"
    write_cloud(a, PointCloud(pts, colors))
    write_cloud(b, PointCloud(pts.copy(), colors.copy()))
    assert a.read_bytes() == b.read_bytes()


def test_reject_non_ply(tmp_path):
    path = tmp_path / "x.ply"
    path.write_bytes(b"not a ply\n")
    with pytest.raises(ValueError):
        read_cloud(path)
