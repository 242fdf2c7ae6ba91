import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from lidarmesh.geometry import (
    PointCloud,
    Pose,
    pose_exp,
    pose_interpolate,
    pose_log,
    quat_from_rotvec,
    quat_from_rotvec_batch,
    quat_multiply_batch,
    quat_normalize,
    quat_rotate_batch,
    quat_to_rotvec,
    quat_to_rotvec_batch,
    range_filter,
    stride_downsample,
    transform_cloud,
    voxel_downsample,
)


def random_rotvec(rng, max_angle=np.pi - 1e-3):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0, max_angle)


def random_pose(rng, trans_scale=5.0):
    return Pose.from_rotvec(random_rotvec(rng),
                            rng.uniform(-trans_scale, trans_scale, 3))


def test_identity_compose():
    p = Pose.identity().compose(Pose.identity())
    assert np.allclose(p.q, [1, 0, 0, 0])
    assert np.allclose(p.t, 0)


def test_compose_example():
    a = Pose.from_yaw(np.pi / 2, [1, 0, 0])
    b = Pose(t=[1, 0, 0])
    c = a.compose(b)
    assert np.allclose(c.t, [1, 1, 0], atol=1e-12)
    assert np.isclose(c.yaw(), np.pi / 2)


def test_compose_matches_matrix_product():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b = random_pose(rng), random_pose(rng)
        m = a.matrix() @ b.matrix()
        c = a.compose(b)
        assert np.allclose(c.matrix(), m, atol=1e-12)


def test_inverse_roundtrip():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a = random_pose(rng)
        e = a.compose(a.inverse())
        assert np.linalg.norm(e.t) < 1e-9
        assert abs(e.q[0]) > 1 - 1e-9


def test_associativity():
    rng = np.random.default_rng(2)
    for _ in range(30):
        a, b, c = (random_pose(rng) for _ in range(3))
        lhs = a.compose(b).compose(c)
        rhs = a.compose(b.compose(c))
        assert np.allclose(lhs.t, rhs.t, atol=1e-9)
        assert np.allclose(lhs.q, rhs.q, atol=1e-9)


def test_apply_matches_matrix():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-10, 10, (100, 3))
    for _ in range(10):
        p = random_pose(rng)
        hom = np.hstack([pts, np.ones((100, 1))])
        expect = (p.matrix() @ hom.T).T[:, :3]
        assert np.allclose(p.apply(pts), expect, atol=1e-10)


def test_quat_canonical_w_nonnegative():
    q = quat_normalize([-0.5, 0.5, 0.5, 0.5])
    assert q[0] > 0
    q = quat_normalize([0.0, -1.0, 0.0, 0.0])
    assert q[1] > 0


def test_rotvec_roundtrip_against_scipy():
    rng = np.random.default_rng(4)
    for _ in range(200):
        rv = random_rotvec(rng)
        q = quat_from_rotvec(rv)
        sq = Rotation.from_rotvec(rv).as_quat()  # x,y,z,w
        expect = quat_normalize([sq[3], sq[0], sq[1], sq[2]])
        assert np.allclose(q, expect, atol=1e-12)
        assert np.allclose(quat_to_rotvec(q), rv, atol=1e-9)


def test_rotvec_small_angle():
    rv = np.array([1e-12, -2e-12, 0.5e-12])
    q = quat_from_rotvec(rv)
    assert np.allclose(quat_to_rotvec(q), rv, atol=1e-15)
    assert np.allclose(pose_log(Pose.identity()), np.zeros(6))


def test_pose_log_exp():
    x = np.array([0.0, 0.0, np.pi / 2, 1.0, 2.0, 3.0])
    p = pose_exp(x)
    assert np.isclose(p.yaw(), np.pi / 2)
    assert np.allclose(p.t, [1, 2, 3])
    assert np.allclose(pose_log(p), x, atol=1e-12)

    rng = np.random.default_rng(5)
    for _ in range(100):
        v = np.concatenate([random_rotvec(rng), rng.uniform(-5, 5, 3)])
        assert np.allclose(pose_log(pose_exp(v)), v, atol=1e-9)


def test_pose_log_translation_direct():
    # translation block of the chart is the raw translation, not a twist
    p = Pose.from_yaw(np.pi / 2, [3.0, -1.0, 0.5])
    x = pose_log(p)
    assert np.allclose(x[3:], [3.0, -1.0, 0.5])


def test_pose_interpolate():
    a = Pose.from_yaw(0.0, [0, 0, 0])
    b = Pose.from_yaw(np.pi / 2, [2, 0, 0])
    m = pose_interpolate(a, b, 0.5)
    assert np.isclose(m.yaw(), np.pi / 4)
    assert np.allclose(m.t, [1, 0, 0])
    z = pose_interpolate(a, b, 0.0)
    assert np.allclose(z.t, a.t)
    o = pose_interpolate(a, b, 1.0)
    assert np.allclose(o.q, b.q, atol=1e-12)


def test_transform_cloud_preserves_colors():
    cloud = PointCloud(np.array([[1.0, 0, 0], [0, 1, 0]]),
                       colors=np.array([[255, 0, 0], [0, 255, 0]]))
    out = transform_cloud(Pose.from_yaw(np.pi / 2), cloud)
    assert np.allclose(out.points[0], [0, 1, 0], atol=1e-12)
    assert np.array_equal(out.colors, cloud.colors)
    assert out.color_valid.all()


def test_voxel_downsample_keeps_first():
    pts = np.array([[0.005, 0.0, 0.0], [0.012, 0.0, 0.0], [0.5, 0.5, 0.5]])
    out = voxel_downsample(PointCloud(pts), 0.1)
    # first two points share the 0.1 m voxel; the earlier one survives
    assert len(out) == 2
    assert np.allclose(out.points[0], pts[0])
    assert np.allclose(out.points[1], pts[2])


def test_voxel_downsample_close_pair():
    pts = np.array([[0.0, 0.0, 0.0], [0.01, 0.0, 0.0]])
    out = voxel_downsample(PointCloud(pts), 0.1)
    assert len(out) == 1


def test_voxel_downsample_negative_coords():
    pts = np.array([[-0.05, -0.05, -0.05], [-0.01, -0.02, -0.03],
                    [0.05, 0.05, 0.05]])
    out = voxel_downsample(PointCloud(pts), 0.1)
    assert len(out) == 2


def test_stride_downsample():
    pts = np.arange(30, dtype=float).reshape(10, 3)
    out = stride_downsample(PointCloud(pts), 3)
    assert len(out) == 4
    assert np.allclose(out.points[1], pts[3])
    with pytest.raises(ValueError):
        stride_downsample(PointCloud(pts), 0)


def test_range_filter():
    pts = np.array([[0.5, 0, 0], [2.0, 0, 0], [0, 60.0, 0]])
    out = range_filter(PointCloud(pts), 1.0, 50.0)
    assert len(out) == 1
    assert np.allclose(out.points[0], [2.0, 0, 0])


def test_batch_quat_ops_match_scalar():
    rng = np.random.default_rng(6)
    n = 64
    rv = np.stack([random_rotvec(rng) for _ in range(n)])
    q = quat_from_rotvec_batch(rv)
    for i in range(0, n, 7):
        assert np.allclose(q[i], quat_from_rotvec(rv[i]), atol=1e-12)
    back = quat_to_rotvec_batch(q)
    assert np.allclose(back, rv, atol=1e-9)

    q2 = quat_from_rotvec_batch(rng.uniform(-1, 1, (n, 3)))
    prod = quat_multiply_batch(q, q2)
    v = rng.uniform(-5, 5, (n, 3))
    rot = quat_rotate_batch(q, v)
    from lidarmesh.geometry import quat_multiply, quat_rotate
    for i in range(0, n, 9):
        assert np.allclose(prod[i], quat_multiply(q[i], q2[i]), atol=1e-12)
        assert np.allclose(rot[i], quat_rotate(q[i], v[i]), atol=1e-12)


def test_pose_immutable():
    p = Pose.identity()
    with pytest.raises(AttributeError):
        p.t = np.zeros(3)
    with pytest.raises(ValueError):
        p.t[0] = 1.0
