import numpy as np
import pytest

from lidarmesh import dataset as ds
from lidarmesh.errors import StageError
from lidarmesh.geometry import PointCloud, Pose
from lidarmesh.ply import write_cloud
from lidarmesh.sensors import CameraModel, ImuSample, WheelOdomSample


def test_stamp_format_roundtrip():
    assert ds.format_stamp(1.5) == "1.500000000"
    assert ds.format_stamp(0.000000001) == "0.000000001"
    assert ds.format_stamp(123.456789012) == "123.456789012"[:13]
    for t in (0.0, 0.1, 7.25, 1234.000000001, 99.999999999):
        assert abs(ds.parse_stamp(ds.format_stamp(t)) - t) < 1e-9


def test_trajectory_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    stamps = np.sort(rng.uniform(0, 100, 20))
    poses = [Pose.from_rotvec(rng.normal(0, 0.5, 3), rng.uniform(-5, 5, 3))
             for _ in range(20)]
    path = tmp_path / "traj.txt"
    ds.write_trajectory(path, stamps, poses)
    s2, p2 = ds.read_trajectory(path)
    assert np.allclose(s2, stamps, atol=1e-9)
    for a, b in zip(poses, p2):
        assert np.allclose(a.t, b.t, atol=1e-8)
        assert np.allclose(a.q, b.q, atol=1e-8)


def test_imu_odom_csv_roundtrip(tmp_path):
    imu = [ImuSample(0.1 * k, np.array([1.0, 0, 0, 0]),
                     np.array([0.0, 0, 0.1 * k]), np.array([0.0, 0, 9.81]))
           for k in range(5)]
    odom = [WheelOdomSample(0.05 * k, 1.0 + 0.01 * k) for k in range(7)]
    ds.write_imu_csv(tmp_path / "imu.csv", imu)
    ds.write_odom_csv(tmp_path / "odom.csv", odom)
    imu2 = ds.read_imu_csv(tmp_path / "imu.csv")
    odom2 = ds.read_odom_csv(tmp_path / "odom.csv")
    assert len(imu2) == 5 and len(odom2) == 7
    assert np.allclose(imu2[3].angular_velocity, [0, 0, 0.3], atol=1e-9)
    assert abs(odom2[6].forward_velocity - 1.06) < 1e-9


def test_calibration_roundtrip(tmp_path):
    cam = CameraModel(fx=100.0, fy=110.0, cx=79.5, cy=59.5, width=160,
                      height=120, k1=-0.1, k2=0.01, p1=0.001, p2=-0.002,
                      k3=0.0005,
                      T_lidar_camera=Pose.from_yaw(0.3, [0.1, -0.2, 0.05]))
    path = tmp_path / "calibration.txt"
    ds.write_calibration(path, cam)
    cam2 = ds.read_calibration(path)
    for key in ("fx", "fy", "cx", "cy", "k1", "k2", "p1", "p2", "k3"):
        assert abs(getattr(cam, key) - getattr(cam2, key)) < 1e-9
    assert cam2.width == 160 and cam2.height == 120
    assert np.allclose(cam2.T_lidar_camera.t, cam.T_lidar_camera.t, atol=1e-8)
    assert np.allclose(cam2.T_lidar_camera.q, cam.T_lidar_camera.q, atol=1e-8)


def test_calibration_errors(tmp_path):
    path = tmp_path / "calibration.txt"
    path.write_text("fx = 100\nbogus line without equals\n")
    with pytest.raises(StageError) as ei:
        ds.read_calibration(path)
    assert ei.value.stage == "ingest"
    assert ":2:" in str(ei.value)

    path.write_text("fx = 100\nfy = 100\ncx = 1\ncy = 1\n")
    with pytest.raises(StageError, match="width"):
        ds.read_calibration(path)


def _make_dataset(root, scan_stamps, imu_stamps, image_stamps=()):
    (root / "lidar").mkdir(parents=True)
    pts = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
    for t in scan_stamps:
        write_cloud(root / "lidar" / f"{ds.format_stamp(t)}.ply",
                    PointCloud(pts))
    imu = [ImuSample(t, np.array([1.0, 0, 0, 0]), np.zeros(3), np.zeros(3))
           for t in imu_stamps]
    ds.write_imu_csv(root / "imu.csv", imu)
    if image_stamps:
        from PIL import Image
        cam_dir = root / "cam0"
        cam_dir.mkdir()
        ds.write_calibration(cam_dir / "calibration.txt",
                             CameraModel(fx=50, fy=50, cx=15.5, cy=15.5,
                                         width=32, height=32))
        for t in image_stamps:
            Image.fromarray(np.zeros((32, 32, 3), dtype=np.uint8)).save(
                cam_dir / f"{ds.format_stamp(t)}.png")


def test_missing_dataset():
    with pytest.raises(StageError) as ei:
        ds.load_manifest("/nonexistent/dataset")
    assert ei.value.stage == "ingest"
    assert "/nonexistent/dataset" in str(ei.value)


def test_missing_imu(tmp_path):
    (tmp_path / "lidar").mkdir()
    write_cloud(tmp_path / "lidar" / "0.000000000.ply",
                PointCloud(np.zeros((1, 3))))
    with pytest.raises(StageError, match="imu stream not found"):
        ds.load_manifest(tmp_path)


def test_image_association(tmp_path):
    _make_dataset(tmp_path, [0.0, 0.1, 0.2], np.arange(0, 0.21, 0.01),
                  image_stamps=[0.005, 0.105])
    manifest = ds.load_manifest(tmp_path)
    assert len(manifest.cameras) == 1
    got = list(ds.frames(manifest, max_skew=0.02))
    assert [len(f.images) for f in got] == [1, 1, 0]
    assert got[0].images[0][0] == 0
    assert got[0].images[0][1].pixels.shape == (32, 32, 3)


def test_imu_windowing(tmp_path):
    # 400 Hz IMU against 10 Hz scans: 40 samples per frame, none lost
    imu_stamps = np.arange(1, 401) / 400.0
    scan_stamps = np.arange(1, 11) / 10.0
    _make_dataset(tmp_path, scan_stamps, imu_stamps)
    manifest = ds.load_manifest(tmp_path)
    got = list(ds.frames(manifest))
    counts = [len(f.imu) for f in got]
    assert all(abs(c - 40) <= 1 for c in counts)
    assert sum(counts) == 400
    all_stamps = [s.stamp for f in got for s in f.imu]
    assert all_stamps == sorted(all_stamps)
    for f in got:
        for s in f.imu:
            assert s.stamp <= f.scan.stamp + 1e-12


def test_frames_deterministic(tmp_path):
    _make_dataset(tmp_path, [0.1, 0.2], np.arange(0.01, 0.21, 0.01))
    manifest = ds.load_manifest(tmp_path)
    a = list(ds.frames(manifest))
    b = list(ds.frames(manifest))
    for fa, fb in zip(a, b):
        assert fa.scan.stamp == fb.scan.stamp
        assert np.array_equal(fa.scan.cloud.points, fb.scan.cloud.points)
        assert len(fa.imu) == len(fb.imu)


def test_unreadable_scan_skipped(tmp_path, caplog):
    _make_dataset(tmp_path, [0.1, 0.2, 0.3], [0.05])
    (tmp_path / "lidar" / "0.200000000.ply").write_bytes(b"garbage")
    manifest = ds.load_manifest(tmp_path)
    got = list(ds.frames(manifest))
    assert [f.scan.stamp for f in got] == pytest.approx([0.1, 0.3])


def test_downsample_cloud():
    pts = np.arange(300, dtype=float).reshape(100, 3)
    colors = np.tile(np.arange(100, dtype=np.uint8)[:, None], (1, 3))
    out = ds.downsample_cloud(PointCloud(pts, colors), 10)
    assert len(out) == 10
    assert np.allclose(out.points, pts[0::10])
    assert np.array_equal(out.colors, colors[0::10])
    same = ds.downsample_cloud(PointCloud(pts), 1)
    assert np.allclose(same.points, pts)
