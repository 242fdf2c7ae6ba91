"""LiDAR SLAM and colored TSDF mesh reconstruction from recorded logs."""

__version__ = "0.1.0"

from .geometry import Pose, PointCloud, TriangleMesh, pose_exp, pose_log

__all__ = ["Pose", "PointCloud", "TriangleMesh", "pose_exp", "pose_log",
           "__version__"]
