import pytest

from lidarmesh.config import (PipelineConfig, load_config, preset_names,
                              resolve_config)
from lidarmesh.errors import StageError


def test_preset_names_lists_all_three():
    assert preset_names() == ["newer_college", "scout", "summit"]


def test_newer_college_preset_values():
    cfg = resolve_config("newer_college")
    assert cfg.ekf.constant_speed == 1.0
    assert cfg.slam.ndt_resolution == 1.5
    assert cfg.slam.min_range == 1.0
    assert cfg.slam.max_range == 50.0
    assert cfg.slam.num_targeted_cloud == 20
    assert cfg.loop.detection_period == 7500
    assert cfg.loop.num_submap_searched == 10
    assert cfg.loop.num_adjacent_pose_constraints == 10
    assert cfg.tsdf.voxel_size == 0.2
    assert cfg.tsdf.voxels_per_side == 4
    assert cfg.tsdf.carving is True
    assert cfg.tsdf.method == "fast"
    assert cfg.tsdf.constant_weight is False
    assert cfg.tsdf.min_ray_length == 2.0
    assert cfg.tsdf.max_ray_length == 200.0


def test_summit_preset_values():
    cfg = resolve_config("summit")
    assert cfg.ekf.constant_speed is None
    assert cfg.slam.ndt_resolution == 1.0
    assert cfg.loop.detection_period == 4000
    assert cfg.loop.threshold_loop_closure == 15.0
    assert cfg.loop.distance_loop_closure == 50.0
    assert cfg.loop.search_range == 50.0
    assert cfg.loop.num_submap_searched == 20
    assert cfg.tsdf.voxel_size == 0.125
    assert cfg.tsdf.voxels_per_side == 8
    assert cfg.tsdf.carving is False
    assert cfg.tsdf.method == "merged"
    assert cfg.tsdf.min_ray_length == 0.5


def test_scout_preset_values():
    cfg = resolve_config("scout")
    assert cfg.slam.ndt_resolution == 0.8
    assert cfg.slam.min_range == 3.0
    assert cfg.slam.max_range == 100.0
    assert cfg.tsdf.voxel_size == 0.15
    assert cfg.tsdf.method == "merged"
    assert cfg.tsdf.min_ray_length == 0.0


def test_defaults_when_no_config():
    cfg = resolve_config(None)
    assert cfg == PipelineConfig()


def test_partial_file_keeps_other_defaults(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("[slam]\nndt_resolution = 2.5\n")
    cfg = load_config(path)
    assert cfg.slam.ndt_resolution == 2.5
    assert cfg.slam.max_range == 50.0
    assert cfg.tsdf == PipelineConfig().tsdf


def test_unknown_section_rejected(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("[warp]\nspeed = 9\n")
    with pytest.raises(StageError, match=r"\[config\].*warp"):
        load_config(path)


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("[slam]\nturbo = on\n")
    with pytest.raises(StageError, match="turbo"):
        load_config(path)


def test_bad_value_names_key(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("[slam]\nmax_range = fast\n")
    with pytest.raises(StageError, match="max_range"):
        load_config(path)


def test_unsupported_switches_must_stay_false(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("[tsdf]\nuse_free_space = true\n")
    with pytest.raises(StageError, match="not supported"):
        load_config(path)
    path.write_text("[tsdf]\nallow_clear = false\nuse_free_space = false\n")
    assert load_config(path).tsdf == PipelineConfig().tsdf


def test_missing_file_is_config_error():
    with pytest.raises(StageError, match="neither a file nor one of"):
        resolve_config("/nope/nothing.cfg")


def test_invalid_method_reported_as_config_error(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("[tsdf]\nmethod = quantum\n")
    with pytest.raises(StageError, match="quantum"):
        load_config(path)
