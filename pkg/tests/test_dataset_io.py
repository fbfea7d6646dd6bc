import json

import numpy as np
import pytest

from core.dataset_io import (DatasetError, cloud_samples, load_dataset, parse_calib, parse_poses, read_point_records,
                             write_dataset, write_point_records)
from core.synthetic import generate_source_cloud
from utils.image_io import save_image, save_labels

CALIB = "P2: 7.0 0.0 2.0 0.0 0.0 7.0 1.5 0.0 0.0 0.0 1.0 0.0\n"
IDENTITY_POSE = "1 0 0 0 0 1 0 0 0 0 1 0\n"


def _minimal_dataset(root, poses=IDENTITY_POSE, world_frame="z_up", images=1):
    root.mkdir(parents=True, exist_ok=True)
    (root / "poses.txt").write_text(poses, encoding="utf-8")
    (root / "calib.txt").write_text(CALIB, encoding="utf-8")
    for i in range(images):
        save_image(root / "image_2" / f"{i:06d}.png", np.full((3, 4, 3), 0.5))
    if world_frame is not None:
        (root / "scene.json").write_text(json.dumps({"world_frame": world_frame}), encoding="utf-8")
    return root


# ==================== 合成布局 ====================

def test_synthetic_layout_round_trips(small_scene, tmp_path):
    clouds = {"lidar": generate_source_cloud(small_scene.spec, "lidar", seed=1)}
    write_dataset(small_scene, tmp_path / "ds", clouds)
    dataset = load_dataset(tmp_path / "ds", num_workers=0)

    assert dataset.warnings == []
    assert dataset.world_frame == "z_up"
    assert dataset.scene_spec == small_scene.spec
    assert len(dataset.frames) == len(small_scene.frames)
    for loaded, original in zip(dataset.frames, small_scene.frames):
        np.testing.assert_allclose(loaded.rotation, original.rotation, atol=1e-12)
        np.testing.assert_allclose(loaded.translation, original.translation, atol=1e-12)
        assert loaded.intrinsics == original.intrinsics
        assert np.abs(loaded.image - original.image).max() <= 0.5 / 255 + 1e-12
        np.testing.assert_array_equal(loaded.labels, original.labels)
    np.testing.assert_allclose(dataset.clouds["lidar"][["x", "y", "z"]].to_numpy(),
                               clouds["lidar"][["x", "y", "z"]].to_numpy(), atol=1e-4)
    assert len(dataset.dataset_hash) == 64


def test_ppm_layout_loads_same_pixels(small_scene, tmp_path):
    write_dataset(small_scene, tmp_path / "png")
    write_dataset(small_scene, tmp_path / "ppm", image_format="ppm")
    png, ppm = load_dataset(tmp_path / "png"), load_dataset(tmp_path / "ppm")
    for a, b in zip(png.frames, ppm.frames):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.labels, b.labels)


def test_threaded_loading_matches_inline(small_scene, tmp_path):
    write_dataset(small_scene, tmp_path / "ds")
    inline = load_dataset(tmp_path / "ds", num_workers=0)
    threaded = load_dataset(tmp_path / "ds", num_workers=3)
    assert [f.frame_id for f in threaded.frames] == [f.frame_id for f in inline.frames]
    assert inline.dataset_hash == threaded.dataset_hash


def test_dataset_hash_tracks_image_bytes(small_scene, tmp_path):
    write_dataset(small_scene, tmp_path / "ds")
    before = load_dataset(tmp_path / "ds").dataset_hash
    save_image(tmp_path / "ds" / "image_2" / "000000.png", np.zeros_like(small_scene.frames[0].image))
    assert load_dataset(tmp_path / "ds").dataset_hash != before


# ==================== 位姿与坐标系 ====================

def test_identity_pose_in_road_frame(tmp_path):
    dataset = load_dataset(_minimal_dataset(tmp_path / "ds"))
    frame = dataset.frames[0]
    np.testing.assert_array_equal(frame.rotation, np.eye(3))
    np.testing.assert_array_equal(frame.translation, np.zeros(3))
    assert (frame.intrinsics.fx, frame.intrinsics.cx, frame.intrinsics.cy) == (7.0, 2.0, 1.5)
    assert frame.labels is None


def test_kitti_world_frame_is_converted(tmp_path):
    dataset = load_dataset(_minimal_dataset(tmp_path / "ds", world_frame=None))
    assert dataset.world_frame == "kitti"
    # KITTI 相机 z 轴（前）对应道路系 +x
    np.testing.assert_allclose(dataset.frames[0].forward, [1.0, 0.0, 0.0])


def test_slightly_skewed_rotation_is_repaired_with_warning(tmp_path):
    pose = "1 1e-6 0 0 0 1 0 0 0 0 1 0\n"
    dataset = load_dataset(_minimal_dataset(tmp_path / "ds", poses=pose))
    assert len(dataset.warnings) == 1


def test_non_orthonormal_rotation_rejected(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(_minimal_dataset(tmp_path / "ds", poses="1 0.1 0 0 0 1 0 0 0 0 1 0\n"))


# ==================== 校验失败 ====================

def test_pose_image_count_mismatch(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(_minimal_dataset(tmp_path / "ds", poses=IDENTITY_POSE * 2))


def test_missing_directory_and_files(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "nothing")
    root = _minimal_dataset(tmp_path / "ds")
    (root / "calib.txt").unlink()
    with pytest.raises(DatasetError):
        load_dataset(root)


def test_malformed_pose_line(tmp_path):
    path = tmp_path / "poses.txt"
    path.write_text("1 0 0 0 0 1 0 0 0 0 1\n", encoding="utf-8")
    with pytest.raises(DatasetError):
        parse_poses(path)


def test_calib_parsing(tmp_path):
    path = tmp_path / "calib.txt"
    path.write_text(CALIB + "Tr: 1 0 0 0 0 1 0 0 0 0 1 0\n", encoding="utf-8")
    calib = parse_calib(path)
    assert set(calib) == {"P2", "Tr"}
    assert calib["P2"][0, 0] == 7.0


def test_truncated_cloud_rejected(tmp_path):
    root = _minimal_dataset(tmp_path / "ds")
    (root / "velodyne").mkdir()
    (root / "velodyne" / "lidar.bin").write_bytes(b"\x00" * 10)
    with pytest.raises(DatasetError):
        load_dataset(root)


def test_unknown_cloud_source_rejected(tmp_path):
    root = _minimal_dataset(tmp_path / "ds")
    write_point_records(root / "velodyne" / "radar.bin", np.zeros((2, 3)))
    with pytest.raises(DatasetError):
        load_dataset(root)


def test_label_size_mismatch_rejected(tmp_path):
    root = _minimal_dataset(tmp_path / "ds")
    save_labels(root / "labels" / "000000.png", np.zeros((2, 2), dtype=np.uint8))
    with pytest.raises(DatasetError):
        load_dataset(root)


# ==================== 点云 ====================

def test_point_records_round_trip(tmp_path):
    xyz = np.array([[1.5, -2.25, 0.125], [0.0, 3.0, -1.0]])
    path = write_point_records(tmp_path / "c.bin", xyz, intensity=np.array([0.3, 0.7]))
    assert path.stat().st_size == 32
    np.testing.assert_array_equal(read_point_records(path), xyz)


def test_per_scan_clouds_use_tr_and_pose(tmp_path):
    root = _minimal_dataset(tmp_path / "ds", poses="1 0 0 5 0 1 0 0 0 0 1 0\n")
    (root / "calib.txt").write_text(CALIB + "Tr: 1 0 0 0 0 1 0 0 0 0 1 1\n", encoding="utf-8")
    write_point_records(root / "velodyne" / "000000.bin", np.array([[1.0, 2.0, 3.0]]))
    dataset = load_dataset(root)
    np.testing.assert_allclose(dataset.clouds["lidar"][["x", "y", "z"]].to_numpy(), [[6.0, 2.0, 4.0]])


def test_cloud_samples_missing_source_is_empty(tmp_path):
    dataset = load_dataset(_minimal_dataset(tmp_path / "ds"))
    assert len(cloud_samples(dataset, "sfm_dense")) == 0
