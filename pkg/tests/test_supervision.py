import math
from dataclasses import replace

import numpy as np
import pytest

from core.geometry import KITTI_INTRINSICS, CameraFrame, SceneBounds, camera_rotation
from core.supervision import (HEIGHT_SOURCES, NoiseSpec, PatchUnion, SamplerConfig, SupervisionSet,
                              apply_label_noise, build_appearance_stream, build_frame_batch, ingest_point_cloud,
                              inject_label_noise, pose_pseudo_points, source_counts, sparsify_labels)
from core.synthetic import AnalyticSurface, CameraPath, Texture, build_scene, generate_point_cloud


def _pose(x: float = 0.0, y: float = 0.0, yaw: float = 0.0, height: float = 1.65) -> CameraFrame:
    rotation = camera_rotation(yaw, 0.0)
    center = np.array([x, y, height])
    return CameraFrame(rotation=rotation, translation=-rotation @ center, intrinsics=KITTI_INTRINSICS)


# ==================== 高度样本 ====================

def test_pose_patch_is_flat_grid():
    df = pose_pseudo_points([_pose()], patch_length=2.0, patch_width=2.0, grid_step=1.0, camera_height=1.65)
    assert len(df) == 9
    np.testing.assert_allclose(df["z"], 0.0, atol=1e-12)
    assert set(df["source"]) == {"pose"}
    assert df["x"].min() == pytest.approx(0.0) and df["x"].max() == pytest.approx(2.0)
    assert df["y"].min() == pytest.approx(-1.0) and df["y"].max() == pytest.approx(1.0)


def test_pose_patch_below_camera():
    df = pose_pseudo_points([_pose(height=0.0)], 2.0, 2.0, 1.0, camera_height=1.65)
    np.testing.assert_allclose(df["z"], -1.65)


def test_duplicate_poses_kept_unless_deduplicated():
    poses = [_pose(), _pose()]
    assert len(pose_pseudo_points(poses, 2.0, 2.0, 1.0)) == 18
    assert len(pose_pseudo_points(poses, 2.0, 2.0, 1.0, deduplicate=True)) == 9


def test_yawed_pose_rotates_patch():
    df = pose_pseudo_points([_pose(yaw=math.pi / 2)], patch_length=4.0, patch_width=2.0, grid_step=1.0)
    # 前向变为世界 +y，横向变为世界 -x..+x
    assert df["y"].min() == pytest.approx(0.0, abs=1e-12) and df["y"].max() == pytest.approx(4.0)
    assert df["x"].min() == pytest.approx(-1.0) and df["x"].max() == pytest.approx(1.0)


def test_pose_patch_rejects_nonpositive_dims():
    with pytest.raises(ValueError):
        pose_pseudo_points([_pose()], 0.0, 2.0, 1.0)


def test_ingest_point_cloud_passthrough():
    assert len(ingest_point_cloud(np.empty((0, 3)), "lidar")) == 0
    pts = np.random.default_rng(0).normal(size=(25, 3))
    df = ingest_point_cloud(pts, "sfm_dense")
    np.testing.assert_array_equal(df[["x", "y", "z"]].to_numpy(), pts)
    assert source_counts(df) == {"sfm_dense": 25}


def test_ingest_ground_filter_keeps_lowest_points():
    pts = np.column_stack([np.zeros(100), np.zeros(100), np.arange(100.0)])
    df = ingest_point_cloud(pts, "lidar", ground_percentile=10)
    assert df["z"].max() <= 10.0


def test_synthetic_cloud_round_trips(scene_spec):
    cloud = generate_point_cloud(scene_spec, density=2.0, seed=1)
    df = ingest_point_cloud(cloud[["x", "y", "z"]].to_numpy(), "synthetic")
    np.testing.assert_array_equal(df[["x", "y", "z"]].to_numpy(), cloud[["x", "y", "z"]].to_numpy())


def test_unknown_source_rejected():
    assert "pose" in HEIGHT_SOURCES
    with pytest.raises(ValueError):
        ingest_point_cloud(np.zeros((1, 3)), "radar")


# ==================== 外观样本 ====================

def test_frame_batch_matches_analytic_surface(scene_spec_factory):
    # 无车道线：细车道线可能落在像素中心之间，标签图里看不到
    spec = scene_spec_factory(texture=Texture(stripe_offsets=()), camera=CameraPath(num_poses=2, spacing=3.0,
                                                                                   image_width=64, image_height=24))
    scene = build_scene(spec)
    surface = AnalyticSurface(spec)
    cfg = SamplerConfig(samples_per_frame=3000, patch_length=20.0, patch_width=6.0)
    frame = scene.frames[1]
    batch = build_frame_batch(frame, lambda xy: surface.height(xy[:, 0], xy[:, 1]), cfg)
    assert len(batch) > 100

    depth = scene.depths[1]
    _, rgb, cls = surface(batch.xy[:, 0], batch.xy[:, 1])
    iu = np.clip(np.rint(batch.u).astype(int), 0, frame.width - 1)
    iv = np.clip(np.rint(batch.v).astype(int), 0, frame.height - 1)
    # 只比较邻域内类别一致且渲染深度与样本深度相符（未被遮挡）的点
    pad = np.pad(frame.labels, 2, mode="edge")
    uniform = np.ones(len(batch), dtype=bool)
    for dv in range(-2, 3):
        for du in range(-2, 3):
            uniform &= pad[iv + 2 + dv, iu + 2 + du] == frame.labels[iv, iu]
    visible = np.abs(depth[iv, iu] - batch.depth) < 0.05 * batch.depth
    keep = uniform & visible & (cls != 255)
    assert keep.sum() > 50
    assert np.abs(batch.color[keep] - rgb[keep]).max() <= 2.0 / 255.0
    np.testing.assert_array_equal(batch.labels[keep], cls[keep])


def test_points_outside_view_give_empty_batch(small_scene):
    cfg = SamplerConfig(samples_per_frame=500, patch_length=5.0, patch_width=2.0)
    # 高度场把所有点抬到相机上方 100 m，全部落在视野外
    batch = build_frame_batch(small_scene.frames[0], lambda xy: np.full(len(xy), 100.0), cfg)
    assert len(batch) == 0


def test_stream_skips_empty_frames_and_preserves_order(small_scene):
    surface = AnalyticSurface(small_scene.spec)
    cfg = SamplerConfig(samples_per_frame=500, patch_length=20.0, patch_width=6.0)
    height = lambda xy: surface.height(xy[:, 0], xy[:, 1])  # noqa: E731
    order = [3, 1, 2, 0]
    inline = list(build_appearance_stream(small_scene.frames, height, cfg, epoch=2, order=order))
    threaded = list(build_appearance_stream(small_scene.frames, height, cfg, epoch=2, order=order,
                                            num_workers=3, prefetch=2))
    assert [b.frame_id for b in inline] == order
    assert [b.frame_id for b in threaded] == order
    for a, b in zip(inline, threaded):
        np.testing.assert_array_equal(a.xy, b.xy)
        np.testing.assert_array_equal(a.labels, b.labels)


def test_same_point_seen_from_two_frames(small_scene):
    surface = AnalyticSurface(small_scene.spec)
    cfg = SamplerConfig(samples_per_frame=2000, patch_length=20.0, patch_width=6.0)
    height = lambda xy: surface.height(xy[:, 0], xy[:, 1])  # noqa: E731
    a = build_frame_batch(small_scene.frames[0], height, cfg)
    b = build_frame_batch(small_scene.frames[1], height, cfg)
    # 两帧视野重叠：x 范围有交集
    assert a.xy[:, 0].max() > b.xy[:, 0].min()


def test_patch_union_contains_every_pose_patch():
    union = PatchUnion.from_frames([_pose(0.0), _pose(30.0, yaw=math.pi / 2)], patch_length=10.0, patch_width=4.0)
    assert union.contains(np.array([[5.0, 0.0], [9.9, 1.9], [31.0, 5.0], [28.5, 9.5]])).all()
    assert not union.contains(np.array([[-1.0, 0.0], [20.0, 0.0], [30.0, -1.0], [5.0, 2.5]])).any()


def test_patch_union_samples_uniformly_over_overlaps():
    union = PatchUnion.from_frames([_pose(0.0), _pose(5.0)], patch_length=10.0, patch_width=4.0)
    xy = union.sample(np.random.default_rng(0), 30000)
    assert len(xy) == 30000 and union.contains(xy).all()
    # 并集 x∈[0,15]，重叠段 [5,10] 只占三分之一面积
    overlap = np.mean((xy[:, 0] >= 5.0) & (xy[:, 0] <= 10.0))
    assert overlap == pytest.approx(1 / 3, abs=0.02)


def test_patch_union_near_keeps_only_reachable_poses():
    union = PatchUnion.from_frames([_pose(0.0), _pose(50.0), _pose(300.0)], patch_length=10.0, patch_width=4.0)
    near = union.near(np.array([0.0, 0.0, 1.65]), radius=45.0)
    np.testing.assert_allclose(near.centers[:, 0], [0.0, 50.0], atol=1e-9)
    assert union.near(np.zeros(2), radius=1000.0) is union


def test_union_region_reaches_beyond_own_patch(small_scene):
    surface = AnalyticSurface(small_scene.spec)
    height = lambda xy: surface.height(xy[:, 0], xy[:, 1])  # noqa: E731
    cfg = SamplerConfig(samples_per_frame=2000, patch_length=10.0, patch_width=6.0)
    union = next(build_appearance_stream(small_scene.frames, height, cfg, order=[0]))
    own = next(build_appearance_stream(small_scene.frames, height, replace(cfg, region="own"), order=[0]))
    x0 = small_scene.frames[0].center[0]
    assert own.xy[:, 0].max() <= x0 + 10.0 + 1e-9
    assert np.any(union.xy[:, 0] > x0 + 12.0)


def test_sampler_rejects_unknown_region():
    with pytest.raises(ValueError):
        SamplerConfig(region="sky")


def test_drop_ignored_removes_unlabeled_samples(small_scene):
    surface = AnalyticSurface(small_scene.spec)
    frame = small_scene.frames[0].with_labels(None)
    cfg = SamplerConfig(samples_per_frame=500, patch_length=20.0, patch_width=6.0, drop_ignored=True)
    batch = build_frame_batch(frame, lambda xy: surface.height(xy[:, 0], xy[:, 1]), cfg)
    assert len(batch) == 0


def test_supervision_set_normalizes_heights():
    heights = ingest_point_cloud(np.array([[0.0, -1.0, 0.1], [10.0, 1.0, 0.2]]), "lidar")
    supervision = SupervisionSet.build(heights, [], margin=0.0)
    xy, z = supervision.normalized_heights()
    np.testing.assert_allclose(xy, [[-1.0, -1.0], [1.0, 1.0]])
    np.testing.assert_allclose(z, [0.1, 0.2])
    assert supervision.bounds == SceneBounds(0.0, 10.0, -1.0, 1.0, margin=0.0)


# ==================== 稀疏标签与噪声 ====================

def _labeled_frames(n: int):
    labels = np.zeros((2, 2), dtype=np.uint8)
    return [CameraFrame(rotation=np.eye(3), translation=np.zeros(3),
                        intrinsics=KITTI_INTRINSICS.scaled(2, 2), labels=labels, frame_id=i) for i in range(n)]


def test_sparsify_keeps_ceiling_fraction():
    frames = _labeled_frames(100)
    assert sum(f.labels is not None for f in sparsify_labels(frames, 0.1, seed=3)) == 10
    assert sum(f.labels is not None for f in sparsify_labels(_labeled_frames(7), 0.1)) == 1
    assert all(f.labels is not None for f in sparsify_labels(frames, 1.0))
    assert all(f.labels is None for f in sparsify_labels(frames, 0.0))


def test_sparsify_is_seeded():
    frames = _labeled_frames(30)
    pick = lambda fs: [f.frame_id for f in fs if f.labels is not None]  # noqa: E731
    assert pick(sparsify_labels(frames, 0.3, seed=1)) == pick(sparsify_labels(frames, 0.3, seed=1))


def test_noise_ratio_zero_is_identity():
    labels = np.random.default_rng(0).integers(0, 3, size=(20, 30)).astype(np.uint8)
    np.testing.assert_array_equal(inject_label_noise(labels, NoiseSpec(ratio=0.0)), labels)


def test_noise_ratio_one_changes_every_pixel():
    labels = np.random.default_rng(0).integers(0, 3, size=(20, 30)).astype(np.uint8)
    noisy = inject_label_noise(labels, NoiseSpec(ratio=1.0, seed=4))
    assert np.all(noisy != labels)
    assert noisy.max() < 3


def test_noise_half_ratio_binomial_bound():
    labels = np.random.default_rng(1).integers(0, 3, size=(376, 1241)).astype(np.uint8)
    noisy = inject_label_noise(labels, NoiseSpec(ratio=0.5, seed=2), frame_id=5)
    assert abs(np.mean(noisy != labels) - 0.5) <= 0.005


def test_resample_noise_may_keep_the_original_class():
    labels = np.random.default_rng(3).integers(0, 3, size=(376, 1241)).astype(np.uint8)
    noisy = inject_label_noise(labels, NoiseSpec(ratio=1.0, seed=4, model="resample"))
    assert noisy.max() < 3
    assert np.mean(noisy == labels) == pytest.approx(1 / 3, abs=0.005)


def test_resample_noise_selects_the_same_pixels_as_flip():
    labels = np.random.default_rng(5).integers(0, 3, size=(200, 300)).astype(np.uint8)
    flipped = inject_label_noise(labels, NoiseSpec(ratio=0.4, seed=1), frame_id=2) != labels
    resampled = inject_label_noise(labels, NoiseSpec(ratio=0.4, seed=1, model="resample"), frame_id=2) != labels
    assert not np.any(resampled & ~flipped)
    assert resampled.sum() == pytest.approx(2 / 3 * flipped.sum(), rel=0.05)


def test_noise_leaves_ignore_and_is_reproducible():
    labels = np.full((10, 10), 255, dtype=np.uint8)
    labels[:5] = 1
    spec = NoiseSpec(ratio=0.9, seed=8)
    a = inject_label_noise(labels, spec, frame_id=3)
    assert np.all(a[5:] == 255)
    np.testing.assert_array_equal(a, inject_label_noise(labels, spec, frame_id=3))
    assert not np.array_equal(a, inject_label_noise(labels, spec, frame_id=4))


def test_apply_noise_skips_unlabeled_frames():
    frames = _labeled_frames(3)
    frames[1] = frames[1].with_labels(None)
    noisy = apply_label_noise(frames, NoiseSpec(ratio=1.0))
    assert noisy[1].labels is None
    assert np.all(noisy[0].labels != 0)


def test_noise_spec_validates_ratio_and_model():
    with pytest.raises(ValueError):
        NoiseSpec(ratio=1.5)
    with pytest.raises(ValueError):
        NoiseSpec(ratio=0.5, model="region")
