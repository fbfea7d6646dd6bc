import math

import numpy as np
import pytest

from core.geometry import (KITTI_INTRINSICS, CameraFrame, CameraIntrinsics, GeometryError, SceneBounds, ViewStatus,
                           backproject, camera_rotation, check_rotation, denormalize, normalize, orthonormalize,
                           pixel_rays, project, project_point, sample_color, sample_label, sample_pixel)

UNIT = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 4, 4)


def _identity_frame(intrinsics=UNIT) -> CameraFrame:
    return CameraFrame(rotation=np.eye(3), translation=np.zeros(3), intrinsics=intrinsics)


# ==================== 归一化 ====================

def test_normalize_examples():
    bounds = SceneBounds(0.0, 10.0, -2.0, 2.0, margin=0.0)
    np.testing.assert_allclose(normalize([5.0, 0.0], bounds), [[0.0, 0.0]])
    np.testing.assert_allclose(normalize([0.0, -2.0], bounds), [[-1.0, -1.0]])


def test_normalize_round_trip():
    bounds = SceneBounds(-3.0, 120.0, -6.0, 4.0, margin=0.05)
    p = np.random.default_rng(0).uniform(-10, 130, size=(100, 2))
    np.testing.assert_allclose(denormalize(normalize(p, bounds), bounds), p, atol=1e-9)


def test_bounds_margin_keeps_points_inside():
    xy = np.random.default_rng(1).uniform(0, 50, size=(500, 2))
    uv = SceneBounds.from_points(xy, margin=0.01).normalize(xy)
    assert uv.min() > -1.0 and uv.max() < 1.0


def test_degenerate_bounds_rejected():
    with pytest.raises(GeometryError):
        SceneBounds(1.0, 1.0, 0.0, 2.0)
    with pytest.raises(GeometryError):
        SceneBounds.from_points(np.empty((0, 2)))


def test_bounds_dict_round_trip():
    bounds = SceneBounds(0.0, 1.5, -2.0, 2.0, margin=0.02)
    assert SceneBounds.from_dict(bounds.to_dict()) == bounds


# ==================== 旋转与位姿 ====================

def test_rotation_check_and_orthonormalize():
    check_rotation(np.eye(3))
    skewed = np.eye(3) + 1e-3 * np.array([[0, 1, 0], [0, 0, 0], [0, 0, 0]])
    with pytest.raises(GeometryError):
        check_rotation(skewed)
    check_rotation(orthonormalize(skewed))
    assert np.linalg.det(orthonormalize(skewed)) == pytest.approx(1.0)


def test_camera_rotation_axes():
    r = camera_rotation(yaw=0.0, pitch=0.0)
    # 相机 z 轴朝世界 x，x 轴朝世界 -y（右），y 轴朝世界 -z（下）
    np.testing.assert_allclose(r[2], [1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(r[0], [0, -1, 0], atol=1e-15)
    np.testing.assert_allclose(r[1], [0, 0, -1], atol=1e-15)
    check_rotation(camera_rotation(0.4, math.radians(8)))


def test_frame_round_trips_camera_to_world():
    rotation = camera_rotation(0.3, 0.1)
    center = np.array([4.0, -1.0, 1.65])
    frame = CameraFrame(rotation=rotation, translation=-rotation @ center, intrinsics=KITTI_INTRINSICS)
    np.testing.assert_allclose(frame.center, center, atol=1e-12)
    assert frame.yaw == pytest.approx(0.3)
    again = CameraFrame.from_camera_to_world(frame.camera_to_world(), KITTI_INTRINSICS)
    np.testing.assert_allclose(again.rotation, frame.rotation, atol=1e-12)
    np.testing.assert_allclose(again.translation, frame.translation, atol=1e-12)


@pytest.mark.parametrize("yaw", [0.0, math.radians(30), -2.0])
def test_yaw_of_straight_down_camera(yaw):
    rotation = camera_rotation(yaw, math.pi / 2)
    frame = CameraFrame(rotation=rotation, translation=np.zeros(3), intrinsics=KITTI_INTRINSICS)
    np.testing.assert_allclose(frame.forward, [0, 0, -1], atol=1e-12)
    assert frame.yaw == pytest.approx(yaw)


def test_frame_rejects_mismatched_image():
    with pytest.raises(GeometryError):
        CameraFrame(rotation=np.eye(3), translation=np.zeros(3), intrinsics=UNIT, image=np.zeros((3, 4, 3)))


# ==================== 投影 ====================

def test_project_identity_unit_intrinsics():
    p = project_point([0.0, 0.0, 1.0], _identity_frame())
    assert (p.u, p.v, p.depth) == (0.0, 0.0, 1.0)
    assert p.in_view


def test_project_behind_camera():
    p = project_point([0.0, 0.0, -1.0], _identity_frame())
    assert p.status == ViewStatus.BEHIND and not p.in_view


def test_project_kitti_intrinsics():
    p = project_point([1.0, 0.0, 10.0], _identity_frame(KITTI_INTRINSICS))
    assert p.u == pytest.approx(679.0784, abs=1e-9)
    assert p.v == pytest.approx(185.2157, abs=1e-9)
    assert p.in_view


def test_project_out_of_bounds_is_a_value():
    proj = project(np.array([[100.0, 0.0, 1.0], [0.5, 0.5, 1.0]]), _identity_frame())
    assert proj.status.tolist() == [ViewStatus.OUT_OF_BOUNDS, ViewStatus.IN_VIEW]


def test_backproject_inverts_project():
    frame = CameraFrame(rotation=camera_rotation(0.2, 0.15), translation=np.array([0.3, -1.0, 2.0]),
                        intrinsics=KITTI_INTRINSICS)
    rng = np.random.default_rng(3)
    u = rng.uniform(0, 1240, 50)
    v = rng.uniform(0, 375, 50)
    depth = rng.uniform(2, 40, 50)
    world = backproject(u, v, depth, frame)
    proj = project(world, frame)
    np.testing.assert_allclose(proj.u, u, atol=1e-8)
    np.testing.assert_allclose(proj.v, v, atol=1e-8)
    np.testing.assert_allclose(proj.depth, depth, atol=1e-10)


def test_pixel_rays_have_unit_camera_depth():
    frame = CameraFrame(rotation=camera_rotation(1.0, 0.2), translation=np.zeros(3), intrinsics=KITTI_INTRINSICS)
    rays = pixel_rays(np.array([0.0, 600.0]), np.array([0.0, 300.0]), frame)
    np.testing.assert_allclose((rays @ frame.rotation.T)[:, 2], 1.0)


# ==================== 采样 ====================

def test_sample_uniform_image_center():
    image = np.tile(np.array([0.2, 0.4, 0.6]), (5, 7, 1))
    np.testing.assert_allclose(sample_color(image, 3.3, 2.1), [0.2, 0.4, 0.6])


def test_sample_exact_pixel_center_both_modes():
    rng = np.random.default_rng(0)
    image = rng.uniform(size=(4, 5, 3))
    labels = rng.integers(0, 3, size=(4, 5)).astype(np.uint8)
    p = project_point([2.0, 1.0, 1.0], _identity_frame(CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 5, 4)))
    np.testing.assert_allclose(sample_pixel(image, p), image[1, 2])
    assert sample_pixel(labels, p) == labels[1, 2]


def test_bilinear_midpoint():
    image = np.zeros((1, 2, 3))
    image[0, 1] = 1.0
    np.testing.assert_allclose(sample_color(image, 0.5, 0.0), [0.5, 0.5, 0.5])


def test_label_lookup_rounds_and_clamps():
    labels = np.arange(12, dtype=np.uint8).reshape(3, 4)
    assert sample_label(labels, 1.4, 0.6) == labels[1, 1]
    assert sample_label(labels, 10.0, -3.0) == labels[0, 3]
