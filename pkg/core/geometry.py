"""
几何模块
坐标归一化、针孔相机模型、世界点到像素的投影以及图像/标签采样

约定:
- 道路世界坐标系 x 前 / y 左 / z 上，高度即 z
- 相机坐标系 x 右 / y 下 / z 前
- 外参存储为 world->camera: p_cam = R · w + t
- 像素中心位于整数 (u, v)
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Optional

import numpy as np

logger = logging.getLogger('geometry')

ORTHONORMAL_TOL = 1e-6

# KITTI 世界系(x右 y下 z前) -> 道路世界系(x前 y左 z上)
KITTI_TO_ROAD = np.array([[0.0, 0.0, 1.0],
                          [-1.0, 0.0, 0.0],
                          [0.0, -1.0, 0.0]])


class GeometryError(ValueError):
    """几何参数不合法（退化边界、非正交旋转等）"""


# ==================== 归一化 ====================

@dataclass(frozen=True)
class SceneBounds:
    """监督点的 xy 包围盒，margin 为每侧按跨度比例外扩"""
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    margin: float = 0.01

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise GeometryError(f"场景边界退化: x[{self.x_min}, {self.x_max}] y[{self.y_min}, {self.y_max}]")
        if self.margin < 0:
            raise GeometryError(f"margin不能为负: {self.margin}")

    @classmethod
    def from_points(cls, xy: np.ndarray, margin: float = 0.01) -> "SceneBounds":
        xy = np.asarray(xy, dtype=np.float64)
        if xy.size == 0:
            raise GeometryError("没有监督点，无法计算场景边界")
        return cls(float(xy[:, 0].min()), float(xy[:, 0].max()),
                   float(xy[:, 1].min()), float(xy[:, 1].max()), margin)

    @property
    def lower(self) -> np.ndarray:
        span = np.array([self.x_max - self.x_min, self.y_max - self.y_min])
        return np.array([self.x_min, self.y_min]) - self.margin * span

    @property
    def upper(self) -> np.ndarray:
        span = np.array([self.x_max - self.x_min, self.y_max - self.y_min])
        return np.array([self.x_max, self.y_max]) + self.margin * span

    def normalize(self, xy) -> np.ndarray:
        """把带 margin 的 [min,max] 仿射映射到 [-1,1]（不裁剪）"""
        xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
        lo, hi = self.lower, self.upper
        return 2.0 * (xy - lo) / (hi - lo) - 1.0

    def denormalize(self, uv) -> np.ndarray:
        uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
        lo, hi = self.lower, self.upper
        return (uv + 1.0) * 0.5 * (hi - lo) + lo

    def to_dict(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max, "y_min": self.y_min, "y_max": self.y_max,
                "margin": self.margin}

    @classmethod
    def from_dict(cls, data: dict) -> "SceneBounds":
        return cls(**data)


def normalize(p, bounds: SceneBounds) -> np.ndarray:
    return bounds.normalize(p)


def denormalize(p, bounds: SceneBounds) -> np.ndarray:
    return bounds.denormalize(p)


# ==================== 相机 ====================

@dataclass(frozen=True)
class CameraIntrinsics:
    """针孔相机内参"""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        sx, sy = width / self.width, height / self.height
        return CameraIntrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)


# KITTI odometry 左相机公开标定
KITTI_INTRINSICS = CameraIntrinsics(718.856, 718.856, 607.1928, 185.2157, 1241, 376)


def check_rotation(rotation: np.ndarray, tol: float = ORTHONORMAL_TOL) -> None:
    rotation = np.asarray(rotation, dtype=np.float64)
    if rotation.shape != (3, 3):
        raise GeometryError(f"旋转矩阵形状错误: {rotation.shape}")
    err = np.abs(rotation @ rotation.T - np.eye(3)).max()
    if err > tol:
        raise GeometryError(f"旋转矩阵非正交: 误差{err:.3e} > {tol:.1e}")


def orthonormalize(rotation: np.ndarray) -> np.ndarray:
    """SVD 投影到最近的旋转矩阵"""
    u, _, vt = np.linalg.svd(rotation)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def camera_rotation(yaw: float, pitch: float) -> np.ndarray:
    """
    道路世界系下朝向 yaw、向下俯仰 pitch（弧度）的相机的 world->camera 旋转
    """
    forward = np.array([math.cos(pitch) * math.cos(yaw), math.cos(pitch) * math.sin(yaw), -math.sin(pitch)])
    right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
    down = np.cross(forward, right)
    return np.stack([right, down, forward])


@dataclass
class CameraFrame:
    """
    一帧带位姿的相机观测

    rotation/translation 为 world->camera 外参；image 为 (H,W,3) 取值 [0,1]；
    labels 为 (H,W) 类别 id 图，None 表示该帧无语义标注。
    """
    rotation: np.ndarray
    translation: np.ndarray
    intrinsics: CameraIntrinsics
    image: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    frame_id: int = 0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        check_rotation(self.rotation)
        shape = (self.intrinsics.height, self.intrinsics.width)
        if self.image is not None and self.image.shape[:2] != shape:
            raise GeometryError(f"帧{self.frame_id}图像尺寸{self.image.shape[:2]}与内参{shape}不一致")
        if self.labels is not None and self.labels.shape != shape:
            raise GeometryError(f"帧{self.frame_id}标签图尺寸{self.labels.shape}与内参{shape}不一致")

    @classmethod
    def from_camera_to_world(cls, pose: np.ndarray, intrinsics: CameraIntrinsics, **kwargs) -> "CameraFrame":
        """由 camera->world 的 3x4/4x4 位姿构造（内部求逆）"""
        pose = np.asarray(pose, dtype=np.float64)
        r_cw, t_cw = pose[:3, :3], pose[:3, 3]
        rotation = r_cw.T
        return cls(rotation=rotation, translation=-rotation @ t_cw, intrinsics=intrinsics, **kwargs)

    def camera_to_world(self) -> np.ndarray:
        pose = np.eye(4)
        pose[:3, :3] = self.rotation.T
        pose[:3, 3] = self.center
        return pose

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    @property
    def center(self) -> np.ndarray:
        """相机光心的世界坐标"""
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[2]

    @property
    def yaw(self) -> float:
        """前向在地面上的朝向；相机竖直朝下时前向没有水平分量，改用右轴 (sin yaw, -cos yaw, 0)"""
        f = self.forward
        if math.hypot(f[0], f[1]) > 1e-6:
            return math.atan2(f[1], f[0])
        r = self.rotation[0]
        return math.atan2(r[0], -r[1])

    def with_labels(self, labels: Optional[np.ndarray]) -> "CameraFrame":
        return replace(self, labels=labels)


# ==================== 投影 ====================

class ViewStatus(IntEnum):
    IN_VIEW = 0
    BEHIND = 1
    OUT_OF_BOUNDS = 2


@dataclass
class PixelCoord:
    """单点投影结果；status 非 IN_VIEW 时 (u, v) 无意义"""
    u: float
    v: float
    depth: float
    status: ViewStatus = ViewStatus.IN_VIEW

    @property
    def in_view(self) -> bool:
        return self.status == ViewStatus.IN_VIEW


@dataclass
class Projection:
    """批量投影结果"""
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    status: np.ndarray = field(repr=False)

    @property
    def in_view(self) -> np.ndarray:
        return self.status == ViewStatus.IN_VIEW


def project(points, cam: CameraFrame) -> Projection:
    """
    世界点投影到像素

    p_cam = R·w + t；深度 <= 0 记为 BEHIND；u = fx·x/z + cx, v = fy·y/z + cy，
    不在 [0,W)×[0,H) 内记为 OUT_OF_BOUNDS。越界是正常结果而非异常。
    """
    w = np.atleast_2d(np.asarray(points, dtype=np.float64))
    p_cam = w @ cam.rotation.T + cam.translation
    depth = p_cam[:, 2]
    behind = depth <= 0
    safe_depth = np.where(behind, 1.0, depth)
    k = cam.intrinsics
    u = k.fx * p_cam[:, 0] / safe_depth + k.cx
    v = k.fy * p_cam[:, 1] / safe_depth + k.cy
    outside = ~behind & ((u < 0) | (u >= k.width) | (v < 0) | (v >= k.height))
    status = np.full(w.shape[0], ViewStatus.IN_VIEW, dtype=np.int8)
    status[behind] = ViewStatus.BEHIND
    status[outside] = ViewStatus.OUT_OF_BOUNDS
    return Projection(u=u, v=v, depth=depth, status=status)


def project_point(point, cam: CameraFrame) -> PixelCoord:
    proj = project(point, cam)
    return PixelCoord(float(proj.u[0]), float(proj.v[0]), float(proj.depth[0]), ViewStatus(int(proj.status[0])))


def pixel_rays(u, v, cam: CameraFrame) -> np.ndarray:
    """像素对应的世界系射线方向，相机 z 分量归一为 1（乘深度即得相机系点）"""
    k = cam.intrinsics
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d_cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
    return d_cam @ cam.rotation


def backproject(u, v, depth, cam: CameraFrame) -> np.ndarray:
    """由像素与深度重建世界点"""
    rays = pixel_rays(u, v, cam)
    return cam.center + rays * np.asarray(depth, dtype=np.float64)[..., None]


# ==================== 采样 ====================

def sample_color(image: np.ndarray, u, v) -> np.ndarray:
    """双线性采样颜色，边界处夹紧"""
    h, w = image.shape[:2]
    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, w - 1)
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, h - 1)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (u - u0)[..., None]
    fv = (v - v0)[..., None]
    top = image[v0, u0] * (1 - fu) + image[v0, u1] * fu
    bottom = image[v1, u0] * (1 - fu) + image[v1, u1] * fu
    return top * (1 - fv) + bottom * fv


def sample_label(labels: np.ndarray, u, v) -> np.ndarray:
    """最近邻采样类别 id"""
    h, w = labels.shape
    iu = np.clip(np.rint(np.asarray(u, dtype=np.float64)), 0, w - 1).astype(np.int64)
    iv = np.clip(np.rint(np.asarray(v, dtype=np.float64)), 0, h - 1).astype(np.int64)
    return labels[iv, iu]


def sample_pixel(data: np.ndarray, p: PixelCoord):
    """三通道图像双线性取色，二维整型标签图最近邻取类别"""
    if data.ndim == 2 and np.issubdtype(data.dtype, np.integer):
        return int(sample_label(data, p.u, p.v))
    return sample_color(data, p.u, p.v)
