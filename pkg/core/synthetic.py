"""
合成场景模块
生成完全已知的桌面规模道路场景：方波高度路面（含横向与角落空洞）、车道线与井盖纹理、
相机轨迹、解析渲染的彩色图 / 标签图 / 深度图，以及不同密度的高度点云
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from config.app_config import AppConfig
from core.geometry import KITTI_INTRINSICS, CameraFrame, CameraIntrinsics, camera_rotation, pixel_rays
from core.supervision import height_frame

logger = logging.getLogger('synthetic')

ROAD, TRAFFIC_LANE, MANHOLE = 0, 1, 2
IGNORE = 255
CLASS_NAMES = ("road", "traffic_lane", "manhole")

MARCH_STEP = 0.05
BISECTION_ITERS = 30
RAY_CHUNK = 4096

# 点云预设：(每平方米点数, 高度噪声标准差 m)
CLOUD_PRESETS: Dict[str, Tuple[float, float]] = {
    "lidar": (20.0, 0.01),
    "sfm_dense": (8.0, 0.03),
    "sfm_sparse": (0.8, 0.05),
}


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class HeightProfile(_Frozen):
    """路面高度剖面，沿前进方向 x 变化"""
    kind: Literal["flat", "square_wave", "slope"] = "square_wave"
    z0: float = 0.0
    amplitude: float = 0.2
    period: float = Field(8.0, gt=0)
    duty: float = Field(0.5, gt=0, lt=1)
    grade: float = 0.0

    def height(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "flat":
            return np.full_like(x, self.z0)
        if self.kind == "slope":
            return self.z0 + self.grade * x
        return np.where(np.mod(x, self.period) < self.duty * self.period, self.z0 + self.amplitude, self.z0)

    def z_range(self, length: float) -> Tuple[float, float]:
        if self.kind == "flat":
            return self.z0, self.z0
        if self.kind == "slope":
            ends = (self.z0, self.z0 + self.grade * length)
            return min(ends), max(ends)
        ends = (self.z0, self.z0 + self.amplitude)
        return min(ends), max(ends)


class Manhole(_Frozen):
    x: float
    y: float
    radius: float = Field(0.6, gt=0)


class HoleRect(_Frozen):
    """不提供高度监督的矩形区域"""
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def contains(self, x, y) -> np.ndarray:
        return (x >= self.x_min) & (x <= self.x_max) & (y >= self.y_min) & (y <= self.y_max)

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


class Texture(_Frozen):
    road_color: Tuple[float, float, float] = (0.35, 0.35, 0.38)
    lane_color: Tuple[float, float, float] = (0.92, 0.92, 0.88)
    manhole_color: Tuple[float, float, float] = (0.12, 0.10, 0.09)
    sky_color: Tuple[float, float, float] = (0.55, 0.70, 0.90)
    stripe_offsets: Tuple[float, ...] = (-1.75, 1.75)
    stripe_width: float = Field(0.15, gt=0)
    # 路面颜色的平滑起伏幅度，0 表示纯色
    variation: float = Field(0.0, ge=0, le=0.2)


class CameraPath(_Frozen):
    """沿道路中心线等间距排布的前视相机"""
    num_poses: int = Field(50, ge=1)
    start_x: float = 0.0
    spacing: float = Field(2.0, gt=0)
    lateral_offset: float = 0.0
    camera_height: float = Field(1.65, gt=0)
    pitch_deg: float = 8.0
    yaw_deg: float = 0.0
    image_width: int = Field(320, ge=8)
    image_height: int = Field(96, ge=8)


def _default_manholes() -> Tuple[Manhole, ...]:
    return tuple(Manhole(x=10.0 + 20.0 * k, y=0.0 if k % 2 == 0 else -3.0) for k in range(5))


def _default_holes() -> Tuple[HoleRect, ...]:
    return (HoleRect(x_min=43.0, x_max=45.0, y_min=-5.0, y_max=5.0),
            HoleRect(x_min=58.5, x_max=61.0, y_min=2.5, y_max=5.0))


class SceneSpec(_Frozen):
    """
    合成场景描述

    道路占据 x∈[0, length], y∈[-width/2, width/2]；空洞、井盖和车道线必须位于道路内
    """
    length: float = Field(100.0, gt=0)
    width: float = Field(10.0, gt=0)
    profile: HeightProfile = HeightProfile()
    texture: Texture = Texture()
    manholes: Tuple[Manhole, ...] = Field(default_factory=_default_manholes)
    holes: Tuple[HoleRect, ...] = Field(default_factory=_default_holes)
    camera: CameraPath = CameraPath()
    max_distance: float = Field(80.0, gt=0)

    @model_validator(mode="after")
    def _inside_road(self):
        half = self.width / 2
        eps = 1e-9
        for hole in self.holes:
            if not (hole.x_min < hole.x_max and hole.y_min < hole.y_max):
                raise ValueError(f"空洞矩形退化: {hole}")
            if hole.x_min < -eps or hole.x_max > self.length + eps or hole.y_min < -half - eps or hole.y_max > half + eps:
                raise ValueError(f"空洞{hole}超出道路范围")
        for m in self.manholes:
            if m.x - m.radius < 0 or m.x + m.radius > self.length or abs(m.y) + m.radius > half:
                raise ValueError(f"井盖{m}超出道路范围")
        for offset in self.texture.stripe_offsets:
            if abs(offset) + self.texture.stripe_width / 2 > half:
                raise ValueError(f"车道线y={offset}超出道路范围")
        return self

    @property
    def road_area(self) -> float:
        return self.length * self.width

    def on_road(self, x, y) -> np.ndarray:
        half = self.width / 2
        return (x >= 0) & (x <= self.length) & (y >= -half) & (y <= half)

    def in_hole(self, x, y) -> np.ndarray:
        mask = np.zeros(np.broadcast(x, y).shape, dtype=bool)
        for hole in self.holes:
            mask |= hole.contains(x, y)
        return mask

    def hole_area(self) -> float:
        """空洞总面积（默认空洞互不重叠）"""
        return float(sum(h.area for h in self.holes))

    def intrinsics(self) -> CameraIntrinsics:
        """按图像宽度等比缩放 KITTI 左相机内参"""
        w, h = self.camera.image_width, self.camera.image_height
        s = w / KITTI_INTRINSICS.width
        return CameraIntrinsics(KITTI_INTRINSICS.fx * s, KITTI_INTRINSICS.fy * s, KITTI_INTRINSICS.cx * s,
                                KITTI_INTRINSICS.cy * h / KITTI_INTRINSICS.height, w, h)

    @classmethod
    def uniform(cls, **overrides) -> "SceneSpec":
        """纯色平路：无井盖、无车道线、无空洞"""
        base = dict(profile=HeightProfile(kind="flat"), manholes=(), holes=(),
                    texture=Texture(stripe_offsets=()))
        base.update(overrides)
        return cls(**base)


# ==================== 解析表面 ====================

def eval_surface(spec: SceneSpec, x, y) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    解析表面求值

    返回:
        (z, rgb, class)：井盖优先于车道线，其余为路面；道路外的点类别为 ignore、颜色为天空色
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x, y = np.broadcast_arrays(x, y)
    z = spec.profile.height(x)
    tex = spec.texture

    cls = np.full(x.shape, ROAD, dtype=np.uint8)
    for offset in tex.stripe_offsets:
        cls[np.abs(y - offset) <= tex.stripe_width / 2] = TRAFFIC_LANE
    for m in spec.manholes:
        cls[(x - m.x) ** 2 + (y - m.y) ** 2 <= m.radius ** 2] = MANHOLE
    road = spec.on_road(x, y)
    cls[~road] = IGNORE

    palette = np.array([tex.road_color, tex.lane_color, tex.manhole_color], dtype=np.float64)
    rgb = np.empty(x.shape + (3,))
    rgb[...] = tex.sky_color
    rgb[road] = palette[cls[road]]
    if tex.variation > 0:
        shade = tex.variation * np.sin(0.7 * x) * np.cos(1.3 * y)
        rgb[road] = np.clip(rgb[road] + shade[road][:, None], 0.0, 1.0)
    return z, rgb, cls


class AnalyticSurface:
    """(x,y) -> (z, color, class) 的可调用封装"""

    def __init__(self, spec: SceneSpec):
        self.spec = spec

    def __call__(self, x, y):
        return eval_surface(self.spec, x, y)

    def height(self, x, y) -> np.ndarray:
        return eval_surface(self.spec, x, y)[0]


# ==================== 点云 ====================

def generate_point_cloud(spec: SceneSpec, density: float, seed: int = 0, respect_holes: bool = True,
                         noise_std: float = 0.0, source: str = "synthetic") -> pd.DataFrame:
    """
    在路面上均匀撒点

    点数服从 Poisson(density × 道路面积)，respect_holes 时丢弃落在空洞内的点，
    期望点数即 density × (道路面积 - 空洞面积)
    """
    if density < 0:
        raise ValueError(f"点云密度不能为负: {density}")
    rng = np.random.default_rng([seed, 5])
    n = int(rng.poisson(density * spec.road_area)) if density > 0 else 0
    x = rng.uniform(0.0, spec.length, n)
    y = rng.uniform(-spec.width / 2, spec.width / 2, n)
    z = spec.profile.height(x)
    if noise_std > 0:
        z = z + rng.normal(0.0, noise_std, n)
    if respect_holes and n:
        keep = ~spec.in_hole(x, y)
        x, y, z = x[keep], y[keep], z[keep]
    logger.info(f"生成{source}点云: 密度{density}/m², {len(x)}个点")
    return height_frame(np.column_stack([x, y, z]), source)


def generate_source_cloud(spec: SceneSpec, source: str, seed: int = 0, respect_holes: bool = True) -> pd.DataFrame:
    """按预设生成 lidar / sfm_dense / sfm_sparse 风格点云"""
    if source not in CLOUD_PRESETS:
        raise ValueError(f"未知点云预设: {source}，可选{tuple(CLOUD_PRESETS)}")
    density, noise = CLOUD_PRESETS[source]
    return generate_point_cloud(spec, density, seed=seed, respect_holes=respect_holes, noise_std=noise,
                                source=source)


# ==================== 相机与渲染 ====================

def camera_poses(spec: SceneSpec) -> List[CameraFrame]:
    """沿中心线的相机帧（尚未渲染，image/labels 为空）"""
    path = spec.camera
    intr = spec.intrinsics()
    rotation = camera_rotation(math.radians(path.yaw_deg), math.radians(path.pitch_deg))
    frames = []
    for i in range(path.num_poses):
        x = path.start_x + i * path.spacing
        y = path.lateral_offset
        center = np.array([x, y, float(spec.profile.height(np.array(x))) + path.camera_height])
        frames.append(CameraFrame(rotation=rotation, translation=-rotation @ center, intrinsics=intr, frame_id=i))
    return frames


@dataclass
class RenderedView:
    image: np.ndarray
    labels: np.ndarray
    depth: np.ndarray


def _hits(spec: SceneSpec, origin: np.ndarray, dirs: np.ndarray, t: np.ndarray) -> np.ndarray:
    p = origin + dirs[..., :] * t[..., None]
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    return (z <= spec.profile.height(x)) & spec.on_road(x, y)


def intersect_rays(spec: SceneSpec, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """
    射线与高度场求交：固定步长前进 + 二分细化

    dirs 为单位方向；返回沿射线的距离，未命中为 inf。只在射线高度穿过剖面高度范围的
    区间内前进，比步长更窄的台阶可能被漏掉。
    """
    n = len(dirs)
    result = np.full(n, np.inf)
    z_lo, z_hi = spec.profile.z_range(spec.length)
    dz = dirs[:, 2]
    candidates = np.flatnonzero(dz < -1e-9)
    for start in range(0, len(candidates), RAY_CHUNK):
        idx = candidates[start:start + RAY_CHUNK]
        d = dirs[idx]
        down = -d[:, 2]
        t_start = np.maximum((origin[2] - z_hi) / down - MARCH_STEP, 0.0)
        t_end = np.minimum((origin[2] - z_lo) / down + MARCH_STEP, spec.max_distance)
        valid = t_end > t_start
        if not np.any(valid):
            continue
        n_steps = int(np.ceil((t_end[valid] - t_start[valid]).max() / MARCH_STEP)) + 1
        ts = t_start[:, None] + MARCH_STEP * np.arange(n_steps)[None, :]
        inside = ts <= t_end[:, None]
        hit = _hits(spec, origin, d[:, None, :], ts) & inside & valid[:, None]
        any_hit = hit.any(axis=1)
        if not np.any(any_hit):
            continue
        first = hit.argmax(axis=1)
        rows = np.flatnonzero(any_hit)
        hi = ts[rows, first[rows]]
        lo = np.where(first[rows] > 0, ts[rows, np.maximum(first[rows] - 1, 0)], hi - MARCH_STEP)
        lo = np.maximum(lo, 0.0)
        dr = d[rows]
        for _ in range(BISECTION_ITERS):
            mid = 0.5 * (lo + hi)
            h = _hits(spec, origin, dr, mid)
            hi = np.where(h, mid, hi)
            lo = np.where(h, lo, mid)
        result[idx[rows]] = hi
    return result


def render_frame(spec: SceneSpec, frame: CameraFrame) -> RenderedView:
    """
    解析渲染一帧：逐像素发射射线求交，用 eval_surface 着色

    返回的 depth 为相机坐标系 z（与 project 的 depth 一致），未命中像素为 inf、
    颜色为天空色、标签为 ignore
    """
    k = frame.intrinsics
    vv, uu = np.meshgrid(np.arange(k.height, dtype=np.float64), np.arange(k.width, dtype=np.float64), indexing="ij")
    rays = pixel_rays(uu.reshape(-1), vv.reshape(-1), frame)
    norms = np.linalg.norm(rays, axis=1)
    dirs = rays / norms[:, None]
    origin = frame.center
    t = intersect_rays(spec, origin, dirs)

    hit = np.isfinite(t)
    image = np.empty((len(t), 3))
    image[...] = spec.texture.sky_color
    labels = np.full(len(t), IGNORE, dtype=np.uint8)
    depth = np.full(len(t), np.inf)
    if np.any(hit):
        p = origin + dirs[hit] * t[hit, None]
        _, rgb, cls = eval_surface(spec, p[:, 0], p[:, 1])
        image[hit] = rgb
        labels[hit] = cls
        depth[hit] = t[hit] / norms[hit]
    shape = (k.height, k.width)
    return RenderedView(image=image.reshape(shape + (3,)), labels=labels.reshape(shape), depth=depth.reshape(shape))


@dataclass
class SyntheticScene:
    """渲染完成的合成场景"""
    spec: SceneSpec
    frames: List[CameraFrame]
    depths: List[np.ndarray]

    @property
    def surface(self) -> AnalyticSurface:
        return AnalyticSurface(self.spec)


def build_scene(spec: Optional[SceneSpec] = None) -> SyntheticScene:
    """生成相机轨迹并渲染全部帧"""
    spec = spec or SceneSpec()
    frames, depths = [], []
    logger.info(f"🔄 渲染合成场景: {spec.camera.num_poses}帧 {spec.camera.image_width}x{spec.camera.image_height}")
    for frame in tqdm(camera_poses(spec), desc="render", disable=not AppConfig.PROGRESS):
        view = render_frame(spec, frame)
        frame.image = view.image
        frame.labels = view.labels
        frames.append(frame)
        depths.append(view.depth)
    logger.info("✅ 合成场景渲染完成")
    return SyntheticScene(spec=spec, frames=frames, depths=depths)
