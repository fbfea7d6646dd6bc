"""
监督数据模块
构建三类高度真值（位姿伪点云 / LiDAR / SfM 点云）以及颜色、语义对应样本流，
并实现稀疏标签抽样和标签噪声注入
"""

import logging
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterator, List, Optional, Sequence

import numpy as np
import pandas as pd

from core.geometry import CameraFrame, SceneBounds, project, sample_color, sample_label
from core.network import FieldModel

logger = logging.getLogger('supervision')

HEIGHT_SOURCES = ("pose", "lidar", "sfm_dense", "sfm_sparse", "synthetic")
HEIGHT_COLUMNS = ["x", "y", "z", "source"]


# ==================== 高度样本 ====================

def height_frame(xyz: np.ndarray, source: str) -> pd.DataFrame:
    """把 (N,3) 点数组包装成 x,y,z,source 四列的高度样本表"""
    if source not in HEIGHT_SOURCES:
        raise ValueError(f"未知高度来源: {source}，可选{HEIGHT_SOURCES}")
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(xyz)):
        raise ValueError(f"{source}高度样本包含非有限值")
    df = pd.DataFrame(xyz, columns=["x", "y", "z"])
    df["source"] = pd.Categorical([source] * len(df), categories=HEIGHT_SOURCES)
    return df


def pose_pseudo_points(poses: Sequence[CameraFrame], patch_length: float = 20.0, patch_width: float = 10.0,
                       grid_step: float = 0.1, camera_height: float = 1.65,
                       deduplicate: bool = False) -> pd.DataFrame:
    """
    由车辆位姿生成伪点云：假设位姿附近地面平坦

    每个位姿在其 yaw 朝向下取前向 [0, length]、横向 [-width/2, width/2] 的规则网格，
    全部点的 z = 相机高度 z - camera_height

    返回:
        pd.DataFrame: x,y,z,source 高度样本，source='pose'
    """
    if patch_length <= 0 or patch_width <= 0 or grid_step <= 0:
        raise ValueError(f"伪点云区域参数必须为正: length={patch_length}, width={patch_width}, step={grid_step}")
    forward = np.linspace(0.0, patch_length, int(round(patch_length / grid_step)) + 1)
    lateral = np.linspace(-patch_width / 2, patch_width / 2, int(round(patch_width / grid_step)) + 1)
    ff, ll = np.meshgrid(forward, lateral, indexing="ij")
    ff, ll = ff.reshape(-1), ll.reshape(-1)

    chunks = []
    for cam in poses:
        c = cam.center
        yaw = cam.yaw
        fwd = np.array([math.cos(yaw), math.sin(yaw)])
        left = np.array([-math.sin(yaw), math.cos(yaw)])
        xy = c[:2] + ff[:, None] * fwd + ll[:, None] * left
        z = np.full(len(xy), c[2] - camera_height)
        chunks.append(np.column_stack([xy, z]))

    xyz = np.concatenate(chunks) if chunks else np.empty((0, 3))
    if deduplicate and len(xyz):
        _, keep = np.unique(np.round(xyz, 6), axis=0, return_index=True)
        xyz = xyz[np.sort(keep)]
    logger.info(f"位姿伪点云: {len(poses)}个位姿 -> {len(xyz)}个高度样本")
    return height_frame(xyz, "pose")


def ingest_point_cloud(points, source: str, ground_percentile: Optional[float] = None) -> pd.DataFrame:
    """
    把世界系点云转为高度样本

    参数:
        points: (N,3) 世界坐标
        source: 高度来源标签
        ground_percentile: 若给定，只保留 z 不高于该百分位的点（真实数据的地面过滤）
    """
    xyz = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if ground_percentile is not None and len(xyz):
        threshold = np.percentile(xyz[:, 2], ground_percentile)
        before = len(xyz)
        xyz = xyz[xyz[:, 2] <= threshold]
        logger.info(f"{source}点云地面过滤: {before} -> {len(xyz)}个点 (z<={threshold:.3f})")
    return height_frame(xyz, source)


def source_counts(samples: pd.DataFrame) -> dict:
    """各高度来源的样本数，写入运行清单"""
    counts = samples["source"].value_counts()
    return {str(k): int(v) for k, v in counts.items() if v > 0}


@dataclass
class SupervisionSet:
    """一次训练使用的全部监督：高度样本表、相机帧、归一化边界"""
    heights: pd.DataFrame
    frames: List[CameraFrame]
    bounds: SceneBounds

    @classmethod
    def build(cls, heights: pd.DataFrame, frames: List[CameraFrame], margin: float = 0.01) -> "SupervisionSet":
        bounds = SceneBounds.from_points(heights[["x", "y"]].to_numpy(), margin=margin)
        return cls(heights=heights, frames=frames, bounds=bounds)

    def normalized_heights(self):
        xy = self.bounds.normalize(self.heights[["x", "y"]].to_numpy())
        return xy, self.heights["z"].to_numpy(dtype=np.float64)


# ==================== 外观样本流 ====================

class FrozenHeightField:
    """训练好的高度分支的只读视图：世界 (x,y) -> z"""

    def __init__(self, model: FieldModel, bounds: SceneBounds):
        self.model = model
        self.bounds = bounds
        self.digest = model.parameter_digest("height")

    def __call__(self, xy: np.ndarray) -> np.ndarray:
        return self.model.forward_height(self.bounds.normalize(xy)).astype(np.float64)

    def verify_unchanged(self) -> bool:
        return self.model.parameter_digest("height") == self.digest


SAMPLING_REGIONS = ("union", "own")


@dataclass(frozen=True)
class SamplerConfig:
    """
    每帧外观样本的采样配置

    region="union" 时在所有位姿前方矩形的并集内均匀采样再投影到当前帧，
    并集只取矩形可能落在相机 view_radius 以内的那些位姿，
    region="own" 时只在当前帧自己的前方矩形内采样
    """
    samples_per_frame: int = 200_000
    patch_length: float = 20.0
    patch_width: float = 10.0
    drop_ignored: bool = False
    seed: int = 0
    ignore_id: int = 255
    num_classes: int = 3
    region: str = "union"
    view_radius: float = 80.0

    def __post_init__(self):
        if self.region not in SAMPLING_REGIONS:
            raise ValueError(f"未知采样区域: {self.region}，可选{SAMPLING_REGIONS}")
        if self.view_radius <= 0:
            raise ValueError(f"view_radius必须为正: {self.view_radius}")


class PatchUnion:
    """各位姿前方 patch_length × patch_width 地面矩形的并集"""

    MAX_ROUNDS = 64

    def __init__(self, centers: np.ndarray, yaws: np.ndarray, patch_length: float, patch_width: float):
        self.centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
        self.yaws = np.asarray(yaws, dtype=np.float64).reshape(-1)
        if len(self.centers) == 0 or len(self.centers) != len(self.yaws):
            raise ValueError("矩形并集至少需要一个位姿")
        self.patch_length = float(patch_length)
        self.patch_width = float(patch_width)
        self._cos, self._sin = np.cos(self.yaws), np.sin(self.yaws)
        f = np.array([0.0, 0.0, self.patch_length, self.patch_length])
        l = np.array([-0.5, 0.5, -0.5, 0.5]) * self.patch_width
        xs = self.centers[:, :1] + f * self._cos[:, None] - l * self._sin[:, None]
        ys = self.centers[:, 1:] + f * self._sin[:, None] + l * self._cos[:, None]
        self.box = (xs.min(), xs.max(), ys.min(), ys.max())

    @classmethod
    def from_frames(cls, frames: Sequence[CameraFrame], patch_length: float, patch_width: float) -> "PatchUnion":
        return cls(np.array([frame.center[:2] for frame in frames]), np.array([frame.yaw for frame in frames]),
                   patch_length, patch_width)

    def near(self, xy, radius: float) -> "PatchUnion":
        """只保留矩形可能进入以 xy 为圆心、radius 为半径的圆内的位姿"""
        reach = radius + math.hypot(self.patch_length, self.patch_width / 2)
        keep = np.hypot(*(self.centers - np.asarray(xy, dtype=np.float64)[:2]).T) <= reach
        if keep.all() or not keep.any():
            return self
        return PatchUnion(self.centers[keep], self.yaws[keep], self.patch_length, self.patch_width)

    def contains(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        inside = np.zeros(len(xy), dtype=bool)
        half = self.patch_width / 2
        for (cx, cy), c, s in zip(self.centers, self._cos, self._sin):
            dx, dy = xy[:, 0] - cx, xy[:, 1] - cy
            f = dx * c + dy * s
            l = -dx * s + dy * c
            inside |= (f >= 0.0) & (f <= self.patch_length) & (np.abs(l) <= half)
        return inside

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """在外接框内拒绝采样，得到并集内的均匀样本"""
        x0, x1, y0, y1 = self.box
        chunks, got, rate = [], 0, 0.5
        for _ in range(self.MAX_ROUNDS):
            if got >= n:
                break
            m = int(math.ceil(1.25 * (n - got) / rate)) + 16
            cand = np.column_stack([rng.uniform(x0, x1, m), rng.uniform(y0, y1, m)])
            cand = cand[self.contains(cand)]
            rate = max(len(cand) / m, 0.05)
            chunks.append(cand)
            got += len(cand)
        if got < n:
            raise ValueError(f"矩形并集采样{self.MAX_ROUNDS}轮后仍不足{n}个点")
        return np.concatenate(chunks)[:n]


def sampling_region(frames: Sequence[CameraFrame], cfg: SamplerConfig) -> Optional[PatchUnion]:
    """region="union" 时返回所有帧的矩形并集，"own" 时返回 None（每帧用自己的矩形）"""
    if cfg.region == "own" or not frames:
        return None
    return PatchUnion.from_frames(frames, cfg.patch_length, cfg.patch_width)


@dataclass
class AppearanceBatch:
    """单帧的颜色 / 语义对应样本；xy 为世界坐标"""
    frame_id: int
    xy: np.ndarray
    color: np.ndarray
    labels: np.ndarray
    u: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))
    v: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))
    depth: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))

    def __len__(self) -> int:
        return len(self.xy)


def build_frame_batch(frame: CameraFrame, height_field, cfg: SamplerConfig, epoch: int = 0,
                      frame_index: Optional[int] = None, region: Optional[PatchUnion] = None) -> AppearanceBatch:
    """
    为一帧生成外观样本

    在 region（缺省为该帧前方的矩形）内均匀采样 2D 坐标，用冻结的高度场抬升为 3D 点，投影回图像，
    只保留视野内的点，颜色双线性取值、标签最近邻取值。不属于类别集合的标签记为 ignore。
    """
    index = frame.frame_id if frame_index is None else frame_index
    rng = np.random.default_rng([cfg.seed, 2, epoch, index])
    n = cfg.samples_per_frame
    if region is not None:
        xy = region.near(frame.center, cfg.view_radius).sample(rng, n)
    else:
        f = rng.uniform(0.0, cfg.patch_length, n)
        l = rng.uniform(-cfg.patch_width / 2, cfg.patch_width / 2, n)
        yaw = frame.yaw
        c = frame.center
        xy = np.column_stack([c[0] + f * math.cos(yaw) - l * math.sin(yaw),
                              c[1] + f * math.sin(yaw) + l * math.cos(yaw)])
    z = height_field(xy)
    proj = project(np.column_stack([xy, z]), frame)
    keep = proj.in_view
    xy, u, v, depth = xy[keep], proj.u[keep], proj.v[keep], proj.depth[keep]

    if frame.image is None:
        raise ValueError(f"帧{frame.frame_id}没有彩色图像，无法提供颜色监督")
    color = sample_color(frame.image, u, v) if len(u) else np.empty((0, 3))
    if frame.labels is not None and len(u):
        labels = sample_label(frame.labels, u, v).astype(np.int64)
        labels[(labels < 0) | (labels >= cfg.num_classes)] = cfg.ignore_id
    else:
        labels = np.full(len(u), cfg.ignore_id, dtype=np.int64)

    if cfg.drop_ignored:
        labeled = labels != cfg.ignore_id
        xy, color, labels = xy[labeled], color[labeled], labels[labeled]
        u, v, depth = u[labeled], v[labeled], depth[labeled]

    if len(xy) == 0:
        logger.warning(f"帧{frame.frame_id}没有视野内的采样点，跳过")
    return AppearanceBatch(frame_id=frame.frame_id, xy=xy, color=color, labels=labels, u=u, v=v, depth=depth)


def build_appearance_stream(frames: Sequence[CameraFrame], height_field, cfg: SamplerConfig, epoch: int = 0,
                            order: Optional[Sequence[int]] = None, num_workers: int = 0,
                            prefetch: int = 4) -> Iterator[AppearanceBatch]:
    """
    按给定帧顺序产出外观样本批次（空批次跳过）

    num_workers > 0 时用线程池预取，在途任务数不超过 prefetch，产出顺序与帧顺序一致；
    采样区域按 cfg.region 由全部 frames 决定
    """
    order = list(range(len(frames))) if order is None else list(order)
    region = sampling_region(frames, cfg)
    if num_workers <= 0:
        for i in order:
            batch = build_frame_batch(frames[i], height_field, cfg, epoch, i, region)
            if len(batch):
                yield batch
        return

    with ThreadPoolExecutor(max_workers=num_workers) as pool:
        pending = deque()
        it = iter(order)
        for i in it:
            pending.append(pool.submit(build_frame_batch, frames[i], height_field, cfg, epoch, i, region))
            if len(pending) >= max(prefetch, 1):
                break
        while pending:
            batch = pending.popleft().result()
            nxt = next(it, None)
            if nxt is not None:
                pending.append(pool.submit(build_frame_batch, frames[nxt], height_field, cfg, epoch, nxt,
                                             region))
            if len(batch):
                yield batch


# ==================== 稀疏标签与噪声 ====================

def sparsify_labels(frames: Sequence[CameraFrame], keep_fraction: float, seed: int = 0) -> List[CameraFrame]:
    """只在 ceil(keep_fraction·N) 帧上保留标签图，其余帧只提供颜色监督"""
    if not 0.0 <= keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction必须在[0,1]内，当前为{keep_fraction}")
    n = len(frames)
    k = min(n, math.ceil(keep_fraction * n - 1e-9))
    rng = np.random.default_rng([seed, 4])
    kept = set(rng.choice(n, size=k, replace=False).tolist()) if k else set()
    logger.info(f"稀疏标签: {n}帧中保留{len(kept)}帧的语义标注")
    return [frame if i in kept else frame.with_labels(None) for i, frame in enumerate(frames)]


NOISE_MODELS = ("flip", "resample")


@dataclass(frozen=True)
class NoiseSpec:
    """
    逐像素标签噪声：每个像素以 ratio 概率被选中

    model="flip" 时选中像素改成另一个随机类别；model="resample" 时从全部类别里重新均匀抽取，
    可能抽回原类别
    """
    ratio: float
    seed: int = 0
    num_classes: int = 3
    ignore_id: int = 255
    model: str = "flip"

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"噪声比例必须在[0,1]内，当前为{self.ratio}")
        if self.num_classes < 2:
            raise ValueError("标签噪声至少需要两个类别")
        if self.model not in NOISE_MODELS:
            raise ValueError(f"未知噪声模型: {self.model}，可选{NOISE_MODELS}")


def inject_label_noise(labels: np.ndarray, spec: NoiseSpec, frame_id: int = 0) -> np.ndarray:
    """
    对标签图注入逐像素噪声

    flip 模型下被选中的像素改为均匀随机的其他类别（不会保持原类别）；resample 模型下改为均匀随机类别。
    两种模型都不会产生 ignore，ignore 像素保持不变。随机数由 (seed, frame_id) 决定，结果逐位可复现。
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, int(frame_id)]))
    eligible = (labels >= 0) & (labels < spec.num_classes)
    selected = (rng.random(labels.shape) < spec.ratio) & eligible
    if spec.model == "flip":
        offset = rng.integers(1, spec.num_classes, size=labels.shape)
        replacement = (labels.astype(np.int64) + offset) % spec.num_classes
    else:
        replacement = rng.integers(0, spec.num_classes, size=labels.shape)
    noisy = labels.copy()
    noisy[selected] = replacement[selected].astype(labels.dtype)
    return noisy


def apply_label_noise(frames: Sequence[CameraFrame], spec: NoiseSpec) -> List[CameraFrame]:
    """对所有带标签的帧注入噪声，每帧使用自己的 frame_id 派生随机数"""
    result = []
    flipped = total = 0
    for frame in frames:
        if frame.labels is None:
            result.append(frame)
            continue
        noisy = inject_label_noise(frame.labels, spec, frame.frame_id)
        flipped += int(np.count_nonzero(noisy != frame.labels))
        total += noisy.size
        result.append(replace(frame, labels=noisy))
    if total:
        logger.info(f"标签噪声: ratio={spec.ratio}, 模型={spec.model}, 实际改变比例{flipped / total:.4f}")
    return result
