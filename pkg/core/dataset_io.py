"""
数据集读写模块
KITTI odometry 格式与合成场景共用同一磁盘布局:

    <root>/poses.txt        每行 12 个实数，行主序 3x4 camera->world
    <root>/calib.txt        "P2: ..."（投影矩阵，取 fx fy cx cy）与可选 "Tr: ..."（velodyne->cam0）
    <root>/image_2/NNNNNN.png
    <root>/labels/NNNNNN.png 单通道类别 id 图，缺失即该帧无标注
    <root>/velodyne/*.bin   x,y,z,intensity 32 位小端浮点记录；
                            数字文件名为逐帧扫描（经 Tr 和位姿变换到世界系），
                            其他文件名为世界系整场点云，文件名即高度来源
    <root>/scene.json       world_frame: "z_up"（道路系）或 "kitti"（x右 y下 z前，载入时转换）
    <root>/palette.json     类别 id -> RGB
"""

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from config.app_config import AppConfig
from core.geometry import KITTI_TO_ROAD, CameraFrame, CameraIntrinsics, orthonormalize
from core.supervision import HEIGHT_SOURCES, height_frame, ingest_point_cloud
from core.synthetic import CLASS_NAMES, IGNORE, SceneSpec, SyntheticScene
from utils.image_io import load_image, load_labels, save_image, save_labels

logger = logging.getLogger('dataset_io')

LOAD_ORTHONORMAL_TOL = 1e-3
POINT_RECORD = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("intensity", "<f4")])
WORLD_FRAMES = ("z_up", "kitti")
DEFAULT_PALETTE = {"0": [128, 64, 128], "1": [255, 255, 255], "2": [255, 140, 0], "255": [0, 0, 0]}


class DatasetError(RuntimeError):
    """数据集缺文件、数量不一致或内容无法解析"""


@dataclass(frozen=True)
class DatasetLayout:
    root: Path
    poses_file: str = "poses.txt"
    calib_file: str = "calib.txt"
    image_dir: str = "image_2"
    label_dir: str = "labels"
    cloud_dir: str = "velodyne"
    scene_file: str = "scene.json"
    palette_file: str = "palette.json"
    calib_key: str = "P2"

    @property
    def poses_path(self) -> Path:
        return Path(self.root) / self.poses_file

    @property
    def calib_path(self) -> Path:
        return Path(self.root) / self.calib_file

    @property
    def images_path(self) -> Path:
        return Path(self.root) / self.image_dir

    @property
    def labels_path(self) -> Path:
        return Path(self.root) / self.label_dir

    @property
    def clouds_path(self) -> Path:
        return Path(self.root) / self.cloud_dir

    @property
    def scene_path(self) -> Path:
        return Path(self.root) / self.scene_file

    @property
    def palette_path(self) -> Path:
        return Path(self.root) / self.palette_file


@dataclass
class LoadedDataset:
    layout: DatasetLayout
    frames: List[CameraFrame]
    clouds: Dict[str, pd.DataFrame] = field(default_factory=dict)
    scene_spec: Optional[SceneSpec] = None
    palette: Dict[str, List[int]] = field(default_factory=lambda: dict(DEFAULT_PALETTE))
    class_names: tuple = CLASS_NAMES
    ignore_id: int = IGNORE
    world_frame: str = "z_up"
    warnings: List[str] = field(default_factory=list)
    dataset_hash: str = ""


# ==================== 文本解析 ====================

def parse_poses(path: Path) -> List[np.ndarray]:
    """读取 poses.txt，返回 3x4 camera->world 矩阵列表"""
    if not path.is_file():
        raise DatasetError(f"位姿文件不存在: {path}")
    poses = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            values = [float(v) for v in line.split()]
        except ValueError as e:
            raise DatasetError(f"{path}第{lineno}行无法解析: {e}") from e
        if len(values) != 12:
            raise DatasetError(f"{path}第{lineno}行应有12个数，实际{len(values)}个")
        poses.append(np.array(values).reshape(3, 4))
    return poses


def parse_calib(path: Path) -> Dict[str, np.ndarray]:
    """读取 calib.txt 的 "KEY: v1 v2 ..." 行，返回 3x4 矩阵"""
    if not path.is_file():
        raise DatasetError(f"标定文件不存在: {path}")
    calib = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if ":" not in line:
            continue
        key, rest = line.split(":", 1)
        try:
            values = np.array([float(v) for v in rest.split()])
        except ValueError as e:
            raise DatasetError(f"{path}中{key}无法解析: {e}") from e
        if values.size != 12:
            raise DatasetError(f"{path}中{key}应有12个数，实际{values.size}个")
        calib[key.strip()] = values.reshape(3, 4)
    return calib


def read_point_records(path: Path) -> np.ndarray:
    """读取 x,y,z,intensity 记录，返回 (N,3) float64"""
    size = path.stat().st_size
    if size % POINT_RECORD.itemsize:
        raise DatasetError(f"点云文件被截断: {path} ({size}字节不是{POINT_RECORD.itemsize}的整数倍)")
    records = np.fromfile(path, dtype=POINT_RECORD)
    return np.column_stack([records["x"], records["y"], records["z"]]).astype(np.float64)


def write_point_records(path: Path, xyz: np.ndarray, intensity: Optional[np.ndarray] = None) -> Path:
    xyz = np.asarray(xyz).reshape(-1, 3)
    records = np.zeros(len(xyz), dtype=POINT_RECORD)
    records["x"], records["y"], records["z"] = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    if intensity is not None:
        records["intensity"] = intensity
    path.parent.mkdir(parents=True, exist_ok=True)
    records.tofile(path)
    return path


def dataset_hash(layout: DatasetLayout) -> str:
    """位姿、标定以及全部图像 / 标签文件字节的 sha256"""
    digest = hashlib.sha256()
    files = [layout.poses_path, layout.calib_path]
    for directory in (layout.images_path, layout.labels_path):
        if directory.is_dir():
            files.extend(sorted(directory.iterdir()))
    for path in files:
        if path.is_file():
            digest.update(path.name.encode("utf-8"))
            digest.update(path.read_bytes())
    return digest.hexdigest()


# ==================== 载入 ====================

def _to_road_frame(pose: np.ndarray, world_frame: str) -> np.ndarray:
    if world_frame == "kitti":
        return KITTI_TO_ROAD @ pose
    return pose


def _checked_rotation(rotation: np.ndarray, index: int, warnings: List[str]) -> np.ndarray:
    err = np.abs(rotation @ rotation.T - np.eye(3)).max()
    if err > LOAD_ORTHONORMAL_TOL:
        raise DatasetError(f"第{index}个位姿的旋转矩阵非正交(误差{err:.2e} > {LOAD_ORTHONORMAL_TOL})")
    if err > 1e-9:
        warnings.append(f"位姿{index}旋转矩阵误差{err:.2e}，已重新正交化")
        rotation = orthonormalize(rotation)
    return rotation


def _read_frame_files(args):
    image_path, label_path = args
    try:
        image = load_image(image_path)
        labels = load_labels(label_path) if label_path is not None else None
    except (OSError, ValueError) as e:
        raise DatasetError(f"图像读取失败: {image_path}: {e}") from e
    return image, labels


def load_dataset(root, layout: Optional[DatasetLayout] = None, num_workers: Optional[int] = None) -> LoadedDataset:
    """
    读取并校验数据集，返回 world->camera 外参的 CameraFrame 列表和点云

    校验失败（数量不一致、文件不可读、旋转非正交超过 1e-3、点云截断）抛出 DatasetError
    """
    layout = layout or DatasetLayout(root=Path(root))
    if not Path(layout.root).is_dir():
        raise DatasetError(f"数据集目录不存在: {layout.root}")
    logger.info(f"🔄 加载数据集: {layout.root}")
    warnings: List[str] = []

    scene_spec, world_frame = None, "kitti"
    class_names, ignore_id = CLASS_NAMES, IGNORE
    if layout.scene_path.is_file():
        try:
            meta = json.loads(layout.scene_path.read_text(encoding="utf-8"))
            world_frame = meta.get("world_frame", "z_up")
            if meta.get("scene_spec"):
                scene_spec = SceneSpec.model_validate(meta["scene_spec"])
            class_names = tuple(meta.get("class_names", CLASS_NAMES))
            ignore_id = int(meta.get("ignore_id", IGNORE))
        except (json.JSONDecodeError, ValueError) as e:
            raise DatasetError(f"scene.json无法解析: {e}") from e
    if world_frame not in WORLD_FRAMES:
        raise DatasetError(f"未知world_frame: {world_frame}，可选{WORLD_FRAMES}")

    palette = dict(DEFAULT_PALETTE)
    if layout.palette_path.is_file():
        palette = json.loads(layout.palette_path.read_text(encoding="utf-8"))

    poses = parse_poses(layout.poses_path)
    calib = parse_calib(layout.calib_path)
    if layout.calib_key not in calib:
        raise DatasetError(f"标定文件缺少{layout.calib_key}")
    P = calib[layout.calib_key]

    if not layout.images_path.is_dir():
        raise DatasetError(f"图像目录不存在: {layout.images_path}")
    images = sorted(p for p in layout.images_path.iterdir() if p.suffix.lower() in (".png", ".ppm"))
    if len(images) != len(poses):
        raise DatasetError(f"位姿数{len(poses)}与图像数{len(images)}不一致")

    label_paths = []
    for image in images:
        candidates = [layout.labels_path / (image.stem + ext) for ext in (".png", ".pgm")]
        found = next((c for c in candidates if c.is_file()), None)
        label_paths.append(found)
    unlabeled = sum(p is None for p in label_paths)
    if unlabeled:
        logger.info(f"{unlabeled}帧没有标签图，视为无语义标注")

    workers = AppConfig.worker_count() if num_workers is None else num_workers
    jobs = list(zip(images, label_paths))
    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            contents = list(pool.map(_read_frame_files, jobs))
    else:
        contents = [_read_frame_files(job) for job in jobs]

    fx, fy, cx, cy = P[0, 0], P[1, 1], P[0, 2], P[1, 2]
    # 投影矩阵第四列是 cam0 -> 当前相机的平移（乘过焦距）
    offset = np.array([P[0, 3] / fx, P[1, 3] / fy, P[2, 3]])

    frames = []
    for index, (pose, (image, labels)) in enumerate(zip(poses, contents)):
        h, w = image.shape[:2]
        if labels is not None and labels.shape != (h, w):
            raise DatasetError(f"帧{index}标签图尺寸{labels.shape}与图像{(h, w)}不一致")
        pose = _to_road_frame(pose, world_frame)
        r_cw = _checked_rotation(pose[:, :3], index, warnings)
        rotation = r_cw.T
        translation = -rotation @ pose[:, 3] + offset
        intrinsics = CameraIntrinsics(fx, fy, cx, cy, w, h)
        frames.append(CameraFrame(rotation=rotation, translation=translation, intrinsics=intrinsics,
                                  image=image, labels=labels, frame_id=index))

    clouds = _load_clouds(layout, poses, calib, world_frame)
    if warnings:
        logger.warning(f"{len(warnings)}个位姿需要重新正交化，首条: {warnings[0]}")
    result = LoadedDataset(layout=layout, frames=frames, clouds=clouds, scene_spec=scene_spec, palette=palette,
                           class_names=class_names, ignore_id=ignore_id, world_frame=world_frame,
                           warnings=warnings, dataset_hash=dataset_hash(layout))
    logger.info(f"✅ 数据集加载完成: {len(frames)}帧, 点云{ {k: len(v) for k, v in clouds.items()} }")
    return result


def _load_clouds(layout: DatasetLayout, poses: List[np.ndarray], calib: Dict[str, np.ndarray],
                 world_frame: str) -> Dict[str, pd.DataFrame]:
    if not layout.clouds_path.is_dir():
        return {}
    clouds: Dict[str, List[np.ndarray]] = {}
    for path in sorted(layout.clouds_path.glob("*.bin")):
        points = read_point_records(path)
        if path.stem.isdigit():
            index = int(path.stem)
            if index >= len(poses):
                raise DatasetError(f"扫描{path.name}没有对应位姿")
            if "Tr" not in calib:
                raise DatasetError("逐帧扫描需要标定文件中的Tr")
            tr = calib["Tr"]
            cam = points @ tr[:, :3].T + tr[:, 3]
            pose = _to_road_frame(poses[index], world_frame)
            world = cam @ pose[:, :3].T + pose[:, 3]
            clouds.setdefault("lidar", []).append(world)
        else:
            source = path.stem
            if source not in HEIGHT_SOURCES:
                raise DatasetError(f"未知点云来源{source}，可选{HEIGHT_SOURCES}")
            if world_frame == "kitti":
                points = points @ KITTI_TO_ROAD.T
            clouds.setdefault(source, []).append(points)
    return {source: ingest_point_cloud(np.concatenate(parts), source) for source, parts in clouds.items()}


# ==================== 写出 ====================

def write_dataset(scene: SyntheticScene, root, clouds: Optional[Dict[str, pd.DataFrame]] = None,
                  image_format: str = "png") -> DatasetLayout:
    """把合成场景写成与真实数据相同的目录布局（道路系 z_up）"""
    layout = DatasetLayout(root=Path(root))
    Path(layout.root).mkdir(parents=True, exist_ok=True)
    logger.info(f"🔄 写出合成数据集: {layout.root}")

    pose_lines = []
    for frame in scene.frames:
        pose = frame.camera_to_world()[:3]
        pose_lines.append(" ".join(repr(float(v)) for v in pose.reshape(-1)))
    layout.poses_path.write_text("\n".join(pose_lines) + "\n", encoding="utf-8")

    k = scene.frames[0].intrinsics
    P = np.array([[k.fx, 0.0, k.cx, 0.0], [0.0, k.fy, k.cy, 0.0], [0.0, 0.0, 1.0, 0.0]])
    calib_line = " ".join(repr(float(v)) for v in P.reshape(-1))
    layout.calib_path.write_text(f"P0: {calib_line}\nP2: {calib_line}\n", encoding="utf-8")

    ext_image = ".ppm" if image_format == "ppm" else ".png"
    ext_label = ".pgm" if image_format == "ppm" else ".png"
    for i, frame in enumerate(scene.frames):
        save_image(layout.images_path / f"{i:06d}{ext_image}", frame.image)
        if frame.labels is not None:
            save_labels(layout.labels_path / f"{i:06d}{ext_label}", frame.labels)

    for source, df in (clouds or {}).items():
        write_point_records(layout.clouds_path / f"{source}.bin", df[["x", "y", "z"]].to_numpy())

    meta = {"world_frame": "z_up", "class_names": list(CLASS_NAMES), "ignore_id": IGNORE,
            "scene_spec": scene.spec.model_dump(mode="json")}
    layout.scene_path.write_text(json.dumps(meta, indent=2, ensure_ascii=False), encoding="utf-8")
    layout.palette_path.write_text(json.dumps(DEFAULT_PALETTE, indent=2), encoding="utf-8")
    logger.info(f"✅ 写出{len(scene.frames)}帧, 点云来源{list((clouds or {}).keys())}")
    return layout


def cloud_samples(dataset: LoadedDataset, source: str) -> pd.DataFrame:
    """取数据集中某个来源的高度样本，不存在时返回空表"""
    if source in dataset.clouds:
        return dataset.clouds[source]
    return height_frame(np.empty((0, 3)), source)
