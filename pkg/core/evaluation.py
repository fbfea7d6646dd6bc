"""
评估模块
PSNR、mIoU、空洞区域高度 RMSE、预测视图渲染（最近像素 + 深度缓冲）以及井盖检出统计
"""

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from core.encoding import clamped_coordinate_count
from core.geometry import CameraFrame, SceneBounds
from core.network import FieldModel, SemanticClassSet
from core.supervision import FrozenHeightField, SamplerConfig, build_frame_batch, sampling_region

logger = logging.getLogger('evaluation')

PSNR_MODES = ("pooled", "per_frame")
EVAL_EPOCH = 10 ** 6
FORWARD_CHUNK = 65536


# ==================== 指标 ====================

def _masked(a: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a if mask is None else a[np.asarray(mask, dtype=bool)]


def mse(pred, gt, mask=None) -> float:
    p, g = _masked(pred, mask), _masked(gt, mask)
    if p.shape != g.shape:
        raise ValueError(f"预测与真值形状不一致: {p.shape} vs {g.shape}")
    if p.size == 0:
        raise ValueError("评估掩码为空，无法计算PSNR")
    return float(np.mean((p - g) ** 2))


def psnr(pred, gt, mask=None, max_value: float = 1.0) -> float:
    """
    10·log10(MAX² / MSE)，MSE 在掩码像素的所有通道上求平均

    完全相同时返回 inf
    """
    err = mse(pred, gt, mask)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value ** 2 / err)


def confusion_matrix(pred, gt, num_classes: int, ignore_id: int = 255) -> np.ndarray:
    """行为真值、列为预测的混淆矩阵；任一侧为 ignore 或越界的像素不计"""
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    valid = (gt != ignore_id) & (pred != ignore_id) & (gt >= 0) & (gt < num_classes) & (pred >= 0) & (pred < num_classes)
    idx = gt[valid] * num_classes + pred[valid]
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


@dataclass
class MiouResult:
    per_class: Dict[str, float]
    miou: float
    confusion: np.ndarray


def miou(pred, gt, classes: SemanticClassSet) -> MiouResult:
    """
    IoU_c = TP / (TP + FP + FN)，只对真值中出现的类别求平均；未出现的类别 IoU 记为 nan
    """
    cm = confusion_matrix(pred, gt, classes.num_classes, classes.ignore_id)
    tp = np.diag(cm).astype(np.float64)
    gt_count = cm.sum(axis=1)
    union = gt_count + cm.sum(axis=0) - tp
    present = gt_count > 0
    iou = np.full(classes.num_classes, np.nan)
    iou[present] = tp[present] / union[present]
    mean = float(np.mean(iou[present])) if np.any(present) else float("nan")
    return MiouResult(per_class=dict(zip(classes.names, iou.tolist())), miou=mean, confusion=cm)


def _grid(spec, step: float):
    xs = np.arange(step / 2, spec.length, step)
    ys = np.arange(-spec.width / 2 + step / 2, spec.width / 2, step)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    return xx.reshape(-1), yy.reshape(-1)


def predict_in_chunks(fn: Callable[[np.ndarray], np.ndarray], xy: np.ndarray) -> np.ndarray:
    parts = [fn(xy[i:i + FORWARD_CHUNK]) for i in range(0, len(xy), FORWARD_CHUNK)]
    return np.concatenate(parts) if parts else np.empty(0)


def hole_rmse(height_fn: Callable[[np.ndarray], np.ndarray], spec, step: float = 0.1) -> Dict[str, float]:
    """
    在道路稠密网格上比较预测高度与解析高度

    参数:
        height_fn: 世界 (N,2) -> (N,) 高度，例如 FrozenHeightField
        spec: SceneSpec

    返回:
        dict: supervised / hole / overall 三个区域的 RMSE（米），无空洞时 hole 为 nan
    """
    x, y = _grid(spec, step)
    pred = predict_in_chunks(height_fn, np.column_stack([x, y])).astype(np.float64)
    err = pred - spec.profile.height(x)
    in_hole = spec.in_hole(x, y)

    def rmse(mask):
        return float(np.sqrt(np.mean(err[mask] ** 2))) if np.any(mask) else float("nan")

    return {"supervised": rmse(~in_hole), "hole": rmse(in_hole), "overall": rmse(np.ones_like(in_hole))}


def detect_manholes(model: FieldModel, bounds: SceneBounds, manholes: Sequence, step: float = 0.05,
                    threshold: float = 0.5, manhole_class: str = "manhole") -> pd.DataFrame:
    """每个井盖圆盘内被预测为井盖的网格点比例不低于 threshold 即视为检出"""
    class_id = model.classes.class_id(manhole_class)
    rows = []
    for m in manholes:
        offsets = np.arange(-m.radius + step / 2, m.radius, step)
        ox, oy = np.meshgrid(offsets, offsets, indexing="ij")
        inside = ox ** 2 + oy ** 2 <= m.radius ** 2
        xy = np.column_stack([m.x + ox[inside], m.y + oy[inside]])
        labels = model.predict_labels(bounds.normalize(xy))
        fraction = float(np.mean(labels == class_id)) if len(labels) else 0.0
        rows.append({"x": m.x, "y": m.y, "radius": m.radius, "fraction": fraction, "detected": fraction >= threshold})
    return pd.DataFrame(rows, columns=["x", "y", "radius", "fraction", "detected"])


# ==================== 预测视图 ====================

def splat(u, v, depth, values: np.ndarray, shape, fill=0):
    """
    把样本溅射到最近像素，同一像素保留深度最小的样本

    返回:
        (image, covered, zbuffer)
    """
    h, w = shape
    iu = np.clip(np.rint(np.asarray(u)), 0, w - 1).astype(np.int64)
    iv = np.clip(np.rint(np.asarray(v)), 0, h - 1).astype(np.int64)
    depth = np.asarray(depth, dtype=np.float64)
    values = np.asarray(values)
    pix = iv * w + iu
    order = np.lexsort((depth, pix))
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix[order][1:] != pix[order][:-1]
    chosen = order[first]

    out_shape = (h * w,) + values.shape[1:]
    image = np.full(out_shape, fill, dtype=values.dtype)
    image[pix[chosen]] = values[chosen]
    covered = np.zeros(h * w, dtype=bool)
    covered[pix[chosen]] = True
    zbuf = np.full(h * w, np.inf)
    zbuf[pix[chosen]] = depth[chosen]
    return image.reshape((h, w) + values.shape[1:]), covered.reshape(h, w), zbuf.reshape(h, w)


@dataclass
class RenderedPrediction:
    frame_id: int
    color: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    depth: np.ndarray


def render_eval_views(model: FieldModel, bounds: SceneBounds, frames: Sequence[CameraFrame],
                      sampler: SamplerConfig, epoch: int = EVAL_EPOCH) -> List[RenderedPrediction]:
    """
    在阶段二的采样坐标上前向模型并溅射回每个评估帧

    掩码 = 至少收到一个样本的像素，且真值标签（若有）不是 ignore
    """
    height_field = FrozenHeightField(model, bounds)
    sampler = replace(sampler, drop_ignored=False)
    ignore = model.classes.ignore_id
    views = []
    region = sampling_region(frames, sampler)
    for frame in frames:
        batch = build_frame_batch(frame, height_field, sampler, epoch=epoch, region=region)
        shape = (frame.height, frame.width)
        if len(batch) == 0:
            views.append(RenderedPrediction(frame.frame_id, np.zeros(shape + (3,)),
                                            np.full(shape, ignore, dtype=np.uint8),
                                            np.zeros(shape, dtype=bool), np.full(shape, np.inf)))
            continue
        xy = bounds.normalize(batch.xy)
        color = predict_in_chunks(model.forward_color, xy).astype(np.float64)
        labels = predict_in_chunks(model.predict_labels, xy).astype(np.uint8)
        color_img, covered, zbuf = splat(batch.u, batch.v, batch.depth, color, shape)
        label_img, _, _ = splat(batch.u, batch.v, batch.depth, labels, shape, fill=ignore)
        mask = covered
        if frame.labels is not None:
            mask = covered & (frame.labels != ignore)
        views.append(RenderedPrediction(frame.frame_id, color_img, label_img, mask, zbuf))
    return views


# ==================== 报告 ====================

class EvalReport(BaseModel):
    """评估报告，序列化为 JSON；psnr 为 None 且 psnr_identical 为真表示预测与真值完全相同"""
    psnr: Optional[float] = None
    psnr_identical: bool = False
    psnr_mode: str = "pooled"
    per_frame_psnr: List[Optional[float]] = Field(default_factory=list)
    per_class_iou: Dict[str, Optional[float]] = Field(default_factory=dict)
    miou: Optional[float] = None
    hole_rmse: Optional[Dict[str, Optional[float]]] = None
    manholes_detected: Optional[int] = None
    manholes_total: Optional[int] = None
    coverage: Dict[str, float] = Field(default_factory=dict)
    clamped_coordinates: int = 0
    config: dict = Field(default_factory=dict)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))


def _finite_or_none(value: float) -> Optional[float]:
    return None if value is None or not math.isfinite(value) else float(value)


def evaluate(model: FieldModel, bounds: SceneBounds, frames: Sequence[CameraFrame], sampler: SamplerConfig,
             spec=None, psnr_mode: str = "pooled", grid_step: float = 0.1, config: Optional[dict] = None,
             views: Optional[List[RenderedPrediction]] = None) -> EvalReport:
    """
    渲染预测视图并汇总 PSNR / mIoU / 覆盖率；给定 SceneSpec 时追加空洞 RMSE 与井盖检出
    """
    if psnr_mode not in PSNR_MODES:
        raise ValueError(f"未知PSNR模式: {psnr_mode}，可选{PSNR_MODES}")
    logger.info(f"🔄 开始评估: {len(frames)}帧, PSNR模式={psnr_mode}")
    views = views if views is not None else render_eval_views(model, bounds, frames, sampler)

    pred_colors, gt_colors, pred_labels, gt_labels, per_frame = [], [], [], [], []
    covered = total = 0
    for frame, view in zip(frames, views):
        total += view.mask.size
        covered += int(view.mask.sum())
        if not np.any(view.mask):
            continue
        pc, gc = view.color[view.mask], frame.image[view.mask]
        pred_colors.append(pc)
        gt_colors.append(gc)
        per_frame.append(psnr(pc, gc))
        if frame.labels is not None:
            pred_labels.append(view.labels[view.mask])
            gt_labels.append(frame.labels[view.mask])

    if not pred_colors:
        raise ValueError("所有评估帧的覆盖掩码都为空")
    pooled = psnr(np.concatenate(pred_colors), np.concatenate(gt_colors))
    value = pooled if psnr_mode == "pooled" else float(np.mean(per_frame))

    report = EvalReport(psnr=_finite_or_none(value), psnr_identical=math.isinf(value), psnr_mode=psnr_mode,
                        per_frame_psnr=[_finite_or_none(p) for p in per_frame],
                        coverage={"covered_pixels": covered, "total_pixels": total,
                                  "fraction": covered / total if total else 0.0},
                        clamped_coordinates=clamped_coordinate_count(), config=config or {})
    if gt_labels:
        result = miou(np.concatenate(pred_labels), np.concatenate(gt_labels), model.classes)
        report.per_class_iou = {k: _finite_or_none(v) for k, v in result.per_class.items()}
        report.miou = _finite_or_none(result.miou)
    if spec is not None:
        report.hole_rmse = {k: _finite_or_none(v) for k, v in
                            hole_rmse(FrozenHeightField(model, bounds), spec, grid_step).items()}
        if spec.manholes:
            detections = detect_manholes(model, bounds, spec.manholes)
            report.manholes_detected = int(detections["detected"].sum())
            report.manholes_total = len(detections)
    logger.info(f"✅ 评估完成: PSNR={report.psnr}, mIoU={report.miou}, 覆盖率={report.coverage['fraction']:.3f}")
    return report

