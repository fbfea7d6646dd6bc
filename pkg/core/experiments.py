"""
实验模块
在合成场景上复现各项对比实验并输出 pandas 结果表:
- 空洞填补消融：pe / 多分辨率哈希 / 单分辨率哈希 / 多分辨率不哈希
- 不同高度来源下 PE 与 Hash PE 的 PSNR、mIoU 对比
- 稀疏标签（只保留少量帧的语义）与井盖检出
- 标签噪声及噪声比例扫描
- 损失下降曲线
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from config.app_config import AppConfig  # noqa: E402
from config.run_config import ModelSettings, RunConfig  # noqa: E402
from core.dataset_io import DatasetError, LoadedDataset  # noqa: E402
from core.evaluation import EvalReport, detect_manholes, evaluate, hole_rmse  # noqa: E402
from core.geometry import SceneBounds  # noqa: E402
from core.network import FieldModel  # noqa: E402
from core.supervision import (FrozenHeightField, NoiseSpec, SupervisionSet, apply_label_noise,  # noqa: E402
                              ingest_point_cloud, pose_pseudo_points, sparsify_labels)
from core.trainer import LossTrace, RoadSurfaceTrainer, TrainingProgress  # noqa: E402

logger = logging.getLogger('experiments')

ABLATION_VARIANTS = ("pe", "hash", "single", "dense")
DENSE_LOG2_TABLE = 18
ENCODERS = ("pe", "hash")
COMPARISON_SOURCES = ("pose", "lidar", "sfm_dense", "sfm_sparse")


# ==================== 单次运行 ====================

def height_samples(config: RunConfig, dataset: LoadedDataset) -> pd.DataFrame:
    """按配置的高度来源取高度样本"""
    h = config.height
    if h.source == "pose":
        return pose_pseudo_points(dataset.frames, h.patch_length, h.patch_width, h.grid_step, h.camera_height,
                                  deduplicate=h.deduplicate)
    if h.source not in dataset.clouds:
        raise DatasetError(f"数据集中没有{h.source}点云，可用来源: {sorted(dataset.clouds)}")
    cloud = dataset.clouds[h.source]
    if h.ground_percentile is not None:
        return ingest_point_cloud(cloud[["x", "y", "z"]].to_numpy(), h.source, h.ground_percentile)
    return cloud


def training_frames(config: RunConfig, dataset: LoadedDataset):
    """按实验模式处理训练帧的语义标签（评估始终使用原始帧）"""
    exp = config.experiment
    frames = list(dataset.frames)
    if exp.mode == "sparse":
        frames = sparsify_labels(frames, exp.keep_fraction, seed=config.training.seed)
    elif exp.mode == "noise":
        frames = apply_label_noise(frames, NoiseSpec(ratio=exp.noise_ratio, seed=exp.noise_seed,
                                                     num_classes=len(config.model.class_names),
                                                     ignore_id=config.model.ignore_label, model=exp.noise_model))
    return frames


def build_supervision(config: RunConfig, dataset: LoadedDataset) -> SupervisionSet:
    heights = height_samples(config, dataset)
    return SupervisionSet.build(heights, training_frames(config, dataset), margin=config.height.bounds_margin)


@dataclass
class RunOutcome:
    config: RunConfig
    model: FieldModel
    bounds: SceneBounds
    trace: LossTrace
    progress: TrainingProgress
    report: Optional[EvalReport] = None


def run_single(config: RunConfig, dataset: LoadedDataset, with_eval: bool = True, height_only: bool = False,
               epoch_callback=None) -> RunOutcome:
    """在内存中完成一次训练（可选评估），不写任何文件"""
    supervision = build_supervision(config, dataset)
    model = FieldModel(config.model_config_for_run(), dtype=np.dtype(config.precision))
    trainer = RoadSurfaceTrainer(model, supervision, config.train_config(AppConfig.worker_count(),
                                                                           AppConfig.PREFETCH_QUEUE),
                                 epoch_callback=epoch_callback)
    if height_only:
        trainer.train_height()
    else:
        trainer.run()
    report = None
    if with_eval and not height_only:
        report = evaluate(model, supervision.bounds, dataset.frames, config.sampler_config(),
                          spec=dataset.scene_spec, psnr_mode=config.evaluation.psnr_mode,
                          grid_step=config.evaluation.hole_grid_step, config=config.model_dump(mode="json"))
    return RunOutcome(config=config, model=model, bounds=supervision.bounds, trace=trainer.trace,
                      progress=trainer.progress, report=report)


def with_model(config: RunConfig, model: ModelSettings) -> RunConfig:
    """换上实验变体的模型设置；ablation 模式会按 hash_mode 改写编码器，这里退回 baseline 以免覆盖变体"""
    experiment = config.experiment
    if experiment.mode == "ablation":
        experiment = experiment.model_copy(update={"mode": "baseline"})
    return config.model_copy(update={"model": model, "experiment": experiment})


def with_encoder(config: RunConfig, kind: str) -> RunConfig:
    return with_model(config, config.model.with_encoder_kind(kind))


# ==================== 空洞填补消融 ====================

def variant_model(model: ModelSettings, variant: str) -> ModelSettings:
    """消融变体对应的模型设置；dense 变体使用 2^18 的表并只保留放得下的层"""
    if variant == "pe":
        return model.with_encoder_kind("pe")
    if variant == "hash":
        return model.with_hash_mode("hashed")
    if variant == "single":
        return model.with_hash_mode("single")
    if variant == "dense":
        enlarged = model.model_copy(update={
            name: getattr(model, name).model_copy(update={"hash_grid": getattr(model, name).hash_grid.model_copy(
                update={"log2_table_size": max(DENSE_LOG2_TABLE, getattr(model, name).hash_grid.log2_table_size)})})
            for name in ("height_encoder", "color_encoder", "semantic_encoder")})
        return enlarged.with_hash_mode("dense")
    raise ValueError(f"未知消融变体: {variant}，可选{ABLATION_VARIANTS}")


def hole_filling_ablation(config: RunConfig, dataset: LoadedDataset,
                          variants: Sequence[str] = ABLATION_VARIANTS) -> pd.DataFrame:
    """
    只训练高度分支，比较各编码变体在监督区域和空洞区域的高度 RMSE

    返回:
        pd.DataFrame: variant, supervised_rmse, hole_rmse, overall_rmse
    """
    spec = dataset.scene_spec
    if spec is None:
        raise DatasetError("空洞消融需要带scene.json的合成数据集")
    if not spec.holes:
        raise DatasetError("场景没有空洞区域")
    rows = []
    for variant in variants:
        cfg = with_model(config, variant_model(config.model, variant))
        logger.info(f"🔄 空洞消融: {variant}")
        outcome = run_single(cfg, dataset, height_only=True)
        rmse = hole_rmse(FrozenHeightField(outcome.model, outcome.bounds), spec, config.evaluation.hole_grid_step)
        rows.append({"variant": variant, "supervised_rmse": rmse["supervised"], "hole_rmse": rmse["hole"],
                     "overall_rmse": rmse["overall"]})
        logger.info(f"✅ {variant}: 监督区RMSE={rmse['supervised']:.4f}, 空洞RMSE={rmse['hole']:.4f}")
    return pd.DataFrame(rows, columns=["variant", "supervised_rmse", "hole_rmse", "overall_rmse"])


def hole_orderings(table: pd.DataFrame, amplitude: float) -> Dict[str, bool]:
    """空洞填补的三条定性结论"""
    rmse = table.set_index("variant")["hole_rmse"]
    result = {}
    if "pe" in rmse:
        result["pe_fills_holes"] = bool(rmse["pe"] < 0.5 * abs(amplitude))
    if {"single", "hash"} <= set(rmse.index):
        result["single_worse_than_hash"] = bool(rmse["single"] > rmse["hash"])
    if {"dense", "hash"} <= set(rmse.index):
        result["dense_similar_to_hash"] = bool(rmse["dense"] <= 2.0 * rmse["hash"])
    return result


# ==================== 编码器对比 ====================

def encoder_comparison(config: RunConfig, dataset: LoadedDataset,
                       sources: Iterable[str] = COMPARISON_SOURCES) -> pd.DataFrame:
    """
    每种高度来源下分别训练 PE 与 Hash PE 模型

    返回:
        pd.DataFrame: source, encoder, psnr, miou
    """
    rows = []
    for source in sources:
        for kind in ENCODERS:
            cfg = with_encoder(config, kind)
            cfg = cfg.model_copy(update={"height": cfg.height.model_copy(update={"source": source})})
            logger.info(f"🔄 编码器对比: source={source}, encoder={kind}")
            report = run_single(cfg, dataset).report
            rows.append({"source": source, "encoder": kind, "psnr": report.psnr, "miou": report.miou})
    return pd.DataFrame(rows, columns=["source", "encoder", "psnr", "miou"])


def hash_wins(table: pd.DataFrame, metric: str, group: str = "source") -> pd.Series:
    """每组内 hash 的指标是否高于 pe"""
    pivot = table.pivot(index=group, columns="encoder", values=metric)
    return pivot["hash"] > pivot["pe"]


# ==================== 稀疏标签 ====================

def sparse_label_experiment(config: RunConfig, dataset: LoadedDataset, keep_fraction: float = 0.1):
    """
    只在 keep_fraction 的帧上保留语义标签，比较 mIoU 与逐个井盖的检出情况

    返回:
        (summary, detections): summary 列 encoder, miou, manholes_detected；
        detections 列 encoder, manhole, fraction, detected
    """
    spec = dataset.scene_spec
    summary, detections = [], []
    for kind in ENCODERS:
        cfg = with_encoder(config, kind)
        cfg = cfg.model_copy(update={"experiment": cfg.experiment.model_copy(
            update={"mode": "sparse", "keep_fraction": keep_fraction})})
        logger.info(f"🔄 稀疏标签: encoder={kind}, keep_fraction={keep_fraction}")
        outcome = run_single(cfg, dataset)
        detected = 0
        if spec is not None and spec.manholes:
            table = detect_manholes(outcome.model, outcome.bounds, spec.manholes)
            detected = int(table["detected"].sum())
            for i, row in table.iterrows():
                detections.append({"encoder": kind, "manhole": int(i), "fraction": row["fraction"],
                                   "detected": bool(row["detected"])})
        summary.append({"encoder": kind, "miou": outcome.report.miou, "manholes_detected": detected})
    return (pd.DataFrame(summary, columns=["encoder", "miou", "manholes_detected"]),
            pd.DataFrame(detections, columns=["encoder", "manhole", "fraction", "detected"]))


def manholes_only_hash_detects(detections: pd.DataFrame) -> int:
    """hash 检出而 pe 漏掉的井盖个数"""
    if detections.empty:
        return 0
    pivot = detections.pivot(index="manhole", columns="encoder", values="detected")
    return int((pivot["hash"] & ~pivot["pe"]).sum())


# ==================== 标签噪声 ====================

def noise_experiment(config: RunConfig, dataset: LoadedDataset,
                     ratios: Sequence[float] = (0.0, 0.5, 0.9)) -> pd.DataFrame:
    """不同噪声比例下两种编码器的 mIoU（评估使用干净标签）"""
    rows = []
    for ratio in ratios:
        for kind in ENCODERS:
            cfg = with_encoder(config, kind)
            cfg = cfg.model_copy(update={"experiment": cfg.experiment.model_copy(
                update={"mode": "noise", "noise_ratio": float(ratio)})})
            logger.info(f"🔄 标签噪声: encoder={kind}, ratio={ratio}")
            report = run_single(cfg, dataset).report
            rows.append({"ratio": float(ratio), "encoder": kind, "miou": report.miou})
    return pd.DataFrame(rows, columns=["ratio", "encoder", "miou"])


def noise_knee(table: pd.DataFrame, encoder: str = "hash", reference: float = 0.6) -> Dict[str, float]:
    """
    找出 mIoU 相邻两档下降最大的位置

    返回:
        dict: knee_ratio（下降后的比例）, drop, near_reference（距 reference 不超过 0.1）
    """
    series = table[table["encoder"] == encoder].sort_values("ratio")
    ratios = series["ratio"].to_numpy()
    values = series["miou"].to_numpy(dtype=np.float64)
    if len(values) < 2:
        return {"knee_ratio": float("nan"), "drop": 0.0, "near_reference": False}
    drops = values[:-1] - values[1:]
    i = int(np.argmax(drops))
    knee = float(ratios[i + 1])
    return {"knee_ratio": knee, "drop": float(drops[i]), "near_reference": bool(abs(knee - reference) <= 0.1 + 1e-9)}


def noise_sweep(config: RunConfig, dataset: LoadedDataset,
                ratios: Sequence[float] = tuple(np.round(np.arange(0.0, 1.0, 0.1), 1))):
    table = noise_experiment(config, dataset, ratios)
    knee = noise_knee(table)
    logger.info(f"噪声扫描: hash拐点在ratio={knee['knee_ratio']}, 下降{knee['drop']:.3f}")
    return table, knee


# ==================== 损失曲线 ====================

def ema_non_increasing(trace: LossTrace, stage: str, column: str, window: int = 100, tol: float = 1e-12,
                       rtol: float = 0.0) -> bool:
    """每个 epoch 末的 EMA 不比上一个 epoch 大（允许 tol + rtol·上一值 的抖动）"""
    values = trace.epoch_ema(stage, column, window).to_numpy()
    return bool(np.all(np.diff(values) <= tol + rtol * np.abs(values[:-1])))


def loss_comparison(config: RunConfig, dataset: LoadedDataset) -> Dict[str, LossTrace]:
    """两种编码器各训练一次，返回损失记录"""
    traces = {}
    for kind in ENCODERS:
        logger.info(f"🔄 损失曲线: encoder={kind}")
        traces[kind] = run_single(with_encoder(config, kind), dataset, with_eval=False).trace
    return traces


def loss_at_equal_steps(traces: Dict[str, LossTrace], stage: str = "appearance",
                        columns: Sequence[str] = ("loss_c", "loss_s"), tail: int = 20) -> pd.DataFrame:
    """相同步数下各编码器末段平均损失"""
    rows = []
    for name, trace in traces.items():
        row = {"encoder": name}
        for column in columns:
            row[column] = trace.final_loss(stage, column, tail)
        rows.append(row)
    return pd.DataFrame(rows, columns=["encoder", *columns])


def plot_loss_curves(traces: Dict[str, LossTrace], path, window: int = 100) -> Path:
    """高度 / 颜色 / 语义三条损失的 EMA 曲线"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    panels = [("height", "loss_z"), ("appearance", "loss_c"), ("appearance", "loss_s")]
    fig, axes = plt.subplots(1, 3, figsize=(15, 4))
    for ax, (stage, column) in zip(axes, panels):
        for name, trace in traces.items():
            df = trace.stage_frame(stage)
            if df.empty:
                continue
            ax.plot(df["step"], trace.ema(stage, column, window), label=name)
        ax.set_title(column)
        ax.set_xlabel("step")
        ax.set_yscale("log")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"损失曲线已保存: {path}")
    return path


def summarize(tables: Dict[str, pd.DataFrame], out_dir) -> List[Path]:
    """把实验结果表写成 CSV"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, table in tables.items():
        p = out_dir / f"{name}.csv"
        table.to_csv(p, index=False)
        paths.append(p)
    return paths
