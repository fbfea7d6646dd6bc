"""
道路表面重建 - 主流程控制器
整合 合成数据生成 -> 两阶段训练 -> 评估 -> 网格导出 各阶段，并提供命令行入口:

    python -m core.road_surface_pipeline gen
    python -m core.road_surface_pipeline train [--resume]
    python -m core.road_surface_pipeline eval
    python -m core.road_surface_pipeline export
    python -m core.road_surface_pipeline ablate
    python -m core.road_surface_pipeline experiment sources|sparse|noise|noise_sweep|loss_curves
"""

import argparse
import json
import logging
import platform
import sys
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config.app_config import AppConfig, validate_all_configs
from config.run_config import PRESETS, RunConfig, build_preset, dump_run_config, load_run_config
from core import experiments
from core.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from core.dataset_io import DEFAULT_PALETTE, DatasetError, LoadedDataset, load_dataset, write_dataset
from core.encoding import ConfigurationError
from core.evaluation import FORWARD_CHUNK, EvalReport, RenderedPrediction, evaluate, render_eval_views
from core.geometry import GeometryError, SceneBounds
from core.network import FieldModel
from core.supervision import SupervisionSet, source_counts
from core.synthetic import SceneSpec, build_scene, generate_source_cloud
from core.trainer import RoadSurfaceTrainer, TrainResult
from utils.image_io import colorize_labels, save_image, to_uint8
from utils.ply_io import PlyFormatError, write_ply

# 配置日志
logging.basicConfig(level=logging.DEBUG if AppConfig.DEBUG else AppConfig.LOG_LEVEL,
                    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger('road_surface_pipeline')

GENERATED_SOURCES = ("lidar", "sfm_dense", "sfm_sparse")
EXPERIMENTS = ("sources", "sparse", "noise", "noise_sweep", "loss_curves")
VERSIONED_PACKAGES = ("numpy", "pandas", "pydantic", "Pillow", "matplotlib", "tqdm")
HANDLED_ERRORS = (ConfigurationError, DatasetError, CheckpointError, GeometryError, PlyFormatError,
                  ValueError, RuntimeError, OSError)


# ==================== 网格导出 ====================

def _grid_axis(lo: float, hi: float, step: float) -> np.ndarray:
    count = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return lo + step * np.arange(max(count, 2))


def grid_faces(nx: int, ny: int) -> np.ndarray:
    """nx × ny 规则网格（行主序，x 为外层）每个四边形剖分为两个三角形"""
    ix, iy = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), indexing="ij")
    v00 = (ix * ny + iy).reshape(-1)
    v10, v01, v11 = v00 + ny, v00 + 1, v00 + ny + 1
    return np.concatenate([np.column_stack([v00, v10, v11]), np.column_stack([v00, v11, v01])]).astype(np.int32)


def export_surface(model: FieldModel, bounds: SceneBounds, grid_step: float, path,
                   palette: Optional[Dict[str, List[int]]] = None) -> Tuple[Path, Path]:
    """
    在场景范围内按 grid_step 采样规则网格并导出两个 PLY:
    path 为颜色网格，同目录下 <stem>_semantic.ply 为语义调色板着色的网格

    返回:
        (颜色网格路径, 语义网格路径)
    """
    if grid_step <= 0:
        raise ValueError(f"网格步长必须为正: {grid_step}")
    path = Path(path)
    xs = _grid_axis(bounds.x_min, bounds.x_max, grid_step)
    ys = _grid_axis(bounds.y_min, bounds.y_max, grid_step)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    xy = np.column_stack([xx.reshape(-1), yy.reshape(-1)])
    uv = bounds.normalize(xy)

    z, colors, labels = [], [], []
    for i in range(0, len(uv), FORWARD_CHUNK):
        chunk = uv[i:i + FORWARD_CHUNK]
        z.append(model.forward_height(chunk))
        colors.append(model.forward_color(chunk))
        labels.append(model.predict_labels(chunk))
    vertices = np.column_stack([xy, np.concatenate(z)])
    faces = grid_faces(len(xs), len(ys))

    write_ply(path, vertices, to_uint8(np.concatenate(colors)), faces)
    semantic = colorize_labels(np.concatenate(labels), palette or DEFAULT_PALETTE)
    semantic_path = path.with_name(f"{path.stem}_semantic{path.suffix}")
    write_ply(semantic_path, vertices, to_uint8(semantic), faces)
    logger.info(f"表面网格已导出: {len(xs)}x{len(ys)}个顶点, 步长{grid_step}m")
    return path, semantic_path


def save_views(views: Sequence[RenderedPrediction], out_dir, palette: Dict[str, List[int]],
               image_format: str = "png") -> List[Path]:
    """写出每帧的预测颜色图与语义着色图"""
    out_dir = Path(out_dir)
    ext = ".ppm" if image_format == "ppm" else ".png"
    paths = []
    for view in views:
        paths.append(save_image(out_dir / f"{view.frame_id:06d}_color{ext}", view.color))
        paths.append(save_image(out_dir / f"{view.frame_id:06d}_labels{ext}", colorize_labels(view.labels, palette)))
    return paths


def software_versions() -> Dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in VERSIONED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


# ==================== 流水线 ====================

class RoadSurfacePipeline:
    """
    道路表面重建流水线
    所有产物写在 config.output_dir 下:
        checkpoint.rdf, loss_trace.csv, run_manifest.json, eval_report.json,
        views/, surface.ply, surface_semantic.ply, ablation.csv, experiments/
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self.output_dir = Path(config.output_dir)
        self._dataset: Optional[LoadedDataset] = None
        logger.info(f"初始化道路表面重建流水线: 数据集={config.dataset_path}, 输出={config.output_dir}")

    def ensure_output_directories(self):
        self.output_dir.mkdir(parents=True, exist_ok=True)
        logger.debug(f"确保目录存在: {self.output_dir}")

    @property
    def checkpoint_path(self) -> Path:
        return self.output_dir / "checkpoint.rdf"

    @property
    def trace_path(self) -> Path:
        return self.output_dir / "loss_trace.csv"

    @property
    def manifest_path(self) -> Path:
        return self.output_dir / "run_manifest.json"

    @property
    def report_path(self) -> Path:
        return self.output_dir / "eval_report.json"

    # ---------- 数据 ----------

    def generate(self, spec: Optional[SceneSpec] = None) -> Path:
        """渲染合成场景并连同各来源点云写成数据集"""
        spec = spec or SceneSpec()
        scene = build_scene(spec)
        seed = self.config.training.seed
        clouds = {source: generate_source_cloud(spec, source, seed=seed) for source in GENERATED_SOURCES}
        layout = write_dataset(scene, self.config.dataset_path, clouds, image_format=self.config.evaluation.image_format)
        self._dataset = None
        return Path(layout.root)

    def load(self) -> LoadedDataset:
        if self._dataset is None:
            self._dataset = load_dataset(self.config.dataset_path, num_workers=AppConfig.worker_count())
        return self._dataset

    # ---------- 训练 ----------

    def _checkpoint_callback(self, trainer: RoadSurfaceTrainer) -> None:
        save_checkpoint(self.checkpoint_path, trainer.model, trainer.bounds, trainer.progress, trainer.trace)

    def write_manifest(self, heights: pd.DataFrame, dataset: LoadedDataset, extra: Optional[dict] = None) -> Path:
        cfg = self.config
        manifest = {
            "config": json.loads(dump_run_config(cfg)),
            "seed": cfg.training.seed,
            "dataset_hash": dataset.dataset_hash,
            "height_sources": source_counts(heights),
            "train_config": cfg.train_config(AppConfig.worker_count(), AppConfig.PREFETCH_QUEUE).to_dict(),
            "software": software_versions(),
        }
        manifest.update(extra or {})
        self.manifest_path.write_text(json.dumps(manifest, indent=2, ensure_ascii=False, default=str),
                                      encoding="utf-8")
        return self.manifest_path

    def train(self, resume: bool = False, stop_after_epoch: Optional[int] = None) -> TrainResult:
        """
        两阶段训练；resume=True 且检查点存在时从检查点继续

        每 checkpoint_every_epochs 个阶段二 epoch 写一次检查点，结束时再写一次
        """
        self.ensure_output_directories()
        dataset = self.load()
        heights = experiments.height_samples(self.config, dataset)
        frames = experiments.training_frames(self.config, dataset)
        train_cfg = self.config.train_config(AppConfig.worker_count(), AppConfig.PREFETCH_QUEUE)

        if resume and self.checkpoint_path.is_file():
            ckpt = load_checkpoint(self.checkpoint_path)
            supervision = SupervisionSet(heights, frames, ckpt.bounds)
            trainer = RoadSurfaceTrainer(ckpt.model, supervision, train_cfg, trace=ckpt.trace,
                                         progress=ckpt.progress, epoch_callback=self._checkpoint_callback)
            logger.info(f"🔄 从检查点继续训练: {self.checkpoint_path} (step {ckpt.progress.global_step})")
        else:
            supervision = SupervisionSet.build(heights, frames, margin=self.config.height.bounds_margin)
            model = FieldModel(self.config.model_config_for_run(), dtype=np.dtype(self.config.precision))
            trainer = RoadSurfaceTrainer(model, supervision, train_cfg, epoch_callback=self._checkpoint_callback)

        result = trainer.run(stop_after_epoch=stop_after_epoch)
        save_checkpoint(self.checkpoint_path, result.model, supervision.bounds, result.progress, result.trace)
        result.trace.to_csv(self.trace_path)
        self.write_manifest(heights, dataset, {"progress": result.progress.to_dict(),
                                               "height_digest": result.height_digest,
                                               "stopped_early": result.stopped_early})
        logger.info(f"✅ 训练完成: 共{result.progress.global_step}步, 检查点 {self.checkpoint_path}")
        return result

    # ---------- 评估与导出 ----------

    def _load_trained(self, checkpoint: Optional[Path] = None):
        path = Path(checkpoint) if checkpoint else self.checkpoint_path
        if not path.is_file():
            raise CheckpointError(f"检查点不存在: {path}，请先运行 train")
        return load_checkpoint(path)

    def evaluate(self, checkpoint: Optional[Path] = None) -> EvalReport:
        ckpt = self._load_trained(checkpoint)
        dataset = self.load()
        cfg = self.config
        views = render_eval_views(ckpt.model, ckpt.bounds, dataset.frames, cfg.sampler_config())
        report = evaluate(ckpt.model, ckpt.bounds, dataset.frames, cfg.sampler_config(), spec=dataset.scene_spec,
                          psnr_mode=cfg.evaluation.psnr_mode, grid_step=cfg.evaluation.hole_grid_step,
                          config=json.loads(dump_run_config(cfg)), views=views)
        report.save(self.report_path)
        if cfg.evaluation.save_views:
            save_views(views, self.output_dir / "views", dataset.palette, cfg.evaluation.image_format)
        logger.info(f"✅ 评估报告已保存: {self.report_path}")
        return report

    def export(self, checkpoint: Optional[Path] = None, grid_step: Optional[float] = None) -> List[Path]:
        ckpt = self._load_trained(checkpoint)
        dataset = self.load()
        step = grid_step or self.config.evaluation.export_grid_step
        paths = list(export_surface(ckpt.model, ckpt.bounds, step, self.output_dir / "surface.ply", dataset.palette))
        views = render_eval_views(ckpt.model, ckpt.bounds, dataset.frames, self.config.sampler_config())
        paths += save_views(views, self.output_dir / "views", dataset.palette, self.config.evaluation.image_format)
        return paths

    # ---------- 实验 ----------

    def ablate(self, variants: Sequence[str] = experiments.ABLATION_VARIANTS) -> pd.DataFrame:
        self.ensure_output_directories()
        dataset = self.load()
        table = experiments.hole_filling_ablation(self.config, dataset, variants)
        table.to_csv(self.output_dir / "ablation.csv", index=False)
        if dataset.scene_spec is not None:
            orderings = experiments.hole_orderings(table, dataset.scene_spec.profile.amplitude)
            logger.info(f"空洞填补结论: {orderings}")
        return table

    def experiment(self, name: str) -> Dict[str, pd.DataFrame]:
        if name not in EXPERIMENTS:
            raise ValueError(f"未知实验: {name}，可选{EXPERIMENTS}")
        dataset = self.load()
        out_dir = self.output_dir / "experiments"
        tables: Dict[str, pd.DataFrame] = {}
        if name == "sources":
            tables["encoder_comparison"] = experiments.encoder_comparison(self.config, dataset)
        elif name == "sparse":
            summary, detections = experiments.sparse_label_experiment(
                self.config, dataset, self.config.experiment.keep_fraction)
            tables["sparse_labels"], tables["manhole_detections"] = summary, detections
        elif name == "noise":
            tables["label_noise"] = experiments.noise_experiment(self.config, dataset)
        elif name == "noise_sweep":
            table, knee = experiments.noise_sweep(self.config, dataset)
            tables["noise_sweep"] = table
            tables["noise_knee"] = pd.DataFrame([knee])
        else:
            traces = experiments.loss_comparison(self.config, dataset)
            experiments.plot_loss_curves(traces, out_dir / "loss_curves.png")
            for kind, trace in traces.items():
                trace.to_csv(out_dir / f"loss_trace_{kind}.csv")
            tables["loss_at_equal_steps"] = experiments.loss_at_equal_steps(traces)
        experiments.summarize(tables, out_dir)
        return tables

    def run_full_pipeline(self) -> Dict[str, Any]:
        """
        gen（数据集不存在时）-> train -> eval -> export

        返回:
            Dict: success, stages_completed, output_files, report
        """
        result = {"success": False, "stages_completed": [], "output_files": {}, "report": None}
        try:
            if not Path(self.config.dataset_path).is_dir():
                logger.info("🔄 阶段0: 生成合成数据集")
                result["output_files"]["dataset"] = str(self.generate())
                result["stages_completed"].append("gen")
            logger.info("🔄 阶段1: 训练")
            self.train()
            result["output_files"]["checkpoint"] = str(self.checkpoint_path)
            result["stages_completed"].append("train")
            logger.info("🔄 阶段2: 评估")
            result["report"] = self.evaluate()
            result["output_files"]["eval_report"] = str(self.report_path)
            result["stages_completed"].append("eval")
            logger.info("🔄 阶段3: 导出")
            result["output_files"]["surface"] = [str(p) for p in self.export()[:2]]
            result["stages_completed"].append("export")
            result["success"] = True
            logger.info("✅ 完整流水线执行成功")
        except HANDLED_ERRORS as e:
            logger.error(f"❌ 流水线执行失败: {e}")
            result["error"] = str(e)
        return result


# ==================== 命令行 ====================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="road_surface_pipeline", description='道路表面隐式重建')
    parser.add_argument('--config', help='运行配置JSON文件路径（给定时忽略--preset）', default=None)
    parser.add_argument('--preset', choices=tuple(PRESETS), default='reduced', help='内置配置预设')
    parser.add_argument('--dataset', help='覆盖配置中的数据集目录', default=None)
    parser.add_argument('--output', help='覆盖配置中的输出目录', default=None)
    parser.add_argument('--verbose', action='store_true', help='显示详细日志')

    sub = parser.add_subparsers(dest='command', required=True)
    gen = sub.add_parser('gen', help='生成合成数据集')
    gen.add_argument('--scene', help='SceneSpec JSON文件路径', default=None)
    gen.add_argument('--num-poses', type=int, default=None, help='相机位姿数')

    train = sub.add_parser('train', help='两阶段训练')
    train.add_argument('--resume', action='store_true', help='从已有检查点继续')
    train.add_argument('--stop-after-epoch', type=int, default=None, help='阶段二在该epoch后暂停')

    ev = sub.add_parser('eval', help='评估并写出报告')
    ev.add_argument('--checkpoint', default=None, help='检查点路径')

    export = sub.add_parser('export', help='导出PLY网格与预测视图')
    export.add_argument('--checkpoint', default=None, help='检查点路径')
    export.add_argument('--grid-step', type=float, default=None, help='网格步长（米）')

    ablate = sub.add_parser('ablate', help='哈希模式空洞填补消融')
    ablate.add_argument('--variants', nargs='+', choices=experiments.ABLATION_VARIANTS,
                        default=list(experiments.ABLATION_VARIANTS))

    exp = sub.add_parser('experiment', help='运行对比实验')
    exp.add_argument('name', choices=EXPERIMENTS)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_run_config(args.config) if args.config else build_preset(args.preset)
    update = {}
    if args.dataset:
        update["dataset_path"] = args.dataset
    if args.output:
        update["output_dir"] = args.output
    return config.model_copy(update=update) if update else config


def _scene_spec(args: argparse.Namespace) -> SceneSpec:
    if args.scene:
        try:
            spec = SceneSpec.model_validate_json(Path(args.scene).read_text(encoding="utf-8"))
        except ValueError as e:
            raise ConfigurationError(f"场景配置不合法: {args.scene}: {e}") from e
    else:
        spec = SceneSpec()
    if args.num_poses is not None:
        spec = spec.model_copy(update={"camera": spec.camera.model_copy(update={"num_poses": args.num_poses})})
    return spec


def run_command(args: argparse.Namespace) -> None:
    invalid = [name for name, ok in validate_all_configs().items() if not ok]
    if invalid:
        raise ConfigurationError(f"环境配置不合法: {invalid}，请检查 .env")
    config = resolve_config(args)
    pipeline = RoadSurfacePipeline(config)
    if args.command == 'gen':
        root = pipeline.generate(_scene_spec(args))
        print(f"dataset={root}")
    elif args.command == 'train':
        result = pipeline.train(resume=args.resume, stop_after_epoch=args.stop_after_epoch)
        print(f"checkpoint={pipeline.checkpoint_path} steps={result.progress.global_step}")
    elif args.command == 'eval':
        report = pipeline.evaluate(args.checkpoint)
        print(f"report={pipeline.report_path} psnr={report.psnr} miou={report.miou}")
    elif args.command == 'export':
        paths = pipeline.export(args.checkpoint, args.grid_step)
        print(f"surface={paths[0]} semantic={paths[1]} views={len(paths) - 2}")
    elif args.command == 'ablate':
        print(pipeline.ablate(args.variants).to_string(index=False))
    else:
        for name, table in pipeline.experiment(args.name).items():
            print(f"[{name}]")
            print(table.to_string(index=False))


def main(argv: Optional[Sequence[str]] = None) -> int:
    """命令行入口，返回退出码"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        run_command(args)
    except HANDLED_ERRORS as e:
        message = json.dumps(str(e).replace("\n", " "), ensure_ascii=False)
        print(f"error={type(e).__name__} message={message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
