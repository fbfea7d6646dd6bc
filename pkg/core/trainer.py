"""
训练模块
两阶段优化：先用高度样本训练高度分支，再冻结高度分支、逐帧训练颜色和语义分支；
可选第三阶段联合微调。负责批次调度、帧顺序、损失记录
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from config.app_config import AppConfig
from core.network import FieldModel, adam_step, compute_losses
from core.supervision import FrozenHeightField, SamplerConfig, SupervisionSet, build_appearance_stream, \
    build_frame_batch, sampling_region

logger = logging.getLogger('road_trainer')

STAGES = ("height", "appearance", "joint")
FRAME_ORDERS = ("sequential", "shuffled")
TRACE_COLUMNS = ["step", "stage", "epoch", "frame_id", "loss_z", "loss_c", "loss_s"]


@dataclass(frozen=True)
class TrainConfig:
    """训练调度配置，原样写入运行清单"""
    height_steps: int = 5000
    height_batch_size: int = 4096
    appearance_epochs: int = 10
    appearance_steps_per_frame: int = 1
    learning_rate: float = 5e-4
    seed: int = 0
    frame_order: str = "sequential"
    joint_finetune: bool = False
    joint_steps: int = 0
    checkpoint_every_epochs: int = 1
    num_workers: int = 0
    prefetch: int = 4
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        if self.height_steps < 0 or self.appearance_epochs < 0 or self.joint_steps < 0:
            raise ValueError("训练步数/轮数不能为负")
        if self.height_batch_size < 1:
            raise ValueError(f"height_batch_size必须为正: {self.height_batch_size}")
        if self.appearance_steps_per_frame < 1:
            raise ValueError(f"appearance_steps_per_frame必须为正: {self.appearance_steps_per_frame}")
        if self.learning_rate <= 0:
            raise ValueError(f"学习率必须为正: {self.learning_rate}")
        if self.frame_order not in FRAME_ORDERS:
            raise ValueError(f"未知帧顺序: {self.frame_order}，可选{FRAME_ORDERS}")

    def to_dict(self) -> dict:
        return asdict(self)


# ==================== 损失记录 ====================

class LossTrace:
    """
    逐步损失记录，只允许追加且 step 严格递增

    列: step, stage, epoch, frame_id, loss_z, loss_c, loss_s
    """

    def __init__(self, records: Optional[List[dict]] = None):
        self._records: List[dict] = []
        for record in records or []:
            self.append(**record)

    def append(self, step: int, stage: str, loss_z: float = 0.0, loss_c: float = 0.0, loss_s: float = 0.0,
               epoch: int = 0, frame_id: int = -1) -> None:
        if stage not in STAGES:
            raise ValueError(f"未知训练阶段: {stage}")
        if self._records and step <= self._records[-1]["step"]:
            raise ValueError(f"LossTrace的step必须严格递增: {step} <= {self._records[-1]['step']}")
        self._records.append({"step": int(step), "stage": stage, "epoch": int(epoch), "frame_id": int(frame_id),
                              "loss_z": float(loss_z), "loss_c": float(loss_c), "loss_s": float(loss_s)})

    def __len__(self) -> int:
        return len(self._records)

    @property
    def last_step(self) -> int:
        return self._records[-1]["step"] if self._records else 0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self._records, columns=TRACE_COLUMNS)

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "LossTrace":
        return cls(df[TRACE_COLUMNS].to_dict("records"))

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path) -> "LossTrace":
        return cls.from_frame(pd.read_csv(path))

    def stage_frame(self, stage: str) -> pd.DataFrame:
        df = self.to_frame()
        return df[df["stage"] == stage].reset_index(drop=True)

    def ema(self, stage: str, column: str, window: int = 100) -> pd.Series:
        """窗口为 window 的指数滑动平均"""
        return self.stage_frame(stage)[column].ewm(span=window, adjust=True).mean()

    def epoch_ema(self, stage: str, column: str, window: int = 100) -> pd.Series:
        """每个 epoch 结束时的 EMA 值，索引为 epoch"""
        df = self.stage_frame(stage)
        if df.empty:
            return pd.Series(dtype=float)
        df = df.assign(ema=self.ema(stage, column, window).to_numpy())
        return df.groupby("epoch")["ema"].last()

    def boundary_spikes(self, stage: str = "appearance", column: str = "loss_c") -> pd.DataFrame:
        """
        顺序训练时每轮第一帧的损失与该轮平均损失的对比

        返回:
            pd.DataFrame: epoch, boundary_loss, epoch_mean, spike
        """
        df = self.stage_frame(stage)
        rows = []
        for epoch, group in df.groupby("epoch"):
            if epoch == 0 or len(group) < 2:
                continue
            boundary = float(group[column].iloc[0])
            mean = float(group[column].mean())
            rows.append({"epoch": int(epoch), "boundary_loss": boundary, "epoch_mean": mean,
                         "spike": boundary > mean})
        return pd.DataFrame(rows, columns=["epoch", "boundary_loss", "epoch_mean", "spike"])

    def final_loss(self, stage: str, column: str, tail: int = 20) -> float:
        df = self.stage_frame(stage)
        return float(df[column].tail(tail).mean()) if not df.empty else float("nan")


@dataclass
class TrainingProgress:
    """断点续训需要的进度"""
    height_step: int = 0
    appearance_epoch: int = 0
    joint_step: int = 0
    global_step: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: FieldModel
    trace: LossTrace
    progress: TrainingProgress
    height_digest: str = ""
    stopped_early: bool = False
    stats: Dict[str, float] = field(default_factory=dict)


# ==================== 训练器 ====================

class RoadSurfaceTrainer:
    """
    两阶段训练器

    随机数全部由 (seed, 阶段, step/epoch, 帧) 派生，不依赖运行中的状态，
    因此从检查点恢复后的训练与不间断训练逐位一致
    """

    def __init__(self, model: FieldModel, supervision: SupervisionSet, config: TrainConfig,
                 trace: Optional[LossTrace] = None, progress: Optional[TrainingProgress] = None,
                 epoch_callback: Optional[Callable[["RoadSurfaceTrainer"], None]] = None):
        self.model = model
        self.supervision = supervision
        self.config = config
        self.trace = trace if trace is not None else LossTrace()
        self.progress = progress or TrainingProgress(global_step=self.trace.last_step)
        self.epoch_callback = epoch_callback
        self.bounds = supervision.bounds
        self._height_xy, self._height_z = supervision.normalized_heights()
        self._sampler = SamplerConfig(**{**asdict(config.sampler), "seed": config.seed,
                                         "ignore_id": model.classes.ignore_id,
                                         "num_classes": model.classes.num_classes})
        logger.info(f"训练器初始化完成: 高度样本{len(self._height_z)}个, 帧{len(supervision.frames)}个")

    def _next_step(self) -> int:
        self.progress.global_step += 1
        return self.progress.global_step

    def _height_batch(self, step: int):
        n = len(self._height_z)
        rng = np.random.default_rng([self.config.seed, 1, step])
        idx = rng.integers(0, n, size=min(self.config.height_batch_size, n))
        return self._height_xy[idx], self._height_z[idx]

    # ---------- 阶段一 ----------

    def train_height(self) -> LossTrace:
        """阶段一：在高度样本小批次上最小化高度损失"""
        cfg = self.config
        if self.progress.height_step >= cfg.height_steps:
            return self.trace
        if len(self._height_z) == 0:
            raise ValueError("没有高度样本，无法训练高度分支")
        state = self.model.optimizer_state("height", cfg.learning_rate)
        logger.info(f"🔄 阶段一(高度)开始: {cfg.height_steps - self.progress.height_step}步, batch={cfg.height_batch_size}")
        n = len(self._height_z)
        steps = range(self.progress.height_step, cfg.height_steps)
        for step in tqdm(steps, desc="height", disable=not AppConfig.PROGRESS):
            context = compute_losses(self.model, height_batch=self._height_batch(step))
            self.model.zero_grad()
            self.model.backward(context)
            adam_step(self.model.parameters("height"), self.model.gradients("height"), state)
            self.progress.height_step = step + 1
            epoch = step * cfg.height_batch_size // n
            self.trace.append(self._next_step(), "height", loss_z=context.breakdown.loss_z, epoch=epoch)
            if (step + 1) % 500 == 0:
                logger.debug(f"height step {step + 1}: loss_z={context.breakdown.loss_z:.6f}")
        logger.info(f"✅ 阶段一完成: 末段loss_z={self.trace.final_loss('height', 'loss_z'):.6f}")
        return self.trace

    # ---------- 阶段二 ----------

    def _frame_order(self, epoch: int) -> List[int]:
        n = len(self.supervision.frames)
        if self.config.frame_order == "sequential":
            return list(range(n))
        return np.random.default_rng([self.config.seed, 3, epoch]).permutation(n).tolist()

    def train_appearance(self, stop_after_epoch: Optional[int] = None) -> bool:
        """
        阶段二：高度分支冻结，每帧样本均分成 appearance_steps_per_frame 个小批次，每个小批次一个优化步

        返回:
            bool: 是否因 stop_after_epoch 提前停止
        """
        cfg = self.config
        height_field = FrozenHeightField(self.model, self.bounds)
        state = self.model.optimizer_state("appearance", cfg.learning_rate)
        frames = self.supervision.frames
        logger.info(f"🔄 阶段二(颜色+语义)开始: epoch {self.progress.appearance_epoch}/{cfg.appearance_epochs}, "
                    f"顺序={cfg.frame_order}")
        stopped = False
        for epoch in range(self.progress.appearance_epoch, cfg.appearance_epochs):
            stream = build_appearance_stream(frames, height_field, self._sampler, epoch=epoch,
                                             order=self._frame_order(epoch), num_workers=cfg.num_workers,
                                             prefetch=cfg.prefetch)
            for batch in tqdm(stream, desc=f"appearance e{epoch}", total=len(frames),
                              disable=not AppConfig.PROGRESS):
                xy = self.bounds.normalize(batch.xy)
                for part in np.array_split(np.arange(len(batch)), cfg.appearance_steps_per_frame):
                    if len(part) == 0:
                        continue
                    context = compute_losses(self.model, appearance_batch=(xy[part], batch.color[part],
                                                                           batch.labels[part]))
                    self.model.zero_grad()
                    self.model.backward(context)
                    adam_step(self.model.parameters("appearance"), self.model.gradients("appearance"), state)
                    b = context.breakdown
                    self.trace.append(self._next_step(), "appearance", loss_c=b.loss_c, loss_s=b.loss_s,
                                      epoch=epoch, frame_id=batch.frame_id)
            self.progress.appearance_epoch = epoch + 1
            if not height_field.verify_unchanged():
                raise RuntimeError("阶段二修改了冻结的高度分支参数")
            ema = self.trace.epoch_ema("appearance", "loss_c")
            logger.info(f"epoch {epoch + 1}/{cfg.appearance_epochs} 完成, loss_c(EMA)={ema.iloc[-1]:.6f}"
                        if len(ema) else f"epoch {epoch + 1}/{cfg.appearance_epochs} 完成")
            if self.epoch_callback and cfg.checkpoint_every_epochs and (epoch + 1) % cfg.checkpoint_every_epochs == 0:
                self.epoch_callback(self)
            if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch and epoch + 1 < cfg.appearance_epochs:
                stopped = True
                break
        logger.info("✅ 阶段二完成，高度分支参数未改变" if not stopped else f"⏸ 阶段二在epoch {self.progress.appearance_epoch}处暂停")
        return stopped

    # ---------- 阶段三（可选） ----------

    def train_joint(self) -> None:
        """联合微调：每步一个高度小批次加一帧外观样本，三个分支一起优化"""
        cfg = self.config
        if not cfg.joint_finetune or self.progress.joint_step >= cfg.joint_steps:
            return
        frames = self.supervision.frames
        region = sampling_region(frames, self._sampler)
        state = self.model.optimizer_state("all", cfg.learning_rate)
        logger.info(f"🔄 联合微调开始: {cfg.joint_steps - self.progress.joint_step}步")
        for step in tqdm(range(self.progress.joint_step, cfg.joint_steps), desc="joint",
                         disable=not AppConfig.PROGRESS):
            appearance, frame_id = None, -1
            if frames:
                frame_index = step % len(frames)
                batch = build_frame_batch(frames[frame_index], FrozenHeightField(self.model, self.bounds),
                                          self._sampler, epoch=cfg.appearance_epochs + step, frame_index=frame_index,
                                          region=region)
                frame_id = batch.frame_id
                if len(batch):
                    appearance = (self.bounds.normalize(batch.xy), batch.color, batch.labels)
            context = compute_losses(self.model, height_batch=self._height_batch(cfg.height_steps + step),
                                     appearance_batch=appearance)
            self.model.zero_grad()
            self.model.backward(context)
            adam_step(self.model.parameters("all"), self.model.gradients("all"), state)
            b = context.breakdown
            self.progress.joint_step = step + 1
            self.trace.append(self._next_step(), "joint", loss_z=b.loss_z, loss_c=b.loss_c, loss_s=b.loss_s,
                              epoch=cfg.appearance_epochs, frame_id=frame_id)
        logger.info("✅ 联合微调完成")

    def run(self, stop_after_epoch: Optional[int] = None) -> TrainResult:
        """按阶段顺序执行完整训练，可在阶段二某个 epoch 后暂停"""
        self.train_height()
        height_digest = self.model.parameter_digest("height")
        stopped = self.train_appearance(stop_after_epoch=stop_after_epoch)
        if not stopped:
            self.train_joint()
        return TrainResult(model=self.model, trace=self.trace, progress=self.progress,
                           height_digest=height_digest, stopped_early=stopped)


def train_height(samples, model: FieldModel, cfg: TrainConfig, bounds=None):
    """
    只训练高度分支的便捷入口

    参数:
        samples: x,y,z,source 高度样本表
    """
    supervision = SupervisionSet.build(samples, []) if bounds is None else SupervisionSet(samples, [], bounds)
    trainer = RoadSurfaceTrainer(model, supervision, cfg)
    trainer.train_height()
    return model, trainer.trace


def train_appearance(supervision: SupervisionSet, model: FieldModel, cfg: TrainConfig,
                     trace: Optional[LossTrace] = None):
    """只跑阶段二（高度分支须已训练）"""
    trainer = RoadSurfaceTrainer(model, supervision, cfg, trace=trace)
    trainer.train_appearance()
    return model, trainer.trace
