"""
运行配置模块
一次训练 / 评估 / 实验的完整配置（pydantic v2 模型），以 JSON 文件存取。
解析 -> 导出 -> 再解析无损；非法取值抛出 ConfigurationError
"""

import json
import math
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from config.app_config import AppConfig
from core.encoding import ConfigurationError, EncoderSpec, HashGridConfig, PeConfig
from core.network import FieldModelConfig, SemanticClassSet
from core.supervision import SamplerConfig
from core.trainer import TrainConfig


class _Settings(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class PeSettings(_Settings):
    num_frequencies: int = Field(10, ge=1)


class HashSettings(_Settings):
    num_levels: int = Field(16, ge=1)
    base_resolution: int = Field(16, ge=1)
    per_level_scale: float = Field(1.5, gt=1.0)
    log2_table_size: int = Field(19, ge=4, le=26)
    feature_dim: int = Field(2, ge=1)
    hashing_mode: Literal["hashed", "dense", "single"] = "hashed"

    def to_config(self) -> HashGridConfig:
        return HashGridConfig(num_levels=self.num_levels, base_resolution=self.base_resolution,
                              per_level_scale=self.per_level_scale, table_size=2 ** self.log2_table_size,
                              feature_dim=self.feature_dim, hashing_mode=self.hashing_mode)

    def dense_fit(self) -> "HashSettings":
        """保留 (res+1)^2 <= T 的各层，切换为不哈希的多分辨率模式"""
        table = 2 ** self.log2_table_size
        levels = 0
        while levels < self.num_levels and (
                math.floor(self.base_resolution * self.per_level_scale ** levels) + 1) ** 2 <= table:
            levels += 1
        if levels == 0:
            raise ConfigurationError(f"table_size=2^{self.log2_table_size}连最粗一层都放不下")
        return self.model_copy(update={"num_levels": levels, "hashing_mode": "dense"})


class EncoderSettings(_Settings):
    kind: Literal["pe", "hash"] = "hash"
    pe: PeSettings = PeSettings()
    hash_grid: HashSettings = HashSettings()

    def to_spec(self) -> EncoderSpec:
        return EncoderSpec(kind=self.kind, pe=PeConfig(self.pe.num_frequencies), hash_grid=self.hash_grid.to_config())


class ModelSettings(_Settings):
    height_encoder: EncoderSettings = EncoderSettings()
    color_encoder: EncoderSettings = EncoderSettings()
    semantic_encoder: EncoderSettings = EncoderSettings()
    height_hidden: List[int] = Field(default_factory=lambda: [64, 64, 64, 64])
    color_hidden: List[int] = Field(default_factory=lambda: [64, 64])
    semantic_hidden: List[int] = Field(default_factory=lambda: [64, 64])
    shared_encoder: bool = False
    class_names: List[str] = Field(default_factory=lambda: ["road", "traffic_lane", "manhole"])
    ignore_label: int = 255

    def encoders(self) -> Tuple[EncoderSettings, EncoderSettings, EncoderSettings]:
        return self.height_encoder, self.color_encoder, self.semantic_encoder

    def with_encoder_kind(self, kind: str) -> "ModelSettings":
        """三个分支统一切换为 pe 或 hash"""
        return self.model_copy(update={name: getattr(self, name).model_copy(update={"kind": kind})
                                       for name in ("height_encoder", "color_encoder", "semantic_encoder")})

    def with_hash_mode(self, mode: str) -> "ModelSettings":
        update = {}
        for name in ("height_encoder", "color_encoder", "semantic_encoder"):
            enc = getattr(self, name)
            hash_settings = enc.hash_grid.dense_fit() if mode == "dense" else enc.hash_grid.model_copy(
                update={"hashing_mode": mode})
            update[name] = enc.model_copy(update={"kind": "hash", "hash_grid": hash_settings})
        return self.model_copy(update=update)

    def to_model_config(self, seed: int = 0) -> FieldModelConfig:
        return FieldModelConfig(
            height_encoder=self.height_encoder.to_spec(),
            color_encoder=self.color_encoder.to_spec(),
            semantic_encoder=self.semantic_encoder.to_spec(),
            height_hidden=tuple(self.height_hidden),
            color_hidden=tuple(self.color_hidden),
            semantic_hidden=tuple(self.semantic_hidden),
            classes=SemanticClassSet(names=tuple(self.class_names), ignore_id=self.ignore_label),
            shared_encoder=self.shared_encoder,
            seed=seed,
        )


class HeightSupervisionSettings(_Settings):
    source: Literal["pose", "lidar", "sfm_dense", "sfm_sparse"] = "lidar"
    camera_height: float = Field(1.65, gt=0)
    patch_length: float = Field(20.0, gt=0)
    patch_width: float = Field(10.0, gt=0)
    grid_step: float = Field(0.1, gt=0)
    deduplicate: bool = False
    ground_percentile: Optional[float] = Field(None, gt=0, le=100)
    bounds_margin: float = Field(0.01, ge=0)


class SamplerSettings(_Settings):
    samples_per_frame: int = Field(200_000, ge=1)
    drop_ignored: bool = False
    region: Literal["union", "own"] = "union"
    view_radius: float = Field(80.0, gt=0)


class TrainingSettings(_Settings):
    height_steps: int = Field(5000, ge=0)
    height_batch_size: int = Field(4096, ge=1)
    appearance_epochs: int = Field(10, ge=0)
    appearance_steps_per_frame: int = Field(1, ge=1)
    learning_rate: float = Field(5e-4, gt=0)
    seed: int = 0
    frame_order: Literal["sequential", "shuffled"] = "sequential"
    joint_finetune: bool = False
    joint_steps: int = Field(0, ge=0)
    checkpoint_every_epochs: int = Field(1, ge=0)
    sampler: SamplerSettings = SamplerSettings()


class EvaluationSettings(_Settings):
    psnr_mode: Literal["pooled", "per_frame"] = "pooled"
    hole_grid_step: float = Field(0.1, gt=0)
    export_grid_step: float = Field(0.1, gt=0)
    save_views: bool = True
    image_format: Literal["png", "ppm"] = "png"


class ExperimentSettings(_Settings):
    mode: Literal["baseline", "sparse", "noise", "ablation"] = "baseline"
    keep_fraction: float = Field(0.1, ge=0, le=1)
    noise_ratio: float = Field(0.5, ge=0, le=1)
    noise_seed: int = 0
    noise_model: Literal["flip", "resample"] = "resample"
    hash_mode: Literal["hashed", "dense", "single"] = "hashed"


class RunConfig(_Settings):
    """完整运行配置，原样写入运行清单"""
    dataset_path: str = f"{AppConfig.DATA_PATH}/synthetic"
    output_dir: str = AppConfig.OUTPUT_PATH
    precision: Literal["float32", "float64"] = AppConfig.PRECISION
    model: ModelSettings = ModelSettings()
    height: HeightSupervisionSettings = HeightSupervisionSettings()
    training: TrainingSettings = TrainingSettings()
    evaluation: EvaluationSettings = EvaluationSettings()
    experiment: ExperimentSettings = ExperimentSettings()

    def effective_model(self) -> ModelSettings:
        """ablation 模式下按 hash_mode 改写编码器"""
        if self.experiment.mode == "ablation":
            return self.model.with_hash_mode(self.experiment.hash_mode)
        return self.model

    def model_config_for_run(self) -> FieldModelConfig:
        return self.effective_model().to_model_config(seed=self.training.seed)

    def train_config(self, num_workers: int = 0, prefetch: int = 4) -> TrainConfig:
        t = self.training
        return TrainConfig(height_steps=t.height_steps, height_batch_size=t.height_batch_size,
                           appearance_epochs=t.appearance_epochs,
                           appearance_steps_per_frame=t.appearance_steps_per_frame,
                           learning_rate=t.learning_rate, seed=t.seed, frame_order=t.frame_order,
                           joint_finetune=t.joint_finetune, joint_steps=t.joint_steps,
                           checkpoint_every_epochs=t.checkpoint_every_epochs, num_workers=num_workers,
                           prefetch=prefetch, sampler=self.sampler_config())

    def sampler_config(self) -> SamplerConfig:
        m = self.model
        return SamplerConfig(samples_per_frame=self.training.sampler.samples_per_frame,
                             patch_length=self.height.patch_length, patch_width=self.height.patch_width,
                             drop_ignored=self.training.sampler.drop_ignored, seed=self.training.seed,
                             ignore_id=m.ignore_label, num_classes=len(m.class_names),
                             region=self.training.sampler.region,
                             view_radius=self.training.sampler.view_radius)


def reduced_preset(**overrides) -> RunConfig:
    """桌面规模预设：较小的哈希表、网络和训练日程，CPU 上数分钟内跑完"""
    hash_settings = HashSettings(num_levels=8, base_resolution=16, per_level_scale=1.5, log2_table_size=14)
    encoder = EncoderSettings(kind="hash", pe=PeSettings(num_frequencies=8), hash_grid=hash_settings)
    model = ModelSettings(height_encoder=encoder, color_encoder=encoder, semantic_encoder=encoder,
                          height_hidden=[32, 32], color_hidden=[32, 32], semantic_hidden=[32, 32])
    training = TrainingSettings(height_steps=1500, height_batch_size=2048, appearance_epochs=4,
                                appearance_steps_per_frame=4, learning_rate=5e-3,
                                sampler=SamplerSettings(samples_per_frame=8000))
    config = RunConfig(model=model, training=training)
    return config.model_copy(update=overrides)


PRESETS = {"default": RunConfig, "reduced": reduced_preset}


def build_preset(name: str, **overrides) -> RunConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"未知预设: {name}，可选{tuple(PRESETS)}")
    return PRESETS[name]().model_copy(update=overrides)


def parse_run_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"运行配置不合法: {e}") from e


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"运行配置文件不存在: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"运行配置不是合法JSON: {path}: {e}") from e
    return parse_run_config(data)


def dump_run_config(config: RunConfig, path=None) -> str:
    """导出为 JSON 文本；给定 path 时同时写文件"""
    text = config.model_dump_json(indent=2)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    return text
