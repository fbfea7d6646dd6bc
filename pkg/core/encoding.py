"""
位置编码模块
负责把 [-1,1] 归一化的二维世界坐标提升为网络输入特征：
- 正弦位置编码 (PE)
- 可训练的二维多分辨率哈希位置编码 (Hash PE)，含单分辨率 / 多分辨率无哈希两种消融变体
- 哈希特征表的反向传播（梯度累加）
"""

import logging
import math
import threading
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

logger = logging.getLogger('encoding')

# Instant-NGP 约定的逐轴素数，第一维为 1
HASH_PRIMES = (1, 2654435761)
HASH_MODES = ("hashed", "dense", "single")
ENCODER_KINDS = ("pe", "hash")


class ConfigurationError(ValueError):
    """编码器或运行配置不合法"""


# ==================== 坐标裁剪 ====================

_clamp_stats = {"count": 0, "warned": False}


def clamp_normalized(x) -> np.ndarray:
    """
    把坐标裁剪到 [-1,1]，越界数量计入全局计数

    参数:
        x: (N,2) 或 (2,) 的归一化坐标

    返回:
        np.ndarray: (N,2) 裁剪后的坐标
    """
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    if x.ndim == 1:
        x = x[None, :]
    outside = np.any((x < -1.0) | (x > 1.0), axis=-1)
    n_outside = int(np.count_nonzero(outside))
    if n_outside:
        _clamp_stats["count"] += n_outside
        if not _clamp_stats["warned"]:
            logger.warning(f"检测到{n_outside}个越界坐标，已裁剪到[-1,1]（后续只在DEBUG级别记录）")
            _clamp_stats["warned"] = True
        logger.debug(f"裁剪越界坐标{n_outside}个，累计{_clamp_stats['count']}个")
        x = np.clip(x, -1.0, 1.0)
    return x


def clamped_coordinate_count() -> int:
    """返回进程内累计被裁剪的坐标数量"""
    return _clamp_stats["count"]


# ==================== 配置 ====================

@dataclass(frozen=True)
class PeConfig:
    """正弦位置编码配置，num_frequencies 即频率个数 L"""
    num_frequencies: int = 10

    def __post_init__(self):
        if self.num_frequencies < 1:
            raise ConfigurationError(f"PE频率个数必须>=1，当前为{self.num_frequencies}")

    @property
    def output_dim(self) -> int:
        return 4 * self.num_frequencies


@dataclass(frozen=True)
class HashGridConfig:
    """
    多分辨率哈希网格配置

    hashing_mode:
        hashed - 表放得下时稠密索引，放不下时哈希
        dense  - 全部稠密索引，任何一层 (res+1)^2 > T 视为配置错误
        single - 只保留金字塔最细的一层（哈希）
    """
    num_levels: int = 16
    base_resolution: int = 16
    per_level_scale: float = 1.5
    table_size: int = 2 ** 19
    feature_dim: int = 2
    hashing_mode: str = "hashed"

    def __post_init__(self):
        if self.num_levels < 1 or self.base_resolution < 1 or self.table_size < 1 or self.feature_dim < 1:
            raise ConfigurationError(f"哈希网格配置必须为正整数: {self}")
        if self.per_level_scale <= 1.0:
            raise ConfigurationError(f"per_level_scale必须>1，当前为{self.per_level_scale}")
        if self.hashing_mode not in HASH_MODES:
            raise ConfigurationError(f"未知的hashing_mode: {self.hashing_mode}，可选{HASH_MODES}")
        if self.hashing_mode == "dense":
            for level in range(self.effective_levels):
                res = self.resolution(level)
                if (res + 1) ** 2 > self.table_size:
                    raise ConfigurationError(
                        f"dense模式第{level}层需要{(res + 1) ** 2}个表项，超过table_size={self.table_size}")

    @property
    def effective_levels(self) -> int:
        return 1 if self.hashing_mode == "single" else self.num_levels

    @property
    def output_dim(self) -> int:
        return self.effective_levels * self.feature_dim

    def resolution(self, level: int) -> int:
        """第 level 层每轴的格子数 floor(base * scale^level)；single 模式取金字塔最细层"""
        if self.hashing_mode == "single":
            level = self.num_levels - 1
        return int(math.floor(self.base_resolution * self.per_level_scale ** level))

    def uses_hash(self, level: int) -> bool:
        res = self.resolution(level)
        return self.hashing_mode != "dense" and (res + 1) ** 2 > self.table_size

    def level_table_size(self, level: int) -> int:
        dense_size = (self.resolution(level) + 1) ** 2
        return dense_size if not self.uses_hash(level) else self.table_size


@dataclass(frozen=True)
class EncoderSpec:
    """单个分支使用的编码器选择"""
    kind: str = "hash"
    pe: PeConfig = field(default_factory=PeConfig)
    hash_grid: HashGridConfig = field(default_factory=HashGridConfig)

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ConfigurationError(f"未知编码器类型: {self.kind}，可选{ENCODER_KINDS}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "pe": asdict(self.pe), "hash_grid": asdict(self.hash_grid)}

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderSpec":
        return cls(kind=data["kind"], pe=PeConfig(**data["pe"]), hash_grid=HashGridConfig(**data["hash_grid"]))


# ==================== 编码结果 ====================

@dataclass
class InterpolationRecord:
    """前向时记录的每层角点索引与双线性权重，供反向使用"""
    indices: List[np.ndarray]
    weights: List[np.ndarray]

    @property
    def num_points(self) -> int:
        return self.indices[0].shape[0] if self.indices else 0


@dataclass
class EncodedFeature:
    """编码输出：values 为 (N, D) 特征，provenance 说明由哪个编码器产生"""
    values: np.ndarray
    provenance: str
    record: Optional[InterpolationRecord] = None


# ==================== 正弦位置编码 ====================

def encode_pe(x, cfg: PeConfig) -> EncodedFeature:
    """
    正弦位置编码

    输出顺序固定为：先 x 分量后 y 分量；每个分量内按频率从低到高，
    每个频率依次为 sin(2^k πx), cos(2^k πx)。

    参数:
        x: (N,2) 归一化坐标
        cfg: PE配置

    返回:
        EncodedFeature: (N, 4L) 特征
    """
    x = clamp_normalized(x)
    n = x.shape[0]
    freqs = (2.0 ** np.arange(cfg.num_frequencies)) * np.pi
    arg = x[:, :, None] * freqs.astype(x.dtype)
    out = np.empty(arg.shape + (2,), dtype=x.dtype)
    out[..., 0] = np.sin(arg)
    out[..., 1] = np.cos(arg)
    return EncodedFeature(values=out.reshape(n, cfg.output_dim), provenance=f"pe(L={cfg.num_frequencies})")


def pe_jacobian(x, cfg: PeConfig) -> np.ndarray:
    """PE 对输入坐标的解析雅可比，形状 (N, 4L, 2)"""
    x = clamp_normalized(x)
    n = x.shape[0]
    freqs = (2.0 ** np.arange(cfg.num_frequencies)) * np.pi
    arg = x[:, :, None] * freqs
    jac = np.zeros((n, 2, cfg.num_frequencies, 2, 2), dtype=x.dtype)
    for c in range(2):
        jac[:, c, :, 0, c] = freqs * np.cos(arg[:, c, :])
        jac[:, c, :, 1, c] = -freqs * np.sin(arg[:, c, :])
    return jac.reshape(n, cfg.output_dim, 2)


# ==================== 哈希网格 ====================

def grid_index(ix, iy, level: int, cfg: HashGridConfig):
    """
    角点 (ix, iy) 在第 level 层特征表中的行号

    表能容纳全部角点（或 dense 模式）时按行主序稠密索引 iy*(res+1)+ix，
    否则使用 (ix*p1 XOR iy*p2) mod T，乘法在 uint64 上回绕。
    """
    res = cfg.resolution(level)
    scalar = np.ndim(ix) == 0 and np.ndim(iy) == 0
    ix = np.atleast_1d(np.asarray(ix, dtype=np.int64))
    iy = np.atleast_1d(np.asarray(iy, dtype=np.int64))
    if ix.size and (ix.min() < 0 or iy.min() < 0 or ix.max() > res or iy.max() > res):
        raise ValueError(f"角点索引超出第{level}层范围[0,{res}]")
    if cfg.hashing_mode == "dense" and (res + 1) ** 2 > cfg.table_size:
        raise ConfigurationError(f"dense模式第{level}层表容量不足")

    if not cfg.uses_hash(level):
        index = iy * (res + 1) + ix
    else:
        hashed = np.bitwise_xor(ix.astype(np.uint64) * np.uint64(HASH_PRIMES[0]),
                                iy.astype(np.uint64) * np.uint64(HASH_PRIMES[1]))
        index = (hashed % np.uint64(cfg.table_size)).astype(np.int64)
    return int(index[0]) if scalar else index


class HashGrid:
    """
    可训练的多层二维特征表

    tables[l] 形状为 (level_table_size(l), F)，grads 与之同形。
    """

    def __init__(self, config: HashGridConfig, seed: int = 0, dtype=np.float64, init_scale: float = 1e-4):
        self.config = config
        rng = np.random.default_rng(seed)
        self.tables: List[np.ndarray] = [
            rng.uniform(-init_scale, init_scale, size=(config.level_table_size(level), config.feature_dim)).astype(dtype)
            for level in range(config.effective_levels)
        ]
        self.grads: List[np.ndarray] = [np.zeros_like(t) for t in self.tables]
        # 反向累加按网格串行
        self._grad_lock = threading.Lock()
        logger.debug(f"哈希网格初始化: {config.effective_levels}层, 参数量{sum(t.size for t in self.tables)}")

    def zero_grad(self):
        for g in self.grads:
            g.fill(0.0)

    def parameters(self) -> Dict[str, np.ndarray]:
        return {f"level{level}": table for level, table in enumerate(self.tables)}

    def gradients(self) -> Dict[str, np.ndarray]:
        return {f"level{level}": grad for level, grad in enumerate(self.grads)}


def encode_hash(x, grid: HashGrid) -> EncodedFeature:
    """
    多分辨率哈希编码

    对每一层：把 [-1,1]^2 映射到 [0,res]^2，定位所在格子，取 4 个角点特征双线性插值，
    再按层拼接。返回值附带插值记录供 encode_hash_backward 使用。
    """
    cfg = grid.config
    x = clamp_normalized(x)
    dtype = grid.tables[0].dtype
    unit = (x.astype(np.float64) + 1.0) * 0.5
    n = unit.shape[0]

    features = np.empty((n, cfg.output_dim), dtype=dtype)
    indices, weights = [], []
    for level in range(cfg.effective_levels):
        res = cfg.resolution(level)
        pos = unit * res
        cell = np.clip(np.floor(pos), 0, res - 1).astype(np.int64)
        frac = pos - cell
        ix0, iy0 = cell[:, 0], cell[:, 1]
        fx, fy = frac[:, 0], frac[:, 1]

        # 角点顺序: (0,0) (1,0) (0,1) (1,1)
        idx = np.stack([
            grid_index(ix0, iy0, level, cfg),
            grid_index(ix0 + 1, iy0, level, cfg),
            grid_index(ix0, iy0 + 1, level, cfg),
            grid_index(ix0 + 1, iy0 + 1, level, cfg),
        ], axis=1)
        w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1).astype(dtype)

        corner_features = grid.tables[level][idx]
        f = cfg.feature_dim
        features[:, level * f:(level + 1) * f] = np.einsum('nk,nkf->nf', w, corner_features)
        indices.append(idx)
        weights.append(w)

    provenance = (f"hash(mode={cfg.hashing_mode}, levels={cfg.effective_levels}, "
                  f"T={cfg.table_size}, F={cfg.feature_dim})")
    return EncodedFeature(values=features, provenance=provenance,
                          record=InterpolationRecord(indices=indices, weights=weights))


def encode_hash_backward(upstream_grad: np.ndarray, recorded: InterpolationRecord, grid: HashGrid) -> None:
    """
    把上游梯度按双线性权重累加到触达的角点梯度上

    使用 bincount 做散射累加，同一输入下结果与顺序无关且确定。
    """
    cfg = grid.config
    n = recorded.num_points
    if upstream_grad.shape != (n, cfg.output_dim):
        raise ValueError(f"上游梯度形状{upstream_grad.shape}与记录({n}, {cfg.output_dim})不匹配")

    f = cfg.feature_dim
    with grid._grad_lock:
        for level in range(cfg.effective_levels):
            g = upstream_grad[:, level * f:(level + 1) * f]
            flat_idx = recorded.indices[level].reshape(-1)
            size = grid.grads[level].shape[0]
            for k in range(f):
                contrib = (recorded.weights[level] * g[:, k:k + 1]).reshape(-1)
                grid.grads[level][:, k] += np.bincount(flat_idx, weights=contrib, minlength=size)


# ==================== 编码器封装 ====================

class PositionalEncoder:
    """无参数的正弦位置编码器"""

    kind = "pe"

    def __init__(self, config: PeConfig):
        self.config = config

    @property
    def output_dim(self) -> int:
        return self.config.output_dim

    def encode(self, x) -> EncodedFeature:
        return encode_pe(x, self.config)

    def backward(self, upstream_grad: np.ndarray, feature: EncodedFeature) -> None:
        pass

    def parameters(self) -> Dict[str, np.ndarray]:
        return {}

    def gradients(self) -> Dict[str, np.ndarray]:
        return {}

    def zero_grad(self):
        pass


class HashEncoder:
    """包装 HashGrid 的可训练编码器"""

    kind = "hash"

    def __init__(self, config: HashGridConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.grid = HashGrid(config, seed=seed, dtype=dtype)

    @property
    def output_dim(self) -> int:
        return self.config.output_dim

    def encode(self, x) -> EncodedFeature:
        return encode_hash(x, self.grid)

    def backward(self, upstream_grad: np.ndarray, feature: EncodedFeature) -> None:
        encode_hash_backward(upstream_grad, feature.record, self.grid)

    def parameters(self) -> Dict[str, np.ndarray]:
        return self.grid.parameters()

    def gradients(self) -> Dict[str, np.ndarray]:
        return self.grid.gradients()

    def zero_grad(self):
        self.grid.zero_grad()


def build_encoder(spec: EncoderSpec, seed: int = 0, dtype=np.float64):
    """根据 EncoderSpec 构建编码器实例"""
    if spec.kind == "pe":
        return PositionalEncoder(spec.pe)
    return HashEncoder(spec.hash_grid, seed=seed, dtype=dtype)
