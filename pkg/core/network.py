"""
网络模块
高度 / 颜色 / 语义三个前馈分支、对应的损失函数、显式反向传播以及 Adam 优化器
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.encoding import EncodedFeature, EncoderSpec, build_encoder, clamp_normalized

logger = logging.getLogger('network')

BRANCHES = ("height", "color", "semantic")
# 参数分组：height 为第一阶段，appearance 为第二阶段
PARAMETER_GROUPS = {
    "height": ("height",),
    "appearance": ("color", "semantic"),
    "all": BRANCHES,
}


@dataclass(frozen=True)
class SemanticClassSet:
    """语义类别集合，类别 id 为 0..n-1 的稠密编号，ignore_id 不参与损失和 mIoU"""
    names: Tuple[str, ...] = ("road", "traffic_lane", "manhole")
    ignore_id: int = 255

    def __post_init__(self):
        if not self.names:
            raise ValueError("语义类别集合不能为空")
        if 0 <= self.ignore_id < len(self.names):
            raise ValueError(f"ignore_id={self.ignore_id}与类别id冲突")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def class_id(self, name: str) -> int:
        return self.names.index(name)


DEFAULT_CLASSES = SemanticClassSet()


# ==================== MLP 分支 ====================

def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class HeadCache:
    activations: List[np.ndarray]
    pre_activations: List[np.ndarray]
    output: np.ndarray


class MlpHead:
    """
    全连接分支：隐藏层 ReLU，输出层 identity 或 sigmoid

    参数:
        widths: 各层宽度，首项为编码器输出维度，末项为输出通道数
        output_activation: 'identity' 或 'sigmoid'
    """

    def __init__(self, widths: Sequence[int], output_activation: str = "identity", seed: int = 0, dtype=np.float64):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ValueError(f"MLP层宽度不合法: {widths}")
        if output_activation not in ("identity", "sigmoid"):
            raise ValueError(f"未知输出激活: {output_activation}")
        self.widths = widths
        self.output_activation = output_activation

        rng = np.random.default_rng(seed)
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            # He-uniform
            bound = math.sqrt(6.0 / fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
            self.biases.append(np.zeros(fan_out, dtype=dtype))
        self.weight_grads = [np.zeros_like(w) for w in self.weights]
        self.bias_grads = [np.zeros_like(b) for b in self.biases]

    def forward(self, h: np.ndarray) -> Tuple[np.ndarray, HeadCache]:
        activations, pre = [h], []
        a = h
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            pre.append(z)
            if i < last:
                a = np.maximum(z, 0.0)
                activations.append(a)
        out = sigmoid(z) if self.output_activation == "sigmoid" else z
        return out, HeadCache(activations=activations, pre_activations=pre, output=out)

    def backward(self, grad_out: np.ndarray, cache: HeadCache) -> np.ndarray:
        """累加参数梯度，返回对输入特征的梯度"""
        g = grad_out
        if self.output_activation == "sigmoid":
            g = g * cache.output * (1.0 - cache.output)
        for i in range(len(self.weights) - 1, -1, -1):
            self.weight_grads[i] += cache.activations[i].T @ g
            self.bias_grads[i] += g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                g = g * (cache.pre_activations[i - 1] > 0)
        return g

    def zero_grad(self):
        for g in self.weight_grads + self.bias_grads:
            g.fill(0.0)

    def parameters(self) -> Dict[str, np.ndarray]:
        params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"W{i}"] = w
            params[f"b{i}"] = b
        return params

    def gradients(self) -> Dict[str, np.ndarray]:
        grads = {}
        for i, (w, b) in enumerate(zip(self.weight_grads, self.bias_grads)):
            grads[f"W{i}"] = w
            grads[f"b{i}"] = b
        return grads


@dataclass
class BranchCache:
    feature: EncodedFeature
    head: HeadCache


class FieldBranch:
    """编码器 + MLP 组成的一个输出分支"""

    def __init__(self, name: str, encoder, head: MlpHead):
        if head.widths[0] != encoder.output_dim:
            raise ValueError(f"{name}分支输入宽度{head.widths[0]}与编码器输出{encoder.output_dim}不一致")
        self.name = name
        self.encoder = encoder
        self.head = head

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, BranchCache]:
        feature = self.encoder.encode(x)
        out, head_cache = self.head.forward(feature.values)
        return out, BranchCache(feature=feature, head=head_cache)

    def backward(self, grad_out: np.ndarray, cache: BranchCache) -> None:
        grad_feature = self.head.backward(grad_out, cache.head)
        self.encoder.backward(grad_feature, cache.feature)


# ==================== 场模型 ====================

@dataclass(frozen=True)
class FieldModelConfig:
    """三分支场模型的结构配置"""
    height_encoder: EncoderSpec = field(default_factory=EncoderSpec)
    color_encoder: EncoderSpec = field(default_factory=EncoderSpec)
    semantic_encoder: EncoderSpec = field(default_factory=EncoderSpec)
    height_hidden: Tuple[int, ...] = (64, 64, 64, 64)
    color_hidden: Tuple[int, ...] = (64, 64)
    semantic_hidden: Tuple[int, ...] = (64, 64)
    classes: SemanticClassSet = DEFAULT_CLASSES
    shared_encoder: bool = False
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "height_encoder": self.height_encoder.to_dict(),
            "color_encoder": self.color_encoder.to_dict(),
            "semantic_encoder": self.semantic_encoder.to_dict(),
            "height_hidden": list(self.height_hidden),
            "color_hidden": list(self.color_hidden),
            "semantic_hidden": list(self.semantic_hidden),
            "classes": {"names": list(self.classes.names), "ignore_id": self.classes.ignore_id},
            "shared_encoder": self.shared_encoder,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FieldModelConfig":
        return cls(
            height_encoder=EncoderSpec.from_dict(data["height_encoder"]),
            color_encoder=EncoderSpec.from_dict(data["color_encoder"]),
            semantic_encoder=EncoderSpec.from_dict(data["semantic_encoder"]),
            height_hidden=tuple(data["height_hidden"]),
            color_hidden=tuple(data["color_hidden"]),
            semantic_hidden=tuple(data["semantic_hidden"]),
            classes=SemanticClassSet(names=tuple(data["classes"]["names"]), ignore_id=data["classes"]["ignore_id"]),
            shared_encoder=data["shared_encoder"],
            seed=data["seed"],
        )


@dataclass
class AdamState:
    """Adam 优化器状态，moment 与参数按名字一一对应"""
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


class FieldModel:
    """
    道路表面隐式场：(x', y') -> 高度 z / 颜色 c / 语义 logits

    三个分支默认各自拥有编码器；shared_encoder=True 时共用高度分支的编码器，
    此时该编码器归入 height 参数组。
    """

    def __init__(self, config: FieldModelConfig, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.classes = config.classes

        seed = config.seed
        height_encoder = build_encoder(config.height_encoder, seed=seed + 11, dtype=self.dtype)
        if config.shared_encoder:
            color_encoder = semantic_encoder = height_encoder
        else:
            color_encoder = build_encoder(config.color_encoder, seed=seed + 12, dtype=self.dtype)
            semantic_encoder = build_encoder(config.semantic_encoder, seed=seed + 13, dtype=self.dtype)

        self.branches: Dict[str, FieldBranch] = {
            "height": FieldBranch("height", height_encoder, MlpHead(
                [height_encoder.output_dim, *config.height_hidden, 1], "identity", seed=seed + 21, dtype=self.dtype)),
            "color": FieldBranch("color", color_encoder, MlpHead(
                [color_encoder.output_dim, *config.color_hidden, 3], "sigmoid", seed=seed + 22, dtype=self.dtype)),
            "semantic": FieldBranch("semantic", semantic_encoder, MlpHead(
                [semantic_encoder.output_dim, *config.semantic_hidden, config.classes.num_classes], "identity",
                seed=seed + 23, dtype=self.dtype)),
        }
        self.optimizer_states: Dict[str, AdamState] = {}
        logger.info(f"场模型构建完成: 编码器 height={config.height_encoder.kind}, color={config.color_encoder.kind}, "
                    f"semantic={config.semantic_encoder.kind}, shared={config.shared_encoder}, dtype={self.dtype}")

    # ---------- 前向 ----------

    def _prepare(self, x) -> np.ndarray:
        return clamp_normalized(x).astype(self.dtype, copy=False)

    def forward_height(self, x) -> np.ndarray:
        """返回 (N,) 高度（米）"""
        out, _ = self.branches["height"].forward(self._prepare(x))
        return out[:, 0]

    def forward_color(self, x) -> np.ndarray:
        """返回 (N,3) RGB，取值 [0,1]"""
        out, _ = self.branches["color"].forward(self._prepare(x))
        return out

    def forward_semantic(self, x) -> np.ndarray:
        """返回 (N, L_classes) 语义 logits"""
        out, _ = self.branches["semantic"].forward(self._prepare(x))
        return out

    def predict_labels(self, x) -> np.ndarray:
        return np.argmax(self.forward_semantic(x), axis=1)

    # ---------- 参数 ----------

    def _branch_parameters(self, name: str, grads: bool) -> Dict[str, np.ndarray]:
        branch = self.branches[name]
        result = {}
        encoder = branch.encoder
        if self.config.shared_encoder:
            if name == "height":
                source = encoder.gradients() if grads else encoder.parameters()
                result.update({f"shared.encoder.{k}": v for k, v in source.items()})
        else:
            source = encoder.gradients() if grads else encoder.parameters()
            result.update({f"{name}.encoder.{k}": v for k, v in source.items()})
        source = branch.head.gradients() if grads else branch.head.parameters()
        result.update({f"{name}.head.{k}": v for k, v in source.items()})
        return result

    def parameters(self, group: str = "all") -> Dict[str, np.ndarray]:
        params = {}
        for name in PARAMETER_GROUPS[group]:
            params.update(self._branch_parameters(name, grads=False))
        return params

    def gradients(self, group: str = "all") -> Dict[str, np.ndarray]:
        grads = {}
        for name in PARAMETER_GROUPS[group]:
            grads.update(self._branch_parameters(name, grads=True))
        return grads

    def zero_grad(self):
        for branch in self.branches.values():
            branch.encoder.zero_grad()
            branch.head.zero_grad()

    def parameter_digest(self, group: str = "all") -> str:
        """参数组内容的 sha256，用于校验冻结契约"""
        digest = hashlib.sha256()
        for name, value in sorted(self.parameters(group).items()):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(value).tobytes())
        return digest.hexdigest()

    def optimizer_state(self, group: str, learning_rate: float) -> AdamState:
        if group not in self.optimizer_states:
            self.optimizer_states[group] = AdamState(learning_rate=learning_rate)
        return self.optimizer_states[group]

    # ---------- 反向 ----------

    def backward(self, context: "LossContext", scale: float = 1.0) -> None:
        """按损失上下文把各分支输出梯度反传到所有参数（梯度累加，调用前需 zero_grad）"""
        for name, cache in context.caches.items():
            self.branches[name].backward(context.output_grads[name] * scale, cache)


# ==================== 损失 ====================

def _as_float(a) -> np.ndarray:
    a = np.asarray(a)
    return a if np.issubdtype(a.dtype, np.floating) else a.astype(np.float64)


def height_loss_and_grad(z: np.ndarray, z_gt: np.ndarray) -> Tuple[float, np.ndarray]:
    """批平均平方误差及其对 z 的梯度"""
    z = _as_float(z)
    diff = z - np.asarray(z_gt, dtype=z.dtype)
    n = max(diff.shape[0], 1)
    return float(np.mean(diff ** 2)), (2.0 / n) * diff


def color_loss_and_grad(c: np.ndarray, c_gt: np.ndarray) -> Tuple[float, np.ndarray]:
    """通道求和的平方 L2 距离，批平均"""
    c = np.atleast_2d(_as_float(c))
    diff = c - np.atleast_2d(np.asarray(c_gt, dtype=c.dtype))
    n = max(diff.shape[0], 1)
    return float(np.sum(diff ** 2) / n), (2.0 / n) * diff


def semantic_loss_and_grad(logits: np.ndarray, class_gt: np.ndarray) -> Tuple[float, np.ndarray]:
    """softmax 交叉熵 -log softmax(logits)[gt]，批平均；调用方负责过滤 ignore"""
    logits = np.atleast_2d(_as_float(logits))
    class_gt = np.atleast_1d(np.asarray(class_gt, dtype=np.int64))
    n, num_classes = logits.shape
    if class_gt.size and (class_gt.min() < 0 or class_gt.max() >= num_classes):
        raise ValueError("语义真值包含非法类别id（ignore需在调用前过滤）")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - shifted[rows, class_gt])) if n else 0.0
    grad = softmax(logits)
    grad[rows, class_gt] -= 1.0
    return loss, grad / max(n, 1)


def loss_height(z, z_gt) -> float:
    return height_loss_and_grad(np.atleast_1d(np.asarray(z, dtype=np.float64)), np.atleast_1d(z_gt))[0]


def loss_color(c, c_gt) -> float:
    return color_loss_and_grad(c, c_gt)[0]


def loss_semantic(logits, class_gt) -> float:
    return semantic_loss_and_grad(logits, class_gt)[0]


@dataclass
class LossBreakdown:
    loss_z: float = 0.0
    loss_c: float = 0.0
    loss_s: float = 0.0

    @property
    def total(self) -> float:
        return self.loss_z + self.loss_c + self.loss_s


@dataclass
class LossContext:
    """一次前向的全部缓存和各分支输出梯度，是 FieldModel.backward 的输入"""
    breakdown: LossBreakdown
    caches: Dict[str, BranchCache] = field(default_factory=dict)
    output_grads: Dict[str, np.ndarray] = field(default_factory=dict)


def compute_losses(model: FieldModel,
                   height_batch: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                   appearance_batch: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None) -> LossContext:
    """
    计算总损失 L = L_z + L_c + L_s 及反向所需上下文

    参数:
        height_batch: (归一化坐标 (N,2), 高度真值 (N,))
        appearance_batch: (归一化坐标 (M,2), 颜色真值 (M,3), 语义真值 (M,)，ignore 样本只参与颜色)

    返回:
        LossContext
    """
    breakdown = LossBreakdown()
    context = LossContext(breakdown=breakdown)

    if height_batch is not None:
        xy, z_gt = height_batch
        out, cache = model.branches["height"].forward(model._prepare(xy))
        breakdown.loss_z, grad = height_loss_and_grad(out[:, 0], np.asarray(z_gt, dtype=model.dtype))
        context.caches["height"] = cache
        context.output_grads["height"] = grad[:, None]

    if appearance_batch is not None:
        xy, c_gt, s_gt = appearance_batch
        xy = model._prepare(xy)
        out, cache = model.branches["color"].forward(xy)
        breakdown.loss_c, grad = color_loss_and_grad(out, np.asarray(c_gt, dtype=model.dtype))
        context.caches["color"] = cache
        context.output_grads["color"] = grad

        s_gt = np.asarray(s_gt)
        labeled = s_gt != model.classes.ignore_id
        if np.any(labeled):
            logits, cache = model.branches["semantic"].forward(xy[labeled])
            breakdown.loss_s, grad = semantic_loss_and_grad(logits, s_gt[labeled])
            context.caches["semantic"] = cache
            context.output_grads["semantic"] = grad
    return context


# ==================== Adam ====================

def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState) -> AdamState:
    """带偏差修正的标准 Adam，原地更新参数与状态，step 每次加 1"""
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"参数{name}梯度形状{g.shape}与参数{p.shape}不一致")
        m = state.first_moment.setdefault(name, np.zeros_like(p))
        v = state.second_moment.setdefault(name, np.zeros_like(p))
        if m.shape != p.shape:
            raise ValueError(f"参数{name}的Adam状态形状不匹配")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return state
