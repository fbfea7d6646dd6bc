"""
检查点模块
模型参数、Adam 状态、归一化边界、训练进度和损失记录的二进制存取

文件布局:
    8 字节魔数 b"RDFIELD\\x00"
    <IQ  版本号(uint32) + JSON 头长度(uint64)
    JSON 头 (UTF-8, 键排序)
    各数组的原始小端字节，按头中 offset 依次排列
不写入时间戳，相同状态保存两次得到逐字节相同的文件
"""

import json
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd

from core.geometry import SceneBounds
from core.network import AdamState, FieldModel, FieldModelConfig
from core.trainer import STAGES, LossTrace, TrainingProgress

logger = logging.getLogger('checkpoint')

MAGIC = b"RDFIELD\x00"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<IQ")


class CheckpointError(RuntimeError):
    """检查点文件损坏、版本不符或内容与模型不匹配"""


@dataclass
class Checkpoint:
    model: FieldModel
    bounds: SceneBounds
    progress: TrainingProgress
    trace: LossTrace


def _le(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    return array.astype(array.dtype.newbyteorder("<"), copy=False)


def _collect_arrays(model: FieldModel, trace: LossTrace) -> Tuple[List[Tuple[str, np.ndarray]], dict]:
    arrays = [(f"param.{name}", value) for name, value in sorted(model.parameters("all").items())]
    optimizers = {}
    for group, state in sorted(model.optimizer_states.items()):
        optimizers[group] = {"learning_rate": state.learning_rate, "beta1": state.beta1, "beta2": state.beta2,
                             "eps": state.eps, "step": state.step, "names": sorted(state.first_moment)}
        for name in sorted(state.first_moment):
            arrays.append((f"adam.{group}.m.{name}", state.first_moment[name]))
            arrays.append((f"adam.{group}.v.{name}", state.second_moment[name]))

    df = trace.to_frame()
    arrays.append(("trace.step", df["step"].to_numpy(dtype=np.int64)))
    arrays.append(("trace.stage", df["stage"].map(STAGES.index).to_numpy(dtype=np.int64)))
    arrays.append(("trace.epoch", df["epoch"].to_numpy(dtype=np.int64)))
    arrays.append(("trace.frame_id", df["frame_id"].to_numpy(dtype=np.int64)))
    for column in ("loss_z", "loss_c", "loss_s"):
        arrays.append((f"trace.{column}", df[column].to_numpy(dtype=np.float64)))
    return arrays, optimizers


def save_checkpoint(path, model: FieldModel, bounds: SceneBounds, progress: TrainingProgress,
                    trace: LossTrace) -> Path:
    """写入检查点（先写临时文件再替换）"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays, optimizers = _collect_arrays(model, trace)

    entries, blobs, offset = [], [], 0
    for name, value in arrays:
        data = _le(value)
        raw = data.tobytes()
        entries.append({"name": name, "dtype": data.dtype.str, "shape": list(data.shape), "offset": offset,
                        "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    header = {
        "model_config": model.config.to_dict(),
        "dtype": model.dtype.name,
        "bounds": bounds.to_dict(),
        "progress": progress.to_dict(),
        "optimizers": optimizers,
        "stages": list(STAGES),
        "arrays": entries,
        "payload_bytes": offset,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(_PREAMBLE.pack(FORMAT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for raw in blobs:
            f.write(raw)
    os.replace(tmp, path)
    logger.info(f"检查点已保存: {path} (参数{len(model.parameters('all'))}组, 步数{progress.global_step})")
    return path


def _read_header(raw: bytes, path) -> Tuple[dict, int]:
    if len(raw) < len(MAGIC) + _PREAMBLE.size or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"不是有效的检查点文件(魔数不符): {path}")
    version, header_len = _PREAMBLE.unpack_from(raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"检查点版本{version}不受支持(当前{FORMAT_VERSION}): {path}")
    start = len(MAGIC) + _PREAMBLE.size
    if start + header_len > len(raw):
        raise CheckpointError(f"检查点头被截断: {path}")
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"检查点头JSON损坏: {path}: {e}") from e
    if not isinstance(header, dict):
        raise CheckpointError(f"检查点头应为JSON对象, 实际为{type(header).__name__}: {path}")
    payload_start = start + header_len
    if len(raw) - payload_start != header.get("payload_bytes"):
        raise CheckpointError(f"检查点数据长度不符: 期望{header.get('payload_bytes')}字节, "
                              f"实际{len(raw) - payload_start}字节: {path}")
    return header, payload_start


def _array(arrays: Dict[str, np.ndarray], name: str) -> np.ndarray:
    if name not in arrays:
        raise CheckpointError(f"检查点缺少数组: {name}")
    return arrays[name]


def load_checkpoint(path) -> Checkpoint:
    """读取检查点并重建模型、优化器状态、进度与损失记录"""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"检查点不存在: {path}")
    raw = path.read_bytes()
    header, payload_start = _read_header(raw, path)

    try:
        arrays: Dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            begin = payload_start + entry["offset"]
            buf = raw[begin:begin + entry["nbytes"]]
            arrays[entry["name"]] = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        config = FieldModelConfig.from_dict(header["model_config"])
        model = FieldModel(config, dtype=np.dtype(header["dtype"]))
        bounds = SceneBounds.from_dict(header["bounds"])
        progress = TrainingProgress(**header["progress"])
        stages = header["stages"]
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"检查点内容无法解析: {path}: {e}") from e

    params = model.parameters("all")
    stored = {name[len("param."):] for name in arrays if name.startswith("param.")}
    if stored != set(params):
        raise CheckpointError(f"检查点参数与模型结构不一致: 缺少{sorted(set(params) - stored)[:3]}, "
                              f"多余{sorted(stored - set(params))[:3]}")
    for name, value in params.items():
        src = arrays[f"param.{name}"]
        if src.shape != value.shape:
            raise CheckpointError(f"参数{name}形状不一致: {src.shape} vs {value.shape}")
        np.copyto(value, src)

    for group, info in header["optimizers"].items():
        state = AdamState(learning_rate=info["learning_rate"], beta1=info["beta1"], beta2=info["beta2"],
                          eps=info["eps"], step=info["step"])
        for name in info["names"]:
            state.first_moment[name] = _array(arrays, f"adam.{group}.m.{name}").astype(model.dtype)
            state.second_moment[name] = _array(arrays, f"adam.{group}.v.{name}").astype(model.dtype)
        model.optimizer_states[group] = state

    trace = LossTrace.from_frame(pd.DataFrame({
        "step": _array(arrays, "trace.step"),
        "stage": [stages[i] for i in _array(arrays, "trace.stage")],
        "epoch": _array(arrays, "trace.epoch"),
        "frame_id": _array(arrays, "trace.frame_id"),
        "loss_z": _array(arrays, "trace.loss_z"),
        "loss_c": _array(arrays, "trace.loss_c"),
        "loss_s": _array(arrays, "trace.loss_s"),
    }))
    logger.info(f"检查点已加载: {path} (步数{progress.global_step})")
    return Checkpoint(model=model, bounds=bounds, progress=progress, trace=trace)
