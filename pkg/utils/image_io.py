"""
图像读写工具
彩色图 [0,1] float <-> 8 位 PNG/PPM，单通道类别 id 标签图 <-> 灰度 PNG/PGM
PNG 经 Pillow 读写；PPM/PGM 为二进制 P6/P5，由 numpy 直接读写
"""

import logging
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger('image_io')


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _write_netpbm(path: Path, data: np.ndarray) -> None:
    magic = b"P6" if data.ndim == 3 else b"P5"
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(data, dtype=np.uint8).tobytes())


def _read_netpbm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ValueError(f"不支持的PPM/PGM格式: {path}")
    channels = 3 if magic == b"P6" else 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * channels, offset=pos)
    return data.reshape((h, w, 3) if channels == 3 else (h, w))


def save_image(path, image: np.ndarray) -> Path:
    """保存 (H,W,3) [0,1] 彩色图，按扩展名选择 PNG 或 PPM"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = to_uint8(image)
    if path.suffix.lower() == ".ppm":
        _write_netpbm(path, data)
    else:
        Image.fromarray(data).save(path)
    return path


def load_image(path) -> np.ndarray:
    """读取彩色图为 (H,W,3) float64，取值 [0,1]"""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        data = _read_netpbm(path)
    else:
        with Image.open(path) as img:
            data = np.asarray(img.convert("RGB"))
    return data.astype(np.float64) / 255.0


def save_labels(path, labels: np.ndarray) -> Path:
    """保存单通道类别 id 图（PNG L 模式或 PGM）"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.asarray(labels)
    if data.min(initial=0) < 0 or data.max(initial=0) > 255:
        raise ValueError("标签id必须在0..255之间")
    data = data.astype(np.uint8)
    if path.suffix.lower() == ".pgm":
        _write_netpbm(path, data)
    else:
        Image.fromarray(data).save(path)
    return path


def load_labels(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return _read_netpbm(path).copy()
    with Image.open(path) as img:
        if img.mode not in ("L", "P"):
            raise ValueError(f"标签图必须是单通道: {path} (mode={img.mode})")
        return np.asarray(img).astype(np.uint8)


def colorize_labels(labels: np.ndarray, palette: dict) -> np.ndarray:
    """按调色板把类别 id 图转成 (H,W,3) [0,1] 彩色图，未知 id 为黑色"""
    out = np.zeros(labels.shape + (3,), dtype=np.float64)
    for class_id, rgb in palette.items():
        out[labels == int(class_id)] = np.asarray(rgb, dtype=np.float64) / 255.0
    return out
