"""
PLY 工具
binary_little_endian 1.0 格式的网格读写

头部固定为:
    ply
    format binary_little_endian 1.0
    comment road surface field export
    element vertex N
    property float x / y / z
    property uchar red / green / blue
    element face M
    property list uchar int vertex_indices
    end_header
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger('ply_io')

VERTEX_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                         ("red", "u1"), ("green", "u1"), ("blue", "u1")])
FACE_DTYPE = np.dtype([("n", "u1"), ("v0", "<i4"), ("v1", "<i4"), ("v2", "<i4")])


class PlyFormatError(ValueError):
    """PLY 文件头或数据长度与约定格式不符"""


@dataclass
class PlyMesh:
    vertices: np.ndarray  # (N,3) float32
    colors: np.ndarray  # (N,3) uint8
    faces: np.ndarray  # (M,3) int32


def _header(num_vertices: int, num_faces: int) -> bytes:
    lines = [
        "ply",
        "format binary_little_endian 1.0",
        "comment road surface field export",
        f"element vertex {num_vertices}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        f"element face {num_faces}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    return ("\n".join(lines) + "\n").encode("ascii")


def write_ply(path, vertices, colors, faces) -> Path:
    """写出带逐顶点颜色的三角网格"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vertices = np.asarray(vertices, dtype=np.float32).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int32).reshape(-1, 3)
    if len(colors) != len(vertices):
        raise PlyFormatError(f"顶点数{len(vertices)}与颜色数{len(colors)}不一致")

    vert = np.empty(len(vertices), dtype=VERTEX_DTYPE)
    vert["x"], vert["y"], vert["z"] = vertices[:, 0], vertices[:, 1], vertices[:, 2]
    vert["red"], vert["green"], vert["blue"] = colors[:, 0], colors[:, 1], colors[:, 2]
    face = np.empty(len(faces), dtype=FACE_DTYPE)
    face["n"] = 3
    face["v0"], face["v1"], face["v2"] = faces[:, 0], faces[:, 1], faces[:, 2]

    with open(path, "wb") as f:
        f.write(_header(len(vert), len(face)))
        f.write(vert.tobytes())
        f.write(face.tobytes())
    logger.info(f"PLY已写出: {path} ({len(vert)}顶点, {len(face)}三角形)")
    return path


def read_ply(path) -> PlyMesh:
    """读取 write_ply 写出的网格（只支持上述固定头部）"""
    raw = Path(path).read_bytes()
    marker = b"end_header\n"
    end = raw.find(marker)
    if not raw.startswith(b"ply\n") or end < 0:
        raise PlyFormatError(f"不是PLY文件: {path}")
    header = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise PlyFormatError(f"只支持binary_little_endian格式: {path}")
    counts = {}
    for line in header:
        parts = line.split()
        if parts[:1] == ["element"]:
            counts[parts[1]] = int(parts[2])
    n_vert, n_face = counts.get("vertex", 0), counts.get("face", 0)
    body = raw[end + len(marker):]
    expected = n_vert * VERTEX_DTYPE.itemsize + n_face * FACE_DTYPE.itemsize
    if len(body) != expected:
        raise PlyFormatError(f"PLY数据长度不符: 期望{expected}字节, 实际{len(body)}字节")
    vert = np.frombuffer(body, dtype=VERTEX_DTYPE, count=n_vert)
    face = np.frombuffer(body, dtype=FACE_DTYPE, count=n_face, offset=n_vert * VERTEX_DTYPE.itemsize)
    return PlyMesh(vertices=np.column_stack([vert["x"], vert["y"], vert["z"]]),
                   colors=np.column_stack([vert["red"], vert["green"], vert["blue"]]),
                   faces=np.column_stack([face["v0"], face["v1"], face["v2"]]))
