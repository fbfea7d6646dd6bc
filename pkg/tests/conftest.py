"""
测试公共配置
把仓库根目录加入 sys.path，提供小规模场景 / 模型夹具，并注册 --runslow 选项
"""

import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from config.app_config import AppConfig  # noqa: E402
from config.run_config import reduced_preset  # noqa: E402
from core.encoding import EncoderSpec, HashGridConfig, PeConfig  # noqa: E402
from core.network import FieldModel, FieldModelConfig  # noqa: E402
from core.synthetic import CameraPath, HoleRect, Manhole, SceneSpec, build_scene  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="运行耗时的实验排序测试")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 耗时较长的端到端实验测试，需 --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="需要 --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def quiet_progress(monkeypatch):
    monkeypatch.setattr(AppConfig, "PROGRESS", False)


@pytest.fixture
def toy_hash_config():
    """3 层玩具网格：前两层稠密，第三层 17^2 > 256 走哈希"""
    return HashGridConfig(num_levels=3, base_resolution=4, per_level_scale=2.0, table_size=2 ** 8, feature_dim=2)


@pytest.fixture
def make_model():
    """构建 float64 小模型的工厂"""

    def factory(kind: str = "hash", hidden=(16, 16), seed: int = 0, shared: bool = False,
                hash_config: HashGridConfig = None, dtype=np.float64) -> FieldModel:
        grid = hash_config or HashGridConfig(num_levels=3, base_resolution=4, per_level_scale=2.0,
                                             table_size=2 ** 8, feature_dim=2)
        spec = EncoderSpec(kind=kind, pe=PeConfig(4), hash_grid=grid)
        config = FieldModelConfig(height_encoder=spec, color_encoder=spec, semantic_encoder=spec,
                                  height_hidden=tuple(hidden), color_hidden=tuple(hidden),
                                  semantic_hidden=tuple(hidden), shared_encoder=shared, seed=seed)
        return FieldModel(config, dtype=dtype)

    return factory


def small_scene_spec(**overrides) -> SceneSpec:
    base = dict(
        length=20.0,
        width=6.0,
        manholes=(Manhole(x=8.0, y=0.0, radius=0.6),),
        holes=(HoleRect(x_min=12.0, x_max=13.0, y_min=-3.0, y_max=3.0),),
        camera=CameraPath(num_poses=4, spacing=3.0, image_width=64, image_height=24),
        max_distance=30.0,
    )
    base.update(overrides)
    return SceneSpec(**base)


@pytest.fixture
def scene_spec() -> SceneSpec:
    return small_scene_spec()


@pytest.fixture(scope="session")
def small_scene():
    """4 帧 64x24 的小场景，整个会话只渲染一次"""
    return build_scene(small_scene_spec())


@pytest.fixture
def tiny_run_config(tmp_path):
    """桌面预设再缩小的运行配置，数据与输出都在临时目录"""
    config = reduced_preset(dataset_path=str(tmp_path / "dataset"), output_dir=str(tmp_path / "run"))
    training = config.training.model_copy(update={
        "height_steps": 40, "height_batch_size": 256, "appearance_epochs": 2,
        "sampler": config.training.sampler.model_copy(update={"samples_per_frame": 400})})
    model = config.model.model_copy(update={"height_hidden": [16], "color_hidden": [16], "semantic_hidden": [16]})
    height = config.height.model_copy(update={"patch_length": 20.0, "patch_width": 6.0})
    return config.model_copy(update={"training": training, "model": model, "height": height,
                                     "precision": "float64"})


@pytest.fixture
def scene_spec_factory():
    """按需覆盖字段的小场景描述工厂"""
    return small_scene_spec
