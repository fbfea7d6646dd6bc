"""
应用配置模块
管理日志、数据路径、数值精度、并发等运行环境配置（从 .env / 环境变量读取）
"""
import os
from dotenv import load_dotenv

# 加载环境变量
load_dotenv()


class AppConfig:
    """应用配置"""
    DEBUG: bool = os.getenv("DEBUG", "False").lower() == "true"
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    DATA_PATH: str = os.getenv("DATA_PATH", "data")
    OUTPUT_PATH: str = os.getenv("OUTPUT_PATH", "data/output")

    # 数值配置：生产默认32位，测试/梯度检查使用64位
    PRECISION: str = os.getenv("PRECISION", "float32")

    # 外观样本预取线程数，0 表示在训练线程内直接生成
    NUM_WORKERS: int = int(os.getenv("NUM_WORKERS", "0"))
    PREFETCH_QUEUE: int = int(os.getenv("PREFETCH_QUEUE", "4"))
    PROGRESS: bool = os.getenv("PROGRESS", "True").lower() == "true"
    # 确定性模式：忽略 NUM_WORKERS，数据集读取与外观样本都在当前线程内生成
    DETERMINISTIC: bool = os.getenv("DETERMINISTIC", "False").lower() == "true"

    @classmethod
    def worker_count(cls) -> int:
        return 0 if cls.DETERMINISTIC else cls.NUM_WORKERS

    @classmethod
    def validate(cls) -> bool:
        """验证配置是否合法"""
        return cls.PRECISION in ("float32", "float64") and cls.NUM_WORKERS >= 0 and cls.PREFETCH_QUEUE >= 1


def validate_all_configs() -> dict:
    """验证所有配置"""
    return {
        "app": AppConfig.validate(),
    }
