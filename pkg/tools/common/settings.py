import os
from typing import Optional

from dotenv import load_dotenv

load_dotenv()

ROOT_DIR = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
TEMPLATES_DIR = os.path.join(ROOT_DIR, "templates")
SCENARIOS_DIR = os.path.join(TEMPLATES_DIR, "scenarios")
PLASMODE_MODELS_PATH = os.path.join(TEMPLATES_DIR, "plasmode", "glm_models.env")
CONFIGS_DIR = os.path.join(TEMPLATES_DIR, "configs")

ENV_OUTPUT_DIR = "CONFOUNDER_SIM_OUTPUT_DIR"
ENV_TRUTH_CACHE = "CONFOUNDER_SIM_TRUTH_CACHE"
ENV_N_JOBS = "CONFOUNDER_SIM_N_JOBS"


def output_dir(flag: Optional[str] = None, configured: Optional[str] = None) -> str:
    """输出目录：命令行或工具参数 > 环境变量 > 配置文件 > 默认值"""
    return flag or os.getenv(ENV_OUTPUT_DIR) or configured or "output"


def truth_cache_path(flag: Optional[str] = None, configured: Optional[str] = None) -> Optional[str]:
    return flag or os.getenv(ENV_TRUTH_CACHE) or configured


def n_jobs(flag: Optional[int] = None, configured: Optional[int] = None) -> int:
    if flag is not None:
        return int(flag)
    value = os.getenv(ENV_N_JOBS)
    if value:
        return int(value)
    return int(configured) if configured is not None else 1
