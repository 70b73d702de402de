import hashlib

import numpy as np

# 用途编码：同一重复内不同用途使用不同的随机流
PURPOSE_DATA = 0
PURPOSE_TRUTH = 1
PURPOSE_COHORT = 2
PURPOSE_ESTIMATOR_BASE = 100


def scenario_key(scenario_id: str) -> int:
    """场景ID转换为稳定的64位整数"""
    digest = hashlib.sha256(scenario_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def stream(seed: int, *spawn_key: int) -> np.random.Generator:
    """基于计数器的随机流（Philox）

    Args:
        seed: 基础种子
        spawn_key: 派生键，例如 (场景键, 重复编号, 用途)

    Returns:
        独立的随机数生成器
    """
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in spawn_key))
    return np.random.Generator(np.random.Philox(sequence))


def replicate_stream(seed: int, scenario_id: str, replicate: int, purpose: int = PURPOSE_DATA) -> np.random.Generator:
    return stream(seed, scenario_key(scenario_id), replicate, purpose)


def derive_seed(rng: np.random.Generator) -> int:
    """从已有随机流中取一个子种子（传给 sklearn 等需要整数种子的组件）"""
    return int(rng.integers(0, 2**31 - 1))
