import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Mapping, Optional, Union

import numpy as np
from sklearn.ensemble import GradientBoostingClassifier

from tools.common.errors import ConfigError, LearnerError
from tools.glm.glm_engine import Family, GlmFit, fit_glm, predict_mean

_logger = logging.getLogger(__name__)

CLIP = 1e-4


class LearnerKind(str, Enum):
    GLM_MAIN_EFFECTS = "glm-main-effects"
    GLM_PAIRWISE = "glm-pairwise-interactions"
    BOOSTED_STUMPS = "boosted-stumps"
    CONSTANT = "constant"


@dataclass(frozen=True)
class LearnerSpec:
    """学习器配置

    boosted-stumps 的 depth 直接作为 sklearn 的 max_depth：depth=1 为单次分裂的树桩，
    depth=3 为最多三层分裂（至多 8 个叶子）的树，与 xgboost 的 max_depth 含义一致。
    """
    kind: LearnerKind
    depth: int = 1
    shrinkage: float = 0.1
    rounds: int = 200
    # constant 学习器的固定概率，缺省取加权均值
    probability: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", LearnerKind(self.kind))
        if self.rounds < 1:
            raise ConfigError(f"boosting 轮数至少为 1: {self.rounds}")
        if not 0.0 < self.shrinkage <= 1.0:
            raise ConfigError(f"收缩系数必须在 (0, 1] 内: {self.shrinkage}")
        if self.kind is LearnerKind.BOOSTED_STUMPS and self.depth not in (1, 3):
            raise ConfigError(f"树深度只能为 1 或 3: {self.depth}")
        if self.probability is not None and not 0.0 <= self.probability <= 1.0:
            raise ConfigError(f"常数学习器的概率必须在 [0, 1] 内: {self.probability}")

    @classmethod
    def parse(cls, value: Union[str, Mapping[str, Any], "LearnerSpec"]) -> "LearnerSpec":
        """从配置解析，例如 "glm-main-effects" 或 {"kind": "boosted-stumps", "depth": 3}"""
        if isinstance(value, LearnerSpec):
            return value
        if isinstance(value, str):
            value = {"kind": value}
        try:
            return cls(**value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"无效的学习器配置 {value!r}: {e}")

    @property
    def label(self) -> str:
        if self.kind is LearnerKind.BOOSTED_STUMPS:
            return f"{self.kind.value}(depth={self.depth},shrinkage={self.shrinkage},rounds={self.rounds})"
        if self.kind is LearnerKind.CONSTANT and self.probability is not None:
            return f"{self.kind.value}({self.probability})"
        return self.kind.value


# 缩减后的默认库
DEFAULT_LIBRARY = (
    LearnerSpec(LearnerKind.GLM_MAIN_EFFECTS),
    LearnerSpec(LearnerKind.GLM_PAIRWISE),
    LearnerSpec(LearnerKind.BOOSTED_STUMPS, depth=1),
    LearnerSpec(LearnerKind.BOOSTED_STUMPS, depth=3),
)
RARE_OUTCOME_LIBRARY = (
    LearnerSpec(LearnerKind.GLM_MAIN_EFFECTS),
    LearnerSpec(LearnerKind.BOOSTED_STUMPS, depth=1),
)
GLM_ONLY_LIBRARY = (LearnerSpec(LearnerKind.GLM_MAIN_EFFECTS),)


def clip_probability(p: np.ndarray) -> np.ndarray:
    return np.clip(p, CLIP, 1.0 - CLIP)


def _features(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return X.reshape(-1, 1) if X.ndim == 1 else X


def main_effects_design(X) -> np.ndarray:
    X = _features(X)
    return np.column_stack([np.ones(X.shape[0]), X])


def pairwise_design(X) -> np.ndarray:
    X = _features(X)
    k = X.shape[1]
    products = [X[:, i] * X[:, j] for i in range(k) for j in range(i + 1, k)]
    return np.column_stack([np.ones(X.shape[0]), X] + products)


class FittedLearner:
    """已拟合学习器，predict 返回截断后的概率"""
    spec: LearnerSpec

    def predict(self, X) -> np.ndarray:
        raise NotImplementedError


class ConstantLearner(FittedLearner):
    def __init__(self, spec: LearnerSpec, probability: float):
        self.spec = spec
        self.probability = float(np.clip(probability, CLIP, 1.0 - CLIP))

    def predict(self, X) -> np.ndarray:
        return np.full(_features(X).shape[0], self.probability)


class GlmLearner(FittedLearner):
    def __init__(self, spec: LearnerSpec, fit: GlmFit):
        self.spec = spec
        self.fit = fit

    def _design(self, X) -> np.ndarray:
        if self.spec.kind is LearnerKind.GLM_PAIRWISE:
            return pairwise_design(X)
        return main_effects_design(X)

    def predict(self, X) -> np.ndarray:
        return clip_probability(predict_mean(self.fit, self._design(X)))


class BoostedLearner(FittedLearner):
    def __init__(self, spec: LearnerSpec, model: GradientBoostingClassifier):
        self.spec = spec
        self.model = model

    def predict(self, X) -> np.ndarray:
        return clip_probability(self.model.predict_proba(_features(X))[:, 1])


def fit_learner(spec: LearnerSpec, X, y, w=None, seed: int = 0) -> FittedLearner:
    """拟合单个概率学习器

    Args:
        spec: 学习器配置
        X: n×k 特征矩阵（不含截距）
        y: 0/1 响应
        w: 非负权重
        seed: boosting 的随机种子

    Returns:
        FittedLearner；响应恒定时退化为常数学习器
    """
    X = _features(X)
    y = np.asarray(y, dtype=float).reshape(-1)
    w = np.ones(len(y)) if w is None else np.asarray(w, dtype=float).reshape(-1)
    if not np.isin(y, (0.0, 1.0)).all():
        raise LearnerError("学习器的响应只能取 0/1")
    if np.any(w < 0) or w.sum() <= 0:
        raise LearnerError("学习器权重必须非负且不全为零")

    frequency = float(np.sum(w * y) / np.sum(w))
    if spec.kind is LearnerKind.CONSTANT:
        probability = frequency if spec.probability is None else spec.probability
        return ConstantLearner(spec, probability)
    if y[w > 0].min() == y[w > 0].max():
        _logger.info("响应恒定，学习器 %s 退化为常数 %.4f", spec.label, frequency)
        return ConstantLearner(spec, frequency)

    if spec.kind in (LearnerKind.GLM_MAIN_EFFECTS, LearnerKind.GLM_PAIRWISE):
        design = pairwise_design(X) if spec.kind is LearnerKind.GLM_PAIRWISE else main_effects_design(X)
        fit = fit_glm(design, y, w, Family.BINOMIAL)
        if not fit.converged:
            raise LearnerError(f"学习器 {spec.label} 的 GLM 未收敛")
        return GlmLearner(spec, fit)

    model = GradientBoostingClassifier(
        loss="log_loss",
        max_depth=spec.depth,
        learning_rate=spec.shrinkage,
        n_estimators=spec.rounds,
        random_state=seed,
    )
    model.fit(X, y.astype(int), sample_weight=w)
    return BoostedLearner(spec, model)
