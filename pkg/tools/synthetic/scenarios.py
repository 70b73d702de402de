import logging
import math
import os
import re
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Any, Mapping, Optional, Union

import numpy as np
import yaml
from scipy import linalg
from scipy.special import expit

from tools.common.errors import ConfigError, UnknownScenarioError
from tools.common.settings import SCENARIOS_DIR
from tools.tabular.dataset import Dataset, design_matrix

_logger = logging.getLogger(__name__)

_LOG_COEFFICIENT = re.compile(r"^\s*(-?)\s*ln\(\s*([0-9]*\.?[0-9]+)\s*\)\s*$")


def parse_coefficient(value: Any) -> float:
    """系数可以是数值，也可以写作 ln(a) 或 -ln(a)"""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    match = _LOG_COEFFICIENT.match(str(value))
    if not match:
        raise ConfigError(f"无法解析的系数: {value!r}")
    sign = -1.0 if match.group(1) else 1.0
    return sign * math.log(float(match.group(2)))


@dataclass(frozen=True, eq=False)
class CovariateSpec:
    scenario: str
    variables: tuple[str, ...]
    correlation: np.ndarray
    latent: str = "X_latent"

    def __post_init__(self):
        sigma = np.array(self.correlation, dtype=float)
        if sigma.shape != (len(self.variables), len(self.variables)):
            raise ConfigError(f"协变量场景 {self.scenario} 的相关矩阵维度错误")
        if not np.allclose(sigma, sigma.T):
            raise ConfigError(f"协变量场景 {self.scenario} 的相关矩阵不对称")
        try:
            factor = linalg.cholesky(sigma, lower=True)
        except linalg.LinAlgError:
            raise ConfigError(f"协变量场景 {self.scenario} 的相关矩阵非正定")
        sigma.flags.writeable = False
        factor.flags.writeable = False
        object.__setattr__(self, "correlation", sigma)
        object.__setattr__(self, "factor", factor)

    def corr(self, a: str, b: str) -> float:
        return float(self.correlation[self.variables.index(a), self.variables.index(b)])


@dataclass(frozen=True)
class LinearPredictorSpec:
    """logit 线性预测：intercept + Σ 系数 × 公式项"""
    scenario: str
    intercept: float
    terms: tuple[tuple[str, float], ...]

    @property
    def formula(self) -> list[str]:
        return [term for term, _ in self.terms]

    @property
    def coefficients(self) -> np.ndarray:
        return np.array([self.intercept] + [value for _, value in self.terms])

    def coefficient(self, term: str) -> float:
        return dict(self.terms)[term]

    def linear_predictor(self, d: Dataset) -> np.ndarray:
        return design_matrix(d, self.formula) @ self.coefficients

    def probability(self, d: Dataset) -> np.ndarray:
        return expit(self.linear_predictor(d))

    def with_terms(self, updates: Mapping[str, float]) -> "LinearPredictorSpec":
        terms = dict(self.terms)
        terms.update({term: float(value) for term, value in updates.items()})
        return replace(self, terms=tuple(terms.items()))


@dataclass(frozen=True)
class OutcomeSpec(LinearPredictorSpec):

    def with_intercept(self, intercept: float) -> "OutcomeSpec":
        """覆盖截距（用于更稀有结局的变体）"""
        base = self.scenario.split("[", 1)[0]
        return replace(self, scenario=f"{base}[b0={intercept:g}]", intercept=float(intercept))


@dataclass(frozen=True)
class MissingSpec(LinearPredictorSpec):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    covariates: CovariateSpec
    outcome: OutcomeSpec
    missing: MissingSpec
    n: int = 2000
    seed: int = 0
    treated_quantile: float = 0.4
    kind: str = field(default="synthetic")

    @property
    def id(self) -> str:
        return f"{self.covariates.scenario}/{self.outcome.scenario}/{self.missing.scenario}"


class ScenarioRegistry:
    """从 YAML 加载的场景注册表，场景集合封闭"""

    def __init__(self, scenarios_dir: str = SCENARIOS_DIR):
        self.scenarios_dir = scenarios_dir
        self.covariate_config = self._load("covariates.yaml")
        self.outcome_config = self._load("outcomes.yaml")
        self.missing_config = self._load("missingness.yaml")

    def _load(self, filename: str) -> dict:
        path = os.path.join(self.scenarios_dir, filename)
        try:
            with open(path, "r", encoding="utf-8") as f:
                config = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigError(f"无法读取场景文件 {path}: {e}")
        if "scenarios" not in config:
            raise ConfigError(f"场景文件缺少 scenarios: {path}")
        return config

    @property
    def covariate_ids(self) -> list[str]:
        return list(self.covariate_config["scenarios"])

    @property
    def outcome_ids(self) -> list[str]:
        return list(self.outcome_config["scenarios"])

    @property
    def missing_ids(self) -> list[str]:
        return list(self.missing_config["scenarios"])

    def covariates(self, scenario_id: str) -> CovariateSpec:
        entry = self.covariate_config["scenarios"].get(scenario_id)
        if entry is None:
            raise UnknownScenarioError(scenario_id)
        variables = tuple(self.covariate_config["variables"])
        latent = self.covariate_config.get("latent", "X_latent")
        k = len(variables)
        sigma = np.full((k, k), float(entry["rho_other"]))
        for j, name in enumerate(variables):
            if name == latent:
                continue
            rho = entry["rho_strong"] if name.endswith("_s") else entry["rho_weak"]
            i = variables.index(latent)
            sigma[i, j] = sigma[j, i] = float(rho)
        for a, b, value in entry.get("overrides", []):
            i, j = variables.index(a), variables.index(b)
            sigma[i, j] = sigma[j, i] = float(value)
        np.fill_diagonal(sigma, 1.0)
        return CovariateSpec(scenario_id, variables, sigma, latent)

    @staticmethod
    def _terms(entry: Mapping[str, Any]) -> tuple[tuple[str, float], ...]:
        return tuple((str(term), parse_coefficient(value)) for term, value in (entry.get("terms") or {}).items())

    def outcome(self, scenario_id: str, intercept: Optional[float] = None) -> OutcomeSpec:
        entry = self.outcome_config["scenarios"].get(scenario_id)
        if entry is None:
            raise UnknownScenarioError(scenario_id)
        spec = OutcomeSpec(scenario_id, parse_coefficient(entry["intercept"]), self._terms(entry))
        return spec if intercept is None else spec.with_intercept(intercept)

    def missing(self, scenario_id: str) -> MissingSpec:
        entry = self.missing_config["scenarios"].get(scenario_id)
        if entry is None:
            raise UnknownScenarioError(scenario_id)
        return MissingSpec(scenario_id, parse_coefficient(entry["intercept"]), self._terms(entry))

    def scenario(self, covariates: str = "X1", outcome: str = "Y1.1", missing: str = "M1.1",
                 n: int = 2000, seed: int = 0, intercept: Optional[float] = None) -> ScenarioSpec:
        if n < 1:
            raise ConfigError(f"样本量至少为 1: {n}")
        return ScenarioSpec(
            covariates=self.covariates(covariates),
            outcome=self.outcome(outcome, intercept),
            missing=self.missing(missing),
            n=int(n),
            seed=int(seed),
        )

    def parse(self, value: Union[str, Mapping[str, Any]], n: int = 2000, seed: int = 0) -> ScenarioSpec:
        """解析 "X1/Y1.1/M1.1" 或 {x: X1, y: Y1.1, m: M1.1, intercept: ...}"""
        if isinstance(value, str):
            parts = value.split("/")
            if len(parts) != 3:
                raise UnknownScenarioError(value)
            return self.scenario(parts[0], parts[1], parts[2], n=n, seed=seed)
        try:
            return self.scenario(value["x"], value["y"], value["m"], n=value.get("n", n), seed=seed,
                                 intercept=value.get("intercept"))
        except KeyError as e:
            raise ConfigError(f"场景配置缺少字段 {e}: {value!r}")


@lru_cache(maxsize=None)
def default_registry() -> ScenarioRegistry:
    return ScenarioRegistry()
