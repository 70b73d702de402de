import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from tools.common.errors import ConfigError
from tools.synthetic.scenarios import CovariateSpec, MissingSpec, OutcomeSpec, ScenarioSpec
from tools.tabular.dataset import Dataset, binary, continuous

_logger = logging.getLogger(__name__)

TREATMENT = "X"
OUTCOME = "Y"
INDICATOR = "R"
CONFOUNDERS = ("W_s", "W_w")
ANALYSIS_COLUMNS = ("Y", "X", "Z_s", "Z_w", "R", "W_s", "W_w")
IDEAL_COLUMNS = ("Y", "X", "Z_s", "Z_w", "R", "W_s", "W_w", "U_s", "U_w")


@dataclass(frozen=True, eq=False)
class ScenarioDraw:
    """一次生成：ideal 为无缺失的完整数据，observed 为交给估计量的分析数据"""
    ideal: Dataset
    observed: Dataset


def generate_covariates(n: int, spec: CovariateSpec, rng: np.random.Generator) -> Dataset:
    if n < 1:
        raise ConfigError(f"样本量至少为 1: {n}")
    draws = rng.standard_normal((n, len(spec.variables))) @ spec.factor.T
    return Dataset(tuple(continuous(name) for name in spec.variables), draws, np.zeros(draws.shape, dtype=bool))


def assign_treatment(d: Dataset, quantile: float = 0.4, latent: str = "X_latent") -> Dataset:
    """X=1 当且仅当潜变量严格小于样本 40% 分位数（type-7）"""
    values = d.column(latent)
    threshold = np.quantile(values, quantile)
    return d.with_column(binary(TREATMENT), (values < threshold).astype(float))


def generate_outcome(d: Dataset, spec: OutcomeSpec, rng: np.random.Generator) -> Dataset:
    p = spec.probability(d)
    y = (rng.random(d.n_rows) < p).astype(float)
    return d.with_column(binary(OUTCOME), y)


def missing_probability(d: Dataset, spec: MissingSpec) -> np.ndarray:
    """P(W 缺失)"""
    return spec.probability(d)


def draw_indicator(d: Dataset, spec: MissingSpec, rng: np.random.Generator) -> Dataset:
    """按缺失模型生成 R（R=1 表示 W 被观测），不做遮盖"""
    missing = rng.random(d.n_rows) < missing_probability(d, spec)
    return d.with_column(binary(INDICATOR), (~missing).astype(float))


def mask_confounders(d: Dataset) -> Dataset:
    """在 R=0 的行遮盖 W，只保留分析列"""
    observed = d.column(INDICATOR) == 1
    out = d.select(ANALYSIS_COLUMNS)
    for name in CONFOUNDERS:
        out = out.with_column(out.spec(name), out.column(name), missing=~observed)
    return out


def generate_missingness(d: Dataset, spec: MissingSpec, rng: np.random.Generator) -> Dataset:
    """生成 R 并遮盖 W；U、A 与潜变量不出现在分析数据中"""
    return mask_confounders(draw_indicator(d, spec, rng))


def generate_ideal(spec: ScenarioSpec, rng: np.random.Generator, n: Optional[int] = None) -> Dataset:
    """生成含 R 但未遮盖的完整数据"""
    n = spec.n if n is None else n
    d = generate_covariates(n, spec.covariates, rng)
    d = assign_treatment(d, spec.treated_quantile, spec.covariates.latent)
    d = generate_outcome(d, spec.outcome, rng)
    return draw_indicator(d, spec.missing, rng)


def generate_scenario(spec: ScenarioSpec, rng: np.random.Generator, n: Optional[int] = None) -> ScenarioDraw:
    full = generate_ideal(spec, rng, n)
    _logger.debug("场景 %s: n=%d，缺失比例 %.3f", spec.id, full.n_rows, 1.0 - full.column(INDICATOR).mean())
    return ScenarioDraw(ideal=full.select(IDEAL_COLUMNS), observed=mask_confounders(full))
