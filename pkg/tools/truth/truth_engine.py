import logging
import os
from dataclasses import asdict, dataclass
from typing import Optional, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from tools.common.errors import ConfigError, SchemaError, TableParseError, UsageError
from tools.common.rng import PURPOSE_TRUTH, scenario_key, stream
from tools.estimators.records import CLOGOR, validate_estimands
from tools.glm.glm_engine import contrast_estimands, fit_formula, marginalize
from tools.simulate.sources import ScenarioSource, resolve_source
from tools.synthetic.generator import TREATMENT
from tools.tabular.dataset import Dataset

_logger = logging.getLogger(__name__)

ORACLE = "oracle"
CENSUS = "census"
FLAVORS = (ORACLE, CENSUS)
MIN_TRUTH_DRAWS = 100_000
DEFAULT_BATCHES = 8

CACHE_FIELDS = ("scenario", "estimand", "flavor", "draws", "seed", "value", "mc_draws", "mc_se")


@dataclass(frozen=True)
class TruthValue:
    """真值；系数直接读出的精确值 mc_draws=0、mc_se=0"""
    scenario: str
    estimand: str
    flavor: str
    value: float
    mc_draws: int
    mc_se: float

    @property
    def exact(self) -> bool:
        return self.mc_draws == 0


def _batch_sizes(draws: int, batches: int) -> list[int]:
    base, extra = divmod(draws, batches)
    return [base + (1 if b < extra else 0) for b in range(batches)]


def _oracle_means(source: ScenarioSource, ideal: Dataset) -> tuple[float, float]:
    """真实结局模型下的反事实平均概率"""
    ones = np.ones(ideal.n_rows)
    p1 = source.true_probability(ideal.replace_values(TREATMENT, ones))
    p0 = source.true_probability(ideal.replace_values(TREATMENT, 0.0 * ones))
    return float(np.mean(p1)), float(np.mean(p0))


def _census_value(source: ScenarioSource, ideal: Dataset, estimand: str) -> float:
    working = source.working
    fit = fit_formula(ideal, working.outcome, working.response)
    if not fit.converged:
        raise UsageError(f"场景 {source.id} 的 census 拟合未收敛")
    if estimand == CLOGOR:
        return fit.coefficient(working.treatment)
    marginal = marginalize(fit, ideal, np.ones(ideal.n_rows), working.treatment)
    return marginal.estimand_values[estimand]


def _batch(source: ScenarioSource, seed: int, batch: int, size: int) -> Dataset:
    rng = stream(seed, scenario_key(source.id), batch, PURPOSE_TRUTH)
    return source.ideal(rng, size)


def _oracle_batch(source: ScenarioSource, seed: int, batch: int, size: int) -> tuple[float, float]:
    return _oracle_means(source, _batch(source, seed, batch, size))


def compute_truth(scenario: Union[str, ScenarioSource], estimand: str, flavor: str = ORACLE,
                  draws: int = 2_000_000, seed: int = 0, batches: int = DEFAULT_BATCHES,
                  n_jobs: int = 1, cache: Optional["TruthCache"] = None) -> TruthValue:
    """蒙特卡罗真值

    Args:
        scenario: 场景ID或 ScenarioSource
        estimand: 估计目标
        flavor: oracle（真实模型）或 census（分析模型在完整数据上的拟合）
        draws: 完整数据行数，按固定顺序分批生成
        seed: 真值随机流的基础种子
        batches: 批数；mc_se 为批间标准差除以 √批数（2 批即对半拆分）

    Returns:
        TruthValue
    """
    validate_estimands([estimand])
    if flavor not in FLAVORS:
        raise ConfigError(f"未知真值类型: {flavor}")
    if draws < MIN_TRUTH_DRAWS:
        raise ConfigError(f"真值抽样数至少为 {MIN_TRUTH_DRAWS}: {draws}")
    if batches < 2:
        raise ConfigError(f"批数至少为 2: {batches}")
    source = scenario if isinstance(scenario, ScenarioSource) else resolve_source(scenario, seed=seed)

    if cache is not None:
        hit = cache.get(source.id, estimand, flavor, draws, seed)
        if hit is not None:
            return hit

    if flavor == ORACLE and estimand == CLOGOR:
        truth = TruthValue(source.id, estimand, flavor, source.oracle_clogor(), 0, 0.0)
    else:
        sizes = _batch_sizes(draws, batches)
        _logger.info("计算真值 %s %s/%s: %d 行，%d 批", source.id, estimand, flavor, draws, batches)
        if flavor == ORACLE:
            means = Parallel(n_jobs=n_jobs)(
                delayed(_oracle_batch)(source, seed, b, size) for b, size in enumerate(sizes)
            )
            per_batch = np.array([contrast_estimands(m1, m0, np.zeros((2, 2))).estimand_values[estimand]
                                  for m1, m0 in means])
            shares = np.asarray(sizes, dtype=float) / draws
            mu1 = float(shares @ np.array([m[0] for m in means]))
            mu0 = float(shares @ np.array([m[1] for m in means]))
            value = contrast_estimands(mu1, mu0, np.zeros((2, 2))).estimand_values[estimand]
        else:
            data = Parallel(n_jobs=n_jobs)(
                delayed(_batch)(source, seed, b, size) for b, size in enumerate(sizes)
            )
            per_batch = np.array([_census_value(source, d, estimand) for d in data])
            value = _census_value(source, Dataset.concat(data), estimand)
        if not np.isfinite(value):
            raise UsageError(f"场景 {source.id} 的 {estimand} 真值无定义")
        mc_se = float(np.std(per_batch, ddof=1) / np.sqrt(batches))
        truth = TruthValue(source.id, estimand, flavor, float(value), int(draws), mc_se)

    if cache is not None:
        cache.put(truth, draws, seed)
    return truth


class TruthCache:
    """真值缓存表，键为 (场景, 估计目标, 类型, 抽样数, 种子)"""

    def __init__(self, path: str):
        self.path = path
        self._entries: dict[tuple, TruthValue] = {}
        if os.path.exists(path):
            self._load()

    @staticmethod
    def _key(scenario: str, estimand: str, flavor: str, draws: int, seed: int) -> tuple:
        return str(scenario), str(estimand), str(flavor), int(draws), int(seed)

    def _load(self):
        try:
            frame = pd.read_csv(self.path, dtype={"scenario": str, "estimand": str, "flavor": str})
        except pd.errors.EmptyDataError:
            return
        except (OSError, pd.errors.ParserError) as e:
            raise TableParseError(f"无法读取真值缓存 {self.path}: {e}")
        missing = [name for name in CACHE_FIELDS if name not in frame.columns]
        if missing:
            raise SchemaError(f"真值缓存缺少列: {missing}")
        for row in frame.itertuples(index=False):
            truth = TruthValue(row.scenario, row.estimand, row.flavor, float(row.value), int(row.mc_draws),
                               float(row.mc_se))
            self._entries[self._key(row.scenario, row.estimand, row.flavor, row.draws, row.seed)] = truth

    def get(self, scenario: str, estimand: str, flavor: str, draws: int, seed: int) -> Optional[TruthValue]:
        return self._entries.get(self._key(scenario, estimand, flavor, draws, seed))

    def put(self, truth: TruthValue, draws: int, seed: int) -> None:
        self._entries[self._key(truth.scenario, truth.estimand, truth.flavor, draws, seed)] = truth
        self.save()

    def save(self) -> None:
        rows = [dict(zip(("scenario", "estimand", "flavor", "draws", "seed"), key), **{
            name: value for name, value in asdict(truth).items() if name in ("value", "mc_draws", "mc_se")
        }) for key, truth in sorted(self._entries.items())]
        directory = os.path.dirname(self.path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        pd.DataFrame(rows, columns=list(CACHE_FIELDS)).to_csv(
            self.path, index=False, lineterminator="\n", float_format="%.17g")

    def __len__(self) -> int:
        return len(self._entries)
