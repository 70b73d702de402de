import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Mapping, Optional, Union

import numpy as np

from tools.common.errors import UsageError
from tools.common.rng import PURPOSE_COHORT, scenario_key, stream
from tools.estimators.working_models import PLASMODE_WORKING_MODEL, SYNTHETIC_WORKING_MODEL, WorkingModelSpec
from tools.plasmode.plasmode_dgm import (
    PlasmodeModels, PlasmodeScenario, generate_plasmode_draw, load_plasmode_models, simulate_plasmode_ideal,
    synth_cohort,
)
from tools.synthetic.generator import ScenarioDraw, TREATMENT, generate_ideal, generate_scenario
from tools.synthetic.scenarios import ScenarioRegistry, ScenarioSpec, default_registry
from tools.tabular.dataset import Dataset, formula_columns

_logger = logging.getLogger(__name__)

COHORT_KEY = "plasmode-cohort"


@lru_cache(maxsize=4)
def stand_in_cohort(seed: int, size: int) -> Dataset:
    """替身队列只由 (seed, size) 决定，两个随访时长共用"""
    _logger.info("生成替身队列: seed=%d, size=%d", seed, size)
    return synth_cohort(size, stream(seed, scenario_key(COHORT_KEY), PURPOSE_COHORT))


class ScenarioSource:
    """把合成场景与 plasmode 场景统一为：生成一次数据、生成完整数据、给出真实结局模型"""
    id: str
    kind: str
    working: WorkingModelSpec
    n: int

    def draw(self, rng: np.random.Generator, n: Optional[int] = None) -> ScenarioDraw:
        raise NotImplementedError

    def ideal(self, rng: np.random.Generator, n: int) -> Dataset:
        raise NotImplementedError

    @property
    def oracle_formula(self) -> tuple[str, ...]:
        raise NotImplementedError

    def oracle_coefficients(self) -> np.ndarray:
        raise NotImplementedError

    def true_probability(self, d: Dataset) -> np.ndarray:
        raise NotImplementedError

    def oracle_clogor(self) -> float:
        """真实模型中处理只以主效应出现时，条件对数 OR 即其系数"""
        if any(TREATMENT in formula_columns([term]) and term != TREATMENT for term in self.oracle_formula):
            raise UsageError(f"场景 {self.id} 的条件 OR 不由单一系数定义，只支持 census 真值")
        return float(self.oracle_coefficients()[1 + self.oracle_formula.index(TREATMENT)])


@dataclass(frozen=True, eq=False)
class SyntheticSource(ScenarioSource):
    spec: ScenarioSpec
    kind: str = "synthetic"
    working: WorkingModelSpec = SYNTHETIC_WORKING_MODEL

    @property
    def id(self) -> str:
        return self.spec.id

    @property
    def n(self) -> int:
        return self.spec.n

    def draw(self, rng, n=None) -> ScenarioDraw:
        return generate_scenario(self.spec, rng, n)

    def ideal(self, rng, n) -> Dataset:
        return generate_ideal(self.spec, rng, n)

    @property
    def oracle_formula(self) -> tuple[str, ...]:
        return tuple(self.spec.outcome.formula)

    def oracle_coefficients(self) -> np.ndarray:
        return self.spec.outcome.coefficients

    def true_probability(self, d: Dataset) -> np.ndarray:
        return self.spec.outcome.probability(d)


@dataclass(frozen=True, eq=False)
class PlasmodeSource(ScenarioSource):
    scenario: PlasmodeScenario
    models: PlasmodeModels
    kind: str = "plasmode"
    working: WorkingModelSpec = PLASMODE_WORKING_MODEL

    @property
    def id(self) -> str:
        return self.scenario.id

    @property
    def n(self) -> int:
        return self.scenario.n

    @property
    def cohort(self) -> Dataset:
        return stand_in_cohort(self.scenario.seed, self.scenario.cohort_size)

    def draw(self, rng, n=None) -> ScenarioDraw:
        return generate_plasmode_draw(self.scenario, self.cohort, self.models, rng, n)

    def ideal(self, rng, n) -> Dataset:
        return simulate_plasmode_ideal(self.cohort, self.models, self.scenario.outcome, n, rng)

    @property
    def outcome_model(self):
        return self.models.outcome(self.scenario.outcome)

    @property
    def oracle_formula(self) -> tuple[str, ...]:
        return self.outcome_model.formula

    def oracle_coefficients(self) -> np.ndarray:
        return self.outcome_model.coefficients

    def true_probability(self, d: Dataset) -> np.ndarray:
        return self.outcome_model.probability(d)

    def oracle_clogor(self) -> float:
        return self.outcome_model.coefficient(TREATMENT)


def resolve_source(value: Union[str, Mapping[str, Any]], n: int = 2000, seed: int = 0,
                   registry: Optional[ScenarioRegistry] = None,
                   models: Optional[PlasmodeModels] = None) -> ScenarioSource:
    """场景ID（"X1/Y1.1/M1.1"、"plasmode-1yr"）或场景表 → ScenarioSource

    场景表的写法: {x: X1, y: Y1.1, m: M1.1, n: 500} 或 {plasmode: 1yr, n: 2000, cohort_size: 50337}
    """
    if isinstance(value, str) and value.startswith("plasmode-"):
        return PlasmodeSource(PlasmodeScenario.parse(value, n=n, seed=seed), models or load_plasmode_models())
    if not isinstance(value, str) and "plasmode" in value:
        outcome = str(value["plasmode"]).removeprefix("plasmode-")
        scenario = PlasmodeScenario(outcome, n=int(value.get("n", n)), seed=seed,
                                    cohort_size=int(value.get("cohort_size", PlasmodeScenario.cohort_size)))
        return PlasmodeSource(scenario, models or load_plasmode_models())
    registry = registry or default_registry()
    return SyntheticSource(registry.parse(value, n=n, seed=seed))
