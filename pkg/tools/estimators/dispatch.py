import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np
from numpy.linalg import LinAlgError

from tools.common.errors import SimulationException, UsageError
from tools.common.rng import derive_seed
from tools.estimators.records import EstimateRecord, failed_records
from tools.estimators.regression_estimators import (
    estimate_benchmark, estimate_cc, estimate_cnfd, estimate_gr, estimate_ipw, estimate_mice,
)
from tools.estimators.tmle import TMLE_CONFIGS, TmleConfig, estimate_tmle
from tools.estimators.working_models import WorkingModelSpec
from tools.imputation.mice_engine import MiceConfig
from tools.synthetic.generator import ScenarioDraw

_logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EstimatorSettings:
    """各估计量的可调参数；随机种子在调用时从重复内的随机流派生"""
    mice: MiceConfig = field(default_factory=MiceConfig)
    gr_mice: MiceConfig = field(default_factory=lambda: MiceConfig(m=10))
    tmle: Mapping[str, TmleConfig] = field(default_factory=lambda: dict(TMLE_CONFIGS))
    truncate: bool = True


def run_estimator(estimator_id: str, draw: ScenarioDraw, working: WorkingModelSpec, estimands: Sequence[str],
                  rng: np.random.Generator, oracle_formula: Optional[Sequence[str]] = None,
                  settings: Optional[EstimatorSettings] = None, replicate: int = 0,
                  scenario: str = "") -> list[EstimateRecord]:
    """按估计量ID分派；数值失败记为未收敛记录，不中断整个运行"""
    settings = settings or EstimatorSettings()
    d = draw.observed
    try:
        if estimator_id == "BNMK-C":
            return estimate_benchmark(draw.ideal, working, estimands, "census",
                                      replicate=replicate, scenario=scenario)
        if estimator_id == "BNMK-O":
            return estimate_benchmark(draw.ideal, working, estimands, "oracle", oracle_formula,
                                      replicate=replicate, scenario=scenario)
        if estimator_id == "CC":
            return estimate_cc(d, working, estimands, replicate, scenario)
        if estimator_id == "CNFD":
            return estimate_cnfd(d, working, estimands, replicate, scenario)
        if estimator_id == "IPW":
            return estimate_ipw(d, working, estimands, settings.truncate, replicate, scenario)
        if estimator_id == "GR":
            config = replace(settings.gr_mice, seed=derive_seed(rng))
            return estimate_gr(d, working, estimands, mi_for_aux=config, truncate=settings.truncate,
                               replicate=replicate, scenario=scenario)
        if estimator_id == "MICE":
            config = replace(settings.mice, seed=derive_seed(rng))
            return estimate_mice(d, working, estimands, config, replicate, scenario)
        if estimator_id in settings.tmle:
            return estimate_tmle(d, working, estimands, settings.tmle[estimator_id], rng,
                                 estimator_id, replicate, scenario)
    except (SimulationException, LinAlgError) as e:
        _logger.warning("场景 %s 重复 %d: %s 失败: %s", scenario, replicate, estimator_id, e)
        return failed_records(estimator_id, estimands, replicate, scenario)
    raise UsageError(f"未知估计量: {estimator_id}")
