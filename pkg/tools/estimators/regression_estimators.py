import logging
from dataclasses import replace
from typing import Optional, Sequence

import numpy as np

from tools.calibration.raking import CalibrationProblem, rake, raking_variance
from tools.common.errors import UsageError
from tools.estimators.records import CLOGOR, EstimateRecord, failed_records, records_from_fit
from tools.estimators.working_models import WorkingModelSpec
from tools.glm.glm_engine import CovarianceKind, coefficient_eif, fit_formula, marginalize, predict_mean
from tools.imputation.mice_engine import MiceConfig, mice_impute, rubin_pool
from tools.tabular.dataset import Dataset, complete_case_filter, design_matrix

_logger = logging.getLogger(__name__)

TRUNCATION = (0.01, 0.99)


def truncate_probabilities(p: np.ndarray, label: str, bounds=TRUNCATION) -> np.ndarray:
    low, high = bounds
    clipped = int(np.sum((p < low) | (p > high)))
    if clipped:
        _logger.warning("%s: %d 个概率被截断到 [%g, %g]", label, clipped, low, high)
    return np.clip(p, low, high)


def _complete_cases(d: Dataset, spec: WorkingModelSpec) -> Optional[Dataset]:
    cc = complete_case_filter(d, spec.indicator)
    return cc if cc.n_rows else None


def _fit_and_marginalize(estimator: str, d: Dataset, formula: Sequence[str], spec: WorkingModelSpec,
                         estimands: Sequence[str], w=None, replicate: int = 0, scenario: str = "",
                         sandwich: bool = False) -> list[EstimateRecord]:
    weights = np.ones(d.n_rows) if w is None else np.asarray(w, dtype=float)
    fit = fit_formula(d, formula, spec.response, weights, sandwich=sandwich)
    if not fit.converged:
        return failed_records(estimator, estimands, replicate, scenario)
    marginal = marginalize(fit, d, weights, spec.treatment)
    return records_from_fit(estimator, estimands, fit, marginal, spec.treatment, replicate, scenario)


def estimate_benchmark(ideal: Dataset, spec: WorkingModelSpec, estimands: Sequence[str], which: str = "census",
                       oracle_formula: Optional[Sequence[str]] = None, replicate: int = 0,
                       scenario: str = "") -> list[EstimateRecord]:
    """基准：在无缺失的完整数据上拟合分析模型（BNMK-C）或真实模型公式（BNMK-O）"""
    if ideal.has_missing():
        raise UsageError("基准估计需要无缺失的完整数据")
    if which == "census":
        return _fit_and_marginalize("BNMK-C", ideal, spec.outcome, spec, estimands,
                                    replicate=replicate, scenario=scenario)
    if which != "oracle":
        raise UsageError(f"未知基准类型: {which}")
    if not oracle_formula:
        raise UsageError("BNMK-O 需要真实模型公式")
    return _fit_and_marginalize("BNMK-O", ideal, oracle_formula, spec, estimands,
                                replicate=replicate, scenario=scenario)


def estimate_cc(d: Dataset, spec: WorkingModelSpec, estimands: Sequence[str], replicate: int = 0,
                scenario: str = "") -> list[EstimateRecord]:
    """完整观测分析：丢弃有缺失的观测，不加权"""
    cc = _complete_cases(d, spec)
    if cc is None:
        _logger.warning("没有完整观测，CC 无法估计")
        return failed_records("CC", estimands, replicate, scenario)
    return _fit_and_marginalize("CC", cc, spec.outcome, spec, estimands, replicate=replicate, scenario=scenario)


def estimate_cnfd(d: Dataset, spec: WorkingModelSpec, estimands: Sequence[str], replicate: int = 0,
                  scenario: str = "") -> list[EstimateRecord]:
    """去掉 W 的结局模型，使用全部观测"""
    return _fit_and_marginalize("CNFD", d, spec.confounded_outcome, spec, estimands,
                                replicate=replicate, scenario=scenario)


def observation_probabilities(d: Dataset, spec: WorkingModelSpec, truncate: bool = True) -> Optional[np.ndarray]:
    """完整观测概率 π̂ = P(R=1 | Y, X, Z)，拟合失败返回 None"""
    r = d.column(spec.indicator)
    if np.all(r == 1):
        return np.ones(d.n_rows)
    if np.all(r == 0):
        return None
    fit = fit_formula(d, spec.missingness, spec.indicator)
    if not fit.converged:
        _logger.warning("缺失模型未收敛")
        return None
    pi = predict_mean(fit, design_matrix(d, spec.missingness))
    return truncate_probabilities(pi, "完整观测概率") if truncate else pi


def estimate_ipw(d: Dataset, spec: WorkingModelSpec, estimands: Sequence[str], truncate: bool = True,
                 replicate: int = 0, scenario: str = "") -> list[EstimateRecord]:
    """逆概率加权：完整观测按 1/π̂ 加权，系数用三明治方差"""
    pi = observation_probabilities(d, spec, truncate)
    if pi is None:
        return failed_records("IPW", estimands, replicate, scenario)
    selected = d.column(spec.indicator) == 1
    cc = d.take(selected)
    return _fit_and_marginalize("IPW", cc, spec.outcome, spec, estimands, w=1.0 / pi[selected],
                                replicate=replicate, scenario=scenario, sandwich=True)


def gr_auxiliaries(d: Dataset, spec: WorkingModelSpec, config: MiceConfig) -> Optional[np.ndarray]:
    """raking 辅助变量：多重填补后在全体样本上重拟合分析模型，对系数影响函数取平均"""
    total = None
    imputations = mice_impute(d, config)
    for completed in imputations:
        fit = fit_formula(completed, spec.outcome, spec.response)
        if not fit.converged:
            _logger.warning("填补数据上的分析模型未收敛，无法构造辅助变量")
            return None
        eif = coefficient_eif(fit, design_matrix(completed, spec.outcome), completed.column(spec.response))
        total = eif if total is None else total + eif
    return total / len(imputations)


def estimate_gr(d: Dataset, spec: WorkingModelSpec, estimands: Sequence[str],
                mi_for_aux: Optional[MiceConfig] = None, aux: Optional[np.ndarray] = None,
                truncate: bool = True, replicate: int = 0, scenario: str = "") -> list[EstimateRecord]:
    """广义 raking：把 IPW 权重校准到辅助变量的全样本总量

    Args:
        mi_for_aux: 构造辅助变量的填补配置（缺省 10 次填补）
        aux: 直接给定的 n×k 辅助变量，给定时不做填补
    """
    pi = observation_probabilities(d, spec, truncate)
    if pi is None:
        return failed_records("GR", estimands, replicate, scenario)
    if aux is None:
        aux = gr_auxiliaries(d, spec, mi_for_aux or MiceConfig(m=10))
        if aux is None:
            return failed_records("GR", estimands, replicate, scenario)

    selected = d.column(spec.indicator) == 1
    base = 1.0 / pi[selected]
    calibrated = rake(CalibrationProblem(base, aux, selected))
    if not calibrated.converged:
        return failed_records("GR", estimands, replicate, scenario)

    cc = d.take(selected)
    weights = calibrated.final_weights(base)
    fit = fit_formula(cc, spec.outcome, spec.response, weights)
    if not fit.converged:
        return failed_records("GR", estimands, replicate, scenario)
    X = design_matrix(cc, spec.outcome)
    variance = raking_variance(fit, calibrated, np.asarray(aux)[selected], base, X, cc.column(spec.response))
    fit = replace(fit, covariance=variance.covariance, covariance_kind=CovarianceKind.RAKING)
    marginal = marginalize(fit, cc, weights, spec.treatment)
    return records_from_fit("GR", estimands, fit, marginal, spec.treatment, replicate, scenario)


def estimate_mice(d: Dataset, spec: WorkingModelSpec, estimands: Sequence[str],
                  config: Optional[MiceConfig] = None, replicate: int = 0,
                  scenario: str = "") -> list[EstimateRecord]:
    """多重填补：每个填补数据拟合并边际化，按 Rubin 规则合并，CI 用正态分位数"""
    config = config or MiceConfig()
    points = {estimand: [] for estimand in estimands}
    variances = {estimand: [] for estimand in estimands}
    for completed in mice_impute(d, config):
        fit = fit_formula(completed, spec.outcome, spec.response)
        if not fit.converged:
            return failed_records("MICE", estimands, replicate, scenario)
        marginal = marginalize(fit, completed, np.ones(completed.n_rows), spec.treatment)
        for estimand in estimands:
            if estimand == CLOGOR:
                point, se = fit.coefficient(spec.treatment), fit.standard_error(spec.treatment)
            elif estimand in marginal.undefined:
                return failed_records("MICE", estimands, replicate, scenario)
            else:
                point, se = marginal.estimand_values[estimand], marginal.ses[estimand]
            points[estimand].append(point)
            variances[estimand].append(se ** 2)

    records = []
    for estimand in estimands:
        pooled = rubin_pool(points[estimand], variances[estimand])
        records.append(EstimateRecord.from_point("MICE", estimand, pooled.point, pooled.se, replicate, scenario,
                                                 df=pooled.df))
    return records
