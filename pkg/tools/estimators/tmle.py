import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import expit, logit

from tools.common.errors import LearnerError, UsageError
from tools.common.rng import derive_seed
from tools.estimators.records import CLOGOR, EstimateRecord, MARGINAL_ESTIMANDS, failed_records
from tools.estimators.regression_estimators import TRUNCATION, truncate_probabilities
from tools.estimators.working_models import WorkingModelSpec
from tools.glm.glm_engine import Family, GlmFit, contrast_estimands, fit_formula, fit_glm, predict_mean
from tools.learners.learners import DEFAULT_LIBRARY, RARE_OUTCOME_LIBRARY, LearnerSpec
from tools.learners.super_learner import SuperLearnerFit, fit_super_learner
from tools.tabular.dataset import Dataset, continuous, design_matrix

_logger = logging.getLogger(__name__)

MISSINGNESS_ONLY = "missingness-only"
ALL_THREE = "all-three"
AUGMENT_COLUMN = "Q_cnfd"


@dataclass(frozen=True)
class TmleConfig:
    """IPCW-TMLE 变体配置

    sl_scope 为 missingness-only 时只有 π_n 用超级学习器，Q_n、g_n 用 GLM；
    all-three 时三个冗余模型都用超级学习器。
    """
    sl_scope: str = MISSINGNESS_ONLY
    augment: bool = False
    rare_library: bool = False
    folds: int = 10
    truncation: tuple[float, float] = TRUNCATION
    library: tuple[LearnerSpec, ...] = field(default=DEFAULT_LIBRARY)
    n_jobs: int = 1

    def __post_init__(self):
        if self.sl_scope not in (MISSINGNESS_ONLY, ALL_THREE):
            raise UsageError(f"未知的超级学习器范围: {self.sl_scope}")
        low, high = self.truncation
        if not 0.0 < low < high < 1.0:
            raise UsageError(f"截断区间无效: {self.truncation}")

    @property
    def outcome_library(self) -> tuple[LearnerSpec, ...]:
        return RARE_OUTCOME_LIBRARY if self.rare_library else self.library


TMLE_CONFIGS = {
    "T-M": TmleConfig(sl_scope=MISSINGNESS_ONLY),
    "T-MTO": TmleConfig(sl_scope=ALL_THREE),
    "T-M-a": TmleConfig(sl_scope=MISSINGNESS_ONLY, augment=True),
    "T-MTO-a": TmleConfig(sl_scope=ALL_THREE, augment=True),
    "T-MTO-r": TmleConfig(sl_scope=ALL_THREE, rare_library=True),
}


@dataclass(frozen=True, eq=False)
class _Nuisance:
    formula: tuple[str, ...]
    model: Union[GlmFit, SuperLearnerFit]

    def predict(self, d: Dataset) -> np.ndarray:
        X = design_matrix(d, self.formula)
        if isinstance(self.model, SuperLearnerFit):
            return self.model.predict(X[:, 1:])
        return predict_mean(self.model, X)


def _fit_nuisance(d: Dataset, formula: Sequence[str], response: str, w: np.ndarray, use_sl: bool,
                  library: Sequence[LearnerSpec], config: TmleConfig, seed: int) -> _Nuisance:
    formula = tuple(formula)
    if use_sl:
        X = design_matrix(d, formula)[:, 1:]
        model = fit_super_learner(library, X, d.column(response), w, folds=config.folds, seed=seed,
                                  n_jobs=config.n_jobs)
        if model.dropped:
            _logger.warning("%s 的超级学习器剔除了: %s", response, ", ".join(model.dropped))
    else:
        model = fit_formula(d, formula, response, w)
        if not model.converged:
            raise LearnerError(f"{response} 的 GLM 冗余模型未收敛")
    return _Nuisance(formula, model)


@dataclass(frozen=True, eq=False)
class Fluctuation:
    """沿 (H1, H0) 方向的 logistic 波动；epsilon = (ε1, ε0)"""
    epsilon: np.ndarray
    score: np.ndarray
    converged: bool

    def targeted(self, q: np.ndarray, g: np.ndarray, treated: bool) -> np.ndarray:
        """反事实 Q*(a)：a=1 时 logit Q + ε1/g1，a=0 时 logit Q − ε0/g0"""
        if treated:
            return expit(logit(q) + self.epsilon[0] / g)
        return expit(logit(q) - self.epsilon[1] / g)


def clever_covariates(x: np.ndarray, g1: np.ndarray) -> np.ndarray:
    return np.column_stack([x / g1, -(1.0 - x) / (1.0 - g1)])


def fluctuate(y, x, q1, q0, g1, w) -> Fluctuation:
    """无截距 logistic 回归 Y ~ H1 + H0，偏移 logit Q_n(X)，权重 R/π_n（只含完整观测）

    Args:
        y: 结局
        x: 处理
        q1, q0: 初始 Q_n(1, ·)、Q_n(0, ·)
        g1: P(X=1 | ·)，已截断
        w: 1/π_n

    Returns:
        Fluctuation；score 为更新后各方向加权得分的均值
    """
    y, x = np.asarray(y, dtype=float), np.asarray(x, dtype=float)
    q1, q0, g1, w = (np.asarray(v, dtype=float) for v in (q1, q0, g1, w))
    q_observed = np.where(x == 1, q1, q0)
    H = clever_covariates(x, g1)
    fit = fit_glm(H, y, w, Family.BINOMIAL, offset=logit(q_observed))
    if not fit.converged:
        _logger.warning("TMLE 波动模型未收敛")
        return Fluctuation(np.full(2, np.nan), np.full(2, np.nan), False)
    updated = expit(logit(q_observed) + H @ fit.coefficients)
    score = (w * (y - updated)) @ H / w.sum()
    _logger.debug("TMLE 波动 ε=%s，得分均值 %s", fit.coefficients, score)
    return Fluctuation(fit.coefficients, score, True)


def _augment(d: Dataset, spec: WorkingModelSpec) -> tuple[Dataset, GlmFit]:
    """追加 CNFD 模型给出的 P(Y | X, Z) 作为协变量"""
    fit = fit_formula(d, spec.confounded_outcome, spec.response)
    if not fit.converged:
        raise LearnerError("增广用的 CNFD 模型未收敛")
    p = predict_mean(fit, design_matrix(d, spec.confounded_outcome))
    return d.with_column(continuous(AUGMENT_COLUMN), p), fit


def _counterfactual(d: Dataset, spec: WorkingModelSpec, a: float, augment_fit: Optional[GlmFit]) -> Dataset:
    out = d.replace_values(spec.treatment, np.full(d.n_rows, a))
    if augment_fit is not None:
        p = predict_mean(augment_fit, design_matrix(out, spec.confounded_outcome))
        out = out.replace_values(AUGMENT_COLUMN, p)
    return out


def estimate_tmle(d: Dataset, spec: WorkingModelSpec, estimands: Sequence[str],
                  config: Optional[TmleConfig] = None, rng: Optional[np.random.Generator] = None,
                  estimator: str = "T-M", replicate: int = 0, scenario: str = "") -> list[EstimateRecord]:
    """IPCW-TMLE：超级学习器/GLM 冗余模型 + 波动 + 影响曲线方差

    只支持边际估计目标；clogOR 需要边际结构模型，不在支持范围内。
    """
    config = config or TMLE_CONFIGS.get(estimator, TmleConfig())
    if CLOGOR in estimands:
        raise UsageError(f"{estimator} 不支持条件估计目标 {CLOGOR}")
    unknown = [e for e in estimands if e not in MARGINAL_ESTIMANDS]
    if unknown:
        raise UsageError(f"{estimator} 只支持边际估计目标: {unknown}")
    rng = rng if rng is not None else np.random.default_rng(0)
    use_sl = config.sl_scope == ALL_THREE

    try:
        augment_fit = None
        work = d
        extra = ()
        if config.augment:
            work, augment_fit = _augment(d, spec)
            extra = (AUGMENT_COLUMN,)

        r = work.column(spec.indicator)
        if np.all(r == 0):
            return failed_records(estimator, estimands, replicate, scenario)
        if np.all(r == 1):
            pi = np.ones(work.n_rows)
        else:
            # π_n 始终用超级学习器
            observation = _fit_nuisance(work, spec.missingness + extra, spec.indicator, np.ones(work.n_rows),
                                        True, config.library, config, derive_seed(rng))
            pi = truncate_probabilities(observation.predict(work), "π_n", config.truncation)

        selected = r == 1
        cc = work.take(selected)
        w = 1.0 / pi[selected]
        outcome = _fit_nuisance(cc, spec.outcome + extra, spec.response, w, use_sl,
                                config.outcome_library, config, derive_seed(rng))
        propensity = _fit_nuisance(cc, spec.propensity, spec.treatment, w, use_sl,
                                   config.library, config, derive_seed(rng))
    except LearnerError as e:
        _logger.warning("%s 冗余模型拟合失败: %s", estimator, e)
        return failed_records(estimator, estimands, replicate, scenario)

    g1 = truncate_probabilities(propensity.predict(cc), "g_n", config.truncation)
    q1 = outcome.predict(_counterfactual(cc, spec, 1.0, augment_fit))
    q0 = outcome.predict(_counterfactual(cc, spec, 0.0, augment_fit))
    x, y = cc.column(spec.treatment), cc.column(spec.response)

    fluctuation = fluctuate(y, x, q1, q0, g1, w)
    if not fluctuation.converged:
        return failed_records(estimator, estimands, replicate, scenario)
    q1_star = fluctuation.targeted(q1, g1, treated=True)
    q0_star = fluctuation.targeted(q0, 1.0 - g1, treated=False)

    normalized = w / w.sum()
    mu1, mu0 = float(normalized @ q1_star), float(normalized @ q0_star)

    # 影响曲线：缺失行只贡献 −μ_a
    n = work.n_rows
    ic1, ic0 = np.full(n, -mu1), np.full(n, -mu0)
    ic1[selected] += w * (x / g1 * (y - q1_star) + q1_star)
    ic0[selected] += w * ((1.0 - x) / (1.0 - g1) * (y - q0_star) + q0_star)
    cov2 = np.cov(np.vstack([ic1, ic0])) / n

    marginal = contrast_estimands(mu1, mu0, cov2)
    records = []
    for estimand in estimands:
        if estimand in marginal.undefined:
            records.append(EstimateRecord.failed(estimator, estimand, replicate, scenario))
        else:
            records.append(EstimateRecord.from_point(estimator, estimand, marginal.estimand_values[estimand],
                                                     marginal.ses[estimand], replicate, scenario))
    return records
