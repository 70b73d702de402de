import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np
import statsmodels.api as sm
from scipy import linalg
from scipy.special import expit, logit
from statsmodels.tools.sm_exceptions import PerfectSeparationError

from tools.common.errors import DimensionError, SchemaError, UsageError
from tools.tabular.dataset import Dataset, design_labels, design_matrix

_logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 50
DIVERGENCE_BOUND = 25.0


class Family(str, Enum):
    BINOMIAL = "binomial-logit"
    GAUSSIAN = "gaussian-identity"
    POISSON = "poisson-log"

    def inverse_link(self, eta: np.ndarray) -> np.ndarray:
        if self is Family.BINOMIAL:
            return expit(eta)
        if self is Family.POISSON:
            return np.exp(np.clip(eta, -700.0, 700.0))
        return eta

    def statsmodels(self) -> sm.families.Family:
        """对应的 statsmodels 分布族（均为典则连接）"""
        if self is Family.BINOMIAL:
            return sm.families.Binomial()
        if self is Family.POISSON:
            return sm.families.Poisson()
        return sm.families.Gaussian()

    def variance(self, mu: np.ndarray) -> np.ndarray:
        """方差函数；三个族都是典则连接，dμ/dη 与之相同"""
        if self is Family.BINOMIAL:
            return mu * (1.0 - mu)
        if self is Family.POISSON:
            return mu
        return np.ones_like(mu)


class CovarianceKind(str, Enum):
    MODEL_BASED = "model-based"
    SANDWICH = "sandwich"
    RAKING = "raking-linearized"


@dataclass(frozen=True, eq=False)
class GlmFit:
    """加权广义线性模型的拟合结果"""
    family: Family
    coefficients: np.ndarray
    covariance: np.ndarray
    converged: bool
    deviance: float
    n_used: int
    weight_sum: float
    covariance_kind: CovarianceKind = CovarianceKind.MODEL_BASED
    iterations: int = 0
    # (X'WVX)^{-1}，不含离散参数；影响函数与模型方差共用
    information_inverse: Optional[np.ndarray] = None
    dispersion: float = 1.0
    labels: tuple[str, ...] = ()
    formula: tuple[str, ...] = ()

    @property
    def p(self) -> int:
        return self.coefficients.shape[0]

    def coefficient(self, label: str) -> float:
        try:
            return float(self.coefficients[self.labels.index(label)])
        except ValueError:
            raise SchemaError(f"模型中不存在系数: {label}")

    def standard_error(self, label: str) -> float:
        j = self.labels.index(label)
        return float(np.sqrt(max(self.covariance[j, j], 0.0)))


@dataclass(frozen=True, eq=False)
class MarginalResult:
    mu1: float
    mu0: float
    estimand_values: dict[str, float]
    ses: dict[str, float]
    undefined: frozenset[str] = field(default_factory=frozenset)
    # (mu1, mu0) 的 2×2 协方差
    covariance: Optional[np.ndarray] = None


def _validate_inputs(X, y, w, offset):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    y = np.asarray(y, dtype=float).reshape(-1)
    n = X.shape[0]
    if y.shape[0] != n:
        raise DimensionError(f"响应长度 {y.shape[0]} 与设计矩阵行数 {n} 不一致")
    w = np.ones(n) if w is None else np.asarray(w, dtype=float).reshape(-1)
    if w.shape[0] != n:
        raise DimensionError(f"权重长度 {w.shape[0]} 与设计矩阵行数 {n} 不一致")
    offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=float).reshape(-1)
    if offset.shape[0] != n:
        raise DimensionError(f"偏移量长度 {offset.shape[0]} 与设计矩阵行数 {n} 不一致")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise SchemaError("权重必须为有限的非负数")
    return X, y, w, offset


def _failed_fit(family, p, n_used, weight_sum, iterations, labels, formula, deviance=np.nan) -> GlmFit:
    return GlmFit(
        family=family,
        coefficients=np.full(p, np.nan),
        covariance=np.full((p, p), np.nan),
        converged=False,
        deviance=float(deviance),
        n_used=n_used,
        weight_sum=weight_sum,
        iterations=iterations,
        labels=tuple(labels),
        formula=tuple(formula),
    )


def fit_glm(X, y, w=None, family: Family = Family.BINOMIAL, offset=None,
            tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
            divergence_bound: float = DIVERGENCE_BOUND, sandwich: bool = False,
            labels: Sequence[str] = (), formula: Sequence[str] = ()) -> GlmFit:
    """加权广义线性模型，IRLS 由 statsmodels GLM 完成

    Args:
        X: n×p 设计矩阵
        y: 响应向量（binomial 时取 0/1）
        w: 非负权重，缺省为 1
        family: 分布族
        offset: 线性预测的偏移量
        sandwich: 为 True 时协方差使用稳健三明治估计

    Returns:
        GlmFit；信息矩阵奇异、发散或迭代不收敛时 converged=False，不抛异常
    """
    family = Family(family)
    X, y, w, offset = _validate_inputs(X, y, w, offset)
    n, p = X.shape
    used = w > 0
    n_used = int(used.sum())
    weight_sum = float(w.sum())
    if weight_sum <= 0:
        raise SchemaError("权重不能全为零")
    if family is Family.BINOMIAL and not np.isin(y[used], (0.0, 1.0)).all():
        raise SchemaError("二项族的响应只能取 0/1")

    Xu, yu, wu, ou = X[used], y[used], w[used], offset[used]
    if family is Family.BINOMIAL and (yu.min() == yu.max()):
        # 响应恒定：截距发散，完全分离
        _logger.warning("响应恒为 %s，二项模型完全分离", yu[0])
        return _failed_fit(family, p, n_used, weight_sum, 0, labels, formula)

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            result = sm.GLM(yu, Xu, family=family.statsmodels(), freq_weights=wu, offset=ou).fit(
                method="IRLS", tol=tol, maxiter=max_iter)
        except (PerfectSeparationError, np.linalg.LinAlgError, ValueError) as e:
            _logger.warning("GLM 拟合失败: %s", e)
            return _failed_fit(family, p, n_used, weight_sum, max_iter, labels, formula)
    for warning in caught:
        _logger.debug("statsmodels: %s", warning.message)

    beta = np.asarray(result.params, dtype=float)
    mu = np.asarray(result.fittedvalues, dtype=float)
    iteration = int(result.fit_history.get("iteration", max_iter))
    converged = bool(result.converged) and np.isfinite(result.deviance)

    v = family.variance(mu)
    information = Xu.T @ ((wu * v)[:, None] * Xu)
    try:
        information_inverse = linalg.inv(information)
    except (linalg.LinAlgError, ValueError):
        return _failed_fit(family, p, n_used, weight_sum, iteration, labels, formula)
    if np.linalg.cond(information) > 1.0 / np.finfo(float).eps:
        _logger.warning("加权信息矩阵病态，拟合视为未收敛")
        converged = False

    if not np.all(np.isfinite(beta)):
        converged = False
    elif family is not Family.GAUSSIAN and np.any(np.abs(beta) > divergence_bound):
        _logger.warning("系数超出发散界 %.0f，拟合视为未收敛", divergence_bound)
        converged = False
    if not converged:
        _logger.warning("GLM 在 %d 次迭代内未收敛", iteration)

    dispersion = 1.0
    if family is Family.GAUSSIAN:
        dispersion = float(np.sum(wu * (yu - mu) ** 2) / max(n_used - p, 1))

    if sandwich:
        scores = (wu * (yu - mu))[:, None] * Xu
        covariance = information_inverse @ (scores.T @ scores) @ information_inverse
        kind = CovarianceKind.SANDWICH
    else:
        covariance = dispersion * information_inverse
        kind = CovarianceKind.MODEL_BASED
    covariance = (covariance + covariance.T) / 2.0

    return GlmFit(
        family=family,
        coefficients=beta,
        covariance=covariance,
        converged=converged,
        deviance=float(result.deviance),
        n_used=n_used,
        weight_sum=weight_sum,
        covariance_kind=kind,
        iterations=iteration,
        information_inverse=information_inverse,
        dispersion=dispersion,
        labels=tuple(labels),
        formula=tuple(formula),
    )


def fit_formula(d: Dataset, formula: Sequence[str], response: str, w=None,
                family: Family = Family.BINOMIAL, **kwargs) -> GlmFit:
    """按公式构造设计矩阵并拟合，公式记录在结果上以便反事实预测"""
    X = design_matrix(d, formula)
    labels = design_labels(d, formula)
    if d.mask_count(response):
        raise SchemaError(f"响应列存在缺失: {response}")
    return fit_glm(X, d.column(response), w, family, labels=labels, formula=formula, **kwargs)


def predict_mean(fit: GlmFit, X, offset=None) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != fit.p:
        raise DimensionError(f"设计矩阵列数 {X.shape[1]} 与模型系数个数 {fit.p} 不一致")
    eta = X @ fit.coefficients
    if offset is not None:
        eta = eta + np.asarray(offset, dtype=float)
    return fit.family.inverse_link(eta)


def coefficient_eif(fit: GlmFit, X, y, w=None) -> np.ndarray:
    """每个观测对系数的影响值：n·(X'WVX)^{-1}·w_i·x_i·(y_i − m_i)"""
    if fit.information_inverse is None or not np.all(np.isfinite(fit.coefficients)):
        raise UsageError("模型信息矩阵奇异，无法计算影响函数")
    X, y, w, _ = _validate_inputs(X, y, w, None)
    if X.shape[1] != fit.p:
        raise DimensionError(f"设计矩阵列数 {X.shape[1]} 与模型系数个数 {fit.p} 不一致")
    residual = y - predict_mean(fit, X)
    scores = (w * residual)[:, None] * X
    return X.shape[0] * scores @ fit.information_inverse.T


def contrast_estimands(mu1: float, mu0: float, cov2: np.ndarray) -> MarginalResult:
    """由 (mu1, mu0) 及其协方差计算边际估计量和 delta 方法标准误"""
    cov2 = np.asarray(cov2, dtype=float)

    def se(gradient) -> float:
        g = np.asarray(gradient, dtype=float)
        return float(np.sqrt(max(g @ cov2 @ g, 0.0)))

    values = {"mRD": mu1 - mu0}
    ses = {"mRD": se((1.0, -1.0))}
    undefined = set()
    if 0.0 < mu1 < 1.0 and 0.0 < mu0 < 1.0:
        log_rr = np.log(mu1) - np.log(mu0)
        log_or = logit(mu1) - logit(mu0)
        values.update(mlogRR=log_rr, mRR=float(np.exp(log_rr)), mlogOR=log_or, mOR=float(np.exp(log_or)))
        ses["mlogRR"] = se((1.0 / mu1, -1.0 / mu0))
        ses["mlogOR"] = se((1.0 / (mu1 * (1.0 - mu1)), -1.0 / (mu0 * (1.0 - mu0))))
        ses["mRR"] = values["mRR"] * ses["mlogRR"]
        ses["mOR"] = values["mOR"] * ses["mlogOR"]
    else:
        _logger.warning("边际概率处于边界 (mu1=%s, mu0=%s)，比值类估计量无定义", mu1, mu0)
        for name in ("mlogRR", "mRR", "mlogOR", "mOR"):
            values[name] = np.nan
            ses[name] = np.nan
            undefined.add(name)
    return MarginalResult(
        mu1=float(mu1), mu0=float(mu0),
        estimand_values={k: float(v) for k, v in values.items()},
        ses=ses, undefined=frozenset(undefined), covariance=cov2,
    )


def counterfactual_designs(fit: GlmFit, d: Dataset, treat_col: str) -> tuple[np.ndarray, np.ndarray]:
    """把处理列分别设为 1 和 0 后重建设计矩阵"""
    if not fit.formula:
        raise UsageError("边际化需要由 fit_formula 拟合的模型")
    ones = np.ones(d.n_rows)
    X1 = design_matrix(d.replace_values(treat_col, ones), fit.formula)
    X0 = design_matrix(d.replace_values(treat_col, 0.0 * ones), fit.formula)
    return X1, X0


def marginalize(fit: GlmFit, d: Dataset, w, treat_col: str) -> MarginalResult:
    """在经验分布上平均反事实预测，权重视为固定，通过 β 的协方差做 delta 方法"""
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.shape[0] != d.n_rows:
        raise DimensionError(f"权重长度 {w.shape[0]} 与数据行数 {d.n_rows} 不一致")
    X1, X0 = counterfactual_designs(fit, d, treat_col)
    normalized = w / w.sum()
    m1 = predict_mean(fit, X1)
    m0 = predict_mean(fit, X0)
    mu1 = float(normalized @ m1)
    mu0 = float(normalized @ m0)
    # dμ_a/dβ = Σ w_i m'(η_i) x_i，典则连接下 m' 即方差函数
    gradient = np.vstack([
        (normalized * fit.family.variance(m1)) @ X1,
        (normalized * fit.family.variance(m0)) @ X0,
    ])
    cov2 = gradient @ fit.covariance @ gradient.T
    return contrast_estimands(mu1, mu0, cov2)
