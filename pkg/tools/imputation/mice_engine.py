import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import statsmodels.api as sm
from joblib import Parallel, delayed
from statsmodels.genmod.generalized_linear_model import GLM
from statsmodels.imputation.mice import MICEData
from statsmodels.regression.linear_model import OLS
from statsmodels.tools.sm_exceptions import PerfectSeparationError

from tools.common.errors import ConfigError, ImputationError, UsageError
from tools.common.rng import stream
from tools.glm.glm_engine import DIVERGENCE_BOUND
from tools.tabular.dataset import ColumnKind, Dataset

_logger = logging.getLogger(__name__)

MAX_RESTARTS = 3


@dataclass(frozen=True)
class MiceConfig:
    """链式方程多重填补配置"""
    m: int = 20
    max_iter: int = 25
    pmm_donors: int = 5
    visit_order: tuple[str, ...] = ()
    seed: int = 0
    exclude: tuple[str, ...] = ("R",)
    n_jobs: int = 1

    def __post_init__(self):
        if self.m < 2:
            raise ConfigError(f"填补次数至少为 2: {self.m}")
        if self.max_iter < 1:
            raise ConfigError(f"迭代次数至少为 1: {self.max_iter}")
        if self.pmm_donors < 1:
            raise ConfigError(f"PMM 供体数至少为 1: {self.pmm_donors}")
        object.__setattr__(self, "visit_order", tuple(self.visit_order))
        object.__setattr__(self, "exclude", tuple(self.exclude))


@dataclass(frozen=True)
class PooledEstimate:
    point: float
    total_variance: float
    within: float
    between: float
    df: float
    m: int

    @property
    def se(self) -> float:
        return float(np.sqrt(self.total_variance))


class _SweepFailed(Exception):
    pass


def _pmm(pred_obs, pred_miss, values_obs, donors, rng):
    """预测均值匹配：在预测值最近的 donors 个观测中随机取一个供体"""
    k = min(donors, len(values_obs))
    order = np.argsort(pred_obs, kind="stable")
    pred_sorted = pred_obs[order]
    values_sorted = values_obs[order]

    ix = np.searchsorted(pred_sorted, pred_miss)
    window = ix[:, None] + np.arange(-k, k)[None, :]
    outside = (window < 0) | (window > len(values_sorted) - 1)
    window = np.clip(window, 0, len(values_sorted) - 1)
    distance = np.abs(pred_miss[:, None] - pred_sorted[window])
    distance[outside] = np.inf

    # 同距离时随机排序
    tiebreak = rng.random(distance.shape)
    nearest = np.lexsort((tiebreak, distance), axis=-1)[:, :k]
    pick = rng.integers(0, k, size=len(pred_miss))
    rows = np.arange(len(pred_miss))
    return values_sorted[window[rows, nearest[rows, pick]]]


def _predictor_term(d: Dataset, name: str) -> str:
    term = f"Q('{name}')"
    return f"C({term})" if d.spec(name).kind is ColumnKind.CATEGORICAL else term


class _ChainedData(MICEData):
    """单次填补的链式方程

    条件模型、公式与循环由 statsmodels MICEData 管理；初值、参数抽样与 PMM 改用私有随机流。
    连续与分类列用贝叶斯线性模型（σ² 取缩放卡方），二值列用逻辑回归的正态近似。
    """

    def __init__(self, d: Dataset, config: MiceConfig, targets: Sequence[str], rng: np.random.Generator):
        self.rng = rng
        self.fitted = {}
        frame = pd.DataFrame(np.where(d.mask, np.nan, d.values), columns=pd.Index(d.names, dtype=object))
        super().__init__(frame, perturbation_method="gaussian", k_pmm=config.pmm_donors)
        for name in targets:
            predictors = [other for other in d.names if other != name and other not in config.exclude]
            if d.spec(name).kind is ColumnKind.BINARY:
                model_class, init_kwds = GLM, {"family": sm.families.Binomial()}
            else:
                # 分类列按有序水平编号做线性模型，PMM 保证填补值为已观测水平
                model_class, init_kwds = OLS, None
            self.set_imputer(name, formula=" + ".join(_predictor_term(d, other) for other in predictors),
                             model_class=model_class, init_kwds=init_kwds, k_pmm=config.pmm_donors)
        self._cycle_order = list(targets)

    def _initial_imputation(self):
        for name in self.data.columns:
            rows = self.ix_miss[name]
            if len(rows):
                observed = self.data[name].to_numpy()[self.ix_obs[name]]
                self._store_changes(name, self.rng.choice(observed, size=len(rows), replace=True))

    def _perturb_gaussian(self, vname):
        endog, exog, init_kwds, fit_kwds = self.get_fitting_data(vname)
        model = self.model_class[vname](endog, exog, **init_kwds)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            try:
                result = model.fit(**fit_kwds)
            except (PerfectSeparationError, np.linalg.LinAlgError, ValueError) as e:
                raise _SweepFailed(f"填补模型拟合失败: {e}")
        params = np.asarray(result.params, dtype=float)
        if isinstance(model, GLM):
            if not result.converged or np.any(np.abs(params) > DIVERGENCE_BOUND):
                raise _SweepFailed("填补逻辑回归未收敛")
            covariance = result.cov_params()
        else:
            if result.df_resid < 1:
                raise _SweepFailed("观测数不足以拟合填补模型")
            sigma2 = float(result.ssr) / self.rng.chisquare(result.df_resid)
            covariance = sigma2 * result.normalized_cov_params
        try:
            draw = self.rng.multivariate_normal(params, np.asarray(covariance), method="cholesky")
        except (np.linalg.LinAlgError, ValueError):
            raise _SweepFailed("参数协方差非正定")
        self.models[vname] = model
        self.results[vname] = result
        self.fitted[vname] = params
        self.params[vname] = draw

    def impute_pmm(self, vname):
        """观测行用拟合参数预测、缺失行用抽样参数预测，再按 PMM 取供体"""
        endog_obs, exog_obs, exog_miss, _, _ = self.get_split_data(vname)
        model = self.models[vname]
        pred_obs = np.asarray(model.predict(self.fitted[vname], exog_obs), dtype=float)
        pred_miss = np.asarray(model.predict(self.params[vname], exog_miss), dtype=float)
        values = np.asarray(endog_obs, dtype=float).reshape(-1)
        self._store_changes(vname, _pmm(pred_obs, pred_miss, values, self.k_pmm, self.rng))

    def run(self, index: int, max_iter: int) -> np.ndarray:
        for iteration in range(max_iter):
            snapshot = self.data.copy()
            for attempt in range(MAX_RESTARTS + 1):
                try:
                    self.update_all(1)
                    break
                except _SweepFailed as e:
                    self.data = snapshot.copy()
                    if attempt == MAX_RESTARTS:
                        raise ImputationError(f"第{index}次填补在第{iteration + 1}轮失败: {e}")
                    _logger.warning("第%d次填补第%d轮重启（%s）", index, iteration + 1, e)
        return self.data.to_numpy(dtype=float)


def _impute_once(d: Dataset, config: MiceConfig, targets: Sequence[str], index: int) -> Dataset:
    rng = stream(config.seed, index)
    completed = _ChainedData(d, config, targets, rng).run(index, config.max_iter)
    return Dataset(d.columns, completed, np.zeros_like(d.mask))


def mice_impute(d: Dataset, config: Optional[MiceConfig] = None) -> list[Dataset]:
    """链式方程多重填补

    Args:
        d: 含缺失的数据表
        config: 填补配置，每次填补使用由 (seed, 填补序号) 派生的独立随机流

    Returns:
        m 个填补完成的数据表，观测值保持不变
    """
    config = config or MiceConfig()
    incomplete = [name for name in d.names if d.mask_count(name)]
    if not incomplete:
        return [d] * config.m
    for name in incomplete:
        if d.mask_count(name) == d.n_rows:
            raise ImputationError(f"列全部缺失，无法填补: {name}")
    if all(d.mask_count(name) for name in d.names if name not in config.exclude):
        raise ImputationError("至少需要一个完全观测的列")
    unknown = [name for name in config.visit_order if name not in d]
    if unknown:
        raise UsageError(f"访问顺序中含有未知列: {unknown}")

    targets = [name for name in config.visit_order if name in incomplete]
    targets += [name for name in incomplete if name not in targets]
    _logger.info("MICE: %d 次填补，%d 轮迭代，填补列 %s", config.m, config.max_iter, targets)

    if config.n_jobs == 1:
        return [_impute_once(d, config, targets, index) for index in range(config.m)]
    return Parallel(n_jobs=config.n_jobs)(
        delayed(_impute_once)(d, config, targets, index) for index in range(config.m)
    )


def rubin_pool(points, variances) -> PooledEstimate:
    """Rubin 规则合并多重填补结果"""
    points = np.asarray(points, dtype=float).reshape(-1)
    variances = np.asarray(variances, dtype=float).reshape(-1)
    m = points.shape[0]
    if m < 2:
        raise UsageError(f"合并至少需要 2 个填补结果: {m}")
    if variances.shape[0] != m:
        raise UsageError("点估计与方差个数不一致")
    if np.any(variances < 0):
        raise UsageError("方差不能为负")
    # 排序后求和，结果与输入顺序无关；取值全部相同时原样返回
    point = float(points[0]) if np.ptp(points) == 0 else float(np.mean(np.sort(points)))
    within = float(variances[0]) if np.ptp(variances) == 0 else float(np.mean(np.sort(variances)))
    between = float(np.sum(np.sort((points - point) ** 2)) / (m - 1))
    inflation = 1.0 + 1.0 / m
    total = within + inflation * between
    if between == 0.0:
        df = float("inf")
    else:
        df = (m - 1) * (1.0 + within / (inflation * between)) ** 2
    return PooledEstimate(point=point, total_variance=total, within=within, between=between, df=df, m=m)
